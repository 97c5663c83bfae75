//! Classical decoherence models for baths far beyond exact reach.
//!
//! Nearby ²⁹Si pairs are telegraph processes: an antiparallel pair flip-flops
//! at a Poisson rate and toggles the probed spin's frequency between ±δ, with
//! δ half the difference of the two members' ZZ couplings to the probe. The
//! unenumerable distant bath is a Gaussian Ornstein–Uhlenbeck frequency
//! noise whose dephasing is evaluated exactly for the sequence's filter.
//!
//! Delays in this module are total evolution times in seconds.

use std::f64::consts::TAU;
use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{self, EnvelopeModel};
use crate::register::{ChargeState, NuclearSite, SpinRef, SpinRegister};
use crate::sequences;
use crate::spin::dipolar_from_geometry;
use crate::units;

/// Rate law `R = R₀·b²·w/(Δ² + w²)` with b, Δ and w in MHz and R in MHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateLaw {
    pub r0: f64,
    pub linewidth_mhz: f64,
}

impl RateLaw {
    pub fn rate_mhz(&self, coupling_mhz: f64, detuning_mhz: f64) -> f64 {
        let w = self.linewidth_mhz;
        self.r0 * coupling_mhz * coupling_mhz * w / (detuning_mhz * detuning_mhz + w * w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipFlopPair {
    pub members: (usize, usize),
    pub coupling_mhz: f64,
    pub detuning_mhz: f64,
    /// ZZ coupling of each member to the probed spin.
    pub zz_to_probe_mhz: (f64, f64),
    pub rate_mhz: f64,
    /// Probability that the pair is antiparallel (able to flip-flop).
    pub active_probability: f64,
}

impl FlipFlopPair {
    /// Telegraph amplitude δ of the probed spin's frequency, MHz.
    pub fn shift_mhz(&self) -> f64 {
        0.5 * (self.zz_to_probe_mhz.0 - self.zz_to_probe_mhz.1)
    }

    pub fn rate_per_s(&self) -> f64 {
        self.rate_mhz * units::US_PER_S
    }

    /// A single always-active pair with telegraph amplitude `shift_mhz`.
    pub fn telegraph(shift_mhz: f64, rate_per_s: f64) -> Self {
        Self {
            members: (0, 0),
            coupling_mhz: 0.0,
            detuning_mhz: 0.0,
            zz_to_probe_mhz: (shift_mhz, -shift_mhz),
            rate_mhz: rate_per_s / units::US_PER_S,
            active_probability: 1.0,
        }
    }
}

/// Gaussian frequency noise of rms `sigma_hz` and correlation time
/// `correlation_s` on the probed spin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarChannel {
    pub sigma_hz: f64,
    pub correlation_s: f64,
}

impl FarChannel {
    pub const NONE: FarChannel = FarChannel {
        sigma_hz: 0.0,
        correlation_s: 1.0,
    };

    /// Channel whose Hahn echo decays to 1/e at total time `t_far_s`.
    pub fn from_hahn_time(t_far_s: f64, correlation_s: f64) -> Self {
        if !(t_far_s.is_finite() && t_far_s > 0.0) {
            return Self::NONE;
        }
        let unit = FarChannel {
            sigma_hz: 1.0,
            correlation_s,
        };
        let var = unit.phase_variance(&[0.5], t_far_s);
        FarChannel {
            sigma_hz: (2.0 / var).sqrt(),
            correlation_s,
        }
    }

    /// Hahn 1/e time of this channel, s.
    pub fn hahn_time_s(&self) -> f64 {
        if self.sigma_hz == 0.0 {
            return f64::INFINITY;
        }
        let target = 1.0;
        let (mut lo, mut hi) = (1e-9_f64, 1e6_f64);
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if self.chi(&[0.5], mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo * hi).sqrt()
    }

    /// ⟨φ²⟩ for the sign function switching at `pulse_fracs·t`.
    pub fn phase_variance(&self, pulse_fracs: &[f64], t_s: f64) -> f64 {
        if self.sigma_hz == 0.0 || t_s <= 0.0 {
            return 0.0;
        }
        let tc = self.correlation_s;
        let mut edges = vec![0.0];
        edges.extend(pulse_fracs.iter().map(|f| f * t_s));
        edges.push(t_s);
        let segs: Vec<(f64, f64, f64)> = edges
            .windows(2)
            .enumerate()
            .map(|(k, w)| (w[0], w[1], if k % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
        let mut total = 0.0;
        for (i, &(ai, bi, si)) in segs.iter().enumerate() {
            let l = bi - ai;
            total += 2.0 * tc * (l - tc * (1.0 - (-l / tc).exp()));
            for &(aj, bj, sj) in &segs[i + 1..] {
                let cross = tc
                    * tc
                    * ((-(aj - bi) / tc).exp() - (-(aj - ai) / tc).exp() - (-(bj - bi) / tc).exp()
                        + (-(bj - ai) / tc).exp());
                total += 2.0 * si * sj * cross;
            }
        }
        (TAU * self.sigma_hz).powi(2) * total
    }

    fn chi(&self, pulse_fracs: &[f64], t_s: f64) -> f64 {
        0.5 * self.phase_variance(pulse_fracs, t_s)
    }

    pub fn amplitude(&self, pulse_fracs: &[f64], t_s: f64) -> f64 {
        (-self.chi(pulse_fracs, t_s)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BathModel {
    pub pairs: Vec<FlipFlopPair>,
    pub far: FarChannel,
    pub seed: u64,
    pub trajectories: usize,
}

pub const DEFAULT_TRAJECTORIES: usize = 2000;

impl BathModel {
    pub fn new(pairs: Vec<FlipFlopPair>, far: FarChannel, seed: u64) -> Self {
        Self {
            pairs,
            far,
            seed,
            trajectories: DEFAULT_TRAJECTORIES,
        }
    }

    pub fn with_trajectories(mut self, n: usize) -> Self {
        self.trajectories = n;
        self
    }

    /// Aggregate distant-bath rate Γ_far = 1/T_far, 1/s.
    pub fn far_rate_per_s(&self) -> f64 {
        1.0 / self.far.hahn_time_s()
    }
}

fn position_nm(p: [i32; 3], a_nm: f64) -> [f64; 3] {
    p.map(|c| f64::from(c) * a_nm / 4.0)
}

/// Secular ZZ coupling between two spins at positions given in nm, MHz.
fn coupling_nm(ga: f64, gb: f64, pa: [f64; 3], pb: [f64; 3]) -> f64 {
    let d = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    if r2 == 0.0 {
        return 0.0;
    }
    dipolar_from_geometry(ga, gb, r2.sqrt() * 1e-9, d[2] * d[2] / r2)
}

/// Enumerate all ²⁹Si pairs (probe excluded) with |b| ≥ `b_cutoff_mhz`.
/// Pairs in the same symmetry orbit, and every pair of an ionized donor,
/// have zero detuning.
pub fn build_pair_bath(register: &SpinRegister, probe: SpinRef, b_cutoff_mhz: f64, law: &RateLaw) -> Result<Vec<FlipFlopPair>> {
    let a = register.lattice_constant_nm;
    let (probe_pos, probe_gamma) = match probe {
        SpinRef::Donor => {
            let d = register.donor.ok_or_else(|| Error::UnknownSpin(probe.to_string()))?;
            ([0.0; 3], d.gyromagnetic_mhz_per_t)
        }
        SpinRef::Site(i) => {
            let s = register.sites.get(i).ok_or_else(|| Error::UnknownSpin(probe.to_string()))?;
            (position_nm(s.position, a), s.gyromagnetic_mhz_per_t)
        }
        SpinRef::Electron => return Err(Error::param("probe", "must be a nuclear spin")),
    };
    let ionized = register.charge_state == ChargeState::Ionized;
    let bath: Vec<(usize, &NuclearSite)> = register
        .sites
        .iter()
        .enumerate()
        .filter(|(i, _)| probe != SpinRef::Site(*i))
        .collect();
    let zz: Vec<f64> = bath
        .iter()
        .map(|(_, s)| coupling_nm(probe_gamma, s.gyromagnetic_mhz_per_t, probe_pos, position_nm(s.position, a)))
        .collect();
    let mut pairs = Vec::new();
    for x in 0..bath.len() {
        for y in (x + 1)..bath.len() {
            let (i, si) = bath[x];
            let (j, sj) = bath[y];
            if si.position == sj.position {
                return Err(Error::CoincidentSites(i, j));
            }
            let b = coupling_nm(
                si.gyromagnetic_mhz_per_t,
                sj.gyromagnetic_mhz_per_t,
                position_nm(si.position, a),
                position_nm(sj.position, a),
            );
            if b.abs() < b_cutoff_mhz {
                continue;
            }
            let detuning = if ionized || si.orbit_id == sj.orbit_id && si.hyperfine_zz_mhz == sj.hyperfine_zz_mhz {
                0.0
            } else {
                (si.hyperfine_zz_mhz - sj.hyperfine_zz_mhz).abs()
            };
            pairs.push(FlipFlopPair {
                members: (i, j),
                coupling_mhz: b,
                detuning_mhz: detuning,
                zz_to_probe_mhz: (zz[x], zz[y]),
                rate_mhz: law.rate_mhz(b, detuning),
                active_probability: 0.5,
            });
        }
    }
    Ok(pairs)
}

/// Refocusing family of a decay measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DdFamily {
    Hahn,
    Cpmg(usize),
    Xy4,
    PiWahuha,
}

impl DdFamily {
    pub fn label(&self) -> String {
        match self {
            DdFamily::Hahn => "hahn".into(),
            DdFamily::Cpmg(n) => format!("cpmg-{n}"),
            DdFamily::Xy4 => "xy-4".into(),
            DdFamily::PiWahuha => "pi-wahuha".into(),
        }
    }

    pub fn sequence(&self, tau_us: f64) -> Result<sequences::Sequence> {
        match self {
            DdFamily::Hahn => sequences::cpmg(1, tau_us),
            DdFamily::Cpmg(n) => sequences::cpmg(*n, tau_us),
            DdFamily::Xy4 => sequences::xy4(tau_us),
            DdFamily::PiWahuha => sequences::pi_wahuha(tau_us),
        }
    }

    /// π-pulse times as fractions of the total evolution time. Only π pulses
    /// toggle the sign of a ZZ phase; π/2 pulses are not modelled here.
    pub fn pulse_fractions(&self) -> Result<Vec<f64>> {
        let seq = self.sequence(1.0)?;
        let total = seq.duration_us();
        Ok(seq.pi_times().into_iter().map(|t| t / total).collect())
    }

    pub fn pi_count(&self) -> usize {
        self.pulse_fractions().map(|f| f.len()).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StretchedFit {
    pub t2_s: f64,
    pub stretch: f64,
    pub t2_err_s: f64,
    pub stretch_err: f64,
    /// Covariance of (ln T₂, n).
    pub covariance: [[f64; 2]; 2],
    pub residual_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub model: String,
    pub delays_s: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub stderr: Vec<f64>,
    pub zero_delay_amplitude: f64,
    #[serde(default)]
    pub fit: Option<StretchedFit>,
}

impl DecayCurve {
    pub fn from_samples(model: &str, delays_s: Vec<f64>, amplitudes: Vec<f64>) -> Result<Self> {
        if delays_s.len() != amplitudes.len() {
            return Err(Error::param("amplitudes", "length differs from delays"));
        }
        if delays_s.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("delays_s", "must be strictly increasing"));
        }
        let n = delays_s.len();
        Ok(Self {
            model: model.to_string(),
            delays_s,
            amplitudes,
            stderr: vec![0.0; n],
            zero_delay_amplitude: 1.0,
            fit: None,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["delay_s", "amplitude", "stderr"])?;
        for i in 0..self.delays_s.len() {
            w.write_record([
                self.delays_s[i].to_string(),
                self.amplitudes[i].to_string(),
                self.stderr[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Log-uniform delay grid.
pub fn log_delays(min_s: f64, max_s: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![min_s];
    }
    let (a, b) = (min_s.ln(), max_s.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

/// ∫₀ᵀ s(t)·x(t) dt with s switching sign at `pulses` and x at `flips`, both
/// starting at +1 and sorted.
fn signed_overlap(pulses: &[f64], flips: &[f64], t_end: f64) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut t = 0.0;
    let mut sign = 1.0;
    let mut acc = 0.0;
    loop {
        let next_p = pulses.get(i).copied().unwrap_or(f64::INFINITY);
        let next_f = flips.get(j).copied().unwrap_or(f64::INFINITY);
        let next = next_p.min(next_f).min(t_end);
        acc += sign * (next - t);
        t = next;
        if t >= t_end {
            return acc;
        }
        if next_p <= next_f {
            i += 1;
        } else {
            j += 1;
        }
        sign = -sign;
    }
}

/// Expected flips over the longest delay above which a pair enters
/// [`simulate_decay`] through its exact average rather than by sampling.
pub const FAST_FLIP_LIMIT: f64 = 1000.0;

/// Monte Carlo echo decay of the probed spin under the pair bath plus the
/// far channel. Trajectory `k` uses ChaCha8 stream `k` of the bath seed, and
/// all delays of one trajectory share its flip history.
pub fn simulate_decay(bath: &BathModel, family: DdFamily, delays_s: &[f64]) -> Result<DecayCurve> {
    if bath.trajectories == 0 {
        return Err(Error::param("trajectories", "at least one"));
    }
    if delays_s.windows(2).any(|w| !(w[1] > w[0])) || delays_s.iter().any(|&d| !(d >= 0.0)) {
        return Err(Error::param("delays_s", "must be non-negative and strictly increasing"));
    }
    let fracs = family.pulse_fractions()?;
    let t_max = delays_s.last().copied().unwrap_or(0.0);
    let pulses: Vec<Vec<f64>> = delays_s.iter().map(|&t| fracs.iter().map(|f| f * t).collect()).collect();

    // Pairs that can change the phase at all. Pairs expected to flip more
    // than FAST_FLIP_LIMIT times are averaged exactly instead of sampled.
    let live = bath
        .pairs
        .iter()
        .filter(|p| p.shift_mhz() != 0.0 && p.rate_mhz > 0.0 && p.active_probability > 0.0);
    let (fast, slow): (Vec<&FlipFlopPair>, Vec<&FlipFlopPair>) = live.partition(|p| p.rate_per_s() * t_max > FAST_FLIP_LIMIT);
    let pairs: Vec<(f64, f64, f64)> = slow
        .iter()
        .map(|p| (TAU * p.shift_mhz() * units::US_PER_S, p.rate_per_s(), p.active_probability))
        .collect();
    let fast_factor: Vec<f64> = delays_s
        .iter()
        .map(|&t| {
            fast.iter()
                .map(|p| telegraph_amplitude_exact(p.shift_mhz(), p.rate_per_s(), p.active_probability, &fracs, t))
                .product()
        })
        .collect();

    let per_traj: Vec<Vec<f64>> = (0..bath.trajectories)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(bath.seed);
            rng.set_stream(k as u64);
            let mut phase = vec![0.0; delays_s.len()];
            let mut flips = Vec::new();
            for &(omega, rate, active) in &pairs {
                let on = rng.random::<f64>() < active;
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                if !on {
                    continue;
                }
                flips.clear();
                let exp = Exp::new(rate).expect("positive rate");
                let mut t = exp.sample(&mut rng);
                while t < t_max {
                    flips.push(t);
                    t += exp.sample(&mut rng);
                }
                if flips.is_empty() {
                    continue;
                }
                for (d, &td) in delays_s.iter().enumerate() {
                    if flips[0] >= td {
                        continue;
                    }
                    phase[d] += sign * omega * signed_overlap(&pulses[d], &flips, td);
                }
            }
            phase.into_iter().map(f64::cos).collect()
        })
        .collect();

    let n = bath.trajectories as f64;
    let mut amplitudes = Vec::with_capacity(delays_s.len());
    let mut stderr = Vec::with_capacity(delays_s.len());
    for (d, &t) in delays_s.iter().enumerate() {
        let mean = per_traj.iter().map(|v| v[d]).sum::<f64>() / n;
        let var = if bath.trajectories > 1 {
            per_traj.iter().map(|v| (v[d] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let far = bath.far.amplitude(&fracs, t) * fast_factor[d];
        amplitudes.push(mean * far);
        stderr.push((var / n).sqrt() * far);
    }
    Ok(DecayCurve {
        model: format!("pair-telegraph+far/{}", family.label()),
        delays_s: delays_s.to_vec(),
        amplitudes,
        stderr,
        zero_delay_amplitude: 1.0,
        fit: None,
    })
}

/// Ensemble-averaged decay without sampling. Pairs are independent, so the
/// average echo is the product of single-pair amplitudes times the far
/// channel. This is the limit of [`simulate_decay`] for infinitely many
/// trajectories.
pub fn exact_decay(bath: &BathModel, family: DdFamily, delays_s: &[f64]) -> Result<DecayCurve> {
    let fracs = family.pulse_fractions()?;
    let amplitudes = delays_s
        .iter()
        .map(|&t| {
            let pairs: f64 = bath
                .pairs
                .iter()
                .map(|p| telegraph_amplitude_exact(p.shift_mhz(), p.rate_per_s(), p.active_probability, &fracs, t))
                .product();
            pairs * bath.far.amplitude(&fracs, t)
        })
        .collect();
    DecayCurve::from_samples(&format!("pair-exact+far/{}", family.label()), delays_s.to_vec(), amplitudes)
}

/// Exact echo amplitude of one telegraph pair (±δ, flip rate R, activity p)
/// for π pulses at `pulse_fracs·t`, from the two-state master equation.
pub fn telegraph_amplitude_exact(shift_mhz: f64, rate_per_s: f64, active: f64, pulse_fracs: &[f64], t_s: f64) -> f64 {
    let omega = TAU * shift_mhz * units::US_PER_S;
    let r = Complex64::new(rate_per_s, 0.0);
    let mut edges = vec![0.0];
    edges.extend(pulse_fracs.iter().map(|f| f * t_s));
    edges.push(t_s);
    // v = (weight in +δ, weight in −δ), each carrying its phase factor.
    let mut v = [Complex64::new(0.5, 0.0), Complex64::new(0.5, 0.0)];
    for (k, w) in edges.windows(2).enumerate() {
        let dt = w[1] - w[0];
        let s = if k % 2 == 0 { 1.0 } else { -1.0 };
        let a = Complex64::new(0.0, omega * s);
        // exp(M dt), M = −R·I + B, B = [[a, R], [R, −a]], B² = (a² + R²)·I.
        // Damping folded into the exponentials so long times do not overflow.
        let kappa = (a * a + r * r).sqrt();
        let ep = ((kappa - r) * dt).exp();
        let em = ((-kappa - r) * dt).exp();
        let c = 0.5 * (ep + em);
        let sh = if kappa.norm() * dt < 1e-8 {
            Complex64::new(dt * (-rate_per_s * dt).exp(), 0.0)
        } else {
            0.5 * (ep - em) / kappa
        };
        let m00 = c + sh * a;
        let m01 = sh * r;
        let m11 = c - sh * a;
        v = [m00 * v[0] + m01 * v[1], m01 * v[0] + m11 * v[1]];
    }
    let coherent = (v[0] + v[1]).re;
    active * coherent + (1.0 - active)
}

/// Least-squares fit of `a·exp(−(τ/T₂)ⁿ)` with `a` fixed to the zero-delay
/// amplitude and the floor fixed to zero.
pub fn fit_stretched(curve: &DecayCurve) -> Result<StretchedFit> {
    let a = curve.zero_delay_amplitude;
    let pts: Vec<(f64, f64)> = curve
        .delays_s
        .iter()
        .zip(&curve.amplitudes)
        .filter(|(t, _)| **t > 0.0)
        .map(|(&t, &y)| (t, y))
        .collect();
    let fail = |reason: &str, rms: f64| Error::Fit {
        reason: reason.to_string(),
        residual_rms: rms,
    };
    if pts.len() < 5 {
        return Err(fail("fewer than 5 points", f64::NAN));
    }
    let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.1), h.max(p.1)));
    if hi - lo < 0.5 * a.abs() {
        return Err(fail("amplitudes span less than half the dynamic range (no decay)", hi - lo));
    }

    // Initial guess from the linearisation ln(−ln(y/a)) = n·ln τ − n·ln T₂.
    let lin: Vec<(f64, f64)> = pts
        .iter()
        .filter(|(_, y)| *y / a > 0.05 && *y / a < 0.95)
        .map(|&(t, y)| (t.ln(), (-(y / a).ln()).ln()))
        .collect();
    let (mut ln_t, mut n) = if lin.len() >= 2 {
        let mx = lin.iter().map(|p| p.0).sum::<f64>() / lin.len() as f64;
        let my = lin.iter().map(|p| p.1).sum::<f64>() / lin.len() as f64;
        let sxx: f64 = lin.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = lin.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 2.0 };
        let slope = slope.clamp(0.3, 5.0);
        (mx - my / slope, slope)
    } else {
        let t_mid = pts.iter().find(|p| p.1 < a / std::f64::consts::E).map(|p| p.0).unwrap_or(pts[pts.len() / 2].0);
        (t_mid.ln(), 2.0)
    };

    let residuals = |ln_t: f64, n: f64| -> (f64, Vec<f64>, Vec<[f64; 2]>) {
        let mut rss = 0.0;
        let mut res = Vec::with_capacity(pts.len());
        let mut jac = Vec::with_capacity(pts.len());
        for &(t, y) in &pts {
            let x = t.ln() - ln_t;
            let u = (n * x).exp();
            let f = a * (-u).exp();
            let r = y - f;
            rss += r * r;
            res.push(r);
            // ∂f/∂lnT, ∂f/∂n
            jac.push([f * u * n, -f * u * x]);
        }
        (rss, res, jac)
    };

    let mut lambda = 1e-3;
    let (mut rss, mut res, mut jac) = residuals(ln_t, n);
    let mut converged = false;
    for _ in 0..500 {
        let mut jtj = [[0.0; 2]; 2];
        let mut jtr = [0.0; 2];
        for (r, j) in res.iter().zip(&jac) {
            for p in 0..2 {
                jtr[p] += j[p] * r;
                for q in 0..2 {
                    jtj[p][q] += j[p] * j[q];
                }
            }
        }
        let mut step = None;
        for _ in 0..60 {
            let m = [
                [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
            ];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let d0 = (m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
            let d1 = (m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
            let (nt, nn) = (ln_t + d0, (n + d1).max(0.05));
            let (nrss, nres, njac) = residuals(nt, nn);
            if nrss <= rss {
                lambda = (lambda * 0.3).max(1e-12);
                step = Some((nt, nn, nrss, nres, njac, d0.abs() + d1.abs()));
                break;
            }
            lambda *= 10.0;
        }
        let Some((nt, nn, nrss, nres, njac, size)) = step else {
            converged = true;
            break;
        };
        let improvement = rss - nrss;
        ln_t = nt;
        n = nn;
        rss = nrss;
        res = nres;
        jac = njac;
        if size < 1e-12 || improvement <= 1e-15 * rss.max(1e-300) {
            converged = true;
            break;
        }
    }
    let m = pts.len() as f64;
    let rms = (rss / m).sqrt();
    if !converged || !ln_t.is_finite() || !n.is_finite() {
        return Err(fail("did not converge", rms));
    }

    let mut jtj = [[0.0; 2]; 2];
    for j in &jac {
        for p in 0..2 {
            for q in 0..2 {
                jtj[p][q] += j[p] * j[q];
            }
        }
    }
    let det = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[1][0];
    let s2 = if pts.len() > 2 { rss / (m - 2.0) } else { 0.0 };
    let covariance = if det.abs() > 1e-300 {
        [
            [s2 * jtj[1][1] / det, -s2 * jtj[0][1] / det],
            [-s2 * jtj[1][0] / det, s2 * jtj[0][0] / det],
        ]
    } else {
        [[f64::INFINITY; 2]; 2]
    };
    let t2 = ln_t.exp();
    Ok(StretchedFit {
        t2_s: t2,
        stretch: n,
        t2_err_s: t2 * covariance[0][0].sqrt(),
        stretch_err: covariance[1][1].sqrt(),
        covariance,
        residual_rms: rms,
    })
}

/// Calibration constants of the bath model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub rate_law: RateLaw,
    /// Hahn 1/e time of the distant bath, s.
    pub t_far_s: f64,
    pub far_correlation_s: f64,
}

/// Bulk anchor: Hahn T₂ₙ of a ²⁹Si with no hyperfine gradient, s.
pub const BULK_T2_S: f64 = 5e-3;
/// Plateau anchor at strong coupling, s.
pub const PLATEAU_T2_S: f64 = 1.3;

impl Default for Calibration {
    /// Constants frozen from [`calibrate`] with [`ScanConfig::default`].
    fn default() -> Self {
        Self {
            rate_law: RateLaw {
                r0: FROZEN_R0,
                linewidth_mhz: DEFAULT_LINEWIDTH_MHZ,
            },
            t_far_s: FROZEN_T_FAR_S,
            far_correlation_s: 0.5,
        }
    }
}

/// Homogeneous nuclear linewidth implied by the bulk anchor, 1/(2π·T₂), MHz.
pub const DEFAULT_LINEWIDTH_MHZ: f64 = 1.0 / (TAU * BULK_T2_S * units::US_PER_S);

const FROZEN_R0: f64 = 2.794068e3;
const FROZEN_T_FAR_S: f64 = 2.788618;

impl Calibration {
    pub fn far_channel(&self) -> FarChannel {
        FarChannel::from_hahn_time(self.t_far_s, self.far_correlation_s)
    }
}

/// Isotope-configuration ensemble used by the T₂ₙ(A) scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub configurations: usize,
    pub cluster_radius_nm: f64,
    pub abundance: f64,
    pub envelope: EnvelopeModel,
    pub family: DdFamily,
    pub b_cutoff_mhz: f64,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            configurations: 16,
            cluster_radius_nm: 2.5,
            abundance: units::SI29_ABUNDANCE,
            envelope: EnvelopeModel::default(),
            family: DdFamily::Hahn,
            b_cutoff_mhz: 1e-6,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub a_mhz: f64,
    pub median_t2_s: f64,
    pub q25_t2_s: f64,
    pub q75_t2_s: f64,
    pub samples_s: Vec<f64>,
}

/// Random ²⁹Si cluster around a probe whose own coupling is `a_mhz`.
///
/// The probe sits on the lattice origin and the donor at distance r_p (from
/// the envelope) along [1 1 1]; each neighbour's coupling follows the
/// envelope relative to the probe, `A·exp(−2(rᵢ − r_p)/a*)`.
pub fn probe_cluster(a_mhz: f64, cfg: &ScanConfig, configuration: usize) -> Result<SpinRegister> {
    let lat = lattice::LatticeConfig {
        radius_nm: cfg.cluster_radius_nm,
        abundance: cfg.abundance,
        seed: cfg.seed ^ (configuration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ..Default::default()
    };
    let mut sites = lattice::generate_lattice(&lat)?;
    let a_nm = lat.lattice_constant_nm;
    let env = &cfg.envelope;
    let (r_p, donor) = if a_mhz > 0.0 {
        let r = env.radius_for(a_mhz).max(0.0);
        let u = 1.0 / 3f64.sqrt();
        (r, [-r * u, -r * u, -r * u])
    } else {
        (f64::INFINITY, [0.0; 3])
    };
    for s in &mut sites {
        let a_i = if a_mhz > 0.0 {
            let p = position_nm(s.position, a_nm);
            let r = ((p[0] - donor[0]).powi(2) + (p[1] - donor[1]).powi(2) + (p[2] - donor[2]).powi(2)).sqrt();
            a_mhz * (-2.0 * (r - r_p) / env.decay_length_nm).exp()
        } else {
            0.0
        };
        s.hyperfine_zz_mhz = a_i;
        s.hyperfine_zx_mhz = env.anisotropy_fraction * a_i;
        s.orbit_id = usize::MAX;
    }
    // Probe first, then the neighbours.
    let mut all = vec![NuclearSite::si29([0, 0, 0], a_mhz, env.anisotropy_fraction * a_mhz)];
    all[0].orbit_id = usize::MAX - 1;
    all.extend(sites);
    let mut reg = SpinRegister::phosphorus_donor().with_sites(all);
    reg.lattice_constant_nm = a_nm;
    Ok(reg)
}

/// T₂ₙ of one bath: a coarse pass locates the decay, then a refined grid
/// spanning it from 0.9 down to 0.05 is fitted.
pub fn measure_t2(bath: &BathModel, family: DdFamily) -> Result<StretchedFit> {
    let grid = log_delays(1e-5, 1e3, 33);
    let c = exact_decay(bath, family, &grid)?;
    let end = c.amplitudes.iter().position(|&y| y < 0.05).ok_or_else(|| Error::Fit {
        reason: "no decay below 0.05 within 1000 s".into(),
        residual_rms: f64::NAN,
    })?;
    let start = c.amplitudes[..end].iter().rposition(|&y| y > 0.9).unwrap_or(0);
    let fine = log_delays(grid[start], grid[end], 20);
    fit_stretched(&exact_decay(bath, family, &fine)?)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (pos - i as f64) * (sorted[j] - sorted[i])
}

/// Median T₂ₙ and interquartile band per hyperfine value over the isotope
/// ensemble. The same configurations are reused at every A.
pub fn t2_scan_vs_hyperfine(a_values: &[f64], cfg: &ScanConfig, cal: &Calibration) -> Result<Vec<ScanPoint>> {
    let far = cal.far_channel();
    a_values
        .iter()
        .map(|&a| {
            let mut samples = (0..cfg.configurations)
                .into_par_iter()
                .map(|c| {
                    let reg = probe_cluster(a, cfg, c)?;
                    let pairs = build_pair_bath(&reg, SpinRef::Site(0), cfg.b_cutoff_mhz, &cal.rate_law)?;
                    let bath = BathModel::new(pairs, far, cfg.seed);
                    measure_t2(&bath, cfg.family).map(|f| f.t2_s)
                })
                .collect::<Result<Vec<f64>>>()?;
            samples.sort_by(f64::total_cmp);
            Ok(ScanPoint {
                a_mhz: a,
                median_t2_s: quantile(&samples, 0.5),
                q25_t2_s: quantile(&samples, 0.25),
                q75_t2_s: quantile(&samples, 0.75),
                samples_s: samples,
            })
        })
        .collect()
}

/// Hyperfine coupling used for the plateau anchor, MHz.
pub const PLATEAU_A_MHZ: f64 = 4.0;

/// Fit R₀ to the bulk anchor (A = 0) and T_far to the plateau anchor.
///
/// Bulk T₂ is not monotone in R₀: fast pairs motionally narrow, so the
/// bulk value has a floor and R₀ is chosen by golden-section search on
/// |ln(T₂/5 ms)| in log R₀. T₂ at the plateau grows with T_far, which is
/// bisected. The R₀ step is repeated once with the fitted far channel in
/// place. Linewidth and far correlation time are taken from `start`.
pub fn calibrate(cfg: &ScanConfig, start: &Calibration) -> Result<Calibration> {
    let median_at = |a: f64, cal: &Calibration| -> Result<f64> {
        Ok(t2_scan_vs_hyperfine(&[a], cfg, cal)?[0].median_t2_s)
    };
    let mut cal = *start;
    let fit_r0 = |cal: &mut Calibration| -> Result<()> {
        let mut cost = |ln_r0: f64| -> Result<f64> {
            cal.rate_law.r0 = ln_r0.exp();
            Ok(median_at(0.0, cal)?.ln() - BULK_T2_S.ln()).map(f64::abs)
        };
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let (mut lo, mut hi) = (1e2_f64.ln(), 1e8_f64.ln());
        let mut x1 = hi - g * (hi - lo);
        let mut x2 = lo + g * (hi - lo);
        let (mut f1, mut f2) = (cost(x1)?, cost(x2)?);
        while hi - lo > 0.01 {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - g * (hi - lo);
                f1 = cost(x1)?;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + g * (hi - lo);
                f2 = cost(x2)?;
            }
        }
        cal.rate_law.r0 = (0.5 * (lo + hi)).exp();
        Ok(())
    };
    fit_r0(&mut cal)?;
    let (mut lo, mut hi) = (0.05_f64, 100.0_f64);
    while hi / lo > 1.005 {
        let mid = (lo * hi).sqrt();
        cal.t_far_s = mid;
        if median_at(PLATEAU_A_MHZ, &cal)? < PLATEAU_T2_S {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    cal.t_far_s = (lo * hi).sqrt();
    fit_r0(&mut cal)?;
    Ok(cal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    fn synthetic(t2: f64, n: f64, noise: f64, seed: u64) -> DecayCurve {
        let delays = log_delays(0.1 * t2, 2.5 * t2, 25);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let amps = delays
            .iter()
            .map(|t| (-(t / t2).powf(n)).exp() + if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 })
            .collect();
        DecayCurve::from_samples("synthetic", delays, amps).unwrap()
    }

    #[test]
    fn fit_recovers_noiseless_parameters() {
        for (t2, n) in [(1.1, 2.0), (1.22, 2.2), (0.7, 1.0)] {
            let f = fit_stretched(&synthetic(t2, n, 0.0, 0)).unwrap();
            assert!((f.t2_s / t2 - 1.0).abs() < 1e-6, "{f:?}");
            assert!((f.stretch - n).abs() < 1e-6, "{f:?}");
        }
    }

    #[test]
    fn fit_with_noise() {
        let f = fit_stretched(&synthetic(1.22, 2.2, 0.02, 3)).unwrap();
        assert!((f.t2_s / 1.22 - 1.0).abs() < 0.1);
        assert!((f.stretch - 2.2).abs() < 0.3);
        assert!(f.t2_err_s > 0.0 && f.stretch_err > 0.0);
    }

    #[test]
    fn flat_curve_fails() {
        let c = DecayCurve::from_samples("flat", log_delays(0.1, 1.0, 8), vec![1.0; 8]).unwrap();
        assert!(matches!(fit_stretched(&c), Err(Error::Fit { .. })));
        let short = DecayCurve::from_samples("short", vec![0.1, 0.2], vec![0.9, 0.1]).unwrap();
        assert!(fit_stretched(&short).is_err());
    }

    #[test]
    fn rate_law_limits() {
        let law = RateLaw { r0: 2.0, linewidth_mhz: 1e-3 };
        let peak = law.rate_mhz(1e-4, 0.0);
        assert!((peak - 2.0 * 1e-8 / 1e-3).abs() < 1e-18);
        assert!((peak / law.rate_mhz(1e-4, 1e-2) - 101.0).abs() < 1e-9);
        assert_eq!(law.rate_mhz(0.0, 0.0), 0.0);
    }

    #[test]
    fn empty_bath_never_decays() {
        let bath = BathModel::new(Vec::new(), FarChannel::NONE, 1).with_trajectories(10);
        let c = simulate_decay(&bath, DdFamily::Hahn, &log_delays(1e-3, 10.0, 6)).unwrap();
        assert!(c.amplitudes.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn monte_carlo_matches_transfer_matrix() {
        let (shift, rate) = (2e-6, 150.0);
        let bath = BathModel::new(vec![FlipFlopPair::telegraph(shift, rate)], FarChannel::NONE, 5).with_trajectories(20_000);
        let delays = log_delays(2e-3, 0.05, 6);
        for family in [DdFamily::Hahn, DdFamily::Cpmg(3)] {
            let c = simulate_decay(&bath, family, &delays).unwrap();
            let fr = family.pulse_fractions().unwrap();
            for (i, &t) in delays.iter().enumerate() {
                let exact = telegraph_amplitude_exact(shift, rate, 1.0, &fr, t);
                assert!((c.amplitudes[i] - exact).abs() < 4.0 * c.stderr[i] + 1e-3, "{family:?} t={t} mc={} exact={exact}", c.amplitudes[i]);
            }
        }
    }

    #[test]
    fn monte_carlo_matches_pair_product() {
        let pairs = vec![FlipFlopPair::telegraph(3e-6, 40.0), FlipFlopPair::telegraph(-1e-6, 300.0), {
            let mut p = FlipFlopPair::telegraph(5e-6, 5.0);
            p.active_probability = 0.5;
            p
        }];
        let bath = BathModel::new(pairs, FarChannel::from_hahn_time(0.2, 0.05), 11).with_trajectories(20_000);
        let d = log_delays(1e-3, 0.3, 7);
        let mc = simulate_decay(&bath, DdFamily::Xy4, &d).unwrap();
        let ex = exact_decay(&bath, DdFamily::Xy4, &d).unwrap();
        for i in 0..d.len() {
            assert!((mc.amplitudes[i] - ex.amplitudes[i]).abs() < 4.0 * mc.stderr[i] + 1e-3, "{i}: {} vs {}", mc.amplitudes[i], ex.amplitudes[i]);
        }
    }

    #[test]
    fn motional_narrowing_rate() {
        // ±δ switching at R ≫ δ: Hahn decay exp(−(2πδ)²·t/(2R)).
        let (shift, rate) = (1e-6, 1e4);
        let omega = TAU * shift * 1e6;
        let gamma = omega * omega / (2.0 * rate);
        let t = 1.0 / gamma;
        let exact = telegraph_amplitude_exact(shift, rate, 1.0, &[0.5], t);
        assert!((exact.ln() / -1.0 - 1.0).abs() < 0.01, "{exact}");
    }

    #[test]
    fn far_channel_closed_form() {
        let far = FarChannel::from_hahn_time(1.3, 0.5);
        assert!((far.amplitude(&[0.5], 1.3) - (-1.0f64).exp()).abs() < 1e-12);
        assert!((far.hahn_time_s() - 1.3).abs() < 1e-6);
        // Free induction (no pulses) against direct quadrature of the OU kernel.
        let t = 0.8;
        let steps = 2000;
        let h = t / steps as f64;
        let mut q = 0.0;
        for i in 0..steps {
            for j in 0..steps {
                let d = ((i as f64 - j as f64) * h).abs();
                q += (-d / far.correlation_s).exp();
            }
        }
        q *= h * h * (TAU * far.sigma_hz).powi(2);
        assert!((far.phase_variance(&[], t) / q - 1.0).abs() < 1e-3);
        // More pulses, slower decay.
        assert!(far.amplitude(&DdFamily::Cpmg(8).pulse_fractions().unwrap(), 1.3) > far.amplitude(&[0.5], 1.3));
    }

    #[test]
    fn signed_overlap_cases() {
        assert_eq!(signed_overlap(&[0.5], &[], 1.0), 0.0);
        assert!((signed_overlap(&[0.5], &[0.25], 1.0) - 0.5).abs() < 1e-15);
        assert!((signed_overlap(&[], &[0.3], 1.0) - (0.3 - 0.7)).abs() < 1e-15);
    }

    #[test]
    fn decay_is_seed_deterministic() {
        let pairs = vec![FlipFlopPair::telegraph(3e-6, 40.0), FlipFlopPair::telegraph(-1e-6, 300.0)];
        let bath = BathModel::new(pairs, FarChannel::from_hahn_time(2.0, 0.5), 9).with_trajectories(500);
        let d = log_delays(1e-3, 1.0, 7);
        let a = simulate_decay(&bath, DdFamily::Cpmg(2), &d).unwrap();
        let b = simulate_decay(&bath, DdFamily::Cpmg(2), &d).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equivalent_and_ionized_pairs_have_no_detuning() {
        let law = RateLaw { r0: 1.0, linewidth_mhz: 1e-3 };
        let mut a = NuclearSite::si29([4, 0, 0], 2.0, 0.0);
        let mut b = NuclearSite::si29([0, 4, 0], 2.0, 0.0);
        a.orbit_id = 3;
        b.orbit_id = 3;
        let c = NuclearSite::si29([1, 1, 1], 5.0, 0.0);
        let reg = SpinRegister::phosphorus_donor().with_sites(vec![a, b, c]);
        let pairs = build_pair_bath(&reg, SpinRef::Donor, 0.0, &law).unwrap();
        let ab = pairs.iter().find(|p| p.members == (0, 1)).unwrap();
        assert_eq!(ab.detuning_mhz, 0.0);
        assert!(pairs.iter().any(|p| p.detuning_mhz > 0.0));
        let ion = reg.clone().with_charge(ChargeState::Ionized);
        assert!(build_pair_bath(&ion, SpinRef::Donor, 0.0, &law).unwrap().iter().all(|p| p.detuning_mhz == 0.0));
        let probe_pairs = build_pair_bath(&reg, SpinRef::Site(2), 0.0, &law).unwrap();
        assert_eq!(probe_pairs.len(), 1);
    }

    #[test]
    fn family_fractions() {
        assert_eq!(DdFamily::Hahn.pulse_fractions().unwrap(), vec![0.5]);
        assert_eq!(DdFamily::Xy4.pulse_fractions().unwrap(), DdFamily::Cpmg(4).pulse_fractions().unwrap());
        let pw = DdFamily::PiWahuha.pulse_fractions().unwrap();
        assert_eq!(pw.len(), 5);
        assert!((pw[0] - 1.0 / 12.0).abs() < 1e-12);
    }
}
