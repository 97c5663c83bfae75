//! Donor charge dynamics, electron initialisation and the synchronised
//! decoupling protocol that shields nuclear coherence from ionisation.
//!
//! Times are μs unless a name says otherwise. Electron spin ↑ carries the
//! sign +1 in phase bookkeeping. Polarisation is `p↓ − p↑`, positive towards
//! the initialised state.

use std::f64::consts::TAU;
use std::io::Write;

use nalgebra::{DMatrix, Matrix3, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::{ChargeState, NuclearSite, SpinRef, SpinRegister};
use crate::sequences::{self, PulseChannel, PulseEvent, Sequence, SimulationOptions, SpinState, SyncConstraint};
use crate::spin::{Bloch, Frame, Hamiltonian, HamiltonianOptions, QuantumState};
use crate::units;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Charge {
    Neutral(SpinState),
    Ionized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChargeInterval {
    pub start_us: f64,
    pub end_us: f64,
    pub state: Charge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeTrajectory {
    pub intervals: Vec<ChargeInterval>,
    pub tau_ion_us: f64,
    pub tau_cap_us: f64,
    pub seed: u64,
}

impl ChargeTrajectory {
    pub fn duration_us(&self) -> f64 {
        self.intervals.last().map_or(0.0, |i| i.end_us)
    }

    pub fn neutral_fraction(&self) -> f64 {
        let neutral: f64 = self
            .intervals
            .iter()
            .filter(|i| matches!(i.state, Charge::Neutral(_)))
            .map(|i| i.end_us - i.start_us)
            .sum();
        neutral / self.duration_us()
    }

    pub fn state_at(&self, t_us: f64) -> Option<Charge> {
        self.intervals
            .iter()
            .find(|i| t_us >= i.start_us && t_us < i.end_us)
            .map(|i| i.state)
    }
}

fn random_spin(rng: &mut ChaCha8Rng) -> SpinState {
    if rng.random::<bool>() {
        SpinState::Up
    } else {
        SpinState::Down
    }
}

fn exp_sample(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    // 1 − u lies in (0, 1], so the logarithm is finite.
    -mean * (1.0 - rng.random::<f64>()).ln()
}

fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && !v.is_nan() {
        Ok(())
    } else {
        Err(Error::param(name, "must be positive"))
    }
}

/// Alternating Neutral/Ionized renewal process over `window_us`, ionising at
/// 1/τ_ion and capturing at 1/τ_cap with a random electron spin. The donor
/// starts neutral.
pub fn sample_trajectory(tau_ion_us: f64, tau_cap_us: f64, window_us: f64, seed: u64) -> Result<ChargeTrajectory> {
    check_positive("tau_ion_us", tau_ion_us)?;
    check_positive("tau_cap_us", tau_cap_us)?;
    check_positive("window_us", window_us)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut intervals = Vec::new();
    let mut t = 0.0;
    let mut state = Charge::Neutral(random_spin(&mut rng));
    while t < window_us {
        let mean = match state {
            Charge::Neutral(_) => tau_ion_us,
            Charge::Ionized => tau_cap_us,
        };
        let end = (t + exp_sample(&mut rng, mean)).min(window_us);
        if end > t {
            intervals.push(ChargeInterval { start_us: t, end_us: end, state });
        }
        t = end;
        state = match state {
            Charge::Neutral(_) => Charge::Ionized,
            Charge::Ionized => Charge::Neutral(random_spin(&mut rng)),
        };
    }
    Ok(ChargeTrajectory {
        intervals,
        tau_ion_us,
        tau_cap_us,
        seed,
    })
}

/// Nuclear phase (rad) at each of `times_us` for a nucleus with secular
/// hyperfine `a_mhz`. While neutral the transition is shifted by ±A/2 with
/// the sign of the electron spin, toggled by each electron π pulse; while
/// ionized there is no shift. Pulses falling in an ionized interval are an
/// error when `sync_enforced`, and act on nothing otherwise.
pub fn nuclear_phase(traj: &ChargeTrajectory, a_mhz: f64, dd_pulses_us: &[f64], sync_enforced: bool, times_us: &[f64]) -> Result<Vec<f64>> {
    if dd_pulses_us.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::param("dd_pulses_us", "must be sorted"));
    }
    if times_us.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::param("times_us", "must be sorted"));
    }
    // Sign of the electron spin as a step function: (start, sign).
    let mut steps: Vec<(f64, f64)> = Vec::new();
    let mut p = 0;
    for iv in &traj.intervals {
        match iv.state {
            Charge::Ionized => {
                while p < dd_pulses_us.len() && dd_pulses_us[p] < iv.end_us {
                    if dd_pulses_us[p] >= iv.start_us && sync_enforced {
                        return Err(Error::Schedule(format!(
                            "electron π pulse at {} μs falls inside the ionized interval [{}, {}) μs",
                            dd_pulses_us[p], iv.start_us, iv.end_us
                        )));
                    }
                    p += 1;
                }
                steps.push((iv.start_us, 0.0));
            }
            Charge::Neutral(s) => {
                let mut sign = if s == SpinState::Up { 1.0 } else { -1.0 };
                while p < dd_pulses_us.len() && dd_pulses_us[p] < iv.start_us {
                    p += 1;
                }
                steps.push((iv.start_us, sign));
                while p < dd_pulses_us.len() && dd_pulses_us[p] < iv.end_us {
                    sign = -sign;
                    steps.push((dd_pulses_us[p], sign));
                    p += 1;
                }
            }
        }
    }
    let end = traj.duration_us();
    let rate = TAU * 0.5 * a_mhz;
    let mut out = Vec::with_capacity(times_us.len());
    let (mut k, mut acc) = (0usize, 0.0);
    for &t in times_us {
        // Accumulate whole steps that finish before t.
        while k + 1 < steps.len() && steps[k + 1].0 <= t {
            acc += steps[k].1 * (steps[k + 1].0 - steps[k].0);
            k += 1;
        }
        let partial = steps.get(k).map_or(0.0, |&(s, sign)| sign * (t.min(end) - s).max(0.0));
        out.push(rate * (acc + partial));
    }
    Ok(out)
}

/// Which lab-frame electron spins a window can ionise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ionize {
    Never,
    UpOnly,
    Any,
}

/// Spin of an electron captured during a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Capture {
    Never,
    DownOnly,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowKind {
    Read,
    Load,
    Laser,
    Dark,
}

impl WindowKind {
    pub fn label(self) -> &'static str {
        match self {
            WindowKind::Read => "read",
            WindowKind::Load => "load",
            WindowKind::Laser => "laser",
            WindowKind::Dark => "dark",
        }
    }

    /// Read: only ↑ tunnels out and only ↓ tunnels in. Load: either spin can
    /// leave, and capture gives a random spin. Laser: spin-selective
    /// ionisation with random recapture.
    pub fn rules(self) -> (Ionize, Capture) {
        match self {
            WindowKind::Read => (Ionize::UpOnly, Capture::DownOnly),
            WindowKind::Load => (Ionize::Any, Capture::Random),
            WindowKind::Laser => (Ionize::UpOnly, Capture::Random),
            WindowKind::Dark => (Ionize::Never, Capture::Random),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolWindow {
    pub kind: WindowKind,
    pub duration_us: f64,
}

/// Probability of the ↓ state at thermal equilibrium, `(1 + P_th)/2`.
fn thermal_down(p_thermal: f64) -> f64 {
    0.5 * (1.0 + p_thermal)
}

/// Thermal electron polarisation tanh(hf/2k_BT).
pub fn thermal_polarization(f_ghz: f64, temperature_k: f64) -> f64 {
    (units::PLANCK_J_S * f_ghz * 1e9 / (2.0 * units::BOLTZMANN_J_PER_K * temperature_k)).tanh()
}

/// Default thermal polarisation at 9.7 GHz and 4.5 K.
pub fn default_thermal_polarization() -> f64 {
    thermal_polarization(9.7, 4.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolarizationModel {
    Optical,
    Set,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarizationTrace {
    pub model: PolarizationModel,
    pub times_us: Vec<f64>,
    pub polarization: Vec<f64>,
}

/// Generator of the (↑, ↓, ionized) occupation chain in a window.
fn window_generator(kind: WindowKind, tau_ion_us: f64, tau_cap_us: f64) -> Matrix3<f64> {
    let (ionize, capture) = kind.rules();
    let gi = if tau_ion_us.is_finite() { 1.0 / tau_ion_us } else { 0.0 };
    let gc = if tau_cap_us.is_finite() { 1.0 / tau_cap_us } else { 0.0 };
    let (up_out, down_out) = match ionize {
        Ionize::Never => (0.0, 0.0),
        Ionize::UpOnly => (gi, 0.0),
        Ionize::Any => (gi, gi),
    };
    let (to_up, to_down) = match capture {
        Capture::Never => (0.0, 0.0),
        Capture::DownOnly => (0.0, gc),
        Capture::Random => (0.5 * gc, 0.5 * gc),
    };
    // Column j holds the rates out of state j; d p/dt = Q p.
    Matrix3::new(
        -up_out, 0.0, to_up, //
        0.0, -down_out, to_down, //
        up_out, down_out, -(to_up + to_down),
    )
}

fn propagate(p: Vector3<f64>, q: &Matrix3<f64>, dt_us: f64) -> Vector3<f64> {
    let slowest = q.iter().map(|x| x.abs()).filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min);
    if !slowest.is_finite() || dt_us == 0.0 {
        return p;
    }
    // An infinite window is evaluated long enough for every rate to settle.
    let dt = if dt_us.is_finite() { dt_us } else { 100.0 / slowest };
    (q * dt).exp() * p
}

/// Ensemble electron polarisation under repeated read/load windows, from
/// the exact three-state rate equations. Sampled `samples_per_window` times
/// per window. An infinite read window ends the trace at its limit.
pub fn hyperpolarize_set(read_us: f64, load_us: f64, tau_ion_us: f64, tau_cap_us: f64, cycles: usize, p_thermal: f64) -> Result<PolarizationTrace> {
    check_positive("read_us", read_us)?;
    check_positive("load_us", load_us)?;
    check_positive("tau_ion_us", tau_ion_us)?;
    check_positive("tau_cap_us", tau_cap_us)?;
    if !(-1.0..=1.0).contains(&p_thermal) {
        return Err(Error::param("p_thermal", "must lie in [-1, 1]"));
    }
    const SAMPLES: usize = 10;
    let down = thermal_down(p_thermal);
    let mut p = Vector3::new(1.0 - down, down, 0.0);
    let mut times = vec![0.0];
    let mut pol = vec![p[1] - p[0]];
    let mut t = 0.0;
    'cycles: for _ in 0..cycles {
        for (kind, dur) in [(WindowKind::Read, read_us), (WindowKind::Load, load_us)] {
            let q = window_generator(kind, tau_ion_us, tau_cap_us);
            if dur.is_infinite() {
                p = propagate(p, &q, dur);
                times.push(f64::INFINITY);
                pol.push(p[1] - p[0]);
                break 'cycles;
            }
            let step = dur / SAMPLES as f64;
            let m = (q * step).exp();
            for _ in 0..SAMPLES {
                p = m * p;
                t += step;
                times.push(t);
                pol.push(p[1] - p[0]);
            }
        }
    }
    Ok(PolarizationTrace {
        model: PolarizationModel::Set,
        times_us: times,
        polarization: pol,
    })
}

/// Optical pumping: the ↑ population is ionised at `pump_rate_per_ms` and
/// recaptured with a random spin, against spin relaxation T₁ towards
/// `p_thermal`. Sampled at 101 points over `duration_ms`.
pub fn hyperpolarize_optical(pump_rate_per_ms: f64, t1_s: f64, duration_ms: f64, p_thermal: f64) -> Result<PolarizationTrace> {
    if !(pump_rate_per_ms >= 0.0) {
        return Err(Error::param("pump_rate_per_ms", "must be non-negative"));
    }
    check_positive("t1_s", t1_s)?;
    check_positive("duration_ms", duration_ms)?;
    // dP/dt = (k/2)(1 − P) − (P − P_th)/T₁
    let relax = 1.0 / (t1_s * 1e3);
    let gamma = 0.5 * pump_rate_per_ms + relax;
    let steady = (0.5 * pump_rate_per_ms + relax * p_thermal) / gamma;
    let times_ms: Vec<f64> = (0..=100).map(|k| duration_ms * k as f64 / 100.0).collect();
    Ok(PolarizationTrace {
        model: PolarizationModel::Optical,
        polarization: times_ms.iter().map(|t| steady + (p_thermal - steady) * (-gamma * t).exp()).collect(),
        times_us: times_ms.iter().map(|t| t * 1e3).collect(),
    })
}

/// `S_polarized / S_thermal · tanh(h f / k_B T)`.
pub fn polarization_metric(s_polarized: f64, s_thermal: f64, f_ghz: f64, temperature_k: f64) -> Result<f64> {
    if s_thermal == 0.0 {
        return Err(Error::param("s_thermal", "division by zero"));
    }
    if !(temperature_k > 0.0) {
        return Err(Error::param("temperature_k", "must be positive"));
    }
    let x = units::PLANCK_J_S * f_ghz * 1e9 / (units::BOLTZMANN_J_PER_K * temperature_k);
    Ok(s_polarized / s_thermal * x.tanh())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DdMode {
    /// π-pulse grid restarted at every capture and gated off while ionized.
    Synchronized,
    /// Global π-pulse grid; pulses while ionized find no electron.
    FreeRunning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Set,
    Laser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionParams {
    pub preset: Preset,
    /// One cycle of charge-control windows.
    pub windows: Vec<ProtocolWindow>,
    pub cycles: usize,
    pub tau_ion_us: f64,
    pub tau_cap_us: f64,
    pub hyperfine_mhz: f64,
    /// Electron π pulses per μs.
    pub dd_rate_mhz: f64,
    pub dd_mode: DdMode,
    /// Depolarising probability per electron π pulse.
    pub pulse_error: f64,
    /// Nuclear WAHUHA half-spacing τ while ionized; `None` leaves the bulk
    /// dipolar channel unrefocused.
    pub nuclear_wahuha_tau_us: Option<f64>,
    /// RF π-pulse length of the nuclear WAHUHA.
    pub nuclear_rf_pi_us: f64,
    /// Stored coherence time of the nucleus while ionized (Gaussian), μs.
    pub bulk_t2_us: f64,
    pub p_thermal: f64,
    pub trajectories: usize,
    pub samples_per_window: usize,
    pub seed: u64,
}

impl ProtectionParams {
    /// SET read/load protocol: 295 μs ionisation, 33 μs capture, 5 MHz
    /// electron decoupling, A = 0.1 MHz.
    pub fn set() -> Self {
        Self {
            preset: Preset::Set,
            windows: vec![
                ProtocolWindow {
                    kind: WindowKind::Read,
                    duration_us: 1000.0,
                },
                ProtocolWindow {
                    kind: WindowKind::Load,
                    duration_us: 300.0,
                },
            ],
            cycles: 5,
            tau_ion_us: 295.0,
            tau_cap_us: 33.0,
            hyperfine_mhz: 0.1,
            dd_rate_mhz: 5.0,
            dd_mode: DdMode::Synchronized,
            pulse_error: 0.0,
            nuclear_wahuha_tau_us: None,
            nuclear_rf_pi_us: 4.0,
            bulk_t2_us: crate::baths::BULK_T2_S * units::US_PER_S,
            p_thermal: default_thermal_polarization(),
            trajectories: 10_000,
            samples_per_window: 20,
            seed: 1,
        }
    }

    /// Optical variant on the 10–100 ms scale, with nuclear WAHUHA while
    /// ionized.
    pub fn laser() -> Self {
        Self {
            preset: Preset::Laser,
            windows: vec![
                ProtocolWindow {
                    kind: WindowKind::Laser,
                    duration_us: 20_000.0,
                },
                ProtocolWindow {
                    kind: WindowKind::Dark,
                    duration_us: 5_000.0,
                },
            ],
            tau_ion_us: 10_000.0,
            tau_cap_us: 100.0,
            nuclear_wahuha_tau_us: Some(20.0),
            trajectories: 2_000,
            ..Self::set()
        }
    }

    pub fn cycle_us(&self) -> f64 {
        self.windows.iter().map(|w| w.duration_us).sum()
    }

    fn validate(&self) -> Result<()> {
        check_positive("tau_ion_us", self.tau_ion_us)?;
        check_positive("tau_cap_us", self.tau_cap_us)?;
        check_positive("dd_rate_mhz", self.dd_rate_mhz)?;
        check_positive("bulk_t2_us", self.bulk_t2_us)?;
        if self.windows.is_empty() || self.windows.iter().any(|w| !(w.duration_us > 0.0 && w.duration_us.is_finite())) {
            return Err(Error::param("windows", "need at least one window of finite positive duration"));
        }
        if self.trajectories == 0 {
            return Err(Error::param("trajectories", "at least one"));
        }
        if self.samples_per_window == 0 {
            return Err(Error::param("samples_per_window", "at least one"));
        }
        if !(0.0..=1.0).contains(&self.pulse_error) {
            return Err(Error::param("pulse_error", "must lie in [0, 1]"));
        }
        if !(-1.0..=1.0).contains(&self.p_thermal) {
            return Err(Error::param("p_thermal", "must lie in [-1, 1]"));
        }
        Ok(())
    }

    /// Effective stored coherence time while ionized, μs.
    pub fn ionized_t2_us(&self) -> Result<f64> {
        match self.nuclear_wahuha_tau_us {
            None => Ok(self.bulk_t2_us),
            Some(tau) => Ok(self.bulk_t2_us / wahuha_suppression(tau, self.nuclear_rf_pi_us)?),
        }
    }
}

/// Residual fraction of the dipolar evolution left by one WAHUHA cycle with
/// half-spacing `tau_us`: the cycle's error divided by the error of free
/// evolution over the same time, from exact propagation of three ²⁹Si
/// spins at nearest-shell distances.
pub fn wahuha_suppression(tau_us: f64, rf_pi_us: f64) -> Result<f64> {
    check_positive("tau_us", tau_us)?;
    if !(rf_pi_us >= 0.0 && rf_pi_us < tau_us) {
        return Err(Error::param("rf_pi_us", "must lie in [0, tau_us)"));
    }
    let reg = SpinRegister::electron_only().with_charge(ChargeState::Ionized).with_sites(vec![
        NuclearSite::si29([0, 0, 0], 0.0, 0.0),
        NuclearSite::si29([1, 1, 1], 0.0, 0.0),
        NuclearSite::si29([2, 2, 0], 0.0, 0.0),
    ]);
    let h = Hamiltonian::build(
        &reg,
        0.3442,
        &HamiltonianOptions {
            frame: Frame::ROTATING,
            ..Default::default()
        },
    )?;
    let rho = QuantumState::product(reg.spins(), &[Bloch::UP, Bloch::PLUS_X, Bloch(0.0, 0.6, 0.8), Bloch::UP])?;
    let nuclei = [SpinRef::Site(0), SpinRef::Site(1), SpinRef::Site(2)];
    let zero = Hamiltonian::from_matrix(DMatrix::zeros(h.dim(), h.dim()), h.spins().to_vec())?;
    let frame = vec![0.0; h.spins().len()];
    let opts = SimulationOptions::default();
    let error = |seq: &Sequence| -> Result<f64> {
        let real = sequences::simulate_with(&h, &frame, seq, &rho, &opts)?.final_state;
        let ideal = sequences::simulate_with(&zero, &frame, seq, &rho, &opts)?.final_state;
        Ok((real.matrix() - ideal.matrix()).norm())
    };
    let mut cycle = sequences::wahuha(tau_us)?.addressing_all(&nuclei, PulseChannel::Rf);
    if rf_pi_us > 0.0 {
        cycle = cycle.with_finite_pulses(rf_pi_us);
    }
    let mut idle = Sequence::new("free");
    idle.echo_us = Some(cycle.duration_us());
    let free = error(&idle)?;
    if free == 0.0 {
        return Ok(0.0);
    }
    Ok((error(&cycle)? / free).min(1.0))
}

/// Electron spin pattern inside a neutral interval from an anchor time:
/// lab spin `m` (+1 ↑) at the anchor, flipped by each pulse of a grid
/// starting at `first_pulse` with spacing `spacing`.
#[derive(Debug, Clone, Copy)]
struct Pattern {
    anchor: f64,
    m: f64,
    grid: Option<(f64, f64)>,
}

impl Pattern {
    fn pulses_by(&self, t: f64) -> u64 {
        match self.grid {
            Some((p0, d)) if t >= p0 => ((t - p0) / d).floor() as u64 + 1,
            _ => 0,
        }
    }

    /// ∫ lab spin dt from the anchor to t.
    fn signed(&self, t: f64) -> f64 {
        let Some((p0, d)) = self.grid else {
            return self.m * (t - self.anchor);
        };
        let n = self.pulses_by(t);
        if n == 0 {
            return self.m * (t - self.anchor);
        }
        let last = p0 + (n - 1) as f64 * d;
        let odd_middle = if (n - 1) % 2 == 1 { d } else { 0.0 };
        let tail = if n % 2 == 1 { -(t - last) } else { t - last };
        self.m * ((p0 - self.anchor) - odd_middle + tail)
    }

    /// Time spent ↑ from the anchor to t.
    fn up_time(&self, t: f64) -> f64 {
        0.5 * ((t - self.anchor) + self.signed(t))
    }

    /// Earliest time at which the ↑ exposure since the anchor reaches `u`.
    fn time_for_up(&self, u: f64) -> f64 {
        let up = self.m > 0.0;
        let Some((p0, d)) = self.grid else {
            return if up { self.anchor + u } else { f64::INFINITY };
        };
        let first = if up { p0 - self.anchor } else { 0.0 };
        if u <= first {
            return self.anchor + u;
        }
        let r = u - first;
        let s1 = if up { 2.0 } else { 1.0 };
        let q = (r / d).floor();
        let rem = r - q * d;
        if rem == 0.0 && q > 0.0 {
            return p0 + (s1 + 2.0 * (q - 1.0)) * d;
        }
        p0 + (s1 + 2.0 * q - 1.0) * d + rem
    }
}

/// Per-trajectory samples: charge flag, toggling-frame electron sign, nuclear
/// phase and accumulated ionized time.
#[derive(Debug, Clone, Default)]
struct Samples {
    neutral: Vec<bool>,
    electron: Vec<f64>,
    phase: Vec<f64>,
    ionized_us: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct Record {
    intervals: Vec<ChargeInterval>,
    pulses: Vec<f64>,
}

struct Arm<'a> {
    params: &'a ProtectionParams,
    dd: Option<DdMode>,
    times: &'a [f64],
}

impl Arm<'_> {
    fn grid_from(&self, t: f64) -> Option<(f64, f64)> {
        let d = 1.0 / self.params.dd_rate_mhz;
        match self.dd? {
            DdMode::Synchronized => Some((t + 0.5 * d, d)),
            DdMode::FreeRunning => {
                let k = ((t / d) - 0.5).floor() + 1.0;
                let mut p = (k + 0.5) * d;
                if p <= t {
                    p += d;
                }
                Some((p, d))
            }
        }
    }

    fn run(&self, traj: u64, record: Option<&mut Record>) -> Samples {
        let p = self.params;
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        rng.set_stream(traj);
        let mut rec = record;
        let rate = TAU * 0.5 * p.hyperfine_mhz;
        let flip_p = 0.5 * p.pulse_error;
        let mut out = Samples::default();
        let mut next_sample = 0;

        let down = thermal_down(p.p_thermal);
        let m0 = if rng.random::<f64>() < down { -1.0 } else { 1.0 };
        let mut charge_neutral = true;
        let mut pat = Pattern {
            anchor: 0.0,
            m: m0,
            grid: self.grid_from(0.0),
        };
        // Toggling-frame sign is fixed between anchors.
        let mut tog = m0;
        let mut phase = 0.0;
        let mut ionized = 0.0;
        let mut interval_start = 0.0;
        let mut interval_state = Charge::Neutral(if m0 > 0.0 { SpinState::Up } else { SpinState::Down });

        let mut t = 0.0;
        let mut window_start = 0.0;
        for _ in 0..p.cycles {
            for w in &p.windows {
                let window_end = window_start + w.duration_us;
                let (ionize, capture) = w.kind.rules();
                while t < window_end {
                    // Next event in this window, and what happens then.
                    let (t_event, event) = if charge_neutral {
                        let t_ion = match ionize {
                            Ionize::Never => f64::INFINITY,
                            Ionize::Any => t + exp_sample(&mut rng, p.tau_ion_us),
                            Ionize::UpOnly => pat.time_for_up(pat.up_time(t) + exp_sample(&mut rng, p.tau_ion_us)),
                        };
                        let t_err = match pat.grid {
                            Some((p0, d)) if flip_p > 0.0 => {
                                let k_now = pat.pulses_by(t);
                                let u = 1.0 - rng.random::<f64>();
                                let skip = if flip_p >= 1.0 { 0.0 } else { (u.ln() / (1.0 - flip_p).ln()).floor() };
                                p0 + (k_now as f64 + skip) * d
                            }
                            _ => f64::INFINITY,
                        };
                        if t_ion <= t_err { (t_ion, 1) } else { (t_err, 2) }
                    } else {
                        let t_cap = match capture {
                            Capture::Never => f64::INFINITY,
                            _ => t + exp_sample(&mut rng, p.tau_cap_us),
                        };
                        (t_cap, 3)
                    };
                    let t_next = t_event.min(window_end);

                    // Samples up to the event under the current state.
                    while next_sample < self.times.len() && self.times[next_sample] <= t_next {
                        let s = self.times[next_sample];
                        out.neutral.push(charge_neutral);
                        if charge_neutral {
                            out.electron.push(-tog);
                            out.phase.push(phase + rate * pat.signed(s));
                            out.ionized_us.push(ionized);
                        } else {
                            out.electron.push(0.0);
                            out.phase.push(phase);
                            out.ionized_us.push(ionized + (s - t));
                        }
                        next_sample += 1;
                    }

                    if let Some(r) = rec.as_deref_mut() {
                        if charge_neutral {
                            if let Some((p0, d)) = pat.grid {
                                let mut k = pat.pulses_by(t);
                                loop {
                                    let tp = p0 + k as f64 * d;
                                    if tp > t_next {
                                        break;
                                    }
                                    r.pulses.push(tp);
                                    k += 1;
                                }
                            }
                        }
                    }

                    if t_event > window_end {
                        // Window boundary: state carries over, hazards resample.
                        if charge_neutral {
                            phase += rate * pat.signed(window_end);
                            let n = pat.pulses_by(window_end);
                            pat = Pattern {
                                anchor: window_end,
                                m: pat.m * if n % 2 == 1 { -1.0 } else { 1.0 },
                                grid: pat.grid.map(|(p0, d)| (p0 + n as f64 * d, d)),
                            };
                        } else {
                            ionized += window_end - t;
                        }
                        t = window_end;
                        continue;
                    }
                    match event {
                        1 => {
                            phase += rate * pat.signed(t_event);
                            charge_neutral = false;
                            if let Some(r) = rec.as_deref_mut() {
                                r.intervals.push(ChargeInterval {
                                    start_us: interval_start,
                                    end_us: t_event,
                                    state: interval_state,
                                });
                            }
                            interval_start = t_event;
                            interval_state = Charge::Ionized;
                        }
                        2 => {
                            // Pulse error at t_event: the pulse flips and the
                            // depolarisation flips back, so the lab spin holds
                            // while the toggling-frame sign changes.
                            phase += rate * pat.signed(t_event);
                            let n = pat.pulses_by(t_event);
                            let m_before = pat.m * if (n - 1) % 2 == 1 { -1.0 } else { 1.0 };
                            tog = -tog;
                            pat = Pattern {
                                anchor: t_event,
                                m: m_before,
                                grid: pat.grid.map(|(p0, d)| (p0 + n as f64 * d, d)),
                            };
                        }
                        _ => {
                            ionized += t_event - t;
                            let spin = match capture {
                                Capture::DownOnly => -1.0,
                                _ => {
                                    if rng.random::<bool>() {
                                        1.0
                                    } else {
                                        -1.0
                                    }
                                }
                            };
                            charge_neutral = true;
                            pat = Pattern {
                                anchor: t_event,
                                m: spin,
                                grid: self.grid_from(t_event),
                            };
                            tog = spin;
                            if let Some(r) = rec.as_deref_mut() {
                                r.intervals.push(ChargeInterval {
                                    start_us: interval_start,
                                    end_us: t_event,
                                    state: interval_state,
                                });
                            }
                            interval_start = t_event;
                            interval_state = Charge::Neutral(if spin > 0.0 { SpinState::Up } else { SpinState::Down });
                        }
                    }
                    t = t_event;
                }
                window_start = window_end;
            }
        }
        if let Some(r) = rec {
            if t > interval_start {
                r.intervals.push(ChargeInterval {
                    start_us: interval_start,
                    end_us: t,
                    state: interval_state,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionRun {
    pub params: ProtectionParams,
    pub times_us: Vec<f64>,
    /// Fraction of trajectories neutral (decoupled arm).
    pub neutral_fraction: Vec<f64>,
    /// Electron polarisation seen after every other π pulse (decoupled arm).
    pub electron_polarization: Vec<f64>,
    pub electron_polarization_no_dd: Vec<f64>,
    pub coherence_dd: Vec<f64>,
    pub coherence_no_dd: Vec<f64>,
    /// Charge history and electron π pulses of trajectory 0 (decoupled arm).
    pub example: ChargeTrajectory,
    pub example_pulses_us: Vec<f64>,
    /// Compiled first cycle of trajectory 0: windows, ionized intervals and
    /// electron pulses under the synchronisation constraint.
    pub schedule: sequences::Schedule,
}

impl ProtectionRun {
    pub fn final_coherence_dd(&self) -> f64 {
        *self.coherence_dd.last().unwrap_or(&1.0)
    }

    pub fn final_coherence_no_dd(&self) -> f64 {
        *self.coherence_no_dd.last().unwrap_or(&1.0)
    }

    pub fn contrast(&self) -> f64 {
        self.final_coherence_dd() - self.final_coherence_no_dd()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "time_us",
            "neutral_fraction",
            "electron_polarization",
            "electron_polarization_no_dd",
            "coherence_dd",
            "coherence_no_dd",
        ])?;
        for i in 0..self.times_us.len() {
            w.write_record([
                self.times_us[i].to_string(),
                self.neutral_fraction[i].to_string(),
                self.electron_polarization[i].to_string(),
                self.electron_polarization_no_dd[i].to_string(),
                self.coherence_dd[i].to_string(),
                self.coherence_no_dd[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Ensemble {
    neutral: Vec<f64>,
    electron: Vec<f64>,
    coherence: Vec<f64>,
}

fn run_ensemble(params: &ProtectionParams, dd: Option<DdMode>, times: &[f64], t2_ion: f64) -> Ensemble {
    let arm = Arm { params, dd, times };
    let runs: Vec<Samples> = (0..params.trajectories as u64).into_par_iter().map(|k| arm.run(k, None)).collect();
    let n = runs.len() as f64;
    let mut ens = Ensemble {
        neutral: vec![0.0; times.len()],
        electron: vec![0.0; times.len()],
        coherence: vec![0.0; times.len()],
    };
    let mut sums = vec![Complex64::new(0.0, 0.0); times.len()];
    for r in &runs {
        for i in 0..times.len() {
            ens.neutral[i] += f64::from(u8::from(r.neutral[i]));
            ens.electron[i] += r.electron[i];
            let bulk = (-(r.ionized_us[i] / t2_ion).powi(2)).exp();
            sums[i] += Complex64::from_polar(bulk, r.phase[i]);
        }
    }
    for i in 0..times.len() {
        ens.neutral[i] /= n;
        ens.electron[i] /= n;
        ens.coherence[i] = sums[i].norm() / n;
    }
    ens
}

/// Read/load cycles with and without electron decoupling, tracking charge,
/// electron polarisation and the stored nuclear coherence.
pub fn protect_and_reset(params: &ProtectionParams) -> Result<ProtectionRun> {
    params.validate()?;
    let t2_ion = params.ionized_t2_us()?;
    let mut times = Vec::new();
    let mut t = 0.0;
    for _ in 0..params.cycles {
        for w in &params.windows {
            for k in 1..=params.samples_per_window {
                times.push(t + w.duration_us * k as f64 / params.samples_per_window as f64);
            }
            t += w.duration_us;
        }
    }
    let with = run_ensemble(params, Some(params.dd_mode), &times, t2_ion);
    let without = run_ensemble(params, None, &times, t2_ion);

    let arm = Arm {
        params,
        dd: Some(params.dd_mode),
        times: &times,
    };
    let mut rec = Record::default();
    arm.run(0, Some(&mut rec));
    let example = ChargeTrajectory {
        intervals: rec.intervals,
        tau_ion_us: params.tau_ion_us,
        tau_cap_us: params.tau_cap_us,
        seed: params.seed,
    };
    let schedule = sequences::compile(&protocol_sequence(params, &example, &rec.pulses))?;
    Ok(ProtectionRun {
        params: params.clone(),
        times_us: times,
        neutral_fraction: with.neutral,
        electron_polarization: with.electron,
        electron_polarization_no_dd: without.electron,
        coherence_dd: with.coherence,
        coherence_no_dd: without.coherence,
        example,
        example_pulses_us: rec.pulses,
        schedule,
    })
}

/// First protocol cycle as a sequence: gate windows, ionized intervals as
/// delay windows, and the electron π pulses, with pulses excluded from the
/// ionized windows when decoupling is synchronised.
fn protocol_sequence(params: &ProtectionParams, traj: &ChargeTrajectory, pulses: &[f64]) -> Sequence {
    let horizon = params.cycle_us();
    let mut seq = Sequence::new("protect");
    let mut t = 0.0;
    for w in &params.windows {
        seq.push(PulseEvent::window(PulseChannel::Gate, t, w.duration_us, w.kind.label()));
        t += w.duration_us;
    }
    for iv in traj.intervals.iter().filter(|i| i.start_us < horizon && i.state == Charge::Ionized) {
        seq.push(PulseEvent::window(PulseChannel::Delay, iv.start_us, iv.end_us.min(horizon) - iv.start_us, "ionized"));
    }
    for &p in pulses.iter().take_while(|&&p| p < horizon) {
        seq.push(PulseEvent::pulse(PulseChannel::Mw, p, std::f64::consts::PI, sequences::Axis::X).on(SpinRef::Electron));
    }
    if params.dd_mode == DdMode::Synchronized {
        seq.constraints.push(SyncConstraint::Exclude {
            pulses: PulseChannel::Mw,
            windows: PulseChannel::Delay,
            label: Some("ionized".into()),
        });
    }
    seq
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_neutral_fraction() {
        let tr = sample_trajectory(295.0, 33.0, 295.0 * 3.0e4, 4).unwrap();
        assert!((tr.neutral_fraction() - 295.0 / 328.0).abs() < 0.01);
        for w in tr.intervals.windows(2) {
            assert_eq!(w[0].end_us, w[1].start_us);
            assert_ne!(matches!(w[0].state, Charge::Ionized), matches!(w[1].state, Charge::Ionized));
        }
        assert!(tr.intervals.iter().all(|i| i.end_us > i.start_us));
    }

    #[test]
    fn trajectory_limits() {
        let short = sample_trajectory(1e9, 33.0, 10.0, 1).unwrap();
        assert_eq!(short.intervals.len(), 1);
        let fast = sample_trajectory(295.0, 1e-6, 1e6, 2).unwrap();
        assert!(fast.neutral_fraction() > 0.999_99);
        assert_eq!(sample_trajectory(295.0, 33.0, 1e4, 9).unwrap(), sample_trajectory(295.0, 33.0, 1e4, 9).unwrap());
        assert!(sample_trajectory(0.0, 33.0, 1.0, 0).is_err());
    }

    #[test]
    fn dwell_times_are_exponential() {
        let tr = sample_trajectory(295.0, 33.0, 1e8, 12).unwrap();
        let mut dwell: Vec<f64> = tr
            .intervals
            .iter()
            .filter(|i| matches!(i.state, Charge::Neutral(_)))
            .map(|i| i.end_us - i.start_us)
            .collect();
        dwell.pop();
        assert!(dwell.len() > 100_000);
        let mean = dwell.iter().sum::<f64>() / dwell.len() as f64;
        assert!((mean / 295.0 - 1.0).abs() < 0.02, "{mean}");
        // Kolmogorov–Smirnov against Exp(295).
        dwell.sort_by(f64::total_cmp);
        let n = dwell.len() as f64;
        let d = dwell
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = 1.0 - (-x / 295.0).exp();
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // p > 0.01 ⇔ √n·D < 1.628 asymptotically.
        assert!(n.sqrt() * d < 1.628, "KS statistic {}", n.sqrt() * d);
    }

    fn neutral(spin: SpinState, end: f64) -> ChargeTrajectory {
        ChargeTrajectory {
            intervals: vec![ChargeInterval {
                start_us: 0.0,
                end_us: end,
                state: Charge::Neutral(spin),
            }],
            tau_ion_us: 1.0,
            tau_cap_us: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn phase_bookkeeping() {
        let tr = neutral(SpinState::Up, 100.0);
        assert!((nuclear_phase(&tr, 0.1, &[], true, &[10.0]).unwrap()[0] - std::f64::consts::PI).abs() < 1e-12);
        let pulses: Vec<f64> = (0..8).map(|k| (k as f64 + 0.5) * 2.0).collect();
        assert!(nuclear_phase(&tr, 0.1, &pulses, true, &[16.0]).unwrap()[0].abs() < 1e-12);
        let ion = ChargeTrajectory {
            intervals: vec![
                ChargeInterval { start_us: 0.0, end_us: 5.0, state: Charge::Neutral(SpinState::Down) },
                ChargeInterval { start_us: 5.0, end_us: 20.0, state: Charge::Ionized },
            ],
            ..tr.clone()
        };
        let ph = nuclear_phase(&ion, 0.1, &[], true, &[5.0, 20.0]).unwrap();
        assert!((ph[0] - ph[1]).abs() < 1e-12);
        assert!(matches!(nuclear_phase(&ion, 0.1, &[7.0], true, &[20.0]), Err(Error::Schedule(_))));
        assert!(nuclear_phase(&ion, 0.1, &[7.0], false, &[20.0]).is_ok());
    }

    #[test]
    fn phase_matches_exact_spin_dynamics() {
        // Electron + nucleus with A = 0.1 MHz, three π pulses on the electron.
        let a = 0.1;
        let reg = SpinRegister::electron_only().with_sites(vec![NuclearSite::si29([4, 4, 4], a, 0.0)]);
        let h = Hamiltonian::build(&reg, 0.3442, &HamiltonianOptions { frame: Frame::ROTATING, ..Default::default() }).unwrap();
        let rho = QuantumState::product(reg.spins(), &[Bloch::UP, Bloch::PLUS_X]).unwrap();
        let pulses = [1.3, 2.0, 4.1];
        let mut seq = Sequence::new("e-dd");
        for &p in &pulses {
            seq.push(PulseEvent::pulse(PulseChannel::Mw, p, std::f64::consts::PI, sequences::Axis::X).on(SpinRef::Electron));
        }
        seq.echo_us = Some(20.0);
        let f = sequences::frame_frequencies(&reg, 0.3442, Frame::ROTATING);
        let out = sequences::simulate_with(&h, &f, &seq, &rho, &SimulationOptions::default()).unwrap();
        let coh = out.final_state.transverse(1, 0, 0);
        let tr = neutral(SpinState::Up, 20.0);
        let phase = nuclear_phase(&tr, a, &pulses, true, &[20.0]).unwrap()[0];
        assert!(phase.abs() > 3.0);
        let unit = coh / coh.norm();
        let best = [phase, -phase].map(|p| (unit - Complex64::from_polar(1.0, p)).norm()).into_iter().fold(f64::INFINITY, f64::min);
        assert!(best < 1e-9, "{coh} vs {phase}");
    }

    #[test]
    fn pattern_inverse() {
        for m in [1.0, -1.0] {
            let pat = Pattern { anchor: 3.0, m, grid: Some((3.1, 0.2)) };
            for u in [0.0, 0.05, 0.1, 0.15, 0.3, 1.234, 7.0] {
                let t = pat.time_for_up(u);
                assert!((pat.up_time(t) - u).abs() < 1e-9, "m={m} u={u} t={t}");
            }
            let free = Pattern { anchor: 1.0, m, grid: None };
            assert_eq!(free.time_for_up(2.0), if m > 0.0 { 3.0 } else { f64::INFINITY });
        }
    }

    #[test]
    fn set_polarization() {
        let p_th = default_thermal_polarization();
        let tr = hyperpolarize_set(1000.0, 300.0, 295.0, 33.0, 10, p_th).unwrap();
        assert!(tr.polarization.iter().all(|p| p.abs() <= 1.0 + 1e-12));
        // End of the last read window.
        let end_read = tr.times_us.iter().position(|&t| (t - (9.0 * 1300.0 + 1000.0)).abs() < 1e-6).unwrap();
        assert!(tr.polarization[end_read] > 0.9, "{}", tr.polarization[end_read]);
        let inf = hyperpolarize_set(f64::INFINITY, 300.0, 295.0, 33.0, 1, p_th).unwrap();
        assert!((inf.polarization.last().unwrap() - 1.0).abs() < 1e-9);
        let frozen = hyperpolarize_set(1000.0, 300.0, f64::INFINITY, 33.0, 3, p_th).unwrap();
        assert!(frozen.polarization.iter().all(|p| (p - p_th).abs() < 1e-12));
        let cycle = 1000.0 + 300.0;
        assert!((300.0..=3000.0).contains(&cycle));
    }

    #[test]
    fn optical_polarization() {
        let p_th = default_thermal_polarization();
        let flat = hyperpolarize_optical(0.0, 10.0, 100.0, p_th).unwrap();
        assert!(flat.polarization.iter().all(|p| (p - p_th).abs() < 1e-12));
        let tr = hyperpolarize_optical(0.1, 10.0, 100.0, p_th).unwrap();
        assert!(tr.polarization.windows(2).all(|w| w[1] >= w[0]));
        let idx = tr.polarization.iter().position(|&p| p >= 0.9).unwrap();
        let t_ms = tr.times_us[idx] / 1e3;
        assert!((10.0..100.0).contains(&t_ms), "{t_ms}");
    }

    #[test]
    fn metric_formula() {
        let p = polarization_metric(1.0, 1.0, 9.7, 4.5).unwrap();
        assert!((p - 0.1031).abs() < 5e-4, "{p}");
        assert_eq!(polarization_metric(0.0, 1.0, 9.7, 4.5).unwrap(), 0.0);
        assert!(polarization_metric(1.0, 1.0, 9.7, 1e12).unwrap() < 1e-9);
        assert!(polarization_metric(1.0, 0.0, 9.7, 4.5).is_err());
    }

    fn small(mut p: ProtectionParams) -> ProtectionParams {
        p.trajectories = 600;
        p
    }

    #[test]
    fn synchronised_dd_protects() {
        let run = protect_and_reset(&small(ProtectionParams::set())).unwrap();
        assert!(run.final_coherence_no_dd() < 0.15, "{}", run.final_coherence_no_dd());
        assert!(run.final_coherence_dd() >= 0.95, "{}", run.final_coherence_dd());
        assert!(!run.schedule.is_empty());
        assert!(run.example_pulses_us.iter().all(|&t| !matches!(run.example.state_at(t), Some(Charge::Ionized))));
    }

    #[test]
    fn engine_phase_agrees_with_bookkeeping() {
        let p = ProtectionParams::set();
        let times: Vec<f64> = (1..=50).map(|k| k as f64 * p.cycle_us() * 5.0 / 50.0).collect();
        let arm = Arm { params: &p, dd: Some(DdMode::Synchronized), times: &times };
        let mut rec = Record::default();
        let s = arm.run(3, Some(&mut rec));
        let tr = ChargeTrajectory { intervals: rec.intervals, tau_ion_us: p.tau_ion_us, tau_cap_us: p.tau_cap_us, seed: p.seed };
        let ph = nuclear_phase(&tr, p.hyperfine_mhz, &rec.pulses, true, &times).unwrap();
        for (a, b) in s.phase.iter().zip(&ph) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_hyperfine_is_untouched() {
        let mut p = small(ProtectionParams::set());
        p.hyperfine_mhz = 0.0;
        p.bulk_t2_us = f64::INFINITY;
        let run = protect_and_reset(&p).unwrap();
        assert!(run.coherence_dd.iter().chain(&run.coherence_no_dd).all(|c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn slow_decoupling_is_worse() {
        let mut slow = small(ProtectionParams::set());
        slow.dd_rate_mhz = slow.hyperfine_mhz;
        let fast = protect_and_reset(&small(ProtectionParams::set())).unwrap();
        let slow = protect_and_reset(&slow).unwrap();
        assert!(slow.final_coherence_dd() < fast.final_coherence_dd() - 0.1);
    }

    #[test]
    fn phase_spread_falls_with_rate() {
        let spread = |rate: Option<f64>| {
            let mut p = small(ProtectionParams::set());
            p.bulk_t2_us = f64::INFINITY;
            let times = [p.cycle_us() * p.cycles as f64];
            let dd = rate.map(|r| {
                p.dd_rate_mhz = r;
                DdMode::Synchronized
            });
            let arm = Arm { params: &p, dd, times: &times };
            let ph: Vec<f64> = (0..400).map(|k| arm.run(k, None).phase[0]).collect();
            let m = ph.iter().sum::<f64>() / ph.len() as f64;
            ph.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ph.len() as f64
        };
        let (none, slow, fast) = (spread(None), spread(Some(0.5)), spread(Some(5.0)));
        assert!(slow * 10.0 <= none && fast * 10.0 <= slow, "{none} {slow} {fast}");
    }

    #[test]
    fn nuclear_wahuha_extends_storage() {
        let mut p = ProtectionParams::set();
        p.nuclear_wahuha_tau_us = Some(20.0);
        assert!(p.ionized_t2_us().unwrap() >= 10.0 * p.bulk_t2_us);
    }

    #[test]
    fn protection_is_deterministic() {
        let a = protect_and_reset(&small(ProtectionParams::set())).unwrap();
        let b = protect_and_reset(&small(ProtectionParams::set())).unwrap();
        assert_eq!(a, b);
    }
}
