//! Named, parameterised scenarios producing [`ExperimentReport`]s.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4, PI};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baths::{self, BathModel, Calibration, DdFamily, DecayCurve, FarChannel, ScanConfig, ScanPoint};
use crate::charge::{self, Preset, ProtectionParams};
use crate::lattice::{self, HyperfineCatalog, HyperfineSource};
use crate::plot::{Plot, Series};
use crate::register::{NuclearSite, SpinRef, SpinRegister};
use crate::sequences::{self, Axis, Condition, PulseChannel, PulseEvent, Sequence, SpinState, TransferSpec};
use crate::spin::{self, qubit_mask, Bloch, Channel, QuantumState};
use crate::{units, Error, Result};

/// Named CSV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Capture the output of a CSV writer as a table.
    pub fn from_csv(name: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Self> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        let mut r = csv::Reader::from_reader(buf.as_slice());
        let columns = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            name: name.to_string(),
            columns,
            rows,
        })
    }

    /// Column values parsed as numbers.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k].parse().unwrap_or(f64::NAN)).collect())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    pub uncertainty: Option<f64>,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Optional report artefacts; the JSON manifest is always written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Svg,
}

/// Everything a scenario produced, plus the inputs needed to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub tables: Vec<Table>,
    pub fits: Vec<FitParam>,
    pub checks: Vec<Check>,
    pub plots: Vec<Plot>,
}

impl ExperimentReport {
    pub fn new(scenario: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            scenario: scenario.to_string(),
            seed,
            config: serde_json::to_value(config)?,
            tables: Vec::new(),
            fits: Vec::new(),
            checks: Vec::new(),
            plots: Vec::new(),
        })
    }

    pub fn fit(&mut self, name: &str, value: f64, uncertainty: Option<f64>, unit: &str) {
        self.fits.push(FitParam {
            name: name.to_string(),
            value,
            uncertainty,
            unit: unit.to_string(),
        });
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn fit_value(&self, name: &str) -> Option<f64> {
        self.fits.iter().find(|f| f.name == name).map(|f| f.value)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// True when every declared check passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Write `<table>.csv` and `<plot>.svg` for the selected formats, and
    /// always `manifest.json`, into `dir`. `extra` is merged into the
    /// manifest at top level.
    pub fn write_dir(&self, dir: &Path, formats: &[OutputFormat], extra: serde_json::Value) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let csv = formats.contains(&OutputFormat::Csv);
        let svg = formats.contains(&OutputFormat::Svg);
        for t in self.tables.iter().filter(|_| csv) {
            let path = dir.join(format!("{}.csv", t.name));
            t.write_csv(fs::File::create(&path)?)?;
            written.push(path);
        }
        for p in self.plots.iter().filter(|_| svg) {
            let path = dir.join(format!("{}.svg", p.name));
            fs::write(&path, p.to_svg())?;
            written.push(path);
        }
        let mut manifest = serde_json::json!({
            "scenario": self.scenario,
            "seed": self.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.config,
            "fits": self.fits,
            "checks": self.checks,
            "passed": self.passed(),
            "tables": self.tables.iter().filter(|_| csv).map(|t| format!("{}.csv", t.name)).collect::<Vec<_>>(),
            "plots": self.plots.iter().filter(|_| svg).map(|p| format!("{}.svg", p.name)).collect::<Vec<_>>(),
        });
        if let (Some(m), serde_json::Value::Object(e)) = (manifest.as_object_mut(), extra) {
            m.extend(e);
        }
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        written.push(path);
        Ok(written)
    }
}

fn s(x: f64) -> String {
    x.to_string()
}

// ---------------------------------------------------------------- ENDOR

/// One nuclear transition of the ENDOR stick spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndorLine {
    pub spin: SpinRef,
    pub frequency_mhz: f64,
    pub weight: f64,
}

/// Nuclear transitions of every nucleus, each computed exactly on the
/// electron–nucleus pair. Nuclei couple to the electron independently in
/// the secular limit, so this scales to any number of sites.
pub fn endor_sticks(register: &SpinRegister, field_t: f64) -> Result<Vec<EndorLine>> {
    let mut out = Vec::new();
    let mut pair = |sub: SpinRegister, probe: SpinRef, spin: SpinRef| -> Result<()> {
        let h = spin::build_hamiltonian(&sub, field_t)?;
        for t in spin::transition_frequencies(&h, Channel::Nuclear(probe)) {
            out.push(EndorLine {
                spin,
                frequency_mhz: t.frequency_mhz,
                weight: t.weight,
            });
        }
        Ok(())
    };
    if register.donor.is_some() {
        pair(register.clone().with_sites(Vec::new()), SpinRef::Donor, SpinRef::Donor)?;
    }
    for (i, site) in register.sites.iter().enumerate() {
        let sub = SpinRegister {
            donor: None,
            ..register.clone().with_sites(vec![site.clone()])
        };
        pair(sub, SpinRef::Site(0), SpinRef::Site(i))?;
    }
    out.sort_by(|a, b| a.frequency_mhz.total_cmp(&b.frequency_mhz));
    Ok(out)
}

const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

fn gaussian_sum(lines: &[EndorLine], sigma: f64, f: f64) -> f64 {
    lines
        .iter()
        .map(|l| l.weight * (-0.5 * ((f - l.frequency_mhz) / sigma).powi(2)).exp())
        .sum()
}

/// Width at half of the value at `center`, by bisection on either side.
fn half_width(lines: &[EndorLine], sigma: f64, center: f64) -> f64 {
    let half = 0.5 * gaussian_sum(lines, sigma, center);
    let cross = |dir: f64| {
        let (mut lo, mut hi) = (0.0, 10.0 * sigma);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if gaussian_sum(lines, sigma, center + dir * mid) > half {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    cross(-1.0) + cross(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct EndorConfig<'a> {
    register: &'a SpinRegister,
    field_t: f64,
    rf_range_mhz: (f64, f64),
    linewidth_khz: f64,
}

/// Stick spectrum convolved with a Gaussian of FWHM `linewidth_khz`.
///
/// Tables: `sticks` (every transition), `peaks` (coincident sticks merged,
/// with the measured FWHM) and `spectrum`.
pub fn run_endor_spectrum(
    register: &SpinRegister,
    field_t: f64,
    rf_range_mhz: (f64, f64),
    linewidth_khz: f64,
) -> Result<ExperimentReport> {
    let (lo, hi) = rf_range_mhz;
    if !(hi > lo) {
        return Err(Error::param("rf_range_mhz", "upper bound must exceed lower bound"));
    }
    if !(linewidth_khz > 0.0) {
        return Err(Error::param("linewidth_khz", "must be positive"));
    }
    let fwhm = linewidth_khz * 1e-3;
    let sigma = fwhm / FWHM_PER_SIGMA;
    let all = endor_sticks(register, field_t)?;
    let near: Vec<EndorLine> = all
        .iter()
        .copied()
        .filter(|l| l.frequency_mhz > lo - 8.0 * sigma && l.frequency_mhz < hi + 8.0 * sigma)
        .collect();
    let sticks: Vec<EndorLine> = near
        .iter()
        .copied()
        .filter(|l| l.frequency_mhz >= lo && l.frequency_mhz <= hi)
        .collect();

    let mut report = ExperimentReport::new(
        "endor",
        0,
        &EndorConfig {
            register,
            field_t,
            rf_range_mhz,
            linewidth_khz,
        },
    )?;

    let mut st = Table::new("sticks", &["spin", "frequency_mhz", "weight"]);
    for l in &sticks {
        st.push(vec![l.spin.to_string(), s(l.frequency_mhz), s(l.weight)]);
    }

    let mut peaks: Vec<(f64, f64, usize)> = Vec::new();
    for l in &sticks {
        match peaks.last_mut() {
            Some(p) if (l.frequency_mhz - p.0).abs() < 1e-9 => {
                p.1 += l.weight;
                p.2 += 1;
            }
            _ => peaks.push((l.frequency_mhz, l.weight, 1)),
        }
    }
    let mut pt = Table::new("peaks", &["frequency_mhz", "weight", "lines", "fwhm_khz"]);
    for &(f, w, n) in &peaks {
        pt.push(vec![s(f), s(w), n.to_string(), s(1e3 * half_width(&near, sigma, f))]);
    }

    let step = (fwhm / 20.0).max((hi - lo) / 200_000.0);
    let n = ((hi - lo) / step).ceil() as usize + 1;
    let mut sp = Table::new("spectrum", &["frequency_mhz", "intensity"]);
    let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for k in 0..n {
        let f = (lo + k as f64 * step).min(hi);
        let y = gaussian_sum(&near, sigma, f);
        sp.push(vec![s(f), s(y)]);
        xs.push(f);
        ys.push(y);
    }
    report.plots.push(Plot {
        name: "spectrum".into(),
        title: format!("ENDOR spectrum at {} mT", field_t * 1e3),
        x_label: "RF frequency (MHz)".into(),
        y_label: "ENDOR signal (arb.)".into(),
        log_x: false,
        log_y: false,
        series: vec![Series {
            label: format!("FWHM {linewidth_khz} kHz"),
            x: xs,
            y: ys,
            points: false,
        }],
    });
    report.tables.extend([st, pt, sp]);
    Ok(report)
}

/// Ready-made ENDOR registers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndorPreset {
    /// Electron and ³¹P only.
    P31,
    /// ³¹P plus the measured ²⁹Si catalog, one site per orbit member.
    Si29Catalog,
    /// ³¹P plus ²⁹Si sites with no hyperfine coupling.
    EmptyBath,
}

/// Register of an ENDOR preset.
pub fn endor_register(preset: EndorPreset) -> Result<SpinRegister> {
    match preset {
        EndorPreset::P31 => Ok(SpinRegister::phosphorus_donor()),
        EndorPreset::Si29Catalog => {
            let catalog = HyperfineCatalog::measured();
            let sites: Vec<NuclearSite> = lattice::sites_within(16)
                .into_iter()
                .map(|p| NuclearSite::si29(p, 0.0, 0.0))
                .collect();
            let source = HyperfineSource::Catalog {
                catalog: catalog.clone(),
                fallback: Default::default(),
            };
            let mut reg = lattice::assign_hyperfine(&sites, &source, units::SILICON_LATTICE_NM)?;
            reg.sites.retain(|s| s.orbit_id < catalog.entries.len());
            Ok(reg)
        }
        EndorPreset::EmptyBath => Ok(SpinRegister::phosphorus_donor()
            .with_sites(vec![NuclearSite::si29([1, 1, 1], 0.0, 0.0), NuclearSite::si29([2, 2, 0], 0.0, 0.0)])),
    }
}

/// Default RF window of a preset, MHz.
pub fn endor_default_range(preset: EndorPreset, field_t: f64) -> (f64, f64) {
    let nu_si = units::GAMMA_SI29_MHZ_PER_T * field_t;
    match preset {
        EndorPreset::P31 => (0.5 * units::HYPERFINE_P31_MHZ - 10.0, 0.5 * units::HYPERFINE_P31_MHZ + 10.0),
        EndorPreset::Si29Catalog | EndorPreset::EmptyBath => ((nu_si - 4.0).max(0.0), nu_si + 4.0),
    }
}

/// Pseudo-secular hyperfine shifts lines beyond ν ± A/2 by up to
/// A_zx²/(8|ν ± A/2|); 50 kHz covers the catalog.
const SECOND_ORDER_ALLOWANCE_MHZ: f64 = 0.05;

/// ENDOR run on a preset register with the preset's declared checks.
pub fn run_endor_preset(
    preset: EndorPreset,
    field_t: f64,
    rf_range_mhz: Option<(f64, f64)>,
    linewidth_khz: f64,
) -> Result<ExperimentReport> {
    let reg = endor_register(preset)?;
    let range = rf_range_mhz.unwrap_or_else(|| endor_default_range(preset, field_t));
    let mut report = run_endor_spectrum(&reg, field_t, range, linewidth_khz)?;
    let peaks = report.table("peaks").cloned().unwrap_or_else(|| Table::new("peaks", &[]));
    let freqs = peaks.column("frequency_mhz").unwrap_or_default();
    let widths = peaks.column("fwhm_khz").unwrap_or_default();
    let nu_si = units::GAMMA_SI29_MHZ_PER_T * field_t;
    match preset {
        EndorPreset::P31 => {
            let lower = freqs.first().copied().unwrap_or(f64::NAN);
            report.fit("p31_lower_branch_mhz", lower, None, "MHz");
            report.check(
                "p31-lower-branch",
                (lower - 52.475).abs() <= 0.05,
                format!("{lower:.4} MHz, expected 52.475 ± 0.05 MHz"),
            );
            let w = widths.first().copied().unwrap_or(f64::NAN);
            report.check(
                "p31-linewidth",
                (w - linewidth_khz).abs() <= 0.01 * linewidth_khz,
                format!("FWHM {w:.2} kHz, configured {linewidth_khz} kHz"),
            );
        }
        EndorPreset::Si29Catalog => {
            let max_shift = freqs.iter().map(|f| (f - nu_si).abs()).fold(0.0, f64::max);
            report.fit("si29_zeeman_mhz", nu_si, None, "MHz");
            report.fit("si29_max_shift_mhz", max_shift, None, "MHz");
            report.check(
                "si29-window",
                !freqs.is_empty() && max_shift <= 3.0 + SECOND_ORDER_ALLOWANCE_MHZ,
                format!(
                    "{} peaks, max shift {max_shift:.4} MHz from {nu_si:.4} MHz; bound 3 MHz plus {} MHz second order",
                    freqs.len(),
                    SECOND_ORDER_ALLOWANCE_MHZ
                ),
            );
        }
        EndorPreset::EmptyBath => {
            let si: Vec<f64> = freqs.iter().copied().filter(|f| (f - nu_si).abs() < 1.0).collect();
            report.check(
                "empty-bath-single-peak",
                si.len() == 1 && (si[0] - nu_si).abs() < 1e-6,
                format!("peaks near ν_Si: {si:?}, expected one at {nu_si:.6} MHz"),
            );
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------- decay

/// One probe ²⁹Si in a calibrated random cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub a_mhz: f64,
    pub configuration: usize,
    /// Replace the bath by nothing (no pairs, no far channel).
    pub empty_bath: bool,
    pub scan: ScanConfig,
    pub calibration: Calibration,
}

impl SiteSpec {
    pub fn preset(a_mhz: f64) -> Self {
        Self {
            a_mhz,
            configuration: 0,
            empty_bath: false,
            scan: ScanConfig::default(),
            calibration: Calibration::default(),
        }
    }

    pub fn bath(&self, seed: u64, trajectories: usize) -> Result<BathModel> {
        if self.empty_bath {
            return Ok(BathModel::new(Vec::new(), FarChannel::NONE, seed).with_trajectories(trajectories));
        }
        let reg = baths::probe_cluster(self.a_mhz, &self.scan, self.configuration)?;
        let pairs = baths::build_pair_bath(&reg, SpinRef::Site(0), self.scan.b_cutoff_mhz, &self.calibration.rate_law)?;
        Ok(BathModel::new(pairs, self.calibration.far_channel(), seed).with_trajectories(trajectories))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayParams {
    pub site: SiteSpec,
    pub family: DdFamily,
    pub trajectories: usize,
    /// Explicit delays (total evolution time, s); `None` places `points`
    /// log-spaced delays across the decay.
    pub delays_s: Option<Vec<f64>>,
    pub points: usize,
    pub seed: u64,
}

impl DecayParams {
    pub fn new(site: SiteSpec, family: DdFamily) -> Self {
        Self {
            site,
            family,
            trajectories: baths::DEFAULT_TRAJECTORIES,
            delays_s: None,
            points: 24,
            seed: 1,
        }
    }
}

/// Log grid from where the exact ensemble echo drops below 0.97 to where it
/// drops below 0.03.
pub fn auto_delays(bath: &BathModel, family: DdFamily, points: usize) -> Result<Vec<f64>> {
    let coarse = baths::log_delays(1e-5, 1e3, 65);
    let c = baths::exact_decay(bath, family, &coarse)?;
    let Some(end) = c.amplitudes.iter().position(|&y| y < 0.03) else {
        return Ok(baths::log_delays(1e-3, 10.0, points));
    };
    let start = c.amplitudes[..end].iter().rposition(|&y| y > 0.97).unwrap_or(0);
    Ok(baths::log_delays(coarse[start], coarse[end], points))
}

/// Monte Carlo decay with stretched fit and the exact ensemble curve.
pub fn decay_with_fit(p: &DecayParams) -> Result<(DecayCurve, Vec<f64>)> {
    let bath = p.site.bath(p.seed, p.trajectories)?;
    let delays = match &p.delays_s {
        Some(d) => d.clone(),
        None => auto_delays(&bath, p.family, p.points)?,
    };
    let mut curve = baths::simulate_decay(&bath, p.family, &delays)?;
    let exact = baths::exact_decay(&bath, p.family, &delays)?.amplitudes;
    curve.fit = Some(baths::fit_stretched(&curve)?);
    Ok((curve, exact))
}

fn decay_table(name: &str, c: &DecayCurve, exact: &[f64]) -> Table {
    let fit = c.fit;
    let mut t = Table::new(name, &["delay_s", "amplitude", "stderr", "exact", "fit"]);
    for i in 0..c.delays_s.len() {
        let f = fit.map_or(f64::NAN, |f| (-(c.delays_s[i] / f.t2_s).powf(f.stretch)).exp());
        t.push(vec![s(c.delays_s[i]), s(c.amplitudes[i]), s(c.stderr[i]), s(exact[i]), s(f)]);
    }
    t
}

/// Decay of one probe site under one refocusing family.
pub fn run_t2n_decay(p: &DecayParams) -> Result<ExperimentReport> {
    let (curve, exact) = decay_with_fit(p)?;
    let fit = curve.fit.expect("fitted above");
    let mut report = ExperimentReport::new("t2n", p.seed, p)?;
    report.fit("t2n_s", fit.t2_s, Some(fit.t2_err_s), "s");
    report.fit("stretch", fit.stretch, Some(fit.stretch_err), "");
    if p.family == DdFamily::Hahn && p.site.a_mhz >= 3.0 {
        report.check(
            "hahn-stretch-near-2",
            (fit.stretch - 2.0).abs() <= 0.5,
            format!("n = {:.3} ± {:.3}, expected 2.0 ± 0.5", fit.stretch, fit.stretch_err),
        );
    }
    report.plots.push(Plot {
        name: "decay".into(),
        title: format!("{} decay, A = {} MHz", p.family.label(), p.site.a_mhz),
        x_label: "total evolution time (s)".into(),
        y_label: "nuclear coherence".into(),
        log_x: true,
        log_y: false,
        series: vec![
            Series {
                label: "Monte Carlo".into(),
                x: curve.delays_s.clone(),
                y: curve.amplitudes.clone(),
                points: true,
            },
            Series {
                label: format!("fit T2={:.3} s n={:.2}", fit.t2_s, fit.stretch),
                x: curve.delays_s.clone(),
                y: curve.delays_s.iter().map(|t| (-(t / fit.t2_s).powf(fit.stretch)).exp()).collect(),
                points: false,
            },
        ],
    });
    report.tables.push(decay_table("decay", &curve, &exact));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdCompareParams {
    pub site: SiteSpec,
    pub families: Vec<DdFamily>,
    pub trajectories: usize,
    pub points: usize,
    pub seed: u64,
}

impl DdCompareParams {
    /// Hahn and CPMG-2/4/8 on the A = 2.23 MHz site.
    pub fn preset() -> Self {
        Self {
            site: SiteSpec::preset(2.23),
            families: vec![DdFamily::Hahn, DdFamily::Cpmg(2), DdFamily::Cpmg(4), DdFamily::Cpmg(8)],
            trajectories: baths::DEFAULT_TRAJECTORIES,
            points: 24,
            seed: 1,
        }
    }
}

/// Fitted T₂ₙ per refocusing family on the same bath.
pub fn run_dd_compare(p: &DdCompareParams) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("dd-compare", p.seed, p)?;
    let mut summary = Table::new("summary", &["family", "pi_pulses", "t2n_s", "t2n_err_s", "stretch", "stretch_err"]);
    let mut series = Vec::new();
    let mut results = Vec::new();
    for &family in &p.families {
        let dp = DecayParams {
            site: p.site.clone(),
            family,
            trajectories: p.trajectories,
            delays_s: None,
            points: p.points,
            seed: p.seed,
        };
        let (curve, exact) = decay_with_fit(&dp)?;
        let fit = curve.fit.expect("fitted above");
        let label = family.label();
        summary.push(vec![
            label.clone(),
            family.pi_count().to_string(),
            s(fit.t2_s),
            s(fit.t2_err_s),
            s(fit.stretch),
            s(fit.stretch_err),
        ]);
        report.fit(&format!("{label}_t2n_s"), fit.t2_s, Some(fit.t2_err_s), "s");
        report.fit(&format!("{label}_stretch"), fit.stretch, Some(fit.stretch_err), "");
        series.push(Series {
            label: label.clone(),
            x: curve.delays_s.clone(),
            y: curve.amplitudes.clone(),
            points: false,
        });
        report.tables.push(decay_table(&format!("decay-{label}"), &curve, &exact));
        results.push((family, fit));
    }

    let mut cpmg: Vec<_> = results
        .iter()
        .filter(|(f, _)| matches!(f, DdFamily::Hahn | DdFamily::Cpmg(_)))
        .map(|(f, fit)| (f.pi_count(), *fit))
        .collect();
    cpmg.sort_by_key(|c| c.0);
    if cpmg.len() >= 2 {
        let mut ok = true;
        let mut detail = Vec::new();
        for w in cpmg.windows(2) {
            let (a, b) = (w[0].1, w[1].1);
            let z = (b.t2_s - a.t2_s) / a.t2_err_s.hypot(b.t2_err_s);
            ok &= w[1].0 > w[0].0 && z > 3.0;
            detail.push(format!("{}→{} pulses: {:.3}→{:.3} s (z = {z:.1})", w[0].0, w[1].0, a.t2_s, b.t2_s));
        }
        report.check("cpmg-ordering", ok, detail.join("; "));
    }
    let t2_of = |n: usize| cpmg.iter().find(|c| c.0 == n).map(|c| c.1.t2_s);
    if let (Some(h), Some(c8)) = (t2_of(1), t2_of(8)) {
        report.fit("cpmg8_over_hahn", c8 / h, None, "");
        report.check("cpmg8-over-hahn", c8 / h > 2.0, format!("ratio {:.3}, expected > 2", c8 / h));
    }
    report.plots.push(Plot {
        name: "decays".into(),
        title: format!("Refocusing families, A = {} MHz", p.site.a_mhz),
        x_label: "total evolution time (s)".into(),
        y_label: "nuclear coherence".into(),
        log_x: true,
        log_y: false,
        series,
    });
    report.tables.insert(0, summary);
    Ok(report)
}

// ---------------------------------------------------------------- T2(A)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2VsAParams {
    pub a_values_mhz: Vec<f64>,
    pub scan: ScanConfig,
    pub calibration: Calibration,
}

impl Default for T2VsAParams {
    fn default() -> Self {
        Self {
            a_values_mhz: vec![0.0, 0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0],
            scan: ScanConfig::default(),
            calibration: Calibration::default(),
        }
    }
}

fn scan_table(points: &[ScanPoint]) -> Table {
    let mut t = Table::new("t2_vs_a", &["a_mhz", "median_t2n_s", "q25_t2n_s", "q75_t2n_s"]);
    for p in points {
        t.push(vec![s(p.a_mhz), s(p.median_t2_s), s(p.q25_t2_s), s(p.q75_t2_s)]);
    }
    t
}

fn scan_plot(points: &[ScanPoint]) -> Plot {
    let x: Vec<f64> = points.iter().map(|p| p.a_mhz).collect();
    let band = |f: fn(&ScanPoint) -> f64, label: &str| Series {
        label: label.into(),
        x: x.clone(),
        y: points.iter().map(f).collect(),
        points: false,
    };
    Plot {
        name: "t2_vs_a".into(),
        title: "Hahn T2n against hyperfine coupling".into(),
        x_label: "A (MHz)".into(),
        y_label: "T2n (s)".into(),
        log_x: false,
        log_y: true,
        series: vec![
            band(|p| p.median_t2_s, "median"),
            band(|p| p.q25_t2_s, "25th percentile"),
            band(|p| p.q75_t2_s, "75th percentile"),
        ],
    }
}

/// Median T₂ₙ across the isotope ensemble for each coupling, with the
/// monotonicity, enhancement and plateau verdicts.
pub fn run_t2_vs_a(p: &T2VsAParams) -> Result<ExperimentReport> {
    let mut a = p.a_values_mhz.clone();
    a.sort_by(f64::total_cmp);
    a.dedup();
    if a.len() < 2 {
        return Err(Error::param("a_values_mhz", "need at least two distinct couplings"));
    }
    let points = baths::t2_scan_vs_hyperfine(&a, &p.scan, &p.calibration)?;
    let mut report = ExperimentReport::new("t2-vs-a", p.scan.seed, p)?;
    let med: Vec<f64> = points.iter().map(|q| q.median_t2_s).collect();

    let monotone = med.windows(2).all(|w| w[1] >= w[0]);
    report.check("monotone", monotone, format!("medians {med:?}"));

    let low = med[0];
    let at4 = points
        .iter()
        .find(|q| (q.a_mhz - baths::PLATEAU_A_MHZ).abs() < 1e-9)
        .unwrap_or(points.last().expect("two points"));
    let ratio = at4.median_t2_s / low;
    report.fit("enhancement", ratio, None, "");
    report.check(
        "enhancement-100x",
        ratio >= 100.0,
        format!("T2n({} MHz) / T2n({} MHz) = {ratio:.1}", at4.a_mhz, a[0]),
    );

    let plateau = *med.last().expect("two points");
    report.fit("plateau_t2n_s", plateau, None, "s");
    report.fit("low_a_t2n_s", low, None, "s");
    report.check(
        "plateau-window",
        (0.5..=3.0).contains(&plateau),
        format!("largest-A median {plateau:.3} s, expected within [0.5, 3] s"),
    );
    // Saturation: the last log-slope is well below the mean over the scan.
    let span = a[a.len() - 1] - a[0];
    let mean = (plateau / low).ln() / span;
    let k = a.len() - 1;
    let last = (med[k] / med[k - 1]).ln() / (a[k] - a[k - 1]);
    report.fit("final_log_slope_per_mhz", last, None, "1/MHz");
    report.check(
        "saturation",
        a.len() >= 3 && last < 0.5 * mean,
        format!("final d ln T2/dA = {last:.3}/MHz, scan mean {mean:.3}/MHz"),
    );
    report.tables.push(scan_table(&points));
    report.plots.push(scan_plot(&points));
    Ok(report)
}

/// Fit the bath constants to the anchors and report the resulting scan.
pub fn run_calibration(scan: &ScanConfig, start: &Calibration) -> Result<(Calibration, ExperimentReport)> {
    let cal = baths::calibrate(scan, start)?;
    let mut report = ExperimentReport::new("calibrate", scan.seed, &(scan, start))?;
    report.fit("rate_r0", cal.rate_law.r0, None, "");
    report.fit("linewidth_mhz", cal.rate_law.linewidth_mhz, None, "MHz");
    report.fit("t_far_s", cal.t_far_s, None, "s");
    report.fit("far_correlation_s", cal.far_correlation_s, None, "s");
    let a = [0.0, 0.5, 1.0, 2.0, baths::PLATEAU_A_MHZ, 6.0];
    let points = baths::t2_scan_vs_hyperfine(&a, scan, &cal)?;
    let bulk = points[0].median_t2_s;
    let plateau = points[4].median_t2_s;
    report.check(
        "plateau-anchor",
        (plateau / baths::PLATEAU_T2_S - 1.0).abs() < 0.02,
        format!("T2n(A = 4 MHz) = {plateau:.4} s, anchor {} s", baths::PLATEAU_T2_S),
    );
    report.check(
        "bulk-anchor",
        (bulk / baths::BULK_T2_S).ln().abs() < 1.5f64.ln(),
        format!(
            "T2n(A = 0) = {:.3} ms, anchor {} ms; the pair model bottoms out above the anchor",
            bulk * 1e3,
            baths::BULK_T2_S * 1e3
        ),
    );
    report.tables.push(scan_table(&points));
    report.plots.push(scan_plot(&points));
    Ok((cal, report))
}

// ---------------------------------------------------------------- protection

/// Read/load protection run: traces, contrast and the first-cycle schedule.
pub fn run_protection(params: &ProtectionParams) -> Result<ExperimentReport> {
    let run = charge::protect_and_reset(params)?;
    let mut report = ExperimentReport::new("protect", params.seed, params)?;
    let (dd, free, contrast) = (run.final_coherence_dd(), run.final_coherence_no_dd(), run.contrast());
    report.fit("coherence_dd", dd, None, "");
    report.fit("coherence_no_dd", free, None, "");
    report.fit("contrast", contrast, None, "");
    match params.preset {
        Preset::Set => {
            report.check("no-dd-lost", free < 0.1, format!("no-DD coherence {free:.4}, expected < 0.1"));
            report.check("dd-kept", dd >= 0.95, format!("DD coherence {dd:.4}, expected ≥ 0.95"));
            report.check("contrast", contrast >= 0.85, format!("contrast {contrast:.4}, expected ≥ 0.85"));
        }
        Preset::Laser => {
            report.check("dd-kept", dd >= 0.95, format!("DD coherence {dd:.4}, expected ≥ 0.95"));
            report.check("contrast", contrast >= 0.3, format!("contrast {contrast:.4}, expected ≥ 0.3"));
        }
    }
    report.tables.push(Table::from_csv("traces", |w| run.write_csv(w))?);
    report.tables.push(Table::from_csv("schedule", |w| run.schedule.write_csv(w))?);
    let t_ms: Vec<f64> = run.times_us.iter().map(|t| t * 1e-3).collect();
    let line = |label: &str, y: &[f64]| Series {
        label: label.into(),
        x: t_ms.clone(),
        y: y.to_vec(),
        points: false,
    };
    report.plots.push(Plot {
        name: "traces".into(),
        title: format!("Charge cycling, {:?} preset", params.preset),
        x_label: "time (ms)".into(),
        y_label: "fraction".into(),
        log_x: false,
        log_y: false,
        series: vec![
            line("neutral fraction", &run.neutral_fraction),
            line("electron polarisation", &run.electron_polarization),
            line("nuclear coherence, DD", &run.coherence_dd),
            line("nuclear coherence, no DD", &run.coherence_no_dd),
        ],
    });
    Ok(report)
}

// ---------------------------------------------------------------- QEC

/// Register roles and control parameters of the three-qubit code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QecRegisterSpec {
    pub register: SpinRegister,
    /// Weakly coupled ²⁹Si holding the logical state.
    pub data: SpinRef,
    /// ³¹P ancilla.
    pub ancilla_donor: SpinRef,
    /// Strongly coupled ²⁹Si ancilla.
    pub ancilla_strong: SpinRef,
    /// Depolarising probability on the target after every pulse.
    pub gate_error: f64,
    pub mw_pi_us: f64,
    pub rf_pi_us: f64,
    /// Charge-cycle ancilla reset; `None` skips the reset step.
    pub reset: Option<ProtectionParams>,
    pub rounds: usize,
    /// Input state cos(θ/2)|↑⟩ + e^{iφ} sin(θ/2)|↓⟩ of the data qubit.
    pub psi_theta_rad: f64,
    pub psi_phi_rad: f64,
}

/// Hyperfine bound for the data role, MHz.
pub const QEC_WEAK_MAX_MHZ: f64 = 1.0;
/// Hyperfine bound for the strong ancilla role, MHz.
pub const QEC_STRONG_MIN_MHZ: f64 = 3.0;

impl QecRegisterSpec {
    /// Data on a 0.1 MHz site, ancillas on ³¹P and a 4.03 MHz site, reset by
    /// the SET protocol with synchronised decoupling.
    pub fn standard() -> Self {
        let register = SpinRegister::phosphorus_donor().with_sites(vec![
            NuclearSite::si29([4, 4, 4], 0.1, 0.01),
            NuclearSite::si29([1, 1, 1], 4.03, 0.403),
        ]);
        let reset = ProtectionParams {
            hyperfine_mhz: 0.1,
            ..ProtectionParams::set()
        };
        Self {
            register,
            data: SpinRef::Site(0),
            ancilla_donor: SpinRef::Donor,
            ancilla_strong: SpinRef::Site(1),
            gate_error: 0.0,
            mw_pi_us: 50.0,
            rf_pi_us: 50.0,
            reset: Some(reset),
            rounds: 2,
            psi_theta_rad: FRAC_PI_3,
            psi_phi_rad: FRAC_PI_4,
        }
    }

    fn hyperfine(&self, spin: SpinRef) -> Result<f64> {
        self.register
            .secular_hyperfine(spin)
            .ok_or_else(|| Error::param("qec roles", format!("{spin} is not a nucleus of the register")))
    }

    /// Check the role assignment and pulse selectivity.
    pub fn validate(&self) -> Result<()> {
        let roles = [self.data, self.ancilla_donor, self.ancilla_strong];
        if roles[0] == roles[1] || roles[0] == roles[2] || roles[1] == roles[2] {
            return Err(Error::param("qec roles", "data and ancillas must be distinct spins"));
        }
        if self.ancilla_donor != SpinRef::Donor || self.register.donor.is_none() {
            return Err(Error::param("qec roles", "ancilla 1 must be the donor nucleus"));
        }
        let (SpinRef::Site(_), SpinRef::Site(_)) = (self.data, self.ancilla_strong) else {
            return Err(Error::param("qec roles", "data and ancilla 2 must be ²⁹Si sites"));
        };
        let a_data = self.hyperfine(self.data)?;
        let a_strong = self.hyperfine(self.ancilla_strong)?;
        if !(a_data.abs() <= QEC_WEAK_MAX_MHZ && a_data != 0.0) {
            return Err(Error::param(
                "qec roles",
                format!("data site has A = {a_data} MHz; a weakly coupled site needs 0 < |A| ≤ {QEC_WEAK_MAX_MHZ} MHz"),
            ));
        }
        if a_strong.abs() < QEC_STRONG_MIN_MHZ {
            return Err(Error::param(
                "qec roles",
                format!("ancilla 2 has A = {a_strong} MHz; a strongly coupled site needs |A| ≥ {QEC_STRONG_MIN_MHZ} MHz"),
            ));
        }
        if !(0.0..=1.0).contains(&self.gate_error) {
            return Err(Error::param("gate_error", "must lie in [0, 1]"));
        }
        if self.rounds == 0 {
            return Err(Error::param("rounds", "must be at least 1"));
        }
        for spin in roles {
            let a = self.hyperfine(spin)?;
            // MW gates conditioned on this nucleus, RF gates conditioned on the electron.
            for pi_us in [self.mw_pi_us, self.rf_pi_us] {
                TransferSpec {
                    target: spin,
                    hyperfine_mhz: a,
                    mw_pi_us: pi_us,
                }
                .check_selectivity()?;
            }
        }
        Ok(())
    }
}

/// Qubit of the code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QecRole {
    Data,
    Donor,
    Strong,
}

/// Error channel applied after encoding in every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QecError {
    None,
    /// Deterministic phase flips on the listed qubits.
    Flip(Vec<QecRole>),
    /// Independent phase flips with probability `p` on each qubit, over
    /// `shots` repetitions.
    Iid { p: f64, shots: usize },
}

const I: C64 = C64::new(0.0, 1.0);
const ONE: C64 = C64::new(1.0, 0.0);
const ZERO: C64 = C64::new(0.0, 0.0);

/// Register state plus the electron bus and the pulse record.
struct Bus {
    state: QuantumState,
    spins: Vec<SpinRef>,
    gate_error: f64,
    mw_pi_us: f64,
    rf_pi_us: f64,
    clock_us: f64,
    record: Option<Sequence>,
}

const E: usize = 0;

impl Bus {
    fn cond(&self, conds: &[(usize, SpinState)]) -> Vec<Condition> {
        conds
            .iter()
            .map(|&(q, state)| Condition {
                spin: self.spins[q],
                state,
            })
            .collect()
    }

    /// Ideal selective rotation; π pulses carry their −i phase, which the
    /// caller removes by a frame update where needed.
    fn rotate(&mut self, target: usize, angle: f64, axis: Axis, conds: &[(usize, SpinState)], label: &str) -> Result<()> {
        let channel = if target == E { PulseChannel::Mw } else { PulseChannel::Rf };
        let duration = if target == E { self.mw_pi_us } else { self.rf_pi_us } * angle / PI;
        let conditions = self.cond(conds);
        let (mask, value) = sequences::condition_mask(&self.spins, &conditions)?;
        let u = spin::rotation(angle, axis.phase());
        self.state.apply_conditional(target, &u, mask, value);
        self.depolarize(target);
        if let Some(seq) = &mut self.record {
            let mut ev = PulseEvent::pulse(channel, self.clock_us, angle, axis)
                .on(self.spins[target])
                .labelled(label);
            ev.conditions = conditions;
            seq.push(ev);
        }
        self.clock_us += duration;
        Ok(())
    }

    /// Selective π pulse followed by the frame update that turns −iX into X.
    fn flip(&mut self, target: usize, conds: &[(usize, SpinState)], label: &str) -> Result<()> {
        self.rotate(target, PI, Axis::X, conds, label)?;
        let (mask, value) = sequences::condition_mask(&self.spins, &self.cond(conds))?;
        self.state.apply_conditional(target, &[[I, ZERO], [ZERO, I]], mask, value);
        Ok(())
    }

    /// Nuclear CNOT through the electron: MW flip on the control state, RF
    /// flip on the electron state, MW flip back. Needs the electron in ↑.
    fn cnot(&mut self, control: usize, target: usize) -> Result<()> {
        self.flip(E, &[(control, SpinState::Down)], "cnot-mw")?;
        self.flip(target, &[(E, SpinState::Down)], "cnot-rf")?;
        self.flip(E, &[(control, SpinState::Down)], "cnot-mw")
    }

    /// RF π/2 about ±y with the electron in ↑.
    fn ry(&mut self, target: usize, axis: Axis) -> Result<()> {
        self.rotate(target, FRAC_PI_2, axis, &[(E, SpinState::Up)], "basis")
    }

    fn depolarize(&mut self, q: usize) {
        let eps = self.gate_error;
        if eps == 0.0 {
            return;
        }
        let paulis = [[[ZERO, ONE], [ONE, ZERO]], [[ZERO, -I], [I, ZERO]], [[ONE, ZERO], [ZERO, -ONE]]];
        let mut acc = self.state.matrix() * C64::from(1.0 - 0.75 * eps);
        for p in &paulis {
            let mut c = self.state.clone();
            c.apply_conditional(q, p, 0, 0);
            acc += c.matrix() * C64::from(0.25 * eps);
        }
        *self.state.matrix_mut() = acc;
    }

    fn phase_flip(&mut self, q: usize) {
        self.state.apply_conditional(q, &[[ONE, ZERO], [ZERO, -ONE]], 0, 0);
    }

    /// Projective electron measurement, then reset to ↑ by a conditional flip.
    fn measure_and_reset_electron(&mut self, rng: &mut ChaCha8Rng) -> Result<usize> {
        let n = self.spins.len();
        let mask = qubit_mask(E, n);
        let dim = self.state.dim();
        let p1: f64 = (0..dim).filter(|b| b & mask != 0).map(|b| self.state.population(b)).sum();
        let outcome = usize::from(rng.random::<f64>() < p1);
        let p = if outcome == 1 { p1 } else { 1.0 - p1 };
        let rho = self.state.matrix_mut();
        for r in 0..dim {
            for c in 0..dim {
                let keep = usize::from(r & mask != 0) == outcome && usize::from(c & mask != 0) == outcome;
                rho[(r, c)] = if keep { rho[(r, c)] / p } else { ZERO };
            }
        }
        if outcome == 1 {
            self.flip(E, &[], "electron-reset")?;
        }
        Ok(outcome)
    }

    /// Measure-and-flip reset of a nucleus to ↑, averaged over outcomes.
    fn reset_nucleus(&mut self, q: usize) {
        let mask = qubit_mask(q, self.spins.len());
        let dim = self.state.dim();
        let old = self.state.matrix().clone();
        let mut new = DMatrix::zeros(dim, dim);
        for r in 0..dim {
            for c in 0..dim {
                match (r & mask != 0, c & mask != 0) {
                    (false, false) => new[(r, c)] += old[(r, c)],
                    (true, true) => new[(r ^ mask, c ^ mask)] += old[(r, c)],
                    _ => {}
                }
            }
        }
        *self.state.matrix_mut() = new;
    }
}

/// Outcome of one pass through the cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QecRound {
    pub round: usize,
    pub syndrome: (usize, usize),
    pub fidelity: f64,
    /// Overlap with X|ψ⟩: uncorrectable phase flips act on the decoded
    /// qubit as a bit flip.
    pub flipped_fidelity: f64,
    pub reset_coherence: Option<f64>,
}

const DATA: usize = 2;
const DONOR: usize = 1;
const STRONG: usize = 3;

fn role_qubit(role: QecRole) -> usize {
    match role {
        QecRole::Data => DATA,
        QecRole::Donor => DONOR,
        QecRole::Strong => STRONG,
    }
}

/// Runs repeated rounds of the cycle on one shot.
struct Cycle<'a> {
    spec: &'a QecRegisterSpec,
    /// Coherence kept by the data qubit through each round's reset.
    reset_keep: Vec<Option<f64>>,
    psi: [[C64; 2]; 2],
}

impl Cycle<'_> {
    fn new_bus(&self, record: bool) -> Result<Bus> {
        let spins = vec![SpinRef::Electron, SpinRef::Donor, SpinRef::Site(0), SpinRef::Site(1)];
        let (th, ph) = (self.spec.psi_theta_rad, self.spec.psi_phi_rad);
        let psi = Bloch(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
        let state = QuantumState::product(spins.clone(), &[Bloch::UP, Bloch::UP, psi, Bloch::UP])?;
        Ok(Bus {
            state,
            spins,
            gate_error: self.spec.gate_error,
            mw_pi_us: self.spec.mw_pi_us,
            rf_pi_us: self.spec.rf_pi_us,
            clock_us: 0.0,
            record: record.then(|| Sequence::new("qec-round")),
        })
    }

    fn fidelities(&self, bus: &Bus) -> (f64, f64) {
        let r = bus.state.reduced(DATA);
        let p = &self.psi;
        let f = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| p[i][j] * r[j][i]).sum::<C64>().re;
        // X ψ X swaps both indices.
        let fx = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| p[1 - i][1 - j] * r[j][i])
            .sum::<C64>()
            .re;
        (f, fx)
    }

    fn round(&self, bus: &mut Bus, k: usize, flips: &[bool; 3], rng: &mut ChaCha8Rng) -> Result<QecRound> {
        let code = [DATA, DONOR, STRONG];
        // Encode into the phase-flip code.
        bus.cnot(DATA, DONOR)?;
        bus.cnot(DATA, STRONG)?;
        for &q in &code {
            bus.ry(q, Axis::Y)?;
        }
        for (&q, &f) in code.iter().zip(flips) {
            if f {
                bus.phase_flip(q);
            }
        }
        // Back to the computational basis, where phase flips are bit flips.
        for &q in &code {
            bus.ry(q, Axis::MinusY)?;
        }
        let mut syndrome = [0usize; 2];
        for (s, anc) in syndrome.iter_mut().zip([DONOR, STRONG]) {
            bus.flip(E, &[(DATA, SpinState::Down)], "parity-mw")?;
            bus.flip(E, &[(anc, SpinState::Down)], "parity-mw")?;
            *s = bus.measure_and_reset_electron(rng)?;
        }
        let target = match syndrome {
            [1, 1] => Some(DATA),
            [1, 0] => Some(DONOR),
            [0, 1] => Some(STRONG),
            _ => None,
        };
        if let Some(q) = target {
            bus.flip(q, &[(E, SpinState::Up)], "correct")?;
        }
        bus.cnot(DATA, STRONG)?;
        bus.cnot(DATA, DONOR)?;
        let keep = self.reset_keep[k];
        if let Some(c) = keep {
            bus.reset_nucleus(DONOR);
            bus.reset_nucleus(STRONG);
            bus.state.dephase(DATA, C64::from(c));
        }
        let (fidelity, flipped_fidelity) = self.fidelities(bus);
        Ok(QecRound {
            round: k + 1,
            syndrome: (syndrome[0], syndrome[1]),
            fidelity,
            flipped_fidelity,
            reset_coherence: keep,
        })
    }
}

/// Encode, apply the error channel, extract the syndrome through the
/// electron, correct, decode and reset the ancillas, for `spec.rounds`
/// rounds.
pub fn run_qec(spec: &QecRegisterSpec, error: &QecError, seed: u64) -> Result<ExperimentReport> {
    spec.validate()?;
    let sites = [spec.data, spec.ancilla_strong].map(|r| match r {
        SpinRef::Site(i) => spec.register.sites[i].clone(),
        _ => unreachable!("validated as sites"),
    });
    let sub = QecRegisterSpec {
        register: spec.register.clone().with_sites(sites.to_vec()),
        ..spec.clone()
    };
    let a_data = spec.hyperfine(spec.data)?;

    let mut reset_keep = Vec::with_capacity(spec.rounds);
    for k in 0..spec.rounds {
        reset_keep.push(match &spec.reset {
            Some(params) => {
                let p = ProtectionParams {
                    hyperfine_mhz: a_data,
                    seed: params.seed.wrapping_add(k as u64),
                    ..params.clone()
                };
                Some(charge::protect_and_reset(&p)?.final_coherence_dd())
            }
            None => None,
        });
    }
    let (th, ph) = (spec.psi_theta_rad, spec.psi_phi_rad);
    let amp = [C64::from((th / 2.0).cos()), C64::from_polar((th / 2.0).sin(), ph)];
    let psi = [
        [amp[0] * amp[0].conj(), amp[0] * amp[1].conj()],
        [amp[1] * amp[0].conj(), amp[1] * amp[1].conj()],
    ];
    let cycle = Cycle {
        spec: &sub,
        reset_keep,
        psi,
    };

    let mut report = ExperimentReport::new("qec", seed, &(spec, error))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rounds_table = Table::new(
        "rounds",
        &["round", "syndrome_1", "syndrome_2", "fidelity", "flipped_fidelity", "reset_coherence"],
    );
    let push_round = |t: &mut Table, r: &QecRound| {
        t.push(vec![
            r.round.to_string(),
            r.syndrome.0.to_string(),
            r.syndrome.1.to_string(),
            s(r.fidelity),
            s(r.flipped_fidelity),
            r.reset_coherence.map(s).unwrap_or_default(),
        ]);
    };

    let mut record = None;
    let mut fidelities = vec![1.0];
    match error {
        QecError::None | QecError::Flip(_) => {
            let mut flips = [false; 3];
            if let QecError::Flip(roles) = error {
                for &r in roles {
                    flips[[DATA, DONOR, STRONG].iter().position(|&q| q == role_qubit(r)).expect("role")] = true;
                }
            }
            let mut bus = cycle.new_bus(true)?;
            let mut last = 1.0;
            for k in 0..spec.rounds {
                let r = cycle.round(&mut bus, k, &flips, &mut rng)?;
                push_round(&mut rounds_table, &r);
                fidelities.push(r.fidelity);
                last = r.fidelity;
            }
            record = bus.record.take();
            report.fit("final_fidelity", last, None, "");
            let ideal = spec.gate_error == 0.0;
            let weight = flips.iter().filter(|&&f| f).count();
            if ideal && spec.reset.is_none() && weight == 0 {
                report.check(
                    "identity",
                    last >= 1.0 - 1e-6,
                    format!("fidelity {last:.9}, expected ≥ 1 − 1e−6"),
                );
            } else if ideal && weight == 1 && spec.reset.is_none() {
                report.check(
                    "single-flip-corrected",
                    last >= 0.99,
                    format!("fidelity {last:.6}, expected ≥ 0.99"),
                );
            } else if ideal && weight <= 1 {
                report.check(
                    "rounds-with-reset",
                    last >= 0.98,
                    format!("fidelity after {} rounds {last:.6}, expected ≥ 0.98", spec.rounds),
                );
            }
        }
        QecError::Iid { p, shots } => {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::param("p", "must lie in [0, 1]"));
            }
            if *shots == 0 {
                return Err(Error::param("shots", "must be positive"));
            }
            let mut failures = 0usize;
            let mut hist = Table::new("shots", &["flip_weight", "shots", "logical_errors"]);
            let mut counts = [[0usize; 2]; 4];
            for shot in 0..*shots {
                let mut bus = cycle.new_bus(shot == 0)?;
                let mut last = None;
                let mut weight = 0;
                for k in 0..spec.rounds {
                    let flips = [0; 3].map(|_: i32| rng.random::<f64>() < *p);
                    weight += flips.iter().filter(|&&f| f).count();
                    let r = cycle.round(&mut bus, k, &flips, &mut rng)?;
                    if shot == 0 {
                        push_round(&mut rounds_table, &r);
                        fidelities.push(r.fidelity);
                    }
                    last = Some(r);
                }
                let r = last.expect("at least one round");
                let failed = r.flipped_fidelity > r.fidelity;
                failures += usize::from(failed);
                counts[weight.min(3)][usize::from(failed)] += 1;
                if shot == 0 {
                    record = bus.record.take();
                }
            }
            for (w, c) in counts.iter().enumerate() {
                hist.push(vec![w.to_string(), (c[0] + c[1]).to_string(), c[1].to_string()]);
            }
            let n = *shots as f64;
            let rate = failures as f64 / n;
            let q = 3.0 * p * p - 2.0 * p * p * p;
            let expected = 0.5 * (1.0 - (1.0 - 2.0 * q).powi(spec.rounds as i32));
            let sigma = (rate * (1.0 - rate) / n).sqrt();
            report.fit("logical_error_rate", rate, Some(sigma), "");
            report.fit("expected_logical_error_rate", expected, None, "");
            if spec.gate_error == 0.0 {
                let tol = 0.005f64.max(3.0 * (expected * (1.0 - expected) / n).sqrt());
                report.check(
                    "logical-error-rate",
                    (rate - expected).abs() <= tol,
                    format!("{rate:.4} ± {sigma:.4} over {shots} shots, expected {expected:.4} ± {tol:.4}"),
                );
            }
            report.tables.push(hist);
        }
    }
    if let Some(seq) = record {
        let schedule = sequences::compile(&seq)?;
        report.tables.push(Table::from_csv("gates", |w| schedule.write_csv(w))?);
    }
    report.tables.insert(0, rounds_table);
    report.plots.push(Plot {
        name: "fidelity".into(),
        title: "Data-qubit fidelity per round".into(),
        x_label: "round".into(),
        y_label: "fidelity".into(),
        log_x: false,
        log_y: false,
        series: vec![Series {
            label: "fidelity".into(),
            x: (0..fidelities.len()).map(|k| k as f64).collect(),
            y: fidelities,
            points: true,
        }],
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endor_peaks_match_transitions() {
        let reg = SpinRegister::phosphorus_donor();
        let r = run_endor_spectrum(&reg, 0.3442, (40.0, 80.0), 60.0).unwrap();
        let h = spin::build_hamiltonian(&reg, 0.3442).unwrap();
        let t: Vec<f64> = spin::transition_frequencies(&h, Channel::Nuclear(SpinRef::Donor))
            .iter()
            .map(|t| t.frequency_mhz)
            .filter(|f| (40.0..=80.0).contains(f))
            .collect();
        let peaks = r.table("peaks").unwrap().column("frequency_mhz").unwrap();
        assert_eq!(peaks, t);
        let w = r.table("peaks").unwrap().column("fwhm_khz").unwrap();
        assert!((w[0] - 60.0).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn endor_spectrum_maximum_sits_on_the_stick() {
        let r = run_endor_spectrum(&SpinRegister::phosphorus_donor(), 0.3442, (52.3, 52.7), 60.0).unwrap();
        let sp = r.table("spectrum").unwrap();
        let f = sp.column("frequency_mhz").unwrap();
        let y = sp.column("intensity").unwrap();
        let k = (0..y.len()).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
        let stick = r.table("peaks").unwrap().column("frequency_mhz").unwrap()[0];
        assert!((f[k] - stick).abs() <= 0.5 * 0.003 + 1e-12);
    }

    #[test]
    fn endor_presets_pass_their_checks() {
        for p in [EndorPreset::P31, EndorPreset::Si29Catalog, EndorPreset::EmptyBath] {
            let r = run_endor_preset(p, 0.3442, None, 60.0).unwrap();
            assert!(r.passed(), "{p:?}: {:?}", r.checks);
        }
    }

    #[test]
    fn catalog_register_holds_the_catalog_orbits() {
        let reg = endor_register(EndorPreset::Si29Catalog).unwrap();
        let mut a: Vec<f64> = reg.sites.iter().map(|s| s.hyperfine_zz_mhz).collect();
        a.dedup();
        assert!(a.iter().all(|x| [6.0, 4.03, 2.23].contains(x)));
        assert!(a.len() >= 3);
    }

    #[test]
    fn zero_bath_decay_fails_to_fit() {
        let mut site = SiteSpec::preset(2.23);
        site.empty_bath = true;
        let mut p = DecayParams::new(site, DdFamily::Hahn);
        p.trajectories = 50;
        assert!(matches!(run_t2n_decay(&p), Err(Error::Fit { .. })));
    }

    fn qec_ideal() -> QecRegisterSpec {
        QecRegisterSpec {
            reset: None,
            ..QecRegisterSpec::standard()
        }
    }

    #[test]
    fn qec_without_error_is_identity() {
        for (th, ph) in [(0.0, 0.0), (1.0, 0.3), (FRAC_PI_2, 2.0), (PI, 0.0)] {
            let spec = QecRegisterSpec {
                psi_theta_rad: th,
                psi_phi_rad: ph,
                ..qec_ideal()
            };
            let r = run_qec(&spec, &QecError::None, 3).unwrap();
            assert!(r.fit_value("final_fidelity").unwrap() > 1.0 - 1e-9);
            assert!(r.passed());
        }
    }

    #[test]
    fn qec_corrects_every_single_flip() {
        for role in [QecRole::Data, QecRole::Donor, QecRole::Strong] {
            let r = run_qec(&qec_ideal(), &QecError::Flip(vec![role]), 1).unwrap();
            assert!(r.fit_value("final_fidelity").unwrap() > 1.0 - 1e-9, "{role:?}");
            let syn = r.table("rounds").unwrap();
            let expected = match role {
                QecRole::Data => ("1", "1"),
                QecRole::Donor => ("1", "0"),
                QecRole::Strong => ("0", "1"),
            };
            assert_eq!((syn.rows[0][1].as_str(), syn.rows[0][2].as_str()), expected);
        }
    }

    #[test]
    fn qec_double_flip_is_a_logical_error() {
        let spec = QecRegisterSpec {
            rounds: 1,
            ..qec_ideal()
        };
        let r = run_qec(&spec, &QecError::Flip(vec![QecRole::Data, QecRole::Donor]), 1).unwrap();
        let t = r.table("rounds").unwrap();
        let f: f64 = t.rows[0][3].parse().unwrap();
        let fx: f64 = t.rows[0][4].parse().unwrap();
        assert!(fx > 1.0 - 1e-9 && f < 0.5, "{:?}", t.rows);
    }

    #[test]
    fn qec_gate_error_lowers_fidelity() {
        let spec = QecRegisterSpec {
            gate_error: 0.01,
            ..qec_ideal()
        };
        let f = run_qec(&spec, &QecError::None, 1).unwrap().fit_value("final_fidelity").unwrap();
        assert!(f < 0.999 && f > 0.5, "{f}");
    }

    #[test]
    fn qec_rejects_bad_roles() {
        let mut spec = qec_ideal();
        spec.ancilla_strong = spec.data;
        assert!(run_qec(&spec, &QecError::None, 1).is_err());
        let mut spec = qec_ideal();
        std::mem::swap(&mut spec.data, &mut spec.ancilla_strong);
        assert!(run_qec(&spec, &QecError::None, 1).is_err());
        let spec = QecRegisterSpec {
            mw_pi_us: 5.0,
            ..qec_ideal()
        };
        assert!(matches!(run_qec(&spec, &QecError::None, 1), Err(Error::Selectivity { .. })));
    }

    #[test]
    fn qec_gate_record_compiles() {
        let r = run_qec(&qec_ideal(), &QecError::None, 1).unwrap();
        let g = r.table("gates").unwrap();
        // Two rounds: 4 CNOTs × 3 + 6 basis pulses + 4 parity pulses each.
        assert_eq!(g.rows.len(), 2 * (12 + 6 + 4));
    }

    #[test]
    fn iid_shots_are_seed_deterministic() {
        let spec = QecRegisterSpec {
            rounds: 1,
            ..qec_ideal()
        };
        let e = QecError::Iid { p: 0.2, shots: 300 };
        let a = run_qec(&spec, &e, 5).unwrap();
        let b = run_qec(&spec, &e, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_writes_csv_svg_and_manifest() {
        let r = run_endor_preset(EndorPreset::P31, 0.3442, None, 60.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = r.write_dir(dir.path(), &[OutputFormat::Csv, OutputFormat::Svg], serde_json::json!({"extra": 1})).unwrap();
        assert!(files.iter().any(|f| f.ends_with("peaks.csv")));
        assert!(files.iter().any(|f| f.ends_with("spectrum.svg")));
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["extra"], 1);
        assert_eq!(m["passed"], true);
        assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    }
}
