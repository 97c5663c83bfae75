//! Command-line entry point: strict TOML configuration, seeding, scenario
//! dispatch and report output.
//!
//! Exit codes: 0 when the run completed and every declared check passed,
//! 2 when it completed with a failed check, 1 on any error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baths::{self, Calibration, DdFamily, ScanConfig};
use crate::charge::{DdMode, ProtectionParams, ProtocolWindow};
use crate::experiments::{
    self, DdCompareParams, DecayParams, EndorPreset, ExperimentReport, OutputFormat, QecError, QecRegisterSpec,
    QecRole, SiteSpec, T2VsAParams,
};
use crate::register::SpinRegister;
use crate::{units, Error, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DONORSIM_OUT";
const DEFAULT_OUT_ROOT: &str = "donorsim-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Endor,
    T2n,
    DdCompare,
    T2VsA,
    Protect,
    Qec,
    Calibrate,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Endor => "endor",
            Scenario::T2n => "t2n",
            Scenario::DdCompare => "dd-compare",
            Scenario::T2VsA => "t2-vs-a",
            Scenario::Protect => "protect",
            Scenario::Qec => "qec",
            Scenario::Calibrate => "calibrate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            formats: vec![OutputFormat::Csv, OutputFormat::Svg],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Constants {
    pub g_factor: f64,
    #[serde(rename = "gamma_p31_MHz_per_T")]
    pub gamma_p31_mhz_per_t: f64,
    #[serde(rename = "gamma_si29_MHz_per_T")]
    pub gamma_si29_mhz_per_t: f64,
    #[serde(rename = "hyperfine_p31_MHz")]
    pub hyperfine_p31_mhz: f64,
    pub lattice_constant_nm: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            g_factor: units::DEFAULT_G_FACTOR,
            gamma_p31_mhz_per_t: units::GAMMA_P31_MHZ_PER_T,
            gamma_si29_mhz_per_t: units::GAMMA_SI29_MHZ_PER_T,
            hyperfine_p31_mhz: units::HYPERFINE_P31_MHZ,
            lattice_constant_nm: units::SILICON_LATTICE_NM,
        }
    }
}

impl Constants {
    /// Apply the constants to a register built from the defaults.
    pub fn apply(&self, register: SpinRegister) -> SpinRegister {
        let mut r = register.with_g_factor(self.g_factor);
        if let Some(d) = &mut r.donor {
            d.gyromagnetic_mhz_per_t = self.gamma_p31_mhz_per_t;
            d.hyperfine_mhz = self.hyperfine_p31_mhz;
        }
        for s in &mut r.sites {
            s.gyromagnetic_mhz_per_t = self.gamma_si29_mhz_per_t;
        }
        r.lattice_constant_nm = self.lattice_constant_nm;
        r
    }

    fn is_default(&self) -> bool {
        *self == Self::default()
    }
}

/// Bath constants: loaded from a calibration file, then overridden key by key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub file: Option<PathBuf>,
    pub r0: Option<f64>,
    #[serde(rename = "linewidth_MHz")]
    pub linewidth_mhz: Option<f64>,
    pub t_far_s: Option<f64>,
    pub far_correlation_s: Option<f64>,
}

impl CalibrationConfig {
    pub fn resolve(&self, base_dir: &Path) -> Result<Calibration> {
        let mut cal = match &self.file {
            Some(f) => {
                let path = base_dir.join(f);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("calibration.file {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("calibration.file {}: {e}", path.display())))?
            }
            None => Calibration::default(),
        };
        if let Some(v) = self.r0 {
            cal.rate_law.r0 = v;
        }
        if let Some(v) = self.linewidth_mhz {
            cal.rate_law.linewidth_mhz = v;
        }
        if let Some(v) = self.t_far_s {
            cal.t_far_s = v;
        }
        if let Some(v) = self.far_correlation_s {
            cal.far_correlation_s = v;
        }
        Ok(cal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EndorConfig {
    pub preset: EndorPreset,
    #[serde(rename = "field_mT")]
    pub field_mt: f64,
    #[serde(rename = "rf_min_MHz")]
    pub rf_min_mhz: Option<f64>,
    #[serde(rename = "rf_max_MHz")]
    pub rf_max_mhz: Option<f64>,
    #[serde(rename = "linewidth_kHz")]
    pub linewidth_khz: f64,
}

impl Default for EndorConfig {
    fn default() -> Self {
        Self {
            preset: EndorPreset::P31,
            field_mt: 344.2,
            rf_min_mhz: None,
            rf_max_mhz: None,
            linewidth_khz: 60.0,
        }
    }
}

/// Probe site shared by the decay scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct T2nConfig {
    #[serde(rename = "A_MHz")]
    pub a_mhz: f64,
    pub configuration: usize,
    /// `hahn`, `cpmg`, `xy4` or `pi-wahuha`.
    pub family: String,
    pub n_pulses: usize,
    pub trajectories: usize,
    pub points: usize,
    pub delays_s: Option<Vec<f64>>,
    pub empty_bath: bool,
    pub cluster_radius_nm: f64,
}

impl Default for T2nConfig {
    fn default() -> Self {
        Self {
            a_mhz: 4.03,
            configuration: 0,
            family: "hahn".into(),
            n_pulses: 1,
            trajectories: baths::DEFAULT_TRAJECTORIES,
            points: 24,
            delays_s: None,
            empty_bath: false,
            cluster_radius_nm: ScanConfig::default().cluster_radius_nm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdCompareConfig {
    #[serde(rename = "A_MHz")]
    pub a_mhz: f64,
    pub configuration: usize,
    /// Family labels: `hahn`, `cpmg-N`, `xy4`, `pi-wahuha`.
    pub families: Vec<String>,
    pub trajectories: usize,
    pub points: usize,
    pub cluster_radius_nm: f64,
}

impl Default for DdCompareConfig {
    fn default() -> Self {
        let p = DdCompareParams::preset();
        Self {
            a_mhz: p.site.a_mhz,
            configuration: p.site.configuration,
            families: p.families.iter().map(DdFamily::label).collect(),
            trajectories: p.trajectories,
            points: p.points,
            cluster_radius_nm: p.site.scan.cluster_radius_nm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct T2VsAConfig {
    #[serde(rename = "A_MHz")]
    pub a_mhz: Vec<f64>,
    pub configurations: usize,
    pub cluster_radius_nm: f64,
}

impl Default for T2VsAConfig {
    fn default() -> Self {
        let p = T2VsAParams::default();
        Self {
            a_mhz: p.a_values_mhz,
            configurations: p.scan.configurations,
            cluster_radius_nm: p.scan.cluster_radius_nm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub configurations: usize,
    pub cluster_radius_nm: f64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        let s = ScanConfig::default();
        Self {
            configurations: s.configurations,
            cluster_radius_nm: s.cluster_radius_nm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetName {
    Set,
    Laser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DdModeName {
    Synchronized,
    FreeRunning,
}

/// Protection scenario; unset keys keep the preset's values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtectConfig {
    pub preset: PresetName,
    pub cycles: Option<usize>,
    /// Length of the first (ionising) window of each cycle.
    pub ionize_window_us: Option<f64>,
    /// Length of the second (recapture) window of each cycle.
    pub capture_window_us: Option<f64>,
    pub tau_ion_us: Option<f64>,
    pub tau_cap_us: Option<f64>,
    #[serde(rename = "hyperfine_MHz")]
    pub hyperfine_mhz: Option<f64>,
    #[serde(rename = "dd_rate_MHz")]
    pub dd_rate_mhz: Option<f64>,
    pub dd_mode: Option<DdModeName>,
    pub pulse_error: Option<f64>,
    pub nuclear_wahuha_tau_us: Option<f64>,
    pub bulk_t2_us: Option<f64>,
    pub trajectories: Option<usize>,
    pub samples_per_window: Option<usize>,
}

impl Default for ProtectConfig {
    fn default() -> Self {
        Self {
            preset: PresetName::Set,
            cycles: None,
            ionize_window_us: None,
            capture_window_us: None,
            tau_ion_us: None,
            tau_cap_us: None,
            hyperfine_mhz: None,
            dd_rate_mhz: None,
            dd_mode: None,
            pulse_error: None,
            nuclear_wahuha_tau_us: None,
            bulk_t2_us: None,
            trajectories: None,
            samples_per_window: None,
        }
    }
}

impl ProtectConfig {
    pub fn params(&self, seed: u64) -> ProtectionParams {
        let mut p = match self.preset {
            PresetName::Set => ProtectionParams::set(),
            PresetName::Laser => ProtectionParams::laser(),
        };
        let set = |w: &mut ProtocolWindow, v: Option<f64>| {
            if let Some(v) = v {
                w.duration_us = v;
            }
        };
        set(&mut p.windows[0], self.ionize_window_us);
        set(&mut p.windows[1], self.capture_window_us);
        p.cycles = self.cycles.unwrap_or(p.cycles);
        p.tau_ion_us = self.tau_ion_us.unwrap_or(p.tau_ion_us);
        p.tau_cap_us = self.tau_cap_us.unwrap_or(p.tau_cap_us);
        p.hyperfine_mhz = self.hyperfine_mhz.unwrap_or(p.hyperfine_mhz);
        p.dd_rate_mhz = self.dd_rate_mhz.unwrap_or(p.dd_rate_mhz);
        if let Some(m) = self.dd_mode {
            p.dd_mode = match m {
                DdModeName::Synchronized => DdMode::Synchronized,
                DdModeName::FreeRunning => DdMode::FreeRunning,
            };
        }
        p.pulse_error = self.pulse_error.unwrap_or(p.pulse_error);
        if self.nuclear_wahuha_tau_us.is_some() {
            p.nuclear_wahuha_tau_us = self.nuclear_wahuha_tau_us;
        }
        p.bulk_t2_us = self.bulk_t2_us.unwrap_or(p.bulk_t2_us);
        p.trajectories = self.trajectories.unwrap_or(p.trajectories);
        p.samples_per_window = self.samples_per_window.unwrap_or(p.samples_per_window);
        p.seed = seed;
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QecErrorName {
    None,
    Flip,
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QecConfig {
    pub error: QecErrorName,
    /// Qubits flipped when `error = "flip"`.
    pub flip: Vec<QecRole>,
    pub p: f64,
    pub shots: usize,
    pub rounds: usize,
    pub gate_error: f64,
    pub mw_pi_us: f64,
    pub rf_pi_us: f64,
    pub reset: bool,
    pub reset_trajectories: usize,
    #[serde(rename = "data_A_MHz")]
    pub data_a_mhz: f64,
    #[serde(rename = "strong_A_MHz")]
    pub strong_a_mhz: f64,
    pub psi_theta_rad: f64,
    pub psi_phi_rad: f64,
}

impl Default for QecConfig {
    fn default() -> Self {
        let s = QecRegisterSpec::standard();
        Self {
            error: QecErrorName::None,
            flip: vec![QecRole::Data],
            p: 0.1,
            shots: 10_000,
            rounds: s.rounds,
            gate_error: s.gate_error,
            mw_pi_us: s.mw_pi_us,
            rf_pi_us: s.rf_pi_us,
            reset: true,
            reset_trajectories: s.reset.as_ref().map_or(10_000, |r| r.trajectories),
            data_a_mhz: s.register.sites[0].hyperfine_zz_mhz,
            strong_a_mhz: s.register.sites[1].hyperfine_zz_mhz,
            psi_theta_rad: s.psi_theta_rad,
            psi_phi_rad: s.psi_phi_rad,
        }
    }
}

impl QecConfig {
    pub fn spec(&self, constants: &Constants, seed: u64) -> (QecRegisterSpec, QecError) {
        let mut s = QecRegisterSpec::standard();
        s.register.sites[0].hyperfine_zz_mhz = self.data_a_mhz;
        s.register.sites[0].hyperfine_zx_mhz = 0.1 * self.data_a_mhz;
        s.register.sites[1].hyperfine_zz_mhz = self.strong_a_mhz;
        s.register.sites[1].hyperfine_zx_mhz = 0.1 * self.strong_a_mhz;
        s.register = constants.apply(s.register);
        s.rounds = self.rounds;
        s.gate_error = self.gate_error;
        s.mw_pi_us = self.mw_pi_us;
        s.rf_pi_us = self.rf_pi_us;
        s.psi_theta_rad = self.psi_theta_rad;
        s.psi_phi_rad = self.psi_phi_rad;
        s.reset = if self.reset {
            s.reset.map(|r| ProtectionParams {
                trajectories: self.reset_trajectories,
                seed,
                ..r
            })
        } else {
            None
        };
        let error = match self.error {
            QecErrorName::None => QecError::None,
            QecErrorName::Flip => QecError::Flip(self.flip.clone()),
            QecErrorName::Iid => QecError::Iid {
                p: self.p,
                shots: self.shots,
            },
        };
        (s, error)
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub constants: Constants,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub endor: EndorConfig,
    #[serde(default)]
    pub t2n: T2nConfig,
    #[serde(default)]
    pub dd_compare: DdCompareConfig,
    #[serde(default)]
    pub t2_vs_a: T2VsAConfig,
    #[serde(default)]
    pub protect: ProtectConfig,
    #[serde(default)]
    pub qec: QecConfig,
    #[serde(default)]
    pub calibrate: CalibrateConfig,
}

fn default_seed() -> u64 {
    1
}

impl RunConfig {
    pub fn defaults(scenario: Scenario) -> Self {
        Self {
            scenario,
            seed: default_seed(),
            output: Default::default(),
            constants: Default::default(),
            calibration: Default::default(),
            endor: Default::default(),
            t2n: Default::default(),
            dd_compare: Default::default(),
            t2_vs_a: Default::default(),
            protect: Default::default(),
            qec: Default::default(),
            calibrate: Default::default(),
        }
    }
}

/// Append a hint when an unknown key differs from a known one only in its
/// unit suffix.
fn unit_hint(message: &str) -> Option<String> {
    let rest = message.split("unknown field `").nth(1)?;
    let key = rest.split('`').next()?;
    let expected: Vec<&str> = rest.split("expected").nth(1)?.split('`').skip(1).step_by(2).collect();
    let stem = |k: &str| k.rsplit_once('_').map(|(s, _)| s.to_ascii_lowercase());
    let k_stem = stem(key)?;
    let m = expected.iter().find(|e| stem(e).as_deref() == Some(k_stem.as_str()) && **e != key)?;
    Some(format!("unit-suffix mismatch: `{key}` should be `{m}`"))
}

/// Parse a strict configuration document. Errors carry the line, column
/// and offending key.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let line = e
            .span()
            .map(|s| format!("line {}: ", text[..s.start].matches('\n').count() + 1))
            .unwrap_or_default();
        match unit_hint(e.message()) {
            Some(h) => Error::Config(format!("{line}{h}\n{msg}")),
            None => Error::Config(format!("{line}{msg}")),
        }
    })
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn parse_family(label: &str, n_pulses: Option<usize>) -> Result<DdFamily> {
    let l = label.to_ascii_lowercase();
    match (l.as_str(), n_pulses) {
        ("hahn", _) => Ok(DdFamily::Hahn),
        ("xy4" | "xy-4", _) => Ok(DdFamily::Xy4),
        ("pi-wahuha", _) => Ok(DdFamily::PiWahuha),
        ("cpmg", Some(n)) if n >= 1 => Ok(DdFamily::Cpmg(n)),
        _ => match l.strip_prefix("cpmg-").and_then(|n| n.parse().ok()) {
            Some(n) if n >= 1 => Ok(DdFamily::Cpmg(n)),
            _ => Err(Error::Config(format!("unknown refocusing family `{label}`"))),
        },
    }
}

fn scan_config(seed: u64, cluster_radius_nm: f64) -> ScanConfig {
    ScanConfig {
        cluster_radius_nm,
        seed,
        ..ScanConfig::default()
    }
}

/// Run the configured scenario and write its report into `out_dir`.
/// Relative calibration paths resolve against `base_dir`.
pub fn dispatch(cfg: &RunConfig, out_dir: &Path, base_dir: &Path) -> Result<ExperimentReport> {
    let cal = cfg.calibration.resolve(base_dir)?;
    let seed = cfg.seed;
    if !cfg.constants.is_default() && !matches!(cfg.scenario, Scenario::Endor | Scenario::Qec) {
        return Err(Error::Config(
            "[constants] only applies to the endor and qec scenarios; bath scenarios use the calibrated defaults".into(),
        ));
    }
    let mut calibration_written = None;
    let report = match cfg.scenario {
        Scenario::Endor => {
            let e = &cfg.endor;
            let field_t = e.field_mt * 1e-3;
            let reg = cfg.constants.apply(experiments::endor_register(e.preset)?);
            let (lo, hi) = experiments::endor_default_range(e.preset, field_t);
            let range = (e.rf_min_mhz.unwrap_or(lo), e.rf_max_mhz.unwrap_or(hi));
            if cfg.constants.is_default() {
                experiments::run_endor_preset(e.preset, field_t, Some(range), e.linewidth_khz)?
            } else {
                experiments::run_endor_spectrum(&reg, field_t, range, e.linewidth_khz)?
            }
        }
        Scenario::T2n => {
            let t = &cfg.t2n;
            let family = parse_family(&t.family, Some(t.n_pulses))?;
            let site = SiteSpec {
                a_mhz: t.a_mhz,
                configuration: t.configuration,
                empty_bath: t.empty_bath,
                scan: scan_config(seed, t.cluster_radius_nm),
                calibration: cal,
            };
            experiments::run_t2n_decay(&DecayParams {
                site,
                family,
                trajectories: t.trajectories,
                delays_s: t.delays_s.clone(),
                points: t.points,
                seed,
            })?
        }
        Scenario::DdCompare => {
            let d = &cfg.dd_compare;
            let families = d.families.iter().map(|f| parse_family(f, None)).collect::<Result<_>>()?;
            experiments::run_dd_compare(&DdCompareParams {
                site: SiteSpec {
                    a_mhz: d.a_mhz,
                    configuration: d.configuration,
                    empty_bath: false,
                    scan: scan_config(seed, d.cluster_radius_nm),
                    calibration: cal,
                },
                families,
                trajectories: d.trajectories,
                points: d.points,
                seed,
            })?
        }
        Scenario::T2VsA => {
            let t = &cfg.t2_vs_a;
            experiments::run_t2_vs_a(&T2VsAParams {
                a_values_mhz: t.a_mhz.clone(),
                scan: ScanConfig {
                    configurations: t.configurations,
                    ..scan_config(seed, t.cluster_radius_nm)
                },
                calibration: cal,
            })?
        }
        Scenario::Protect => experiments::run_protection(&cfg.protect.params(seed))?,
        Scenario::Qec => {
            let (spec, error) = cfg.qec.spec(&cfg.constants, seed);
            experiments::run_qec(&spec, &error, seed)?
        }
        Scenario::Calibrate => {
            let c = &cfg.calibrate;
            let scan = ScanConfig {
                configurations: c.configurations,
                ..scan_config(seed, c.cluster_radius_nm)
            };
            let (fitted, report) = experiments::run_calibration(&scan, &cal)?;
            calibration_written = Some(fitted);
            report
        }
    };
    let in_force = calibration_written.unwrap_or(cal);
    if let Some(c) = calibration_written {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("calibration.json"), serde_json::to_string_pretty(&c)? + "\n")?;
    }
    let extra = serde_json::json!({
        "resolved_config": cfg,
        "calibration": in_force,
        "calibration_anchors": {
            "bulk_t2_s": baths::BULK_T2_S,
            "plateau_t2_s": baths::PLATEAU_T2_S,
            "plateau_a_mhz": baths::PLATEAU_A_MHZ,
        },
    });
    report.write_dir(out_dir, &cfg.output.formats, extra)?;
    Ok(report)
}

#[derive(Debug, Parser)]
#[command(name = "donorsim", version, about = "Phosphorus donor spin-register simulator")]
struct Cli {
    /// Strict TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report directory; defaults to $DONORSIM_OUT/<scenario>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// ENDOR stick spectrum and Gaussian-broadened lines.
    Endor,
    /// Decay of one probe ²⁹Si with the stretched-exponential fit.
    T2n,
    /// T₂ₙ across refocusing families on the same bath.
    DdCompare,
    /// Median T₂ₙ against hyperfine coupling.
    T2VsA,
    /// Read/load charge cycling with and without electron decoupling.
    Protect,
    /// Three-qubit phase-flip code on the register.
    Qec,
    /// Fit the bath constants to the anchors and write calibration.json.
    Calibrate,
}

impl Command {
    fn scenario(&self) -> Scenario {
        match self {
            Command::Endor => Scenario::Endor,
            Command::T2n => Scenario::T2n,
            Command::DdCompare => Scenario::DdCompare,
            Command::T2VsA => Scenario::T2VsA,
            Command::Protect => Scenario::Protect,
            Command::Qec => Scenario::Qec,
            Command::Calibrate => Scenario::Calibrate,
        }
    }
}

/// Resolve configuration and output directory from the parsed arguments.
fn resolve(cli: &Cli) -> Result<(RunConfig, PathBuf, PathBuf)> {
    let scenario = cli.command.scenario();
    let (mut cfg, base_dir) = match &cli.config {
        Some(path) => {
            let cfg = parse_config(path)?;
            if cfg.scenario != scenario {
                return Err(Error::Config(format!(
                    "{}: scenario `{}` does not match subcommand `{}`",
                    path.display(),
                    cfg.scenario.name(),
                    scenario.name()
                )));
            }
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (cfg, base)
        }
        None => (RunConfig::defaults(scenario), PathBuf::new()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = match (&cli.out, &cfg.output.dir) {
        (Some(o), _) => o.clone(),
        (None, Some(d)) => base_dir.join(d),
        (None, None) => {
            let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from);
            root.join(scenario.name())
        }
    };
    cfg.output.dir = Some(out.clone());
    Ok((cfg, out, base_dir))
}

/// Full command-line run; returns the process exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = resolve(&cli).and_then(|(cfg, out, base)| dispatch(&cfg, &out, &base).map(|r| (r, out)));
    match result {
        Ok((report, out)) => {
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("report written to {}", out.display());
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charge::WindowKind;

    #[test]
    fn minimal_config_resolves_defaults() {
        let cfg = parse_config_str("scenario = \"endor\"\nseed = 9\n").unwrap();
        assert_eq!(cfg.scenario, Scenario::Endor);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.endor, EndorConfig::default());
    }

    #[test]
    fn misspelled_key_is_named_with_its_line() {
        let err = parse_config_str("scenario = \"endor\"\n[endor]\nfeild_mT = 300\n").unwrap_err().to_string();
        assert!(err.contains("feild_mT"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn unit_suffix_mismatch_is_reported() {
        let err = parse_config_str("scenario = \"endor\"\n[endor]\nfield_T = 0.3442\n").unwrap_err().to_string();
        assert!(err.contains("unit-suffix mismatch"), "{err}");
        assert!(err.contains("field_mT"), "{err}");
    }

    #[test]
    fn missing_scenario_is_an_error() {
        let err = parse_config_str("seed = 1\n").unwrap_err().to_string();
        assert!(err.contains("scenario"), "{err}");
    }

    #[test]
    fn unknown_section_is_rejected() {
        assert!(parse_config_str("scenario = \"qec\"\n[qecc]\np = 0.1\n").is_err());
    }

    #[test]
    fn field_in_millitesla_becomes_tesla() {
        let cfg = parse_config_str("scenario = \"endor\"\n[endor]\nfield_mT = 344.2\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = dispatch(&cfg, dir.path(), Path::new("")).unwrap();
        assert_eq!(r.config["field_t"], serde_json::json!(0.3442));
        assert!(r.passed());
    }

    #[test]
    fn family_labels_parse() {
        assert_eq!(parse_family("cpmg-8", None).unwrap(), DdFamily::Cpmg(8));
        assert_eq!(parse_family("cpmg", Some(4)).unwrap(), DdFamily::Cpmg(4));
        assert_eq!(parse_family("XY4", None).unwrap(), DdFamily::Xy4);
        assert!(parse_family("cpmg-0", None).is_err());
        assert!(parse_family("udd", None).is_err());
    }

    #[test]
    fn protect_overrides_apply() {
        let cfg =
            parse_config_str("scenario = \"protect\"\n[protect]\ndd_rate_MHz = 0.1\ndd_mode = \"free-running\"\n")
                .unwrap();
        let p = cfg.protect.params(4);
        assert_eq!(p.dd_rate_mhz, 0.1);
        assert_eq!(p.dd_mode, DdMode::FreeRunning);
        assert_eq!(p.seed, 4);
        assert_eq!(p.windows[0].kind, WindowKind::Read);
    }

    #[test]
    fn constants_apply_to_registers() {
        let c = Constants {
            hyperfine_p31_mhz: 100.0,
            ..Default::default()
        };
        let r = c.apply(SpinRegister::phosphorus_donor());
        assert_eq!(r.donor.unwrap().hyperfine_mhz, 100.0);
    }

    #[test]
    fn calibration_overrides_apply() {
        let c = CalibrationConfig {
            t_far_s: Some(3.0),
            ..Default::default()
        };
        let cal = c.resolve(Path::new("")).unwrap();
        assert_eq!(cal.t_far_s, 3.0);
        assert_eq!(cal.rate_law, Calibration::default().rate_law);
    }
}
