//! Timed multi-channel pulse sequences: representation, validation, the
//! sequence library and exact simulation on small registers.
//!
//! Pulses are ideal (instantaneous, optionally conditioned on other spins) or
//! finite (Rabi drive evolved together with the register Hamiltonian in the
//! rotating frame of the carrier). All times are μs.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::{ChargeState, SpinRef, SpinRegister};
use crate::spin::{self, Frame, Hamiltonian, HamiltonianOptions, QuantumState, C64};

const TIME_EPS_US: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PulseChannel {
    Mw,
    Rf,
    Laser,
    Gate,
    Delay,
}

impl PulseChannel {
    fn carries_rotation(self) -> bool {
        matches!(self, PulseChannel::Mw | PulseChannel::Rf)
    }

    /// Channel used to address a spin.
    pub fn for_spin(spin: SpinRef) -> Self {
        match spin {
            SpinRef::Electron => PulseChannel::Mw,
            _ => PulseChannel::Rf,
        }
    }
}

impl fmt::Display for PulseChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PulseChannel::Mw => "mw",
            PulseChannel::Rf => "rf",
            PulseChannel::Laser => "laser",
            PulseChannel::Gate => "gate",
            PulseChannel::Delay => "delay",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    MinusX,
    MinusY,
}

impl Axis {
    /// Azimuthal phase of the rotation axis.
    pub fn phase(self) -> f64 {
        match self {
            Axis::X => 0.0,
            Axis::Y => FRAC_PI_2,
            Axis::MinusX => PI,
            Axis::MinusY => 3.0 * FRAC_PI_2,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::X => "+x",
            Axis::Y => "+y",
            Axis::MinusX => "-x",
            Axis::MinusY => "-y",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpinState {
    Up,
    Down,
}

/// "Only when `spin` is in `state`".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub spin: SpinRef,
    pub state: SpinState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PulseModel {
    #[default]
    Ideal,
    Finite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseEvent {
    pub channel: PulseChannel,
    pub start_us: f64,
    pub duration_us: f64,
    #[serde(default)]
    pub axis: Option<Axis>,
    #[serde(default)]
    pub angle_rad: f64,
    /// Spins rotated by the pulse; empty means the sequence's addressed spin.
    #[serde(default)]
    pub targets: Vec<SpinRef>,
    #[serde(default)]
    pub conditions: Vec<Condition>,
    /// Carrier frequency for finite pulses, MHz. Defaults to the resonance of
    /// the conditioned transition.
    #[serde(default)]
    pub frequency_mhz: Option<f64>,
    #[serde(default)]
    pub model: PulseModel,
    #[serde(default)]
    pub label: String,
}

impl PulseEvent {
    pub fn pulse(channel: PulseChannel, start_us: f64, angle_rad: f64, axis: Axis) -> Self {
        Self {
            channel,
            start_us,
            duration_us: 0.0,
            axis: Some(axis),
            angle_rad,
            targets: Vec::new(),
            conditions: Vec::new(),
            frequency_mhz: None,
            model: PulseModel::Ideal,
            label: String::new(),
        }
    }

    /// A laser, gate-voltage or delay window.
    pub fn window(channel: PulseChannel, start_us: f64, duration_us: f64, label: &str) -> Self {
        Self {
            channel,
            start_us,
            duration_us,
            axis: None,
            angle_rad: 0.0,
            targets: Vec::new(),
            conditions: Vec::new(),
            frequency_mhz: None,
            model: PulseModel::Ideal,
            label: label.to_string(),
        }
    }

    pub fn on(mut self, spin: SpinRef) -> Self {
        self.targets = vec![spin];
        self.channel = PulseChannel::for_spin(spin);
        self
    }

    pub fn on_all(mut self, spins: &[SpinRef]) -> Self {
        self.targets = spins.to_vec();
        self
    }

    pub fn when(mut self, spin: SpinRef, state: SpinState) -> Self {
        self.conditions.push(Condition { spin, state });
        self
    }

    pub fn finite(mut self, duration_us: f64) -> Self {
        self.duration_us = duration_us;
        self.model = PulseModel::Finite;
        self
    }

    pub fn at_frequency(mut self, frequency_mhz: f64) -> Self {
        self.frequency_mhz = Some(frequency_mhz);
        self
    }

    pub fn labelled(mut self, label: &str) -> Self {
        self.label = label.to_string();
        self
    }

    pub fn end_us(&self) -> f64 {
        self.start_us + self.duration_us
    }

    pub fn is_pulse(&self) -> bool {
        self.channel.carries_rotation() && self.axis.is_some()
    }

    pub fn is_pi(&self) -> bool {
        self.is_pulse() && (self.angle_rad - PI).abs() < 1e-9
    }

    fn describe(&self, index: usize) -> String {
        if self.label.is_empty() {
            format!("#{index} ({} at {} us)", self.channel, self.start_us)
        } else {
            format!("#{index} '{}' ({} at {} us)", self.label, self.channel, self.start_us)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SyncConstraint {
    /// The two events must not overlap in time.
    NoOverlap { first: usize, second: usize },
    /// The two events must start together.
    CoScheduled { first: usize, second: usize },
    /// No `pulses` event may fall strictly inside a `windows` event whose
    /// label matches (any label when `None`).
    Exclude {
        pulses: PulseChannel,
        windows: PulseChannel,
        label: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Sequence {
    pub name: String,
    pub events: Vec<PulseEvent>,
    #[serde(default)]
    pub cycle_boundaries_us: Vec<f64>,
    #[serde(default)]
    pub constraints: Vec<SyncConstraint>,
    /// Detection time; the end of the sequence when absent.
    #[serde(default)]
    pub echo_us: Option<f64>,
}

/// Label of the excitation pulse that opens a library sequence.
pub const EXCITE: &str = "excite";

impl Sequence {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, event: PulseEvent) -> usize {
        self.events.push(event);
        self.events.len() - 1
    }

    /// Point every untargeted pulse at `spin` on its channel.
    pub fn addressing(mut self, spin: SpinRef) -> Self {
        for e in self.events.iter_mut().filter(|e| e.is_pulse() && e.targets.is_empty()) {
            e.targets = vec![spin];
            e.channel = PulseChannel::for_spin(spin);
        }
        self
    }

    /// Point every untargeted pulse at all of `spins` (non-selective pulse).
    pub fn addressing_all(mut self, spins: &[SpinRef], channel: PulseChannel) -> Self {
        for e in self.events.iter_mut().filter(|e| e.is_pulse() && e.targets.is_empty()) {
            e.targets = spins.to_vec();
            e.channel = channel;
        }
        self
    }

    /// Replace every ideal pulse by a finite pulse of the given π duration
    /// (π/2 pulses take half), centred on the ideal pulse time.
    pub fn with_finite_pulses(mut self, pi_duration_us: f64) -> Self {
        for e in self.events.iter_mut().filter(|e| e.is_pulse()) {
            let d = pi_duration_us * e.angle_rad / PI;
            e.start_us -= d / 2.0;
            e.duration_us = d;
            e.model = PulseModel::Finite;
        }
        self
    }

    pub fn duration_us(&self) -> f64 {
        let last = self.events.iter().map(PulseEvent::end_us).fold(0.0, f64::max);
        let cycle = self.cycle_boundaries_us.last().copied().unwrap_or(0.0);
        last.max(cycle).max(self.echo_us.unwrap_or(0.0))
    }

    /// The refocusing part of a sequence (everything except the opening
    /// excitation pulse).
    pub fn refocusing_block(&self) -> Sequence {
        Sequence {
            events: self.events.iter().filter(|e| e.label != EXCITE).cloned().collect(),
            constraints: Vec::new(),
            ..self.clone()
        }
    }

    /// Times of π pulses in the refocusing block.
    pub fn pi_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self
            .events
            .iter()
            .filter(|e| e.is_pi() && e.label != EXCITE)
            .map(|e| e.start_us + e.duration_us / 2.0)
            .collect();
        t.sort_by(f64::total_cmp);
        t
    }

    pub fn shifted(&self, offset_us: f64) -> Sequence {
        let mut out = self.clone();
        for e in &mut out.events {
            e.start_us += offset_us;
        }
        for b in &mut out.cycle_boundaries_us {
            *b += offset_us;
        }
        out.echo_us = out.echo_us.map(|t| t + offset_us);
        out
    }

    pub fn count_pulses(&self, angle: f64) -> usize {
        self.events
            .iter()
            .filter(|e| e.is_pulse() && (e.angle_rad - angle).abs() < 1e-9)
            .count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, "must be positive"))
    }
}

/// π/2 about X, then π pulses about Y at τ, 3τ, …, (2n−1)τ; echo at 2nτ.
pub fn cpmg(n: usize, tau_us: f64) -> Result<Sequence> {
    if n == 0 {
        return Err(Error::param("n", "at least one π pulse"));
    }
    positive("tau_us", tau_us)?;
    let axes = vec![Axis::Y; n];
    Ok(train(&format!("cpmg-{n}"), tau_us, &axes))
}

/// CPMG-4 timing with alternating X, Y, X, Y π pulses.
pub fn xy4(tau_us: f64) -> Result<Sequence> {
    positive("tau_us", tau_us)?;
    Ok(train("xy-4", tau_us, &[Axis::X, Axis::Y, Axis::X, Axis::Y]))
}

fn train(name: &str, tau: f64, axes: &[Axis]) -> Sequence {
    let mut seq = Sequence::new(name);
    seq.push(PulseEvent::pulse(PulseChannel::Mw, 0.0, FRAC_PI_2, Axis::X).labelled(EXCITE));
    for (k, &axis) in axes.iter().enumerate() {
        let t = (2 * k + 1) as f64 * tau;
        seq.push(PulseEvent::pulse(PulseChannel::Mw, t, PI, axis).labelled("refocus"));
    }
    let end = 2.0 * axes.len() as f64 * tau;
    seq.cycle_boundaries_us = vec![0.0, end];
    seq.echo_us = Some(end);
    seq
}

/// The π-WAHUHA cycle:
/// `Y_π τ X_π/2 τ X_π τ (−Y)_π/2 2τ Y_π 2τ Y_π/2 τ X_π τ (−X)_π/2 τ Y_π`.
///
/// The listed pulses span 10τ. The cycle adds a free interval τ before the
/// first and after the last pulse (12τ in total), which balances the
/// toggling-frame weights so static offsets and the dipolar coupling both
/// average out.
pub fn pi_wahuha(tau_us: f64) -> Result<Sequence> {
    positive("tau_us", tau_us)?;
    const LISTING: [(f64, f64, Axis); 9] = [
        (0.0, PI, Axis::Y),
        (1.0, FRAC_PI_2, Axis::X),
        (2.0, PI, Axis::X),
        (3.0, FRAC_PI_2, Axis::MinusY),
        (5.0, PI, Axis::Y),
        (7.0, FRAC_PI_2, Axis::Y),
        (8.0, PI, Axis::X),
        (9.0, FRAC_PI_2, Axis::MinusX),
        (10.0, PI, Axis::Y),
    ];
    let mut seq = Sequence::new("pi-wahuha");
    for (t, angle, axis) in LISTING {
        seq.push(PulseEvent::pulse(PulseChannel::Rf, (t + 1.0) * tau_us, angle, axis));
    }
    seq.cycle_boundaries_us = vec![0.0, 12.0 * tau_us];
    seq.echo_us = Some(12.0 * tau_us);
    Ok(seq)
}

/// Span of the listed π-WAHUHA pulses (first to last), 10τ.
pub fn pi_wahuha_pulse_span(tau_us: f64) -> f64 {
    10.0 * tau_us
}

/// Classic WAHUHA: `τ X τ −Y 2τ Y τ −X τ`, cycle 6τ.
pub fn wahuha(tau_us: f64) -> Result<Sequence> {
    positive("tau_us", tau_us)?;
    let mut seq = Sequence::new("wahuha");
    for (t, axis) in [(1.0, Axis::X), (2.0, Axis::MinusY), (4.0, Axis::Y), (5.0, Axis::MinusX)] {
        seq.push(PulseEvent::pulse(PulseChannel::Rf, t * tau_us, FRAC_PI_2, axis));
    }
    seq.cycle_boundaries_us = vec![0.0, 6.0 * tau_us];
    seq.echo_us = Some(6.0 * tau_us);
    Ok(seq)
}

/// Free interval between the ENDOR blocks and around the detection echo, μs.
pub const ENDOR_GAP_US: f64 = 1.0;

/// Davies ENDOR: selective MW π on the electron (conditioned on `mw_target`),
/// RF π on the nucleus at `rf_frequency_mhz`, then a two-pulse echo on the
/// same electron transition.
pub fn davies_endor(mw_target: Condition, rf_frequency_mhz: f64, rf_duration_us: f64) -> Result<Sequence> {
    positive("rf_duration_us", rf_duration_us)?;
    positive("rf_frequency_mhz", rf_frequency_mhz)?;
    let g = ENDOR_GAP_US;
    let selective = |t: f64, angle: f64, axis: Axis, label: &str| {
        PulseEvent::pulse(PulseChannel::Mw, t, angle, axis)
            .on(SpinRef::Electron)
            .when(mw_target.spin, mw_target.state)
            .labelled(label)
    };
    let mut seq = Sequence::new("davies-endor");
    seq.push(selective(0.0, PI, Axis::X, "mw-inversion"));
    seq.push(
        PulseEvent::pulse(PulseChannel::Rf, g, PI, Axis::X)
            .on(mw_target.spin)
            .finite(rf_duration_us)
            .at_frequency(rf_frequency_mhz)
            .labelled("rf"),
    );
    let t_det = 2.0 * g + rf_duration_us;
    seq.push(selective(t_det, FRAC_PI_2, Axis::X, "detect"));
    seq.push(selective(t_det + g, PI, Axis::Y, "detect-refocus"));
    seq.echo_us = Some(t_det + 2.0 * g);
    seq.cycle_boundaries_us = vec![0.0, t_det + 2.0 * g];
    Ok(seq)
}

/// Parameters of the electron–nuclear coherence-transfer measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub target: SpinRef,
    pub hyperfine_mhz: f64,
    pub mw_pi_us: f64,
}

impl TransferSpec {
    pub fn check_selectivity(&self) -> Result<()> {
        positive("mw_pi_us", self.mw_pi_us)?;
        let bandwidth = 1.0 / self.mw_pi_us;
        if bandwidth >= 0.5 * self.hyperfine_mhz.abs() {
            return Err(Error::Selectivity {
                bandwidth_mhz: bandwidth,
                hyperfine_mhz: self.hyperfine_mhz,
            });
        }
        Ok(())
    }
}

/// Coherence transfer to a nucleus and back: MW π/2 creates electron
/// coherence, RF π (electron ↓) and MW π (nucleus ↑) swap it onto the
/// nucleus, it is stored for `2τ_n` (optionally under the refocusing block of
/// `dd`, stretched over the storage time), then the swap is reversed and the
/// electron coherence is detected.
pub fn transfer_measure_t2n(spec: &TransferSpec, tau_n_us: f64, dd: Option<&Sequence>) -> Result<Sequence> {
    spec.check_selectivity()?;
    if !(tau_n_us >= 0.0) {
        return Err(Error::param("tau_n_us", "must be non-negative"));
    }
    let target = spec.target;
    let mw = |t: f64, angle: f64, axis: Axis, label: &str| {
        PulseEvent::pulse(PulseChannel::Mw, t, angle, axis)
            .on(SpinRef::Electron)
            .when(target, SpinState::Up)
            .labelled(label)
    };
    let rf = |t: f64, label: &str| {
        PulseEvent::pulse(PulseChannel::Rf, t, PI, Axis::X)
            .on(target)
            .when(SpinRef::Electron, SpinState::Down)
            .labelled(label)
    };
    let step = spec.mw_pi_us;
    let mut seq = Sequence::new("transfer-t2n");
    seq.push(mw(0.0, FRAC_PI_2, Axis::X, EXCITE));
    seq.push(rf(step, "swap-rf"));
    seq.push(mw(2.0 * step, PI, Axis::X, "swap-mw"));
    let store_start = 2.0 * step;
    let storage = 2.0 * tau_n_us;
    if let Some(dd) = dd {
        let block = dd.refocusing_block();
        let cycle = block.duration_us();
        if cycle > 0.0 && storage > 0.0 {
            let scale = storage / cycle;
            for e in block.events.iter().filter(|e| e.is_pulse()) {
                let mut ev = e.clone();
                ev.start_us = store_start + e.start_us * scale;
                ev.targets = vec![target];
                ev.channel = PulseChannel::Rf;
                ev.conditions.clear();
                ev.label = "storage-dd".to_string();
                seq.push(ev);
            }
        }
    }
    let back = store_start + storage;
    seq.push(mw(back + step, PI, Axis::X, "unswap-mw"));
    seq.push(rf(back + 2.0 * step, "unswap-rf"));
    seq.echo_us = Some(back + 3.0 * step);
    seq.cycle_boundaries_us = vec![0.0, store_start, back, back + 3.0 * step];
    Ok(seq)
}

/// Absolute-time, validated form of a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub name: String,
    pub events: Vec<PulseEvent>,
    pub cycle_boundaries_us: Vec<f64>,
    pub constraints: Vec<SyncConstraint>,
    pub echo_us: Option<f64>,
    pub total_us: f64,
}

impl Schedule {
    pub fn to_sequence(&self) -> Sequence {
        Sequence {
            name: self.name.clone(),
            events: self.events.clone(),
            cycle_boundaries_us: self.cycle_boundaries_us.clone(),
            constraints: self.constraints.clone(),
            echo_us: self.echo_us,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// RFC-4180 dump of the event table.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "index", "channel", "start_us", "duration_us", "axis", "angle_rad", "targets", "conditions", "model",
            "label",
        ])?;
        for (i, e) in self.events.iter().enumerate() {
            let targets: Vec<String> = e.targets.iter().map(ToString::to_string).collect();
            let conds: Vec<String> = e
                .conditions
                .iter()
                .map(|c| format!("{}={}", c.spin, if c.state == SpinState::Up { "up" } else { "down" }))
                .collect();
            w.write_record([
                i.to_string(),
                e.channel.to_string(),
                e.start_us.to_string(),
                e.duration_us.to_string(),
                e.axis.map(|a| a.to_string()).unwrap_or_default(),
                e.angle_rad.to_string(),
                targets.join(" "),
                conds.join(" "),
                format!("{:?}", e.model).to_lowercase(),
                e.label.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn overlaps(a: &PulseEvent, b: &PulseEvent) -> bool {
    if a.duration_us == 0.0 || b.duration_us == 0.0 {
        // Instantaneous events collide only when they coincide or one sits
        // strictly inside the other.
        let inside = |p: &PulseEvent, w: &PulseEvent| {
            p.start_us > w.start_us + TIME_EPS_US && p.start_us < w.end_us() - TIME_EPS_US
        };
        return (a.start_us - b.start_us).abs() < TIME_EPS_US || inside(a, b) || inside(b, a);
    }
    a.start_us < b.end_us() - TIME_EPS_US && b.start_us < a.end_us() - TIME_EPS_US
}

/// Validate and order a sequence. Errors name the violated constraint and
/// the events involved.
pub fn compile(seq: &Sequence) -> Result<Schedule> {
    for (i, e) in seq.events.iter().enumerate() {
        if !(e.start_us.is_finite() && e.start_us >= -TIME_EPS_US) {
            return Err(Error::Schedule(format!("{} starts before t = 0", e.describe(i))));
        }
        if !(e.duration_us.is_finite() && e.duration_us >= 0.0) {
            return Err(Error::Schedule(format!("{} has a negative duration", e.describe(i))));
        }
        if e.model == PulseModel::Finite && e.duration_us <= 0.0 {
            return Err(Error::Schedule(format!("{} is finite but has zero duration", e.describe(i))));
        }
    }
    // Sweep each channel in start order. An event overlapping any earlier
    // one also overlaps the earlier event reaching furthest, or coincides
    // with its immediate predecessor.
    let mut by_start: Vec<usize> = (0..seq.events.len())
        .filter(|&i| seq.events[i].channel != PulseChannel::Delay)
        .collect();
    by_start.sort_by(|&a, &b| {
        let (ea, eb) = (&seq.events[a], &seq.events[b]);
        (ea.channel as u8)
            .cmp(&(eb.channel as u8))
            .then(ea.start_us.total_cmp(&eb.start_us))
            .then(a.cmp(&b))
    });
    let mut reach: Option<usize> = None;
    for (k, &j) in by_start.iter().enumerate() {
        let b = &seq.events[j];
        let prev = k.checked_sub(1).map(|k| by_start[k]).filter(|&i| seq.events[i].channel == b.channel);
        if prev.is_none() {
            reach = None;
        }
        for i in [reach, prev].into_iter().flatten() {
            if overlaps(&seq.events[i], b) {
                let (lo, hi) = (i.min(j), i.max(j));
                return Err(Error::Schedule(format!(
                    "channel overlap: {} and {}",
                    seq.events[lo].describe(lo),
                    seq.events[hi].describe(hi)
                )));
            }
        }
        if reach.is_none_or(|r| b.end_us() > seq.events[r].end_us()) {
            reach = Some(j);
        }
    }
    let get = |i: usize| {
        seq.events
            .get(i)
            .ok_or_else(|| Error::Schedule(format!("constraint refers to missing event #{i}")))
    };
    for c in &seq.constraints {
        match c {
            SyncConstraint::NoOverlap { first, second } => {
                let (a, b) = (get(*first)?, get(*second)?);
                if overlaps(a, b) {
                    return Err(Error::Schedule(format!(
                        "no-overlap constraint violated: {} and {}",
                        a.describe(*first),
                        b.describe(*second)
                    )));
                }
            }
            SyncConstraint::CoScheduled { first, second } => {
                let (a, b) = (get(*first)?, get(*second)?);
                if (a.start_us - b.start_us).abs() > TIME_EPS_US {
                    return Err(Error::Schedule(format!(
                        "co-scheduling constraint violated: {} and {}",
                        a.describe(*first),
                        b.describe(*second)
                    )));
                }
            }
            SyncConstraint::Exclude { pulses, windows, label } => {
                for (wi, w) in seq.events.iter().enumerate() {
                    if w.channel != *windows || label.as_ref().is_some_and(|l| *l != w.label) {
                        continue;
                    }
                    for (pi, p) in seq.events.iter().enumerate() {
                        if p.channel != *pulses {
                            continue;
                        }
                        let inside = p.end_us() > w.start_us + TIME_EPS_US && p.start_us < w.end_us() - TIME_EPS_US;
                        if inside {
                            return Err(Error::Schedule(format!(
                                "synchronisation violated: {} falls inside {}",
                                p.describe(pi),
                                w.describe(wi)
                            )));
                        }
                    }
                }
            }
        }
    }

    // Stable order by start time; constraint indices follow the permutation.
    let mut order: Vec<usize> = (0..seq.events.len()).collect();
    order.sort_by(|&a, &b| seq.events[a].start_us.total_cmp(&seq.events[b].start_us).then(a.cmp(&b)));
    let mut new_index = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        new_index[old] = new;
    }
    let constraints = seq
        .constraints
        .iter()
        .map(|c| match c {
            SyncConstraint::NoOverlap { first, second } => SyncConstraint::NoOverlap {
                first: new_index[*first],
                second: new_index[*second],
            },
            SyncConstraint::CoScheduled { first, second } => SyncConstraint::CoScheduled {
                first: new_index[*first],
                second: new_index[*second],
            },
            other => other.clone(),
        })
        .collect();
    Ok(Schedule {
        name: seq.name.clone(),
        events: order.iter().map(|&i| seq.events[i].clone()).collect(),
        cycle_boundaries_us: seq.cycle_boundaries_us.clone(),
        constraints,
        echo_us: seq.echo_us,
        total_us: seq.duration_us(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationOptions {
    pub frame: Frame,
    /// Spin whose coherence defines the echo amplitude.
    pub detect: SpinRef,
    /// Conditions restricting the detected coherence to a subspace.
    pub detect_condition: Option<Condition>,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            frame: Frame::ROTATING,
            detect: SpinRef::Electron,
            detect_condition: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub final_state: QuantumState,
    /// State at the echo time.
    pub echo_state: QuantumState,
    /// 2·|⟨σ₊⟩| of the detected spin at the echo time.
    pub echo_amplitude: f64,
}

/// Build the register Hamiltonian and run the sequence.
pub fn simulate(
    register: &SpinRegister,
    seq: &Sequence,
    field_t: f64,
    initial: &QuantumState,
    opts: &SimulationOptions,
) -> Result<SimulationResult> {
    register.ensure_exact_capacity().map_err(|e| match e {
        Error::Capacity { dim, cap } => Error::Schedule(format!(
            "register dimension {dim} exceeds the exact cap {cap}; use the classical bath models for large baths"
        )),
        other => other,
    })?;
    let h = Hamiltonian::build(
        register,
        field_t,
        &HamiltonianOptions {
            frame: opts.frame,
            ..Default::default()
        },
    )?;
    let frame_freqs = frame_frequencies(register, field_t, opts.frame);
    simulate_with(&h, &frame_freqs, seq, initial, opts)
}

/// Zeeman frequency subtracted by the frame for each qubit, MHz.
pub fn frame_frequencies(register: &SpinRegister, field_t: f64, frame: Frame) -> Vec<f64> {
    let (rot_e, rot_n) = match frame {
        Frame::Lab => (false, false),
        Frame::Rotating { electron, nuclei } => (electron, nuclei),
    };
    register
        .spins()
        .into_iter()
        .map(|s| match s {
            SpinRef::Electron if rot_e && register.charge_state == ChargeState::Neutral => {
                register.electron_gyromagnetic_ghz_per_t * 1e3 * field_t
            }
            SpinRef::Electron => 0.0,
            other if rot_n => -register.nuclear_gyromagnetic(other).unwrap_or(0.0) * field_t,
            _ => 0.0,
        })
        .collect()
}

/// Basis mask and value selecting the subspace where all conditions hold.
pub fn condition_mask(spins: &[SpinRef], conditions: &[Condition]) -> Result<(usize, usize)> {
    let n = spins.len();
    let (mut mask, mut value) = (0, 0);
    for c in conditions {
        let q = spins
            .iter()
            .position(|s| *s == c.spin)
            .ok_or_else(|| Error::UnknownSpin(c.spin.to_string()))?;
        let m = spin::qubit_mask(q, n);
        mask |= m;
        if c.state == SpinState::Down {
            value |= m;
        }
    }
    Ok((mask, value))
}

/// Run a compiled-or-raw sequence on an explicit Hamiltonian.
/// `frame_freqs[q]` is the Zeeman frequency removed from qubit `q` by the
/// frame of `h`; finite pulses use it to place their carrier.
pub fn simulate_with(
    h: &Hamiltonian,
    frame_freqs: &[f64],
    seq: &Sequence,
    initial: &QuantumState,
    opts: &SimulationOptions,
) -> Result<SimulationResult> {
    if initial.dim() != h.dim() || initial.spins() != h.spins() {
        return Err(Error::BasisMismatch {
            state: initial.dim(),
            operator: h.dim(),
        });
    }
    let schedule = compile(seq)?;
    let spins = h.spins().to_vec();
    let n = spins.len();

    let pulses: Vec<&PulseEvent> = schedule.events.iter().filter(|e| e.is_pulse()).collect();
    for w in pulses.windows(2) {
        if w[0].model == PulseModel::Finite && w[1].start_us < w[0].end_us() - TIME_EPS_US {
            return Err(Error::Schedule("simultaneous finite pulses are not supported".into()));
        }
    }

    let echo_t = schedule.echo_us.unwrap_or(schedule.total_us);
    let mut cache: HashMap<u64, DMatrix<C64>> = HashMap::new();
    let mut state = initial.clone();
    let mut now = 0.0;
    let mut echo_state: Option<QuantumState> = None;

    let mut advance = |state: &mut QuantumState, now: &mut f64, to: f64, echo_state: &mut Option<QuantumState>| {
        if echo_state.is_none() && echo_t <= to + TIME_EPS_US && echo_t >= *now - TIME_EPS_US {
            let dt = (echo_t - *now).max(0.0);
            let u = cache.entry(dt.to_bits()).or_insert_with(|| h.propagator(dt));
            *echo_state = Some(state.conjugate(u).expect("dimension checked"));
        }
        let dt = to - *now;
        if dt > TIME_EPS_US {
            let u = cache.entry(dt.to_bits()).or_insert_with(|| h.propagator(dt));
            *state = state.conjugate(u).expect("dimension checked");
        }
        *now = now.max(to);
    };

    for p in pulses {
        let targets: Vec<usize> = p
            .targets
            .iter()
            .map(|s| {
                spins
                    .iter()
                    .position(|x| x == s)
                    .ok_or_else(|| Error::UnknownSpin(s.to_string()))
            })
            .collect::<Result<_>>()?;
        if targets.is_empty() {
            return Err(Error::Schedule(format!("pulse '{}' at {} us has no target", p.label, p.start_us)));
        }
        let (cmask, cval) = condition_mask(&spins, &p.conditions)?;
        let axis = p.axis.expect("pulse has an axis");
        match p.model {
            PulseModel::Ideal => {
                advance(&mut state, &mut now, p.start_us, &mut echo_state);
                let u = spin::rotation(p.angle_rad, axis.phase());
                for &q in &targets {
                    state.apply_conditional(q, &u, cmask, cval);
                }
            }
            PulseModel::Finite => {
                advance(&mut state, &mut now, p.start_us, &mut echo_state);
                let rabi = p.angle_rad / (2.0 * PI * p.duration_us);
                let mut drive = DMatrix::zeros(h.dim(), h.dim());
                let mut shifts = Vec::with_capacity(targets.len());
                for &q in &targets {
                    let k = frame_freqs[q] + carrier_frequency(h, frame_freqs, q, p, cmask, cval);
                    drive += spin::spin_operator(n, q, rabi * axis.phase().cos(), rabi * axis.phase().sin(), k);
                    shifts.push((q, k));
                }
                let hd = h.plus(&drive)?;
                state = state.conjugate(&hd.propagator(p.duration_us))?;
                for (q, k) in shifts {
                    state.apply_conditional(q, &spin::z_rotation(-2.0 * PI * k * p.duration_us), 0, 0);
                }
                now = p.end_us();
            }
        }
    }
    let end = schedule.total_us.max(now);
    advance(&mut state, &mut now, end, &mut echo_state);
    let echo_state = echo_state.unwrap_or_else(|| state.clone());

    let q = echo_state.qubit(opts.detect)?;
    let (dmask, dval) = condition_mask(&spins, opts.detect_condition.as_slice())?;
    let echo_amplitude = 2.0 * echo_state.transverse(q, dmask, dval).norm();
    Ok(SimulationResult {
        final_state: state,
        echo_state,
        echo_amplitude,
    })
}

/// Signed lab-frame carrier for a finite pulse on qubit `q`.
///
/// Without an explicit frequency the carrier sits on the mean first-order
/// transition frequency of the conditioned subspace; with one, its rotation
/// sense follows the nearest transition.
fn carrier_frequency(h: &Hamiltonian, frame_freqs: &[f64], q: usize, p: &PulseEvent, cmask: usize, cval: usize) -> f64 {
    let n = h.spins().len();
    let t = spin::qubit_mask(q, n);
    let m = h.matrix();
    let signed: Vec<f64> = (0..h.dim())
        .filter(|b| b & t == 0 && b & cmask == cval & cmask)
        .map(|b| (m[(b | t, b | t)] - m[(b, b)]).re - frame_freqs[q])
        .collect();
    match p.frequency_mhz {
        Some(f) => {
            let nearest = signed
                .iter()
                .copied()
                .min_by(|a, b| (a.abs() - f).abs().total_cmp(&(b.abs() - f).abs()))
                .unwrap_or(f);
            f.copysign(nearest)
        }
        None => signed.iter().sum::<f64>() / signed.len().max(1) as f64,
    }
}

/// Probability that site `site` leaves its initial nuclear eigenstate after
/// one pass of the electron DD sequence `dd`, from exact simulation of the
/// electron–site pair.
pub fn anisotropy_flip_probability(register: &SpinRegister, site: usize, dd: &Sequence, field_t: f64) -> Result<f64> {
    let s = register
        .sites
        .get(site)
        .ok_or_else(|| Error::UnknownSpin(SpinRef::Site(site).to_string()))?;
    if s.hyperfine_zx_mhz < 0.0 {
        return Err(Error::param("hyperfine_zx_mhz", "must be non-negative"));
    }
    let pair = SpinRegister {
        donor: None,
        sites: vec![s.clone()],
        charge_state: ChargeState::Neutral,
        ..register.clone()
    };
    let frame = Frame::ELECTRON_ROTATING;
    let h = Hamiltonian::build(
        &pair,
        field_t,
        &HamiltonianOptions {
            frame,
            ..Default::default()
        },
    )?;
    let spins = pair.spins();
    let nuc = SpinRef::Site(0);

    // Basis: |e n⟩ with index 2·e + n. Each electron manifold holds a 2×2
    // nuclear block; its "up-like" eigenvector is the reference state.
    let m = h.matrix();
    let reference = |e: usize| -> [C64; 2] {
        let block = nalgebra::Matrix2::new(m[(2 * e, 2 * e)], m[(2 * e, 2 * e + 1)], m[(2 * e + 1, 2 * e)], m[(2 * e + 1, 2 * e + 1)]);
        let eig = block.symmetric_eigen();
        let k = if eig.eigenvectors[(0, 0)].norm() >= eig.eigenvectors[(0, 1)].norm() { 0 } else { 1 };
        [eig.eigenvectors[(0, k)], eig.eigenvectors[(1, k)]]
    };
    let v_up = reference(0);
    let mut amp = vec![C64::new(0.0, 0.0); 4];
    amp[0] = v_up[0];
    amp[1] = v_up[1];
    let initial = QuantumState::pure(spins.clone(), &amp)?;

    let block = dd.refocusing_block().addressing(SpinRef::Electron);
    let mut seq = block.clone();
    seq.echo_us = Some(block.duration_us());
    let opts = SimulationOptions {
        frame,
        detect: nuc,
        detect_condition: None,
    };
    let freqs = frame_frequencies(&pair, field_t, frame);
    let out = simulate_with(&h, &freqs, &seq, &initial, &opts)?;
    let rho = out.final_state.matrix();
    let mut stay = 0.0;
    for e in 0..2 {
        let v = reference(e);
        let mut p = C64::new(0.0, 0.0);
        for a in 0..2 {
            for b in 0..2 {
                p += v[a].conj() * rho[(2 * e + a, 2 * e + b)] * v[b];
            }
        }
        stay += p.re;
    }
    Ok((1.0 - stay).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::register::NuclearSite;
    use crate::spin::Bloch;
    use proptest::prelude::*;

    fn electron_with_offset(offset_mhz: f64) -> (Hamiltonian, Vec<f64>, QuantumState) {
        let spins = vec![SpinRef::Electron];
        let h = Hamiltonian::from_matrix(spin::spin_operator(1, 0, 0.0, 0.0, offset_mhz), spins.clone()).unwrap();
        let rho = QuantumState::product(spins, &[Bloch::UP]).unwrap();
        (h, vec![0.0], rho)
    }

    #[test]
    fn cpmg_one_is_hahn() {
        let s = cpmg(1, 5.0).unwrap();
        assert_eq!(s.pi_times(), vec![5.0]);
        assert_eq!(s.echo_us, Some(10.0));
        let s8 = cpmg(8, 2.0).unwrap();
        assert_eq!(s8.count_pulses(PI), 8);
        assert_eq!(s8.duration_us(), 32.0);
        assert!(cpmg(0, 1.0).is_err());
        assert!(cpmg(2, 0.0).is_err());
    }

    #[test]
    fn xy4_axes_and_timing() {
        let s = xy4(3.0).unwrap();
        let axes: Vec<Axis> = s.refocusing_block().events.iter().filter_map(|e| e.axis).collect();
        assert_eq!(axes, vec![Axis::X, Axis::Y, Axis::X, Axis::Y]);
        assert_eq!(s.pi_times(), cpmg(4, 3.0).unwrap().pi_times());
    }

    #[test]
    fn pi_wahuha_listing() {
        let s = pi_wahuha(1.0).unwrap();
        assert_eq!(s.count_pulses(PI), 5);
        let halves: Vec<Axis> = s
            .events
            .iter()
            .filter(|e| (e.angle_rad - FRAC_PI_2).abs() < 1e-12)
            .filter_map(|e| e.axis)
            .collect();
        assert_eq!(halves, vec![Axis::X, Axis::MinusY, Axis::Y, Axis::MinusX]);
        let t: Vec<f64> = s.events.iter().map(|e| e.start_us).collect();
        let gaps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        assert_eq!(gaps, vec![1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 1.0]);
        assert_eq!(t[8] - t[0], pi_wahuha_pulse_span(1.0));
        assert_eq!(s.duration_us(), 12.0);
    }

    #[test]
    fn wahuha_has_no_pi_pulses() {
        let s = wahuha(2.0).unwrap();
        assert_eq!(s.count_pulses(PI), 0);
        assert_eq!(s.duration_us(), 12.0);
    }

    #[test]
    fn overlapping_pulses_are_named() {
        let mut s = Sequence::new("bad");
        s.push(PulseEvent::pulse(PulseChannel::Mw, 0.0, PI, Axis::X).finite(1.0).labelled("a"));
        s.push(PulseEvent::pulse(PulseChannel::Mw, 0.5, PI, Axis::X).finite(1.0).labelled("b"));
        let err = compile(&s).unwrap_err().to_string();
        assert!(err.contains("'a'") && err.contains("'b'"), "{err}");
        assert!(compile(&Sequence::new("empty")).unwrap().is_empty());
    }

    #[test]
    fn dd_between_read_windows_is_valid() {
        let mut s = Sequence::new("sync");
        s.push(PulseEvent::window(PulseChannel::Gate, 0.0, 10.0, "read"));
        s.push(PulseEvent::window(PulseChannel::Gate, 20.0, 10.0, "read"));
        for k in 0..10 {
            s.push(PulseEvent::pulse(PulseChannel::Mw, 10.0 + k as f64, PI, Axis::X));
        }
        s.constraints.push(SyncConstraint::Exclude {
            pulses: PulseChannel::Mw,
            windows: PulseChannel::Gate,
            label: Some("read".into()),
        });
        compile(&s).unwrap();
        s.push(PulseEvent::pulse(PulseChannel::Mw, 25.0, PI, Axis::X));
        assert!(compile(&s).unwrap_err().to_string().contains("inside"));
    }

    #[test]
    fn compile_is_idempotent() {
        let mut s = pi_wahuha(1.5).unwrap();
        s.events.reverse();
        s.constraints.push(SyncConstraint::NoOverlap { first: 0, second: 3 });
        let once = compile(&s).unwrap();
        let twice = compile(&once.to_sequence()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn json_and_csv_export() {
        let s = transfer_measure_t2n(
            &TransferSpec {
                target: SpinRef::Site(0),
                hyperfine_mhz: 4.03,
                mw_pi_us: 0.5,
            },
            10.0,
            Some(&cpmg(2, 1.0).unwrap()),
        )
        .unwrap();
        assert_eq!(Sequence::from_json(&s.to_json().unwrap()).unwrap(), s);
        let mut buf = Vec::new();
        compile(&s).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + s.events.len());
    }

    #[test]
    fn selectivity_precondition() {
        let ok = TransferSpec {
            target: SpinRef::Site(0),
            hyperfine_mhz: 4.03,
            mw_pi_us: 0.5,
        };
        assert!(ok.check_selectivity().is_ok());
        let bad = TransferSpec { hyperfine_mhz: 1.0, ..ok };
        assert!(matches!(transfer_measure_t2n(&bad, 1.0, None), Err(Error::Selectivity { .. })));
    }

    #[test]
    fn hahn_refocuses_static_offset() {
        let (h, f, rho) = electron_with_offset(0.37);
        let seq = cpmg(1, 3.3).unwrap().addressing(SpinRef::Electron);
        let out = simulate_with(&h, &f, &seq, &rho, &SimulationOptions::default()).unwrap();
        assert!((out.echo_amplitude - 1.0).abs() < 1e-9);
    }

    fn zz_pair(b: f64) -> (Hamiltonian, QuantumState) {
        let spins = vec![SpinRef::Electron, SpinRef::Site(0)];
        let op = spin::spin_operator(2, 0, 0.0, 0.0, 1.0) * spin::spin_operator(2, 1, 0.0, 0.0, 1.0);
        let h = Hamiltonian::from_matrix(op * C64::new(b, 0.0), spins.clone()).unwrap();
        let rho = QuantumState::product(spins, &[Bloch::PLUS_X, Bloch::MIXED]).unwrap();
        (h, rho)
    }

    #[test]
    fn zz_to_static_partner_is_refocused() {
        let (h, rho) = zz_pair(0.21);
        let seq = cpmg(1, 4.0).unwrap().addressing(SpinRef::Electron);
        let out = simulate_with(&h, &[0.0, 0.0], &seq, &rho, &SimulationOptions::default()).unwrap();
        assert!((out.echo_amplitude - 1.0).abs() < 1e-9);
    }

    #[test]
    fn partner_flip_gives_cosine_echo() {
        // Partner flipped by an ideal pulse δt after the electron π pulse.
        let b = 0.21;
        let (tau, dt) = (4.0, 0.7);
        let (h, rho) = zz_pair(b);
        let mut seq = cpmg(1, tau).unwrap().addressing(SpinRef::Electron);
        seq.push(PulseEvent::pulse(PulseChannel::Rf, tau + dt, PI, Axis::X).on(SpinRef::Site(0)));
        let out = simulate_with(&h, &[0.0, 0.0], &seq, &rho, &SimulationOptions::default()).unwrap();
        // Phase bookkeeping: shift ±b/2, unbalanced for 2(τ − δt).
        let expected = (PI * b * 2.0 * (tau - dt)).cos().abs();
        assert!((out.echo_amplitude - expected).abs() < 1e-9, "{} vs {expected}", out.echo_amplitude);
    }

    #[test]
    fn every_library_sequence_refocuses_static_zz() {
        let (h, rho) = zz_pair(0.13);
        let rho_n = rho;
        let opts = SimulationOptions {
            detect: SpinRef::Electron,
            ..Default::default()
        };
        for seq in [cpmg(3, 1.7).unwrap(), xy4(1.7).unwrap()] {
            let seq = seq.addressing(SpinRef::Electron);
            let out = simulate_with(&h, &[0.0, 0.0], &seq, &rho_n, &opts).unwrap();
            assert!((out.echo_amplitude - 1.0).abs() < 1e-9, "{}", seq.name);
        }
        let seq = pi_wahuha(1.7).unwrap().addressing(SpinRef::Electron);
        let out = simulate_with(&h, &[0.0, 0.0], &seq, &rho_n, &opts).unwrap();
        assert!((out.echo_amplitude - 1.0).abs() < 1e-9, "pi-wahuha {}", out.echo_amplitude);
    }

    #[test]
    fn finite_pulse_matches_ideal_on_resonance() {
        let (h, f, rho) = electron_with_offset(0.0);
        let mut seq = Sequence::new("nutation");
        seq.push(PulseEvent::pulse(PulseChannel::Mw, 0.0, FRAC_PI_2, Axis::X).on(SpinRef::Electron).finite(0.05));
        let out = simulate_with(&h, &f, &seq, &rho, &SimulationOptions::default()).unwrap();
        let mut ideal = rho.clone();
        ideal.apply_conditional(0, &spin::rotation(FRAC_PI_2, 0.0), 0, 0);
        let d = (out.final_state.matrix() - ideal.matrix()).norm();
        assert!(d < 1e-9, "{d}");
    }

    #[test]
    fn simulate_reports_capacity() {
        let sites = (0..12).map(|i| NuclearSite::si29([4 * i + 4, 0, 0], 0.1, 0.0)).collect();
        let reg = SpinRegister::electron_only().with_sites(sites);
        let rho = QuantumState::maximally_mixed(vec![SpinRef::Electron]);
        let err = simulate(&reg, &cpmg(1, 1.0).unwrap(), 0.3, &rho, &SimulationOptions::default()).unwrap_err();
        assert!(err.to_string().contains("bath"));
    }

    #[test]
    fn anisotropy_flip_probability_bounds() {
        let dd = cpmg(4, 0.1).unwrap();
        let reg = SpinRegister::electron_only().with_sites(vec![NuclearSite::si29([4, 4, 0], 2.0, 0.0)]);
        let p0 = anisotropy_flip_probability(&reg, 0, &dd, 0.3442).unwrap();
        assert!(p0 < 1e-9);
        let reg = SpinRegister::electron_only().with_sites(vec![NuclearSite::si29([4, 4, 0], 2.0, 0.3)]);
        let p = anisotropy_flip_probability(&reg, 0, &dd, 0.3442).unwrap();
        assert!((0.0..=1.0).contains(&p) && p > 0.0);
    }

    /// Three mutually coupled ²⁹Si. With only two spin-½ nuclei the toggled
    /// dipolar terms commute and WAHUHA is exact, so a third spin is needed
    /// to expose the second-order term.
    fn dipolar_triple() -> (SpinRegister, f64) {
        let reg = SpinRegister::electron_only().with_charge(ChargeState::Ionized).with_sites(vec![
            NuclearSite::si29([1, 1, 1], 0.0, 0.0),
            NuclearSite::si29([2, 2, 4], 0.0, 0.0),
            NuclearSite::si29([3, -1, 1], 0.0, 0.0),
        ]);
        let mut d: f64 = 0.0;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            d = d.max(spin::dipolar_coupling(&reg.sites[i], &reg.sites[j], reg.lattice_constant_nm).unwrap().abs());
        }
        (reg, d)
    }

    /// Frobenius distance between the simulated state and the pulse-only ideal.
    fn cycle_error(h: &Hamiltonian, seq: &Sequence, rho: &QuantumState) -> f64 {
        let zero = Hamiltonian::from_matrix(DMatrix::zeros(h.dim(), h.dim()), h.spins().to_vec()).unwrap();
        let f = vec![0.0; h.spins().len()];
        let opts = SimulationOptions::default();
        let real = simulate_with(h, &f, seq, rho, &opts).unwrap().final_state;
        let ideal = simulate_with(&zero, &f, seq, rho, &opts).unwrap().final_state;
        (real.matrix() - ideal.matrix()).norm()
    }

    fn slope(xs: &[f64], ys: &[f64]) -> f64 {
        let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
        let mx = lx.iter().sum::<f64>() / lx.len() as f64;
        let my = ly.iter().sum::<f64>() / ly.len() as f64;
        let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
        num / den
    }

    #[test]
    fn wahuha_is_exact_for_two_spins() {
        let reg = SpinRegister::electron_only()
            .with_charge(ChargeState::Ionized)
            .with_sites(vec![NuclearSite::si29([1, 1, 1], 0.0, 0.0), NuclearSite::si29([2, 2, 4], 0.0, 0.0)]);
        let d = spin::dipolar_coupling(&reg.sites[0], &reg.sites[1], reg.lattice_constant_nm).unwrap();
        let h = Hamiltonian::build(&reg, 0.3442, &HamiltonianOptions { frame: Frame::ROTATING, ..Default::default() }).unwrap();
        let rho = QuantumState::product(reg.spins(), &[Bloch::UP, Bloch::PLUS_X, Bloch(0.0, 0.6, 0.8)]).unwrap();
        let seq = wahuha(0.01 / d.abs() / 6.0).unwrap().addressing_all(&[SpinRef::Site(0), SpinRef::Site(1)], PulseChannel::Rf);
        assert!(cycle_error(&h, &seq, &rho) < 1e-12);
    }

    #[test]
    fn wahuha_error_beats_free_evolution() {
        let (reg, d) = dipolar_triple();
        let h = Hamiltonian::build(&reg, 0.3442, &HamiltonianOptions { frame: Frame::ROTATING, ..Default::default() }).unwrap();
        let rho = QuantumState::product(reg.spins(), &[Bloch::UP, Bloch::PLUS_X, Bloch(0.0, 0.6, 0.8), Bloch::UP]).unwrap();
        let nuclei = [SpinRef::Site(0), SpinRef::Site(1), SpinRef::Site(2)];
        let xs = [1e-4, 1e-3, 1e-2];
        let (mut cyc, mut free) = (Vec::new(), Vec::new());
        for x in xs {
            let tc = x / d.abs();
            let seq = wahuha(tc / 6.0).unwrap().addressing_all(&nuclei, PulseChannel::Rf);
            cyc.push(cycle_error(&h, &seq, &rho));
            let mut idle = Sequence::new("free");
            idle.echo_us = Some(tc);
            free.push(cycle_error(&h, &idle, &rho));
        }
        // The cycle is time-symmetric, so the leading error is third order.
        let s = slope(&xs, &cyc);
        assert!((s - 3.0).abs() <= 0.1, "wahuha slope {s} errors {cyc:?}");
        let s_free = slope(&xs, &free);
        assert!((s_free - 1.0).abs() <= 0.1, "free slope {s_free}");
    }

    #[test]
    fn pi_wahuha_fidelity_with_offsets() {
        let (reg, d) = dipolar_triple();
        let h = Hamiltonian::build(&reg, 0.3442, &HamiltonianOptions { frame: Frame::ROTATING, ..Default::default() }).unwrap();
        let nuclei = [SpinRef::Site(0), SpinRef::Site(1), SpinRef::Site(2)];
        let rho = QuantumState::product(reg.spins(), &[Bloch::UP, Bloch::PLUS_X, Bloch(0.0, 0.6, 0.8), Bloch::UP]).unwrap();
        for x in [1e-3, 1e-2] {
            let tc = x / d.abs();
            for (w0, w1) in [(0.0, 0.0), (0.3, -0.7), (2.0, 5.0)] {
                let offsets = spin::spin_operator(4, 1, 0.0, 0.0, w0 / tc) + spin::spin_operator(4, 2, 0.0, 0.0, w1 / tc);
                let ho = h.plus(&offsets).unwrap();
                let seq = pi_wahuha(tc / 12.0).unwrap().addressing_all(&nuclei, PulseChannel::Rf);
                let zero = Hamiltonian::from_matrix(DMatrix::zeros(16, 16), reg.spins()).unwrap();
                let f = [0.0; 4];
                let opts = SimulationOptions::default();
                let real = simulate_with(&ho, &f, &seq, &rho, &opts).unwrap().final_state;
                let ideal = simulate_with(&zero, &f, &seq, &rho, &opts).unwrap().final_state;
                let fid = (ideal.matrix() * real.matrix()).trace().re;
                assert!(fid >= 0.999, "x={x} offsets=({w0},{w1}) fidelity {fid}");
            }
        }
    }

    proptest! {
        #[test]
        fn pulses_preserve_trace_and_hermiticity(angle in 0.0f64..6.3, phase in 0.0f64..6.3, cond in 0usize..4) {
            let spins = vec![SpinRef::Electron, SpinRef::Donor, SpinRef::Site(0)];
            let mut rho = QuantumState::product(spins, &[Bloch(0.3, -0.2, 0.5), Bloch::PLUS_Y, Bloch(0.0, 0.6, -0.7)]).unwrap();
            rho.apply_conditional(1, &spin::rotation(angle, phase), cond & 1, cond & 2);
            prop_assert!((rho.trace().re - 1.0).abs() < 1e-9);
            prop_assert!(rho.trace().im.abs() < 1e-9);
            prop_assert!(rho.hermiticity_error() < 1e-9);
        }
    }
}
