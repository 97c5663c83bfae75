//! Hamiltonians, exact diagonalization, unitary propagation and observables
//! for small registers.
//!
//! Matrices are dense and assembled element by element from bit operations on
//! basis indices, so building never forms intermediate Kronecker products.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::{ChargeState, NuclearSite, SpinRef, SpinRegister};
use crate::units;

pub type C64 = Complex64;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Nuclear dipolar couplings below this magnitude (MHz) are dropped by default.
pub const DEFAULT_DIPOLAR_FLOOR_MHZ: f64 = 1e-6;

/// Transitions weaker than this (squared matrix element) are not reported.
const TRANSITION_WEIGHT_FLOOR: f64 = 1e-3;

/// Mask of qubit `k` in an `n`-qubit basis index.
#[inline]
pub fn qubit_mask(k: usize, n: usize) -> usize {
    1 << (n - 1 - k)
}

/// m = ±½ of qubit `k` in basis state `b`.
#[inline]
fn m_of(b: usize, mask: usize) -> f64 {
    if b & mask == 0 {
        0.5
    } else {
        -0.5
    }
}

/// Reference frame in which a Hamiltonian is expressed.
///
/// A rotating frame subtracts the bare Zeeman term of the selected spins and
/// keeps only matrix elements that are static in that frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Frame {
    #[default]
    Lab,
    Rotating { electron: bool, nuclei: bool },
}

impl Frame {
    pub const ROTATING: Frame = Frame::Rotating {
        electron: true,
        nuclei: true,
    };
    /// Electron in its rotating frame, nuclei in the lab frame.
    pub const ELECTRON_ROTATING: Frame = Frame::Rotating {
        electron: true,
        nuclei: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianOptions {
    pub frame: Frame,
    pub dipolar_floor_mhz: f64,
    pub include_dipolar: bool,
}

impl Default for HamiltonianOptions {
    fn default() -> Self {
        Self {
            frame: Frame::Lab,
            dipolar_floor_mhz: DEFAULT_DIPOLAR_FLOOR_MHZ,
            include_dipolar: true,
        }
    }
}

/// Secular dipolar coupling between two nuclear sites, MHz.
///
/// `b = (μ₀/4π)·h·γᵢγⱼ·(1 − 3cos²θ)/r³` with γ in Hz/T and θ measured from
/// the field axis (z). The matching Hamiltonian term is
/// `b·(IzᵢIzⱼ − ¼(I₊ᵢI₋ⱼ + I₋ᵢI₊ⱼ))`.
pub fn dipolar_coupling(a: &NuclearSite, b: &NuclearSite, lattice_constant_nm: f64) -> Result<f64> {
    let d: Vec<f64> = (0..3)
        .map(|k| f64::from(b.position[k] - a.position[k]) * lattice_constant_nm * 0.25e-9)
        .collect();
    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    if r2 == 0.0 {
        return Err(Error::param("site_j", "coincides with site_i"));
    }
    let r = r2.sqrt();
    let cos2 = d[2] * d[2] / r2;
    Ok(dipolar_from_geometry(
        a.gyromagnetic_mhz_per_t,
        b.gyromagnetic_mhz_per_t,
        r,
        cos2,
    ))
}

/// Closed dipolar formula for separation `r_m` (metres) and cos²θ, MHz.
pub fn dipolar_from_geometry(gamma_a_mhz_t: f64, gamma_b_mhz_t: f64, r_m: f64, cos2: f64) -> f64 {
    let hz = units::MU0_OVER_4PI
        * units::PLANCK_J_S
        * (gamma_a_mhz_t * 1e6)
        * (gamma_b_mhz_t * 1e6)
        * (1.0 - 3.0 * cos2)
        / (r_m * r_m * r_m);
    hz * 1e-6
}

/// Eigen-decomposition sorted by ascending energy.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub energies: Vec<f64>,
    pub vectors: DMatrix<C64>,
}

#[derive(Debug)]
pub struct Hamiltonian {
    matrix: DMatrix<C64>,
    spins: Vec<SpinRef>,
    field_t: f64,
    spectrum: OnceLock<Spectrum>,
}

impl Clone for Hamiltonian {
    fn clone(&self) -> Self {
        let spectrum = OnceLock::new();
        if let Some(s) = self.spectrum.get() {
            let _ = spectrum.set(s.clone());
        }
        Self {
            matrix: self.matrix.clone(),
            spins: self.spins.clone(),
            field_t: self.field_t,
            spectrum,
        }
    }
}

/// Build the register Hamiltonian in the lab frame (MHz).
pub fn build_hamiltonian(register: &SpinRegister, field_t: f64) -> Result<Hamiltonian> {
    Hamiltonian::build(register, field_t, &HamiltonianOptions::default())
}

impl Hamiltonian {
    pub fn build(register: &SpinRegister, field_t: f64, opts: &HamiltonianOptions) -> Result<Self> {
        if !(field_t >= 0.0) {
            return Err(Error::param("field", "must be non-negative"));
        }
        register.ensure_exact_capacity()?;
        let n = register.num_spins();
        let dim = register.dim();
        let neutral = register.charge_state == ChargeState::Neutral;
        let spins = register.spins();

        // Zeeman frequencies per qubit and frame frequencies to subtract.
        let mut zeeman = vec![0.0; n];
        let mut frame = vec![0.0; n];
        let (rot_e, rot_n) = match opts.frame {
            Frame::Lab => (false, false),
            Frame::Rotating { electron, nuclei } => (electron, nuclei),
        };
        if neutral {
            zeeman[0] = register.electron_gyromagnetic_ghz_per_t * 1e3 * field_t;
            if rot_e {
                frame[0] = zeeman[0];
            }
        }
        for (q, spin) in spins.iter().enumerate().skip(1) {
            let gamma = register.nuclear_gyromagnetic(*spin).unwrap_or(0.0);
            zeeman[q] = -gamma * field_t;
            if rot_n {
                frame[q] = zeeman[q];
            }
        }

        let site_offset = 1 + usize::from(register.donor.is_some());
        let mut dipolar = Vec::new();
        if opts.include_dipolar {
            for i in 0..register.sites.len() {
                for j in (i + 1)..register.sites.len() {
                    let b = dipolar_coupling(
                        &register.sites[i],
                        &register.sites[j],
                        register.lattice_constant_nm,
                    )
                    .map_err(|_| Error::CoincidentSites(i, j))?;
                    if b.abs() >= opts.dipolar_floor_mhz {
                        dipolar.push((site_offset + i, site_offset + j, b));
                    }
                }
            }
        }

        let static_in_frame = |flipped: usize, b: usize| -> bool {
            // Energy offset of the flipped configuration in the frame.
            let mut w = 0.0;
            for q in 0..n {
                let mask = qubit_mask(q, n);
                if flipped & mask != 0 {
                    w += frame[q] * (m_of(b ^ flipped, mask) - m_of(b, mask));
                }
            }
            w.abs() < 1e-9
        };

        let e_mask = qubit_mask(0, n);
        let mut h = DMatrix::<C64>::zeros(dim, dim);
        for b in 0..dim {
            let me = m_of(b, e_mask);
            let mut diag = 0.0;
            for q in 0..n {
                diag += (zeeman[q] - frame[q]) * m_of(b, qubit_mask(q, n));
            }
            if neutral {
                if let Some(donor) = register.donor {
                    let p_mask = qubit_mask(1, n);
                    diag += donor.hyperfine_mhz * me * m_of(b, p_mask);
                    // A/2 (S+I- + S-I+): only antiparallel pairs connect.
                    let both = e_mask | p_mask;
                    if (b & e_mask == 0) != (b & p_mask == 0) && static_in_frame(both, b) {
                        h[(b ^ both, b)] += C64::new(donor.hyperfine_mhz * 0.5, 0.0);
                    }
                }
                for (i, site) in register.sites.iter().enumerate() {
                    let mask = qubit_mask(site_offset + i, n);
                    diag += site.hyperfine_zz_mhz * me * m_of(b, mask);
                    if site.hyperfine_zx_mhz != 0.0 && static_in_frame(mask, b) {
                        h[(b ^ mask, b)] += C64::new(site.hyperfine_zx_mhz * me * 0.5, 0.0);
                    }
                }
            }
            for &(qi, qj, coupling) in &dipolar {
                let mi = qubit_mask(qi, n);
                let mj = qubit_mask(qj, n);
                diag += coupling * m_of(b, mi) * m_of(b, mj);
                if (b & mi == 0) != (b & mj == 0) && static_in_frame(mi | mj, b) {
                    h[(b ^ (mi | mj), b)] += C64::new(-0.25 * coupling, 0.0);
                }
            }
            h[(b, b)] += C64::new(diag, 0.0);
        }

        Ok(Self {
            matrix: h,
            spins,
            field_t,
            spectrum: OnceLock::new(),
        })
    }

    /// Wrap an explicit Hermitian matrix (MHz) acting on `spins`.
    pub fn from_matrix(matrix: DMatrix<C64>, spins: Vec<SpinRef>) -> Result<Self> {
        let dim = 1usize << spins.len();
        if matrix.nrows() != dim || matrix.ncols() != dim {
            return Err(Error::BasisMismatch {
                state: dim,
                operator: matrix.nrows(),
            });
        }
        let h = Self {
            matrix,
            spins,
            field_t: 0.0,
            spectrum: OnceLock::new(),
        };
        let err = h.hermiticity_error();
        if err > 1e-9 {
            return Err(Error::param("matrix", format!("not Hermitian (max deviation {err:.2e})")));
        }
        Ok(h)
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn spins(&self) -> &[SpinRef] {
        &self.spins
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn field_t(&self) -> f64 {
        self.field_t
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = &self.matrix - self.matrix.adjoint();
        d.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Sum with another operator on the same basis (e.g. a drive term).
    pub fn plus(&self, other: &DMatrix<C64>) -> Result<Self> {
        if other.shape() != self.matrix.shape() {
            return Err(Error::BasisMismatch {
                state: other.nrows(),
                operator: self.dim(),
            });
        }
        Ok(Self {
            matrix: &self.matrix + other,
            spins: self.spins.clone(),
            field_t: self.field_t,
            spectrum: OnceLock::new(),
        })
    }

    pub fn spectrum(&self) -> &Spectrum {
        self.spectrum.get_or_init(|| {
            let eig = self.matrix.clone().symmetric_eigen();
            let mut order: Vec<usize> = (0..self.dim()).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let energies = order.iter().map(|&i| eig.eigenvalues[i]).collect();
            let vectors = DMatrix::from_fn(self.dim(), self.dim(), |r, c| eig.eigenvectors[(r, order[c])]);
            Spectrum { energies, vectors }
        })
    }

    /// `exp(−2πi·H·t)` for `t` in μs.
    pub fn propagator(&self, duration_us: f64) -> DMatrix<C64> {
        let s = self.spectrum();
        let phases = DVector::from_iterator(
            self.dim(),
            s.energies
                .iter()
                .map(|&e| C64::from_polar(1.0, -units::phase(e, duration_us))),
        );
        let mut scaled = s.vectors.clone();
        for (c, p) in phases.iter().enumerate() {
            scaled.column_mut(c).iter_mut().for_each(|z| *z *= *p);
        }
        scaled * s.vectors.adjoint()
    }

    fn qubit_of(&self, spin: SpinRef) -> Result<usize> {
        self.spins
            .iter()
            .position(|s| *s == spin)
            .ok_or_else(|| Error::UnknownSpin(spin.to_string()))
    }
}

/// Which spin's transitions to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Electron,
    Nuclear(SpinRef),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub lower: usize,
    pub upper: usize,
    pub frequency_mhz: f64,
    /// Squared matrix element of 2·S_x of the selected spin (1 = fully allowed).
    pub weight: f64,
}

/// Exact transition frequencies of the selected spin, sorted by frequency.
///
/// A level pair qualifies when the selected spin's ⟨σz⟩ changes by at least 1
/// and, for nuclear channels, the electron's ⟨σz⟩ changes by less than 1.
pub fn transition_frequencies(h: &Hamiltonian, channel: Channel) -> Vec<Transition> {
    let target = match channel {
        Channel::Electron => SpinRef::Electron,
        Channel::Nuclear(s) => s,
    };
    let Ok(q) = h.qubit_of(target) else {
        return Vec::new();
    };
    let n = h.spins.len();
    let dim = h.dim();
    let s = h.spectrum();
    let v = &s.vectors;

    let sigma_z = |qubit: usize| -> Vec<f64> {
        let mask = qubit_mask(qubit, n);
        (0..dim)
            .map(|c| {
                (0..dim)
                    .map(|b| 2.0 * m_of(b, mask) * v[(b, c)].norm_sqr())
                    .sum()
            })
            .collect()
    };
    let sz_target = sigma_z(q);
    let sz_electron = sigma_z(0);

    // σx on the target applied to every eigenvector, then projected.
    let mask = qubit_mask(q, n);
    let flipped = DMatrix::from_fn(dim, dim, |b, c| v[(b ^ mask, c)]);
    let sx = v.adjoint() * flipped;

    let mut out = Vec::new();
    for i in 0..dim {
        for j in (i + 1)..dim {
            let weight = sx[(i, j)].norm_sqr();
            if weight < TRANSITION_WEIGHT_FLOOR {
                continue;
            }
            if (sz_target[i] - sz_target[j]).abs() < 1.0 - 1e-6 {
                continue;
            }
            if q != 0 && (sz_electron[i] - sz_electron[j]).abs() >= 1.0 {
                continue;
            }
            out.push(Transition {
                lower: i,
                upper: j,
                frequency_mhz: s.energies[j] - s.energies[i],
                weight,
            });
        }
    }
    out.sort_by(|a, b| a.frequency_mhz.total_cmp(&b.frequency_mhz));
    out
}

/// Density operator over a register basis.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState {
    rho: DMatrix<C64>,
    spins: Vec<SpinRef>,
}

/// Single-spin state given by its Bloch vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bloch(pub f64, pub f64, pub f64);

impl Bloch {
    pub const UP: Bloch = Bloch(0.0, 0.0, 1.0);
    pub const DOWN: Bloch = Bloch(0.0, 0.0, -1.0);
    pub const MIXED: Bloch = Bloch(0.0, 0.0, 0.0);
    pub const PLUS_X: Bloch = Bloch(1.0, 0.0, 0.0);
    pub const PLUS_Y: Bloch = Bloch(0.0, 1.0, 0.0);

    fn density(self) -> [[C64; 2]; 2] {
        let Bloch(x, y, z) = self;
        [
            [C64::new(0.5 * (1.0 + z), 0.0), C64::new(0.5 * x, -0.5 * y)],
            [C64::new(0.5 * x, 0.5 * y), C64::new(0.5 * (1.0 - z), 0.0)],
        ]
    }
}

impl QuantumState {
    /// Product state, one Bloch vector per spin in basis order.
    pub fn product(spins: Vec<SpinRef>, blochs: &[Bloch]) -> Result<Self> {
        if blochs.len() != spins.len() {
            return Err(Error::param("blochs", "one Bloch vector per spin required"));
        }
        let n = spins.len();
        let dim = 1usize << n;
        let locals: Vec<_> = blochs.iter().map(|b| b.density()).collect();
        let rho = DMatrix::from_fn(dim, dim, |r, c| {
            let mut z = ONE;
            for (k, l) in locals.iter().enumerate() {
                let mask = qubit_mask(k, n);
                z *= l[usize::from(r & mask != 0)][usize::from(c & mask != 0)];
            }
            z
        });
        Ok(Self { rho, spins })
    }

    pub fn maximally_mixed(spins: Vec<SpinRef>) -> Self {
        let dim = 1usize << spins.len();
        let rho = DMatrix::from_diagonal_element(dim, dim, C64::new(1.0 / dim as f64, 0.0));
        Self { rho, spins }
    }

    pub fn pure(spins: Vec<SpinRef>, amplitudes: &[C64]) -> Result<Self> {
        let dim = 1usize << spins.len();
        if amplitudes.len() != dim {
            return Err(Error::BasisMismatch {
                state: amplitudes.len(),
                operator: dim,
            });
        }
        let norm: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        let psi = DVector::from_iterator(dim, amplitudes.iter().map(|a| a / norm));
        let rho = &psi * psi.adjoint();
        Ok(Self { rho, spins })
    }

    pub fn from_matrix(rho: DMatrix<C64>, spins: Vec<SpinRef>) -> Result<Self> {
        let dim = 1usize << spins.len();
        if rho.nrows() != dim || rho.ncols() != dim {
            return Err(Error::BasisMismatch {
                state: rho.nrows(),
                operator: dim,
            });
        }
        Ok(Self { rho, spins })
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.rho
    }

    pub fn matrix_mut(&mut self) -> &mut DMatrix<C64> {
        &mut self.rho
    }

    pub fn spins(&self) -> &[SpinRef] {
        &self.spins
    }

    pub fn num_qubits(&self) -> usize {
        self.spins.len()
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn qubit(&self, spin: SpinRef) -> Result<usize> {
        self.spins
            .iter()
            .position(|s| *s == spin)
            .ok_or_else(|| Error::UnknownSpin(spin.to_string()))
    }

    pub fn trace(&self) -> C64 {
        self.rho.trace()
    }

    pub fn purity(&self) -> f64 {
        (&self.rho * &self.rho).trace().re
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = &self.rho - self.rho.adjoint();
        d.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let herm = (&self.rho + self.rho.adjoint()) * C64::new(0.5, 0.0);
        herm.symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Checks trace, Hermiticity and positivity to 1e−9.
    pub fn is_physical(&self) -> bool {
        (self.trace() - ONE).norm() < 1e-9 && self.hermiticity_error() < 1e-9 && self.min_eigenvalue() > -1e-9
    }

    /// `U ρ U†`.
    pub fn conjugate(&self, u: &DMatrix<C64>) -> Result<Self> {
        if u.nrows() != self.dim() {
            return Err(Error::BasisMismatch {
                state: self.dim(),
                operator: u.nrows(),
            });
        }
        Ok(Self {
            rho: u * &self.rho * u.adjoint(),
            spins: self.spins.clone(),
        })
    }

    pub fn expectation(&self, op: &DMatrix<C64>) -> C64 {
        (&self.rho * op).trace()
    }

    /// Population of a basis state.
    pub fn population(&self, index: usize) -> f64 {
        self.rho[(index, index)].re
    }

    /// Apply the single-qubit unitary `u` to `qubit`, restricted to basis
    /// states whose bits under `cond_mask` equal `cond_value`.
    pub fn apply_conditional(&mut self, qubit: usize, u: &[[C64; 2]; 2], cond_mask: usize, cond_value: usize) {
        let n = self.num_qubits();
        let dim = self.dim();
        let t = qubit_mask(qubit, n);
        let active = |b: usize| b & cond_mask == cond_value & cond_mask;
        // Rows: ρ ← U ρ.
        for r0 in (0..dim).filter(|b| b & t == 0 && active(*b)) {
            let r1 = r0 | t;
            for c in 0..dim {
                let a = self.rho[(r0, c)];
                let b = self.rho[(r1, c)];
                self.rho[(r0, c)] = u[0][0] * a + u[0][1] * b;
                self.rho[(r1, c)] = u[1][0] * a + u[1][1] * b;
            }
        }
        // Columns: ρ ← ρ U†.
        for c0 in (0..dim).filter(|b| b & t == 0 && active(*b)) {
            let c1 = c0 | t;
            for r in 0..dim {
                let a = self.rho[(r, c0)];
                let b = self.rho[(r, c1)];
                self.rho[(r, c0)] = a * u[0][0].conj() + b * u[0][1].conj();
                self.rho[(r, c1)] = a * u[1][0].conj() + b * u[1][1].conj();
            }
        }
    }

    /// Raw transverse coherence ⟨σ₊⟩ of `qubit` over the subspace selected
    /// by the condition mask, i.e. `Σ ρ[b↓, b↑]`.
    pub fn transverse(&self, qubit: usize, cond_mask: usize, cond_value: usize) -> C64 {
        let n = self.num_qubits();
        let t = qubit_mask(qubit, n);
        (0..self.dim())
            .filter(|b| b & t == 0 && b & cond_mask == cond_value & cond_mask)
            .map(|b| self.rho[(b | t, b)])
            .fold(ZERO, |acc, z| acc + z)
    }

    /// ⟨σz⟩ of a qubit.
    pub fn sigma_z(&self, qubit: usize) -> f64 {
        let mask = qubit_mask(qubit, self.num_qubits());
        (0..self.dim())
            .map(|b| 2.0 * m_of(b, mask) * self.rho[(b, b)].re)
            .sum()
    }

    /// Reduced single-qubit density matrix.
    pub fn reduced(&self, qubit: usize) -> [[C64; 2]; 2] {
        let mask = qubit_mask(qubit, self.num_qubits());
        let mut out = [[ZERO; 2]; 2];
        for b in (0..self.dim()).filter(|b| b & mask == 0) {
            out[0][0] += self.rho[(b, b)];
            out[1][1] += self.rho[(b | mask, b | mask)];
            out[0][1] += self.rho[(b, b | mask)];
            out[1][0] += self.rho[(b | mask, b)];
        }
        out
    }

    /// Fully dephase `qubit` in its z basis, optionally keeping a fraction of
    /// its coherence (`keep` = 0 destroys it).
    pub fn dephase(&mut self, qubit: usize, keep: C64) {
        let mask = qubit_mask(qubit, self.num_qubits());
        let dim = self.dim();
        for r in 0..dim {
            for c in 0..dim {
                let rb = r & mask != 0;
                let cb = c & mask != 0;
                if rb != cb {
                    // ρ[↑,↓] carries keep, ρ[↓,↑] its conjugate.
                    let f = if rb { keep } else { keep.conj() };
                    self.rho[(r, c)] *= f;
                }
            }
        }
    }
}

/// Unitary evolution `ρ → UρU†` with `U = exp(−2πi·H·t)`, `t` in μs.
pub fn evolve(state: &QuantumState, h: &Hamiltonian, duration_us: f64) -> Result<QuantumState> {
    if !(duration_us >= 0.0) {
        return Err(Error::param("duration", "must be non-negative"));
    }
    if state.dim() != h.dim() || state.spins != h.spins {
        return Err(Error::BasisMismatch {
            state: state.dim(),
            operator: h.dim(),
        });
    }
    if duration_us == 0.0 {
        return Ok(state.clone());
    }
    state.conjugate(&h.propagator(duration_us))
}

/// Density-matrix element between eigenlevels `lower` and `upper` of `h`.
pub fn coherence(state: &QuantumState, h: &Hamiltonian, lower: usize, upper: usize) -> Result<C64> {
    if state.dim() != h.dim() {
        return Err(Error::BasisMismatch {
            state: state.dim(),
            operator: h.dim(),
        });
    }
    if lower == upper || lower >= h.dim() || upper >= h.dim() {
        return Err(Error::UndefinedTransition(lower, upper));
    }
    let v = &h.spectrum().vectors;
    let vl = v.column(lower);
    let vu = v.column(upper);
    Ok((vl.adjoint() * &state.rho * vu)[(0, 0)])
}

/// Rotation `exp(−i·angle·(cosφ σx + sinφ σy)/2)` in the (↑, ↓) basis.
pub fn rotation(angle: f64, phase: f64) -> [[C64; 2]; 2] {
    let c = (angle / 2.0).cos();
    let s = (angle / 2.0).sin();
    [
        [C64::new(c, 0.0), C64::new(0.0, -s) * C64::from_polar(1.0, -phase)],
        [C64::new(0.0, -s) * C64::from_polar(1.0, phase), C64::new(c, 0.0)],
    ]
}

/// `exp(−i·angle·σz/2)`.
pub fn z_rotation(angle: f64) -> [[C64; 2]; 2] {
    [
        [C64::from_polar(1.0, -angle / 2.0), ZERO],
        [ZERO, C64::from_polar(1.0, angle / 2.0)],
    ]
}

/// Operator `Σ coeff·S_axis` of one qubit embedded in the full space.
pub fn spin_operator(n: usize, qubit: usize, sx: f64, sy: f64, sz: f64) -> DMatrix<C64> {
    let dim = 1usize << n;
    let mask = qubit_mask(qubit, n);
    let mut op = DMatrix::zeros(dim, dim);
    for b in 0..dim {
        op[(b, b)] += C64::new(sz * m_of(b, mask), 0.0);
        let f = b ^ mask;
        // ⟨f|S_x|b⟩ = ½, ⟨f|S_y|b⟩ = ∓i/2 depending on direction.
        let up_to_down = b & mask == 0;
        let y = if up_to_down { C64::new(0.0, 0.5) } else { C64::new(0.0, -0.5) };
        op[(f, b)] += C64::new(0.5 * sx, 0.0) + y * sy;
    }
    op
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::register::{DonorNucleus, NuclearSite};

    fn p31_register() -> SpinRegister {
        SpinRegister::phosphorus_donor()
    }

    #[test]
    fn electron_zeeman_splitting() {
        let reg = SpinRegister::electron_only();
        let reg = SpinRegister {
            electron_gyromagnetic_ghz_per_t: 27.972,
            ..reg
        };
        let h = build_hamiltonian(&reg, 0.3462).unwrap();
        let t = transition_frequencies(&h, Channel::Electron);
        assert_eq!(t.len(), 1);
        // γ_e·B = 27972 MHz/T × 0.3462 T
        assert!((t[0].frequency_mhz - 27972.0 * 0.3462).abs() < 1e-6);
        assert!((t[0].frequency_mhz - 9684.0).abs() < 0.5);
        assert!((t[0].weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_field_heisenberg_levels() {
        let a = 117.53;
        let reg = SpinRegister::phosphorus_donor();
        let h = build_hamiltonian(&reg, 0.0).unwrap();
        let e = &h.spectrum().energies;
        assert!((e[0] + 0.75 * a).abs() < 1e-9);
        for v in &e[1..] {
            assert!((v - 0.25 * a).abs() < 1e-9);
        }
    }

    #[test]
    fn phosphorus_lower_endor_branch() {
        let h = build_hamiltonian(&p31_register(), 0.3442).unwrap();
        let t = transition_frequencies(&h, Channel::Nuclear(SpinRef::Donor));
        assert_eq!(t.len(), 2);
        assert!((t[0].frequency_mhz - 52.475).abs() < 0.05, "{:?}", t[0]);
        assert!(t[0].weight > 0.99);
    }

    #[test]
    fn second_order_shift_agrees_with_exact_levels() {
        let b = 0.3442;
        let reg = p31_register();
        let h = build_hamiltonian(&reg, b).unwrap();
        let t = transition_frequencies(&h, Channel::Nuclear(SpinRef::Donor));
        let a = 117.53;
        let fe = reg.electron_gyromagnetic_ghz_per_t * 1e3 * b;
        let fn_ = 17.23 * b;
        let shift = a * a / (4.0 * fe);
        let lower = a / 2.0 - fn_ - shift;
        let upper = a / 2.0 + fn_ + shift;
        assert!((t[0].frequency_mhz - lower).abs() < 1e-3);
        assert!((t[1].frequency_mhz - upper).abs() < 1e-3);
    }

    #[test]
    fn silicon_site_branches() {
        let b = 0.3442;
        let reg = SpinRegister::electron_only().with_sites(vec![NuclearSite::si29([4, 4, 0], 4.03, 0.0)]);
        let h = build_hamiltonian(&reg, b).unwrap();
        let t = transition_frequencies(&h, Channel::Nuclear(SpinRef::Site(0)));
        let nu = 8.46 * b;
        assert!((nu - 2.912).abs() < 1e-3);
        assert_eq!(t.len(), 2);
        assert!((t[0].frequency_mhz - (nu - 2.015)).abs() < 1e-6);
        assert!((t[1].frequency_mhz - (nu + 2.015)).abs() < 1e-6);
        assert!((t[0].frequency_mhz - 0.897).abs() < 1e-3 && (t[1].frequency_mhz - 4.927).abs() < 1e-3);
    }

    #[test]
    fn two_sites_give_dimension_sixteen() {
        let reg = p31_register().with_sites(vec![
            NuclearSite::si29([4, 0, 0], 1.0, 0.1),
            NuclearSite::si29([0, 4, 0], 1.0, 0.1),
        ]);
        let h = build_hamiltonian(&reg, 0.3442).unwrap();
        assert_eq!(h.dim(), 16);
        assert!(h.hermiticity_error() < 1e-9);
    }

    #[test]
    fn ionized_register_has_no_hyperfine() {
        let reg = p31_register()
            .with_sites(vec![NuclearSite::si29([40, 0, 0], 3.0, 0.3)])
            .with_charge(ChargeState::Ionized);
        let b = 0.3442;
        let h = build_hamiltonian(&reg, b).unwrap();
        for (spin, gamma) in [(SpinRef::Donor, 17.23), (SpinRef::Site(0), 8.46)] {
            let t = transition_frequencies(&h, Channel::Nuclear(spin));
            assert!(!t.is_empty());
            for tr in t {
                assert!((tr.frequency_mhz - gamma * b).abs() < 1e-9, "{tr:?}");
            }
        }
    }

    #[test]
    fn nuclear_branches_collapse_without_hyperfine() {
        let reg = SpinRegister {
            donor: Some(DonorNucleus {
                gyromagnetic_mhz_per_t: 17.23,
                hyperfine_mhz: 0.0,
            }),
            ..SpinRegister::electron_only()
        };
        let b = 0.3442;
        let h = build_hamiltonian(&reg, b).unwrap();
        let t = transition_frequencies(&h, Channel::Nuclear(SpinRef::Donor));
        assert_eq!(t.len(), 2);
        for tr in t {
            assert!((tr.frequency_mhz - 17.23 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_spin_gives_empty_list() {
        let h = build_hamiltonian(&SpinRegister::electron_only(), 0.3).unwrap();
        assert!(transition_frequencies(&h, Channel::Nuclear(SpinRef::Donor)).is_empty());
    }

    #[test]
    fn magic_angle_and_orientation_ratio() {
        let r = 0.5e-9;
        let magic_cos2 = 1.0 / 3.0;
        assert!(dipolar_from_geometry(8.46, 8.46, r, magic_cos2).abs() < 1e-12);
        let parallel = dipolar_from_geometry(8.46, 8.46, r, 1.0);
        let perpendicular = dipolar_from_geometry(8.46, 8.46, r, 0.0);
        assert!((parallel / perpendicular + 2.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_cell_pair_coupling() {
        // Evaluated independently: 1e-7 · 6.62607015e-34 · (8.46e6)² · (−2) / (0.543e-9)³ Hz.
        let expected_hz = 1e-7 * 6.626_070_15e-34 * 8.46e6 * 8.46e6 * -2.0 / 0.543e-9f64.powi(3);
        let a = NuclearSite::si29([0, 0, 0], 0.0, 0.0);
        let b = NuclearSite::si29([0, 0, 4], 0.0, 0.0);
        let coupling = dipolar_coupling(&a, &b, 0.543).unwrap();
        assert!((coupling - expected_hz * 1e-6).abs() < 1e-15);
        assert!((coupling + 5.9e-5).abs() < 0.1e-5, "{coupling}");
        assert!(dipolar_coupling(&a, &a, 0.543).is_err());
    }

    #[test]
    fn quarter_turn_precession() {
        let spins = vec![SpinRef::Electron];
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 0)] = C64::new(0.5, 0.0);
        m[(1, 1)] = C64::new(-0.5, 0.0);
        let h = Hamiltonian::from_matrix(m, spins.clone()).unwrap();
        let rho = QuantumState::product(spins, &[Bloch::PLUS_X]).unwrap();
        let out = evolve(&rho, &h, 0.25).unwrap();
        // ⟨σ₊⟩ = ρ[↓,↑] rotates from ½ to ½·e^{iπ/2}: the Bloch vector points along +y.
        let sp = out.transverse(0, 0, 0);
        assert!((sp - C64::new(0.0, 0.5)).norm() < 1e-12, "{sp}");
        assert_eq!(evolve(&rho, &h, 0.0).unwrap(), rho);
    }

    #[test]
    fn eigenstate_populations_static() {
        let reg = p31_register();
        let h = build_hamiltonian(&reg, 0.35).unwrap();
        let v = h.spectrum().vectors.column(2).into_owned();
        let amps: Vec<C64> = v.iter().copied().collect();
        let rho = QuantumState::pure(reg.spins(), &amps).unwrap();
        let out = evolve(&rho, &h, 3.7).unwrap();
        for k in 0..4 {
            assert!((out.population(k) - rho.population(k)).abs() < 1e-9);
        }
    }

    #[test]
    fn coherence_edge_cases() {
        let spins = vec![SpinRef::Electron];
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 0)] = C64::new(0.5, 0.0);
        m[(1, 1)] = C64::new(-0.5, 0.0);
        let h = Hamiltonian::from_matrix(m, spins.clone()).unwrap();
        let mixed = QuantumState::maximally_mixed(spins.clone());
        assert!(coherence(&mixed, &h, 0, 1).unwrap().norm() < 1e-15);
        let plus = QuantumState::product(spins, &[Bloch::PLUS_X]).unwrap();
        let c0 = coherence(&plus, &h, 0, 1).unwrap();
        assert!((c0.norm() - 0.5).abs() < 1e-12);
        let later = evolve(&plus, &h, 0.1).unwrap();
        let c1 = coherence(&later, &h, 0, 1).unwrap();
        assert!((c1.norm() - 0.5).abs() < 1e-12);
        let advanced = (c1 / c0).arg().abs();
        assert!((advanced - units::phase(1.0, 0.1)).abs() < 1e-9);
        assert!(coherence(&plus, &h, 1, 1).is_err());
    }

    #[test]
    fn spin_operator_matches_pauli_algebra() {
        let sx = spin_operator(1, 0, 1.0, 0.0, 0.0);
        let sy = spin_operator(1, 0, 0.0, 1.0, 0.0);
        let sz = spin_operator(1, 0, 0.0, 0.0, 1.0);
        let comm = &sx * &sy - &sy * &sx;
        let expect = &sz * C64::new(0.0, 1.0);
        assert!((comm - expect).norm() < 1e-12);
    }
}
