//! The donor spin register: electron, optional donor nucleus and a list of
//! ²⁹Si sites.
//!
//! Basis ordering is fixed: electron ⊗ donor nucleus ⊗ sites in list order.
//! Qubit 0 is the most significant bit of a basis index, and bit value 0 is
//! spin up (m = +½).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units;

/// Largest Hilbert dimension handled by the exact-dynamics path (12 spins).
pub const MAX_EXACT_DIM: usize = 4096;

/// Default window of ²⁹Si hyperfine couplings seen in ENDOR, MHz.
pub const SI29_HYPERFINE_RANGE_MHZ: (f64, f64) = (0.0, 6.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ChargeState {
    #[default]
    Neutral,
    Ionized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DonorNucleus {
    pub gyromagnetic_mhz_per_t: f64,
    pub hyperfine_mhz: f64,
}

impl DonorNucleus {
    pub fn phosphorus() -> Self {
        Self {
            gyromagnetic_mhz_per_t: units::GAMMA_P31_MHZ_PER_T,
            hyperfine_mhz: units::HYPERFINE_P31_MHZ,
        }
    }
}

/// A ²⁹Si lattice site with its secular and pseudo-secular hyperfine couplings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuclearSite {
    /// Lattice vector in units of a₀/4, donor at the origin.
    pub position: [i32; 3],
    pub gyromagnetic_mhz_per_t: f64,
    pub hyperfine_zz_mhz: f64,
    pub hyperfine_zx_mhz: f64,
    pub orbit_id: usize,
}

impl NuclearSite {
    pub fn si29(position: [i32; 3], hyperfine_zz_mhz: f64, hyperfine_zx_mhz: f64) -> Self {
        Self {
            position,
            gyromagnetic_mhz_per_t: units::GAMMA_SI29_MHZ_PER_T,
            hyperfine_zz_mhz,
            hyperfine_zx_mhz,
            orbit_id: 0,
        }
    }

    /// Distance from the donor in nm.
    pub fn radius_nm(&self, lattice_constant_nm: f64) -> f64 {
        let [x, y, z] = self.position.map(f64::from);
        (x * x + y * y + z * z).sqrt() * lattice_constant_nm / 4.0
    }
}

/// Addresses one spin of a register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpinRef {
    Electron,
    Donor,
    Site(usize),
}

impl fmt::Display for SpinRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpinRef::Electron => write!(f, "electron"),
            SpinRef::Donor => write!(f, "donor"),
            SpinRef::Site(i) => write!(f, "site[{i}]"),
        }
    }
}

/// Where register contents came from; carried through JSON export.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinRegister {
    pub electron_gyromagnetic_ghz_per_t: f64,
    pub charge_state: ChargeState,
    pub donor: Option<DonorNucleus>,
    pub sites: Vec<NuclearSite>,
    pub lattice_constant_nm: f64,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Default for SpinRegister {
    fn default() -> Self {
        Self::electron_only()
    }
}

impl SpinRegister {
    pub fn electron_only() -> Self {
        Self {
            electron_gyromagnetic_ghz_per_t: units::electron_gyromagnetic_ghz_per_t(
                units::DEFAULT_G_FACTOR,
            ),
            charge_state: ChargeState::Neutral,
            donor: None,
            sites: Vec::new(),
            lattice_constant_nm: units::SILICON_LATTICE_NM,
            provenance: Provenance::default(),
        }
    }

    /// Electron plus ³¹P nucleus with the default constants.
    pub fn phosphorus_donor() -> Self {
        Self {
            donor: Some(DonorNucleus::phosphorus()),
            ..Self::electron_only()
        }
    }

    pub fn with_sites(mut self, sites: Vec<NuclearSite>) -> Self {
        self.sites = sites;
        self
    }

    pub fn with_charge(mut self, charge_state: ChargeState) -> Self {
        self.charge_state = charge_state;
        self
    }

    pub fn with_g_factor(mut self, g_factor: f64) -> Self {
        self.electron_gyromagnetic_ghz_per_t = units::electron_gyromagnetic_ghz_per_t(g_factor);
        self
    }

    pub fn num_spins(&self) -> usize {
        1 + usize::from(self.donor.is_some()) + self.sites.len()
    }

    pub fn dim(&self) -> usize {
        1usize
            .checked_shl(self.num_spins() as u32)
            .unwrap_or(usize::MAX)
    }

    pub fn ensure_exact_capacity(&self) -> Result<()> {
        if self.num_spins() > 12 || self.dim() > MAX_EXACT_DIM {
            return Err(Error::Capacity {
                dim: self.dim(),
                cap: MAX_EXACT_DIM,
            });
        }
        Ok(())
    }

    /// Qubit index of a spin in the tensor-product basis.
    pub fn qubit(&self, spin: SpinRef) -> Result<usize> {
        let offset = 1 + usize::from(self.donor.is_some());
        match spin {
            SpinRef::Electron => Ok(0),
            SpinRef::Donor if self.donor.is_some() => Ok(1),
            SpinRef::Site(i) if i < self.sites.len() => Ok(offset + i),
            other => Err(Error::UnknownSpin(other.to_string())),
        }
    }

    /// Spins in basis order.
    pub fn spins(&self) -> Vec<SpinRef> {
        let mut out = vec![SpinRef::Electron];
        if self.donor.is_some() {
            out.push(SpinRef::Donor);
        }
        out.extend((0..self.sites.len()).map(SpinRef::Site));
        out
    }

    /// Nuclear gyromagnetic ratio (MHz/T) of a nuclear spin; `None` for the electron.
    pub fn nuclear_gyromagnetic(&self, spin: SpinRef) -> Option<f64> {
        match spin {
            SpinRef::Electron => None,
            SpinRef::Donor => self.donor.map(|d| d.gyromagnetic_mhz_per_t),
            SpinRef::Site(i) => self.sites.get(i).map(|s| s.gyromagnetic_mhz_per_t),
        }
    }

    /// Secular hyperfine coupling of a nuclear spin to the electron, MHz.
    pub fn secular_hyperfine(&self, spin: SpinRef) -> Option<f64> {
        match spin {
            SpinRef::Electron => None,
            SpinRef::Donor => self.donor.map(|d| d.hyperfine_mhz),
            SpinRef::Site(i) => self.sites.get(i).map(|s| s.hyperfine_zz_mhz),
        }
    }

    /// Non-fatal validation findings, e.g. couplings outside the usual ENDOR window.
    pub fn warnings(&self) -> Vec<String> {
        let (lo, hi) = SI29_HYPERFINE_RANGE_MHZ;
        let mut out = Vec::new();
        for (i, s) in self.sites.iter().enumerate() {
            if !(lo..=hi).contains(&s.hyperfine_zz_mhz) {
                out.push(format!(
                    "site[{i}] hyperfine_zz {:.4} MHz outside [{lo}, {hi}] MHz",
                    s.hyperfine_zz_mhz
                ));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let reg: SpinRegister = serde_json::from_str(text)?;
        if reg.lattice_constant_nm <= 0.0 {
            return Err(Error::param("lattice_constant_nm", "must be positive"));
        }
        Ok(reg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_counts_every_spin() {
        let reg = SpinRegister::phosphorus_donor().with_sites(vec![
            NuclearSite::si29([4, 0, 0], 1.0, 0.0),
            NuclearSite::si29([0, 4, 0], 1.0, 0.0),
        ]);
        assert_eq!(reg.num_spins(), 4);
        assert_eq!(reg.dim(), 16);
        assert_eq!(reg.qubit(SpinRef::Site(1)).unwrap(), 3);
        assert!(reg.qubit(SpinRef::Site(2)).is_err());
    }

    #[test]
    fn capacity_is_twelve_spins() {
        let sites = (0..11).map(|i| NuclearSite::si29([4 * i, 0, 0], 0.1, 0.0)).collect();
        let reg = SpinRegister::phosphorus_donor().with_sites(sites);
        assert!(matches!(
            reg.ensure_exact_capacity(),
            Err(Error::Capacity { dim: 8192, .. })
        ));
    }

    #[test]
    fn out_of_range_coupling_only_warns() {
        let reg = SpinRegister::electron_only()
            .with_sites(vec![NuclearSite::si29([1, 1, 1], 7.5, 0.0)]);
        assert_eq!(reg.warnings().len(), 1);
    }

    #[test]
    fn json_round_trip() {
        let reg = SpinRegister::phosphorus_donor()
            .with_sites(vec![NuclearSite::si29([1, 1, 1], 4.03, 0.4)]);
        let back = SpinRegister::from_json(&reg.to_json().unwrap()).unwrap();
        assert_eq!(reg, back);
    }
}
