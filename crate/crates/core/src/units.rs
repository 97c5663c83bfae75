//! Physical constants and unit conventions.
//!
//! Every frequency inside the crate is an ordinary frequency in MHz and every
//! time in the exact-dynamics layer is in μs, so a phase is always
//! `2π · ν[MHz] · t[μs]`. [`phase`] is the single conversion point. The bath
//! and charge layers report delays in seconds for readability; they convert
//! with [`US_PER_S`] before touching a phase.

use std::f64::consts::TAU;

/// Bohr magneton over Planck constant, GHz/T.
pub const BOHR_MAGNETON_GHZ_PER_T: f64 = 13.996_244_93;
pub const PLANCK_J_S: f64 = 6.626_070_15e-34;
pub const BOLTZMANN_J_PER_K: f64 = 1.380_649e-23;
/// μ₀/4π in T·m/A.
pub const MU0_OVER_4PI: f64 = 1.0e-7;

/// Electron g-factor of the P donor (configurable; see [`electron_gyromagnetic_ghz_per_t`]).
pub const DEFAULT_G_FACTOR: f64 = 1.9985;
/// ³¹P nuclear gyromagnetic ratio magnitude, MHz/T.
pub const GAMMA_P31_MHZ_PER_T: f64 = 17.23;
/// ²⁹Si nuclear gyromagnetic ratio magnitude, MHz/T.
pub const GAMMA_SI29_MHZ_PER_T: f64 = 8.46;
/// Isotropic ³¹P hyperfine coupling, MHz.
pub const HYPERFINE_P31_MHZ: f64 = 117.53;
/// Cubic lattice constant of silicon, nm.
pub const SILICON_LATTICE_NM: f64 = 0.543;
/// Natural abundance of the spin-½ isotope ²⁹Si.
pub const SI29_ABUNDANCE: f64 = 0.047;

pub const US_PER_S: f64 = 1.0e6;

/// Electron gyromagnetic ratio γ_e = g·μ_B/h in GHz/T.
pub fn electron_gyromagnetic_ghz_per_t(g_factor: f64) -> f64 {
    g_factor * BOHR_MAGNETON_GHZ_PER_T
}

/// Phase in radians accumulated at `frequency_mhz` over `time_us`.
#[inline]
pub fn phase(frequency_mhz: f64, time_us: f64) -> f64 {
    TAU * frequency_mhz * time_us
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_electron_gyromagnetic_ratio() {
        let gamma = electron_gyromagnetic_ghz_per_t(DEFAULT_G_FACTOR);
        assert!((gamma - 27.972).abs() < 1e-3, "{gamma}");
    }

    #[test]
    fn quarter_turn() {
        assert!((phase(1.0, 0.25) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }
}
