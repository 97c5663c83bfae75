//! ²⁹Si bath generation on the diamond lattice, hyperfine assignment and
//! symmetry orbits around the donor.
//!
//! Positions are integer triples in units of a₀/4 with the donor on the
//! origin. A point belongs to the diamond lattice when its coordinates are all
//! even with a sum divisible by 4, or all odd with a sum ≡ 3 (mod 4).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::{NuclearSite, Provenance, SpinRegister};
use crate::units;

pub const MAX_CANDIDATE_SITES: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub lattice_constant_nm: f64,
    pub radius_nm: f64,
    pub abundance: f64,
    pub seed: u64,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            lattice_constant_nm: units::SILICON_LATTICE_NM,
            radius_nm: 2.0,
            abundance: units::SI29_ABUNDANCE,
            seed: 0,
        }
    }
}

impl LatticeConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.abundance) {
            return Err(Error::param("abundance", "must lie in [0, 1]"));
        }
        if !(self.radius_nm > 0.0) {
            return Err(Error::param("radius_nm", "must be positive"));
        }
        if !(self.lattice_constant_nm > 0.0) {
            return Err(Error::param("lattice_constant_nm", "must be positive"));
        }
        Ok(())
    }
}

pub fn is_diamond_site(p: [i32; 3]) -> bool {
    let [x, y, z] = p;
    let parity = [x, y, z].map(|c| c.rem_euclid(2));
    let sum = (x + y + z).rem_euclid(4);
    match parity {
        [0, 0, 0] => sum == 0,
        [1, 1, 1] => sum == 3,
        _ => false,
    }
}

fn norm2(p: [i32; 3]) -> i64 {
    p.iter().map(|&c| i64::from(c) * i64::from(c)).sum()
}

/// Diamond lattice points (origin excluded) with `|p|² ≤ r2_max`, sorted by
/// distance then lexicographically.
pub fn sites_within(r2_max: i64) -> Vec<[i32; 3]> {
    let bound = (r2_max as f64).sqrt().floor() as i32;
    let mut out = Vec::new();
    for x in -bound..=bound {
        for y in -bound..=bound {
            for z in -bound..=bound {
                let p = [x, y, z];
                if p != [0, 0, 0] && norm2(p) <= r2_max && is_diamond_site(p) {
                    out.push(p);
                }
            }
        }
    }
    out.sort_by_key(|&p| (norm2(p), p));
    out
}

/// Occupy every lattice site within the radius independently with
/// probability `abundance`. Deterministic per seed.
pub fn generate_lattice(config: &LatticeConfig) -> Result<Vec<NuclearSite>> {
    config.validate()?;
    let ratio = config.radius_nm / config.lattice_constant_nm;
    let estimate = 8.0 * 4.0 / 3.0 * std::f64::consts::PI * ratio.powi(3);
    if estimate > MAX_CANDIDATE_SITES as f64 {
        return Err(Error::LatticeCapacity {
            estimate: estimate as usize,
            limit: MAX_CANDIDATE_SITES,
        });
    }
    let r_units = config.radius_nm * 4.0 / config.lattice_constant_nm;
    let r2_max = (r_units * r_units).floor() as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sites = sites_within(r2_max)
        .into_iter()
        .filter(|_| rng.random::<f64>() < config.abundance)
        .map(|p| NuclearSite::si29(p, 0.0, 0.0))
        .collect();
    Ok(sites)
}

/// The 24 operations of the T_d point group about a lattice site:
/// coordinate permutations combined with an even number of sign flips.
pub fn td_operations() -> Vec<[[i32; 3]; 3]> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    const SIGNS: [[i32; 3]; 4] = [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]];
    let mut ops = Vec::with_capacity(24);
    for perm in PERMS {
        for sign in SIGNS {
            let mut m = [[0; 3]; 3];
            for row in 0..3 {
                m[row][perm[row]] = sign[row];
            }
            ops.push(m);
        }
    }
    ops
}

fn apply(m: &[[i32; 3]; 3], p: [i32; 3]) -> [i32; 3] {
    let mut out = [0; 3];
    for (r, row) in m.iter().enumerate() {
        out[r] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
    }
    out
}

/// Canonical representative of the T_d orbit of `p` (lexicographic maximum).
pub fn orbit_key(p: [i32; 3]) -> [i32; 3] {
    td_operations().iter().map(|m| apply(m, p)).max().unwrap_or(p)
}

pub fn orbit_members(p: [i32; 3]) -> Vec<[i32; 3]> {
    let mut members: Vec<_> = td_operations().iter().map(|m| apply(m, p)).collect();
    members.sort();
    members.dedup();
    members
}

/// Orbits of the full lattice out to `r2_max`, ranked by distance then key.
fn ranked_orbits(r2_max: i64) -> Vec<[i32; 3]> {
    let mut keys: Vec<[i32; 3]> = sites_within(r2_max).into_iter().map(orbit_key).collect();
    keys.sort_by_key(|&k| (norm2(k), std::cmp::Reverse(k)));
    keys.dedup();
    keys
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub label: String,
    pub hyperfine_zz_mhz: f64,
    pub hyperfine_zx_mhz: f64,
    pub multiplicity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperfineCatalog {
    pub entries: Vec<CatalogEntry>,
}

impl HyperfineCatalog {
    /// The measured ²⁹Si couplings: the top of the ENDOR range and the two
    /// sites characterised in the coherence measurements.
    pub fn measured() -> Self {
        let entry = |label: &str, a: f64, multiplicity| CatalogEntry {
            label: label.to_string(),
            hyperfine_zz_mhz: a,
            hyperfine_zx_mhz: 0.1 * a,
            multiplicity,
        };
        Self {
            entries: vec![
                entry("si-6.00", 6.0, 4),
                entry("si-4.03", 4.03, 6),
                entry("si-2.23", 2.23, 12),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !(0.0..=6.0).contains(&e.hyperfine_zz_mhz) {
                return Err(Error::param(
                    "catalog",
                    format!("entry {} has A_zz {} MHz outside [0, 6]", e.label, e.hyperfine_zz_mhz),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvelopeForm {
    Exponential,
    /// Exponential envelope times the squared valley-interference factor
    /// `((cos k₀x + cos k₀y + cos k₀z)/3)²`, k₀ = 0.85·2π/a₀.
    ExponentialWithOscillation,
}

/// Stand-in for an electron-wavefunction model of ²⁹Si couplings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeModel {
    pub amplitude_mhz: f64,
    pub decay_length_nm: f64,
    pub form: EnvelopeForm,
    /// A_zx = η·A_zz.
    pub anisotropy_fraction: f64,
}

impl Default for EnvelopeModel {
    fn default() -> Self {
        Self {
            amplitude_mhz: 120.0,
            decay_length_nm: 2.0,
            form: EnvelopeForm::Exponential,
            anisotropy_fraction: 0.1,
        }
    }
}

impl EnvelopeModel {
    /// Envelope value at distance `r_nm`, ignoring the oscillation.
    pub fn envelope(&self, r_nm: f64) -> f64 {
        self.amplitude_mhz * (-2.0 * r_nm / self.decay_length_nm).exp()
    }

    /// Radius at which the envelope equals `a_mhz`.
    pub fn radius_for(&self, a_mhz: f64) -> f64 {
        0.5 * self.decay_length_nm * (self.amplitude_mhz / a_mhz).ln()
    }

    pub fn hyperfine_zz(&self, position: [i32; 3], lattice_constant_nm: f64) -> f64 {
        // Canonical ordering keeps symmetry-equivalent sites bitwise identical.
        let mut abs = position.map(|c| c.abs());
        abs.sort_unstable();
        let xyz = abs.map(|c| f64::from(c) * lattice_constant_nm / 4.0);
        let r = (norm2(abs) as f64).sqrt() * lattice_constant_nm / 4.0;
        let env = self.envelope(r);
        match self.form {
            EnvelopeForm::Exponential => env,
            EnvelopeForm::ExponentialWithOscillation => {
                let k0 = 0.85 * std::f64::consts::TAU / lattice_constant_nm;
                let f = xyz.iter().map(|c| (k0 * c).cos()).sum::<f64>() / 3.0;
                env * f * f
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HyperfineSource {
    /// Catalog entries matched to orbits by distance rank; sites beyond the
    /// catalog fall back to the envelope.
    Catalog {
        catalog: HyperfineCatalog,
        fallback: EnvelopeModel,
    },
    Envelope(EnvelopeModel),
}

/// Attach hyperfine couplings and orbit labels, producing a neutral ³¹P
/// register with the given sites.
pub fn assign_hyperfine(
    sites: &[NuclearSite],
    source: &HyperfineSource,
    lattice_constant_nm: f64,
) -> Result<SpinRegister> {
    let r2_max = sites.iter().map(|s| norm2(s.position)).max().unwrap_or(0);
    let ranks: BTreeMap<[i32; 3], usize> = ranked_orbits(r2_max)
        .into_iter()
        .enumerate()
        .map(|(i, k)| (k, i))
        .collect();

    let mut notes = Vec::new();
    let mut fallback_count = 0usize;
    let mut out = Vec::with_capacity(sites.len());
    for site in sites {
        if site.position == [0, 0, 0] || !is_diamond_site(site.position) {
            return Err(Error::param("sites", format!("{:?} is not a bath lattice site", site.position)));
        }
        let key = orbit_key(site.position);
        let orbit_id = ranks[&key];
        let (a_zz, a_zx) = match source {
            HyperfineSource::Envelope(env) => {
                let a = env.hyperfine_zz(site.position, lattice_constant_nm);
                (a, env.anisotropy_fraction * a)
            }
            HyperfineSource::Catalog { catalog, fallback } => match catalog.entries.get(orbit_id) {
                Some(entry) => {
                    let size = orbit_members(site.position).len();
                    if size != entry.multiplicity {
                        let note = format!(
                            "catalog entry {} declares multiplicity {} but matched orbit has {size} sites",
                            entry.label, entry.multiplicity
                        );
                        if !notes.contains(&note) {
                            notes.push(note);
                        }
                    }
                    (entry.hyperfine_zz_mhz, entry.hyperfine_zx_mhz)
                }
                None => {
                    fallback_count += 1;
                    let a = fallback.hyperfine_zz(site.position, lattice_constant_nm);
                    (a, fallback.anisotropy_fraction * a)
                }
            },
        };
        out.push(NuclearSite {
            hyperfine_zz_mhz: a_zz,
            hyperfine_zx_mhz: a_zx,
            orbit_id,
            ..site.clone()
        });
    }

    let source_tag = match source {
        HyperfineSource::Catalog { .. } => "catalog",
        HyperfineSource::Envelope(_) => "envelope",
    };
    if fallback_count > 0 {
        notes.push(format!("catalog exhausted: {fallback_count} sites assigned from the envelope"));
    }
    match source {
        HyperfineSource::Envelope(env) | HyperfineSource::Catalog { fallback: env, .. } => notes.push(format!(
            "envelope A0={} MHz a*={} nm form={:?} eta={}",
            env.amplitude_mhz, env.decay_length_nm, env.form, env.anisotropy_fraction
        )),
    }

    let mut register = SpinRegister::phosphorus_donor().with_sites(out);
    register.lattice_constant_nm = lattice_constant_nm;
    register.provenance = Provenance {
        source: source_tag.to_string(),
        notes,
    };
    Ok(register)
}

/// Partition sites into symmetry orbits, splitting any orbit whose members
/// differ in |A_zz| by more than `tolerance_mhz`.
pub fn equivalent_orbits(sites: &[NuclearSite], tolerance_mhz: f64) -> Vec<Vec<usize>> {
    let mut by_key: BTreeMap<[i32; 3], Vec<usize>> = BTreeMap::new();
    for (i, s) in sites.iter().enumerate() {
        by_key.entry(orbit_key(s.position)).or_default().push(i);
    }
    let mut groups = Vec::new();
    for members in by_key.into_values() {
        let mut sorted = members;
        sorted.sort_by(|&a, &b| {
            sites[a]
                .hyperfine_zz_mhz
                .abs()
                .total_cmp(&sites[b].hyperfine_zz_mhz.abs())
                .then(a.cmp(&b))
        });
        let mut current: Vec<usize> = Vec::new();
        for i in sorted {
            if let Some(&first) = current.first() {
                if (sites[i].hyperfine_zz_mhz.abs() - sites[first].hyperfine_zz_mhz.abs()).abs() > tolerance_mhz {
                    groups.push(std::mem::take(&mut current));
                }
            }
            current.push(i);
        }
        if !current.is_empty() {
            groups.push(current);
        }
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort();
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eight_atoms_per_conventional_cell() {
        let mut count = 0;
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    count += usize::from(is_diamond_site([x, y, z]));
                }
            }
        }
        assert_eq!(count, 8);
    }

    #[test]
    fn full_occupation_matches_site_density() {
        let cfg = LatticeConfig {
            radius_nm: 3.0,
            abundance: 1.0,
            ..Default::default()
        };
        let sites = generate_lattice(&cfg).unwrap();
        let expected = 8.0 * 4.0 / 3.0 * std::f64::consts::PI * (3.0f64 / 0.543).powi(3);
        assert!((sites.len() as f64 / expected - 1.0).abs() < 0.02);
        // Nearest neighbours sit at (±1, ±1, ±1) with an even number of minus signs.
        let nn: Vec<_> = sites.iter().take(4).map(|s| s.position).collect();
        for p in nn {
            assert_eq!(norm2(p), 3);
        }
    }

    #[test]
    fn zero_abundance_is_empty() {
        let cfg = LatticeConfig {
            abundance: 0.0,
            ..Default::default()
        };
        assert!(generate_lattice(&cfg).unwrap().is_empty());
    }

    #[test]
    fn occupation_is_binomial() {
        let cfg = LatticeConfig {
            radius_nm: 4.0,
            abundance: 0.047,
            seed: 11,
            ..Default::default()
        };
        let r_units: f64 = 4.0 * 4.0 / 0.543;
        let n = sites_within((r_units * r_units).floor() as i64).len() as f64;
        let k = generate_lattice(&cfg).unwrap().len() as f64;
        let mean = n * 0.047;
        let sigma = (n * 0.047 * 0.953).sqrt();
        assert!((k - mean).abs() < 5.0 * sigma, "k={k} mean={mean} sigma={sigma}");
    }

    #[test]
    fn capacity_limit() {
        let cfg = LatticeConfig {
            radius_nm: 200.0,
            ..Default::default()
        };
        assert!(matches!(generate_lattice(&cfg), Err(Error::LatticeCapacity { .. })));
        let bad = LatticeConfig {
            abundance: 1.5,
            ..Default::default()
        };
        assert!(generate_lattice(&bad).is_err());
    }

    #[test]
    fn axis_sites_share_an_orbit() {
        assert_eq!(orbit_key([4, 0, 0]), orbit_key([0, 4, 0]));
        assert_eq!(orbit_members([4, 0, 0]).len(), 6);
        assert_ne!(orbit_key([1, 1, 1]), orbit_key([-1, -1, -1]));
    }

    #[test]
    fn td_group_closes_and_preserves_lattice() {
        let ops = td_operations();
        assert_eq!(ops.len(), 24);
        for p in sites_within(40) {
            for m in &ops {
                assert!(is_diamond_site(apply(m, p)));
            }
        }
    }

    #[test]
    fn shell_orbit_sizes_from_enumeration() {
        // Independent count: group every lattice point by its image set.
        let mut sizes = std::collections::BTreeSet::new();
        for p in sites_within(100) {
            let mut images: Vec<[i32; 3]> = td_operations().iter().map(|m| apply(m, p)).collect();
            images.sort();
            images.dedup();
            sizes.insert(images.len());
        }
        assert_eq!(sizes.into_iter().collect::<Vec<_>>(), vec![4, 6, 12, 24]);
    }

    #[test]
    fn catalog_assigns_by_distance_rank() {
        let sites: Vec<NuclearSite> = sites_within(16).into_iter().map(|p| NuclearSite::si29(p, 0.0, 0.0)).collect();
        let source = HyperfineSource::Catalog {
            catalog: HyperfineCatalog::measured(),
            fallback: EnvelopeModel::default(),
        };
        let reg = assign_hyperfine(&sites, &source, 0.543).unwrap();
        let second_orbit: Vec<_> = reg.sites.iter().filter(|s| s.orbit_id == 1).collect();
        assert!(!second_orbit.is_empty());
        for s in second_orbit {
            assert_eq!(s.hyperfine_zz_mhz, 4.03);
        }
        assert!(reg.provenance.notes.iter().any(|n| n.contains("catalog exhausted")));
    }

    #[test]
    fn envelope_without_anisotropy() {
        let sites: Vec<NuclearSite> = sites_within(20).into_iter().map(|p| NuclearSite::si29(p, 0.0, 0.0)).collect();
        let env = EnvelopeModel {
            anisotropy_fraction: 0.0,
            ..Default::default()
        };
        let reg = assign_hyperfine(&sites, &HyperfineSource::Envelope(env), 0.543).unwrap();
        assert!(reg.sites.iter().all(|s| s.hyperfine_zx_mhz == 0.0));
        assert!(env.envelope(1e3) < 1e-300);
    }

    #[test]
    fn hyperfine_tolerance_splits_orbits() {
        let mut a = NuclearSite::si29([4, 0, 0], 1.0, 0.0);
        let mut b = NuclearSite::si29([0, 4, 0], 1.5, 0.0);
        a.orbit_id = 0;
        b.orbit_id = 0;
        assert_eq!(equivalent_orbits(&[a.clone(), b.clone()], 0.1).len(), 2);
        b.hyperfine_zz_mhz = 1.0;
        assert_eq!(equivalent_orbits(&[a, b], 0.1), vec![vec![0, 1]]);
    }

    proptest! {
        #[test]
        fn same_seed_same_sites(seed in any::<u64>()) {
            let cfg = LatticeConfig { radius_nm: 1.5, seed, ..Default::default() };
            prop_assert_eq!(generate_lattice(&cfg).unwrap(), generate_lattice(&cfg).unwrap());
        }

        #[test]
        fn envelope_is_monotone(r1 in 0.0f64..10.0, dr in 0.0f64..10.0) {
            let env = EnvelopeModel::default();
            prop_assert!(env.envelope(r1) >= env.envelope(r1 + dr));
        }

        #[test]
        fn orbits_partition_and_refine_shells(seed in 0u64..200) {
            let cfg = LatticeConfig { radius_nm: 1.6, abundance: 0.3, seed, ..Default::default() };
            let sites = generate_lattice(&cfg).unwrap();
            let reg = assign_hyperfine(&sites, &HyperfineSource::Envelope(EnvelopeModel::default()), 0.543).unwrap();
            let groups = equivalent_orbits(&reg.sites, 1e-9);
            let mut seen = vec![0usize; sites.len()];
            for g in &groups {
                let r2 = norm2(reg.sites[g[0]].position);
                let orbit = reg.sites[g[0]].orbit_id;
                for &i in g {
                    seen[i] += 1;
                    prop_assert_eq!(norm2(reg.sites[i].position), r2);
                    prop_assert_eq!(reg.sites[i].orbit_id, orbit);
                    prop_assert_eq!(reg.sites[i].hyperfine_zz_mhz, reg.sites[g[0]].hyperfine_zz_mhz);
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
