//! Recompute the bath calibration constants and print T₂ₙ at a few couplings.

use donorsim::baths::{calibrate, t2_scan_vs_hyperfine, Calibration, ScanConfig};

fn main() -> donorsim::Result<()> {
    let cfg = ScanConfig::default();
    let frozen = Calibration::default();
    let cal = calibrate(&cfg, &frozen)?;
    println!("r0 = {:.6e}, t_far_s = {:.6}", cal.rate_law.r0, cal.t_far_s);
    for p in t2_scan_vs_hyperfine(&[0.0, 0.5, 1.0, 2.0, 4.0, 6.0], &cfg, &cal)? {
        println!("A = {:>4} MHz  T2 = {:.4e} s  [{:.3e}, {:.3e}]", p.a_mhz, p.median_t2_s, p.q25_t2_s, p.q75_t2_s);
    }
    Ok(())
}
