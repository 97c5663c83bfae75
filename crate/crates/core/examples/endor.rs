//! ENDOR spectra at 344.2 mT: the ³¹P lines and the ²⁹Si catalog around
//! the bare ²⁹Si Zeeman frequency.

use donorsim::experiments::{run_endor_preset, EndorPreset};

fn main() -> donorsim::Result<()> {
    for preset in [EndorPreset::P31, EndorPreset::Si29Catalog, EndorPreset::EmptyBath] {
        let report = run_endor_preset(preset, 0.3442, None, 60.0)?;
        println!("{preset:?}");
        if let Some(peaks) = report.table("peaks") {
            for row in &peaks.rows {
                println!("  {:>12} MHz  weight {:<8} lines {:<3} FWHM {} kHz", row[0], row[1], row[2], row[3]);
            }
        }
        for c in &report.checks {
            println!("  [{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
    Ok(())
}
