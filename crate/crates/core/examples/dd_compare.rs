//! Hahn and CPMG-2/4/8 on the A = 2.23 MHz preset: T₂ₙ grows with the
//! number of refocusing pulses.

use donorsim::experiments::{run_dd_compare, DdCompareParams};

fn main() -> donorsim::Result<()> {
    let report = run_dd_compare(&DdCompareParams::preset())?;
    if let Some(t) = report.table("summary") {
        println!("{}", t.columns.join("  "));
        for row in &t.rows {
            println!("{}", row.join("  "));
        }
    }
    for c in &report.checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(())
}
