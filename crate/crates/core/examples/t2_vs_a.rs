//! Median Hahn T₂ₙ against hyperfine coupling over the isotope ensemble.

use donorsim::experiments::{run_t2_vs_a, T2VsAParams};

fn main() -> donorsim::Result<()> {
    let report = run_t2_vs_a(&T2VsAParams::default())?;
    if let Some(t) = report.table("t2_vs_a") {
        for row in &t.rows {
            println!("A = {:>5} MHz  median T2n = {} s", row[0], row[1]);
        }
    }
    for c in &report.checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(())
}
