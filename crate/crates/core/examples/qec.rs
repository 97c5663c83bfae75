//! Three-qubit phase-flip code on the donor register: a corrected single
//! flip, two rounds with charge-cycle ancilla reset, and the logical error
//! rate under independent phase noise.

use donorsim::experiments::{run_qec, QecError, QecRegisterSpec, QecRole};

fn main() -> donorsim::Result<()> {
    let ideal = QecRegisterSpec {
        reset: None,
        rounds: 1,
        ..QecRegisterSpec::standard()
    };
    let cases = [
        ("single flip on data", ideal.clone(), QecError::Flip(vec![QecRole::Data])),
        ("two rounds with reset", QecRegisterSpec::standard(), QecError::None),
        ("iid p = 0.1", ideal, QecError::Iid { p: 0.1, shots: 10_000 }),
    ];
    for (name, spec, error) in cases {
        let report = run_qec(&spec, &error, 1)?;
        println!("{name}");
        for f in &report.fits {
            println!("  {} = {:.5}", f.name, f.value);
        }
        for c in &report.checks {
            println!("  [{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
    Ok(())
}
