//! Read/load cycles with synchronised electron decoupling: nuclear coherence
//! with and without decoupling, for the SET and laser presets.

use donorsim::charge::{protect_and_reset, wahuha_suppression, ProtectionParams};

fn main() -> donorsim::Result<()> {
    for params in [ProtectionParams::set(), ProtectionParams::laser()] {
        let run = protect_and_reset(&params)?;
        let last = run.times_us.len() - 1;
        println!(
            "{:?}: {} cycles of {:.1} ms, coherence with DD {:.4}, without {:.4}, contrast {:.4}, electron P {:.3}, neutral {:.3}",
            params.preset,
            params.cycles,
            params.cycle_us() / 1e3,
            run.final_coherence_dd(),
            run.final_coherence_no_dd(),
            run.contrast(),
            run.electron_polarization[last],
            run.neutral_fraction[last],
        );
    }
    println!("WAHUHA residual at tau = 20 us, 4 us RF pi: {:.3e}", wahuha_suppression(20.0, 4.0)?);
    Ok(())
}
