//! Runs every standing-assumption check for each built-in model family:
//! innovation mean and moments, ellipticity, coefficient boundedness, and
//! the consistency of the innovation covariance with the diffusion matrix.

use parametrix::model::{build_model, validate_assumptions, ModelConfig, SampleSpec};

fn main() -> parametrix::Result<()> {
    for family in ["constant", "sin1d", "sin2d"] {
        let model = build_model(&ModelConfig::family(family))?;
        let sample = SampleSpec::default_for_dim(model.dim());
        let report = validate_assumptions(&model, &sample)?;
        println!("{family} (d = {}):", model.dim());
        for c in &report.checks {
            println!(
                "  {} {:<24} max violation {:.3e} (tolerance {:.1e})",
                if c.pass { "PASS" } else { "FAIL" },
                c.id,
                c.max_violation,
                c.tolerance
            );
        }
    }
    Ok(())
}
