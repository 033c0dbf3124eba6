//! Tabulates the sup norms of the parametrix series terms and fits the
//! smallest constant C1 with  a_r <= C1^{r+1} rho^r / Gamma(1 + r/2),
//! rho = sqrt(t - s): the factorial decay that makes the series converge.
//! The fitted constant then prices the tail dropped after the last term.

use parametrix::model::{build_model, ModelConfig};
use parametrix::series::{truncation_tail, LadderEngine, QuadratureSpec};

// Gamma(1 + r/2) for r = 0..=4.
const GAMMA_HALF: [f64; 5] = [1.0, 0.886_226_925_452_758, 1.0, 1.329_340_388_179_137, 2.0];

fn main() -> parametrix::Result<()> {
    let model = build_model(&ModelConfig::family("sin1d"))?;
    let mut spec = QuadratureSpec::for_model(&model)?;
    spec.points_per_axis = 129;
    spec.ladder_steps = 32;
    let t: f64 = 0.25;
    let rho = t.sqrt();
    let mut engine = LadderEngine::new(&model, 0.0, t, &[0.0], &spec)?;
    engine.ensure_order(4)?;
    let k = engine.steps();

    let norms: Vec<f64> = (0..=4).map(|r| engine.term_sup(r, k)).collect();
    let mut c1 = 0.0f64;
    for (r, &a) in norms.iter().enumerate() {
        if a > 0.0 {
            c1 = c1.max((a * GAMMA_HALF[r] / rho.powi(r as i32)).powf(1.0 / (r as f64 + 1.0)));
        }
    }

    println!("rho = {rho:.4}, fitted C1 = {c1:.6}");
    println!("{:>3} {:>14} {:>14}", "r", "term sup", "envelope");
    for (r, &a) in norms.iter().enumerate() {
        let bound = c1.powi(r as i32 + 1) * rho.powi(r as i32) / GAMMA_HALF[r];
        println!("{r:>3} {a:>14.6e} {bound:>14.6e}");
    }
    println!(
        "tail beyond r = 4 priced at {:.3e}",
        truncation_tail(c1, rho, 4)
    );
    Ok(())
}
