//! The contraction bound for training K of L blocks per round, checked by
//! Monte Carlo on an isotropic quadratic.

use safl::convergence::{bound, expected_factor_isotropic, simulate_quadratic, ConvergenceParams, QuadraticProblem};

fn main() -> safl::Result<()> {
    let p = ConvergenceParams {
        eta: 0.5,
        mu: 1.0,
        smooth_l: 1.0,
        num_layers: 8,
        k: 4,
        rounds: 20,
        initial_gap: 1.0,
    };
    let b = bound(&p)?;
    println!("bound factor {:.3} ({:?})", b.factor, b.status);
    println!("expected factor {:.3}", expected_factor_isotropic(&p));

    let q = QuadraticProblem::isotropic(p.num_layers, 4, p.mu);
    let sim = simulate_quadratic(&p, &q, 1000, 0)?;
    println!("round     bound  empirical   std err");
    for r in sim.rounds.iter().step_by(4) {
        println!("{:>5}  {:.2e}   {:.2e}  {:.1e}", r.round, r.bound, r.mean_gap, r.std_err);
    }

    for k in [1, 2, 4, 8] {
        let f = bound(&ConvergenceParams { k, ..p.clone() })?.factor;
        println!("K={k}: factor {f:.4}");
    }
    Ok(())
}
