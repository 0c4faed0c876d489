//! Negative control: phase retrieval is not star-convex everywhere. A
//! one-sample instance with measurement a = [1] and planted signal
//! xhat = [1], evaluated at x = -0.5, gives the residual +0.703125 exactly
//! — positive, so the star-convexity certificate correctly refuses it.
//! Near the planted signal the residuals turn negative again.
//!
//!     cargo run --example phase_retrieval_residual

use starpath::analyzer::star_residual;
use starpath::problems::PhaseRetrieval;
use starpath::{FiniteSumProblem, ParamVector};

fn residual_at(p: &PhaseRetrieval, x: f64) -> f64 {
    let x = ParamVector::new(vec![x]);
    let x_star = p.planted_minimizer().unwrap();
    star_residual(
        p.component_value(0, &x),
        &p.component_grad(0, &x),
        &x,
        x_star,
        p.component_value(0, x_star),
    )
}

fn main() {
    let p = PhaseRetrieval::from_rows(vec![ParamVector::new(vec![1.0])], ParamVector::new(vec![1.0]));

    println!("l(x) = (x^2 - 1)^2 / 4, reference x* = 1\n");
    println!("    x      e(x)");
    for &x in &[-1.5, -1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.5] {
        let e = residual_at(&p, x);
        let mark = if e > 0.0 { "  <- not star-convex here" } else { "" };
        println!("{x:>6.2}  {e:>10.6}{mark}");
    }
    let documented = residual_at(&p, -0.5);
    println!("\nresidual at x = -0.5: {documented} (closed form: 0.703125)");
    assert!((documented - 0.703125).abs() < 1e-12);
}
