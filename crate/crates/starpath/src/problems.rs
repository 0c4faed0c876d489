//! Finite-sum objectives `f(x) = (1/n) sum_i l_i(x)` with nonnegative
//! components, plus synthetic instances with planted common global
//! minimizers.
//!
//! The planted construction (choose the minimizer first, then set targets)
//! makes "every component attains zero at the same point" exact, which is
//! what gives the path diagnostics their ground truth.

use crate::numcore::ParamVector;
use crate::rng::{mix64, Stream};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProblemError {
    #[error("consistent least squares requires d >= n (got n={n}, d={d})")]
    Underdetermined { n: usize, d: usize },
    #[error("component count must be positive")]
    EmptySum,
    #[error("estimate_lipschitz requires trials >= 1")]
    NoTrials,
    #[error("estimate_lipschitz requires radius > 0")]
    BadRadius,
}

/// A finite-sum objective. Component indices here are 0-based; the schedule
/// layer's 1-based `xi_k` values are shifted down by one before they reach
/// this trait.
pub trait FiniteSumProblem: Send + Sync {
    fn num_components(&self) -> usize;
    fn dim(&self) -> usize;
    /// Value of component `i` at `x`; nonnegative.
    fn component_value(&self, i: usize, x: &ParamVector) -> f64;
    fn component_grad(&self, i: usize, x: &ParamVector) -> ParamVector;
    /// A known common global minimizer, when the instance was planted.
    fn planted_minimizer(&self) -> Option<&ParamVector> {
        None
    }
    /// A global bound on the component gradient Lipschitz constants, when
    /// one is known in closed form.
    fn lipschitz_bound(&self) -> Option<f64> {
        None
    }
    /// Content hash identifying the instance; traces carry it so the
    /// analyzer can refuse a mismatched problem/trace pair.
    fn fingerprint(&self) -> u64;
}

/// Mean gradient and population variance of the component gradients.
#[derive(Debug, Clone)]
pub struct FullGradientStats {
    pub mean_grad: ParamVector,
    /// `(1/n) sum_i ||grad_i - mean||^2`; zero iff all component gradients
    /// coincide.
    pub variance: f64,
}

/// `f(x) = (1/n) sum_i l_i(x)`.
pub fn full_value(p: &dyn FiniteSumProblem, x: &ParamVector) -> f64 {
    assert_eq!(x.dim(), p.dim(), "full_value: dimension mismatch");
    let n = p.num_components();
    (0..n).map(|i| p.component_value(i, x)).sum::<f64>() / n as f64
}

/// Exact mean and variance over all `n` component gradients at `x`.
pub fn full_gradient_stats(p: &dyn FiniteSumProblem, x: &ParamVector) -> FullGradientStats {
    assert_eq!(x.dim(), p.dim(), "full_gradient_stats: dimension mismatch");
    let n = p.num_components();
    let grads: Vec<ParamVector> = (0..n).map(|i| p.component_grad(i, x)).collect();
    let mut mean = ParamVector::zeros(p.dim());
    for g in &grads {
        mean.axpy_inplace(1.0 / n as f64, g);
    }
    let variance = grads.iter().map(|g| g.dist2_sq(&mean)).sum::<f64>() / n as f64;
    FullGradientStats {
        mean_grad: mean,
        variance,
    }
}

fn fp(words: &[u64]) -> u64 {
    let mut s = 0x5354_4152_5041_5448u64; // "STARPATH"
    for &w in words {
        s = mix64(s ^ mix64(w));
    }
    s
}

/// Consistent least squares: `l_i(x) = (a_i' x - b_i)^2 / 2` with
/// `b_i = a_i' xhat` for a planted `xhat`, so every component is zero at
/// `xhat`. Requires `d >= n` so the planted point is generically the only
/// structure we rely on.
#[derive(Debug)]
pub struct ConsistentLeastSquares {
    rows: Vec<ParamVector>,
    targets: Vec<f64>,
    planted: ParamVector,
    lipschitz: f64,
    seed: u64,
}

impl ConsistentLeastSquares {
    pub fn rows(&self) -> &[ParamVector] {
        &self.rows
    }
}

pub fn make_consistent_least_squares(
    n: usize,
    d: usize,
    seed: u64,
) -> Result<ConsistentLeastSquares, ProblemError> {
    if n < 1 {
        return Err(ProblemError::EmptySum);
    }
    if d < n {
        return Err(ProblemError::Underdetermined { n, d });
    }
    let mut stream = Stream::keyed(&[seed, 0x6c73]); // "ls" tag
    let planted = ParamVector::new((0..d).map(|_| stream.next_normal()).collect());
    let mut rows = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut lipschitz = 0.0f64;
    for _ in 0..n {
        let a = ParamVector::new((0..d).map(|_| stream.next_normal()).collect());
        lipschitz = lipschitz.max(a.dot(&a));
        targets.push(a.dot(&planted));
        rows.push(a);
    }
    Ok(ConsistentLeastSquares {
        rows,
        targets,
        planted,
        lipschitz,
        seed,
    })
}

impl FiniteSumProblem for ConsistentLeastSquares {
    fn num_components(&self) -> usize {
        self.rows.len()
    }

    fn dim(&self) -> usize {
        self.planted.dim()
    }

    fn component_value(&self, i: usize, x: &ParamVector) -> f64 {
        let r = self.rows[i].dot(x) - self.targets[i];
        0.5 * r * r
    }

    fn component_grad(&self, i: usize, x: &ParamVector) -> ParamVector {
        let r = self.rows[i].dot(x) - self.targets[i];
        self.rows[i].scale(r)
    }

    fn planted_minimizer(&self) -> Option<&ParamVector> {
        Some(&self.planted)
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(self.lipschitz)
    }

    fn fingerprint(&self) -> u64 {
        fp(&[1, self.rows.len() as u64, self.dim() as u64, self.seed])
    }
}

/// Phase retrieval: `l_i(x) = ((a_i' x)^2 - b_i)^2 / 4` with
/// `b_i = (a_i' xhat)^2`. Both `xhat` and `-xhat` are common global
/// minimizers; the gradient is not globally Lipschitz, so no bound is
/// exposed and callers estimate one locally.
pub struct PhaseRetrieval {
    rows: Vec<ParamVector>,
    targets: Vec<f64>,
    planted: ParamVector,
    seed: u64,
}

pub fn make_phase_retrieval(n: usize, d: usize, seed: u64) -> Result<PhaseRetrieval, ProblemError> {
    if n < 1 {
        return Err(ProblemError::EmptySum);
    }
    let mut stream = Stream::keyed(&[seed, 0x7072]); // "pr" tag
    let planted = ParamVector::new((0..d).map(|_| stream.next_normal()).collect());
    let mut rows = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let a = ParamVector::new((0..d).map(|_| stream.next_normal()).collect());
        let s = a.dot(&planted);
        targets.push(s * s);
        rows.push(a);
    }
    Ok(PhaseRetrieval {
        rows,
        targets,
        planted,
        seed,
    })
}

impl PhaseRetrieval {
    /// Builds an instance from explicit measurement rows and a planted
    /// signal; used for hand-checkable fixtures.
    pub fn from_rows(rows: Vec<ParamVector>, planted: ParamVector) -> Self {
        let targets = rows
            .iter()
            .map(|a| {
                let s = a.dot(&planted);
                s * s
            })
            .collect();
        PhaseRetrieval {
            rows,
            targets,
            planted,
            seed: 0,
        }
    }
}

impl FiniteSumProblem for PhaseRetrieval {
    fn num_components(&self) -> usize {
        self.rows.len()
    }

    fn dim(&self) -> usize {
        self.planted.dim()
    }

    fn component_value(&self, i: usize, x: &ParamVector) -> f64 {
        let s = self.rows[i].dot(x);
        let r = s * s - self.targets[i];
        0.25 * r * r
    }

    fn component_grad(&self, i: usize, x: &ParamVector) -> ParamVector {
        let s = self.rows[i].dot(x);
        let r = s * s - self.targets[i];
        self.rows[i].scale(r * s)
    }

    fn planted_minimizer(&self) -> Option<&ParamVector> {
        Some(&self.planted)
    }

    fn fingerprint(&self) -> u64 {
        fp(&[2, self.rows.len() as u64, self.dim() as u64, self.seed])
    }
}

/// Empirical local Lipschitz estimate: the max of
/// `||grad_i(u) - grad_i(v)|| / ||u - v||` over random pairs in the ball of
/// the given radius around `region_center`, over all components. A lower
/// bound on the true local constant; used to sanity-check `eta < 1/L`.
pub fn estimate_lipschitz(
    p: &dyn FiniteSumProblem,
    region_center: &ParamVector,
    radius: f64,
    trials: usize,
    seed: u64,
) -> Result<f64, ProblemError> {
    if trials < 1 {
        return Err(ProblemError::NoTrials);
    }
    if radius.is_nan() || radius <= 0.0 {
        return Err(ProblemError::BadRadius);
    }
    let d = p.dim();
    let mut stream = Stream::keyed(&[seed, 0x6c6970]); // "lip" tag
    let ball_point = |stream: &mut Stream| {
        let dir = ParamVector::new((0..d).map(|_| stream.next_normal()).collect());
        let norm = dir.norm2();
        let r = radius * stream.next_f64().powf(1.0 / d as f64);
        let scale = if norm > 0.0 { r / norm } else { 0.0 };
        let mut point = region_center.clone();
        point.axpy_inplace(scale, &dir);
        point
    };
    let mut best = 0.0f64;
    for _ in 0..trials {
        let u = ball_point(&mut stream);
        let v = ball_point(&mut stream);
        let sep = u.dist2(&v);
        if sep == 0.0 {
            continue;
        }
        for i in 0..p.num_components() {
            let gu = p.component_grad(i, &u);
            let gv = p.component_grad(i, &v);
            best = best.max(gu.dist2(&gv) / sep);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Central finite differences of component_value; the independent
    /// oracle for every analytic gradient in this module.
    fn fd_grad(p: &dyn FiniteSumProblem, i: usize, x: &ParamVector, h: f64) -> ParamVector {
        let g = (0..x.dim())
            .map(|j| {
                let mut xp = x.clone();
                xp.as_mut_slice()[j] += h;
                let mut xm = x.clone();
                xm.as_mut_slice()[j] -= h;
                (p.component_value(i, &xp) - p.component_value(i, &xm)) / (2.0 * h)
            })
            .collect();
        ParamVector::new(g)
    }

    fn assert_grad_matches(p: &dyn FiniteSumProblem, i: usize, x: &ParamVector) {
        let analytic = p.component_grad(i, x);
        let numeric = fd_grad(p, i, x, 1e-5);
        for j in 0..x.dim() {
            let (a, b) = (analytic.as_slice()[j], numeric.as_slice()[j]);
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            assert!(rel <= 1e-6, "grad[{j}] analytic {a} fd {b}");
        }
    }

    #[test]
    fn full_value_hand_cases() {
        let p = make_consistent_least_squares(1, 1, 3).unwrap();
        let x = ParamVector::new(vec![0.7]);
        assert_eq!(full_value(&p, &x), p.component_value(0, &x));
        let planted = p.planted_minimizer().unwrap().clone();
        assert!(full_value(&p, &planted) <= 1e-12);
    }

    #[test]
    fn full_value_averages_components() {
        // two 1-d least-squares components with values 0.2 and 0.4
        struct TwoComp;
        impl FiniteSumProblem for TwoComp {
            fn num_components(&self) -> usize {
                2
            }
            fn dim(&self) -> usize {
                1
            }
            fn component_value(&self, i: usize, _x: &ParamVector) -> f64 {
                [0.2, 0.4][i]
            }
            fn component_grad(&self, _i: usize, _x: &ParamVector) -> ParamVector {
                ParamVector::zeros(1)
            }
            fn fingerprint(&self) -> u64 {
                0
            }
        }
        assert!((full_value(&TwoComp, &ParamVector::zeros(1)) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn gradient_stats_hand_cases() {
        struct OpposedGrads;
        impl FiniteSumProblem for OpposedGrads {
            fn num_components(&self) -> usize {
                2
            }
            fn dim(&self) -> usize {
                2
            }
            fn component_value(&self, _i: usize, _x: &ParamVector) -> f64 {
                0.0
            }
            fn component_grad(&self, i: usize, _x: &ParamVector) -> ParamVector {
                ParamVector::new(if i == 0 {
                    vec![1.0, 0.0]
                } else {
                    vec![-1.0, 0.0]
                })
            }
            fn fingerprint(&self) -> u64 {
                0
            }
        }
        let stats = full_gradient_stats(&OpposedGrads, &ParamVector::zeros(2));
        assert_eq!(stats.mean_grad, ParamVector::zeros(2));
        assert!((stats.variance - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_stats_vanish_at_planted_minimizer() {
        let p = make_consistent_least_squares(5, 8, 11).unwrap();
        let planted = p.planted_minimizer().unwrap().clone();
        let stats = full_gradient_stats(&p, &planted);
        assert!(stats.mean_grad.norm2() <= 1e-9);
        assert!(stats.variance <= 1e-20);

        // identical components => zero variance anywhere
        let single = make_consistent_least_squares(1, 3, 2).unwrap();
        let x = ParamVector::new(vec![1.0, -2.0, 0.5]);
        assert_eq!(full_gradient_stats(&single, &x).variance, 0.0);
    }

    #[test]
    fn least_squares_hand_instance() {
        // a=2, xhat=2 => b=4; l(2)=0 and grad(0) = (0-4)*2 = -8
        let p = ConsistentLeastSquares {
            rows: vec![ParamVector::new(vec![2.0])],
            targets: vec![4.0],
            planted: ParamVector::new(vec![2.0]),
            lipschitz: 4.0,
            seed: 0,
        };
        assert_eq!(p.component_value(0, &ParamVector::new(vec![2.0])), 0.0);
        assert_eq!(
            p.component_grad(0, &ParamVector::zeros(1)),
            ParamVector::new(vec![-8.0])
        );
    }

    #[test]
    fn least_squares_rejects_underdetermined() {
        assert_eq!(
            make_consistent_least_squares(10, 5, 0).unwrap_err(),
            ProblemError::Underdetermined { n: 10, d: 5 }
        );
    }

    #[test]
    fn least_squares_finite_difference_check() {
        let p = make_consistent_least_squares(50, 100, 7).unwrap();
        let mut stream = Stream::new(99);
        for _ in 0..20 {
            let i = stream.below(50) as usize;
            let x = ParamVector::new((0..100).map(|_| stream.next_normal()).collect());
            assert_grad_matches(&p, i, &x);
        }
    }

    #[test]
    fn least_squares_is_star_convex_everywhere() {
        // convexity implies the star residual toward the planted point is
        // nonpositive at every x, for every component
        let p = make_consistent_least_squares(8, 12, 5).unwrap();
        let planted = p.planted_minimizer().unwrap().clone();
        let mut stream = Stream::new(1);
        for _ in 0..50 {
            let x = ParamVector::new((0..12).map(|_| 3.0 * stream.next_normal()).collect());
            for i in 0..8 {
                let residual = p.component_value(i, &x) - p.component_value(i, &planted)
                    + planted.sub(&x).dot(&p.component_grad(i, &x));
                assert!(residual <= 1e-9, "component {i} residual {residual}");
            }
        }
    }

    #[test]
    fn phase_retrieval_planted_and_negated_are_minimizers() {
        let p = make_phase_retrieval(12, 6, 4).unwrap();
        let planted = p.planted_minimizer().unwrap().clone();
        let negated = planted.scale(-1.0);
        for i in 0..12 {
            assert!(p.component_value(i, &planted) <= 1e-12);
            assert!(p.component_value(i, &negated) <= 1e-12);
        }
        assert!(p.lipschitz_bound().is_none());
    }

    #[test]
    fn phase_retrieval_documented_negative_example() {
        // d=1, a=1, xhat=1, x=-0.5: value 0.140625, grad 0.375, and the star
        // residual toward x*=1 is +0.703125 (a genuinely non-star-convex point)
        let p = PhaseRetrieval::from_rows(
            vec![ParamVector::new(vec![1.0])],
            ParamVector::new(vec![1.0]),
        );
        let x = ParamVector::new(vec![-0.5]);
        assert!((p.component_value(0, &x) - 0.140625).abs() < 1e-15);
        assert!((p.component_grad(0, &x).as_slice()[0] - 0.375).abs() < 1e-15);
        let x_star = ParamVector::new(vec![1.0]);
        let residual = p.component_value(0, &x) - p.component_value(0, &x_star)
            + x_star.sub(&x).dot(&p.component_grad(0, &x));
        assert!((residual - 0.703125).abs() < 1e-12);
        assert!(residual > 0.0);
    }

    #[test]
    fn phase_retrieval_locally_star_convex_near_planted() {
        let p = make_phase_retrieval(15, 10, 21).unwrap();
        let planted = p.planted_minimizer().unwrap().clone();
        let radius = 0.1 * planted.norm2();
        let mut stream = Stream::new(8);
        for _ in 0..30 {
            let dir = ParamVector::new((0..10).map(|_| stream.next_normal()).collect());
            let r = radius * stream.next_f64();
            let mut x = planted.clone();
            x.axpy_inplace(r / dir.norm2(), &dir);
            for i in 0..15 {
                let residual = p.component_value(i, &x) - p.component_value(i, &planted)
                    + planted.sub(&x).dot(&p.component_grad(i, &x));
                assert!(residual <= 1e-12, "component {i} residual {residual}");
            }
        }
    }

    #[test]
    fn lipschitz_estimate_on_quadratics() {
        // l(x) = c x^2 / 2: the gradient ratio is exactly c everywhere
        struct Quad(f64);
        impl FiniteSumProblem for Quad {
            fn num_components(&self) -> usize {
                1
            }
            fn dim(&self) -> usize {
                1
            }
            fn component_value(&self, _i: usize, x: &ParamVector) -> f64 {
                0.5 * self.0 * x.as_slice()[0] * x.as_slice()[0]
            }
            fn component_grad(&self, _i: usize, x: &ParamVector) -> ParamVector {
                ParamVector::new(vec![self.0 * x.as_slice()[0]])
            }
            fn fingerprint(&self) -> u64 {
                0
            }
        }
        let est = estimate_lipschitz(&Quad(3.5), &ParamVector::zeros(1), 2.0, 10, 1).unwrap();
        assert!((est - 3.5).abs() <= 1e-9);
    }

    #[test]
    fn lipschitz_estimate_bounded_by_closed_form() {
        let p = make_consistent_least_squares(10, 20, 3).unwrap();
        let bound = p.lipschitz_bound().unwrap();
        let est = estimate_lipschitz(&p, &ParamVector::zeros(20), 1.0, 30, 5).unwrap();
        assert!(est <= bound + 1e-9, "estimate {est} exceeds bound {bound}");
        assert!(est > 0.0);
    }

    #[test]
    fn lipschitz_estimate_rejects_bad_args() {
        let p = make_consistent_least_squares(2, 4, 0).unwrap();
        let c = ParamVector::zeros(4);
        assert_eq!(
            estimate_lipschitz(&p, &c, 1.0, 0, 0).unwrap_err(),
            ProblemError::NoTrials
        );
        assert_eq!(
            estimate_lipschitz(&p, &c, 0.0, 5, 0).unwrap_err(),
            ProblemError::BadRadius
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn generators_pass_finite_difference_check(seed in 0u64..1000) {
            let ls = make_consistent_least_squares(4, 6, seed).unwrap();
            let pr = make_phase_retrieval(4, 6, seed).unwrap();
            let mut stream = Stream::keyed(&[seed, 77]);
            let x = ParamVector::new((0..6).map(|_| stream.next_normal()).collect());
            for i in 0..4 {
                assert_grad_matches(&ls, i, &x);
                assert_grad_matches(&pr, i, &x);
            }
        }
    }
}
