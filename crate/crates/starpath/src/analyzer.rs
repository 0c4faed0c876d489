//! Path diagnostics derived from a recorded run.
//!
//! The central quantity is the star-convexity residual of one SGD step at
//! iterate `x_k` with sampled component `xi_k`, measured toward a reference
//! point `x*`:
//!
//! ```text
//! e_k = l_{xi_k}(x_k) - l_{xi_k}(x*) + <x* - x_k, grad l_{xi_k}(x_k)>
//! ```
//!
//! `e_k <= 0` certifies the step; the per-epoch sum `e_B` certifies the
//! epoch. From these the module derives distance series, star-convex step
//! fractions, per-component subsequence losses, gradient variance, and
//! audits of the per-epoch and per-step distance inequalities that the
//! residuals are supposed to imply.
//!
//! Iterates inside an epoch are recovered from checkpoints when the record
//! policy stored them, and otherwise replayed deterministically from the
//! epoch-boundary checkpoint (the run is a pure function of its inputs, so
//! the replay is bitwise identical to the original path). Only when the
//! boundary checkpoint itself is absent does an operation fail with a
//! coverage error.

use crate::numcore::ParamVector;
use crate::problems::{
    estimate_lipschitz, full_gradient_stats, full_value, FiniteSumProblem,
};
use crate::schedule::ScheduleError;
use crate::sgdrun::{ReferenceMode, Trace};
use std::collections::BTreeMap;
use thiserror::Error;

/// Reference points whose full loss exceeds this are flagged as imprecise
/// approximations of a common global minimizer.
pub const DEFAULT_EPS_LOSS: f64 = 1e-3;

/// Additive tolerance on the audited inequalities.
pub const AUDIT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("iterates of epoch {epoch} unavailable: missing checkpoints at k = {missing:?}")]
    Coverage { epoch: u64, missing: Vec<u64> },
    #[error("reference mode 'planted' requires a problem with a planted minimizer")]
    NoPlanted,
    #[error("reference epoch end {k} is not checkpointed")]
    MissingReference { k: u64 },
    #[error("trace/problem mismatch: trace has n={trace_n}, d={trace_d}, problem has n={n}, d={d}")]
    ShapeMismatch {
        trace_n: u64,
        trace_d: u64,
        n: usize,
        d: usize,
    },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Problem(#[from] crate::problems::ProblemError),
}

/// The fixed point `x*` toward which all residuals are measured.
#[derive(Debug, Clone)]
pub struct ReferencePoint {
    pub x_star: ParamVector,
    pub origin: ReferenceMode,
    /// `f(x*)` at construction time.
    pub achieved_loss: f64,
    /// Set when `achieved_loss > eps_loss`: `x*` only approximates a common
    /// global minimizer and sign tests near zero lose meaning.
    pub loss_warning: bool,
}

impl ReferencePoint {
    pub fn new(
        x_star: ParamVector,
        origin: ReferenceMode,
        p: &dyn FiniteSumProblem,
        eps_loss: f64,
    ) -> Self {
        let achieved_loss = full_value(p, &x_star);
        ReferencePoint {
            x_star,
            origin,
            achieved_loss,
            loss_warning: achieved_loss > eps_loss,
        }
    }

    /// Resolves a reference mode against a trace: the final iterate, the
    /// planted minimizer, or the boundary checkpoint ending epoch `e`.
    pub fn from_trace(
        trace: &Trace,
        p: &dyn FiniteSumProblem,
        mode: ReferenceMode,
        eps_loss: f64,
    ) -> Result<Self, AnalyzerError> {
        let x_star = match mode {
            ReferenceMode::FinalIterate => trace.final_iterate().clone(),
            ReferenceMode::Planted => p
                .planted_minimizer()
                .ok_or(AnalyzerError::NoPlanted)?
                .clone(),
            ReferenceMode::EpochEnd(e) => {
                let k = (e + 1) * trace.n;
                trace
                    .checkpoint(k)
                    .ok_or(AnalyzerError::MissingReference { k })?
                    .clone()
            }
        };
        Ok(ReferencePoint::new(x_star, mode, p, eps_loss))
    }
}

/// The signed residual `e_k`; nonpositive means the step satisfies
/// iterationwise star-convexity at `x_k`.
pub fn star_residual(
    loss_k: f64,
    grad_k: &ParamVector,
    x_k: &ParamVector,
    x_star: &ParamVector,
    loss_star: f64,
) -> f64 {
    loss_k - loss_star + x_star.sub(x_k).dot(grad_k)
}

fn check_shapes(trace: &Trace, p: &dyn FiniteSumProblem) -> Result<(), AnalyzerError> {
    if trace.n != p.num_components() as u64 || trace.d != p.dim() as u64 {
        return Err(AnalyzerError::ShapeMismatch {
            trace_n: trace.n,
            trace_d: trace.d,
            n: p.num_components(),
            d: p.dim(),
        });
    }
    Ok(())
}

/// Recovers `x_{nB} ..= x_{n(B+1)}` (n+1 iterates). Checkpointed iterates
/// are used verbatim; gaps are replayed from the epoch-start checkpoint.
pub fn epoch_iterates(
    trace: &Trace,
    p: &dyn FiniteSumProblem,
    epoch: u64,
) -> Result<Vec<ParamVector>, AnalyzerError> {
    check_shapes(trace, p)?;
    let n = trace.n;
    let start = epoch * n;
    let all_keys: Vec<u64> = (start..=start + n).collect();
    if all_keys.iter().all(|k| trace.checkpoints.contains_key(k)) {
        return Ok(all_keys.iter().map(|k| trace.checkpoints[k].clone()).collect());
    }
    // replay needs the epoch-start checkpoint and the epoch's records
    let records_ok = trace.records.len() as u64 >= start + n;
    if !trace.checkpoints.contains_key(&start) || !records_ok {
        let missing: Vec<u64> = all_keys
            .into_iter()
            .filter(|k| !trace.checkpoints.contains_key(k))
            .collect();
        return Err(AnalyzerError::Coverage { epoch, missing });
    }
    let eta = trace.config.eta;
    let mut iterates = Vec::with_capacity(n as usize + 1);
    let mut x = trace.checkpoints[&start].clone();
    iterates.push(x.clone());
    for t in 0..n {
        let rec = &trace.records[(start + t) as usize];
        debug_assert_eq!(rec.k, start + t);
        let grad = p.component_grad((rec.xi - 1) as usize, &x);
        x.axpy_inplace(-eta, &grad);
        iterates.push(x.clone());
    }
    Ok(iterates)
}

/// Per-step residuals of one epoch, in epoch order.
fn epoch_step_residuals(
    trace: &Trace,
    p: &dyn FiniteSumProblem,
    epoch: u64,
    rp: &ReferencePoint,
) -> Result<Vec<f64>, AnalyzerError> {
    let iterates = epoch_iterates(trace, p, epoch)?;
    let start = epoch * trace.n;
    let mut residuals = Vec::with_capacity(trace.n as usize);
    for t in 0..trace.n {
        let rec = &trace.records[(start + t) as usize];
        let i = (rec.xi - 1) as usize;
        let x_k = &iterates[t as usize];
        let loss_k = p.component_value(i, x_k);
        let grad_k = p.component_grad(i, x_k);
        let loss_star = p.component_value(i, &rp.x_star);
        residuals.push(star_residual(loss_k, &grad_k, x_k, &rp.x_star, loss_star));
    }
    Ok(residuals)
}

/// The epoch residual `e_B`: the sum of the epoch's step residuals.
pub fn epoch_residual(
    trace: &Trace,
    p: &dyn FiniteSumProblem,
    epoch: u64,
    rp: &ReferencePoint,
) -> Result<f64, AnalyzerError> {
    Ok(epoch_step_residuals(trace, p, epoch, rp)?.iter().sum())
}

/// `(B, ||x_{nB} - x*||)` over all epoch boundaries.
pub fn distance_series(
    trace: &Trace,
    rp: &ReferencePoint,
) -> Result<Vec<(u64, f64)>, AnalyzerError> {
    let epochs = trace.completed_epochs();
    let mut series = Vec::with_capacity(epochs as usize + 1);
    for b in 0..=epochs {
        let k = b * trace.n;
        let x = trace
            .checkpoint(k)
            .ok_or(AnalyzerError::Coverage {
                epoch: b,
                missing: vec![k],
            })?;
        series.push((b, x.dist2(&rp.x_star)));
    }
    Ok(series)
}

/// Fraction of the epoch's steps with strictly negative residual
/// (`e_k < 0`; the epoch and step certificates themselves use `<= 0`).
pub fn sc_fraction(
    trace: &Trace,
    p: &dyn FiniteSumProblem,
    epoch: u64,
    rp: &ReferencePoint,
) -> Result<f64, AnalyzerError> {
    let residuals = epoch_step_residuals(trace, p, epoch, rp)?;
    Ok(residuals.iter().filter(|&&e| e < 0.0).count() as f64 / residuals.len() as f64)
}

/// Outcome of the per-epoch distance-monotonicity audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochAudit {
    pub epoch: u64,
    pub epoch_residual: f64,
    /// Premises held (`e_B <= 0` and `eta < 1/L_hat`), so the inequality
    /// was actually checked.
    pub checked: bool,
    /// Distance grew by more than the tolerance despite the premises.
    pub violated: bool,
    /// Still violated after allowing the slack below.
    pub violated_beyond_slack: bool,
    /// `2 eta sum_k l_{xi_k}(x*)` over the epoch: the term dropped when
    /// `x*` is only an approximate common minimizer, applied to the squared
    /// distances.
    pub slack: f64,
}

/// Audits `||x_{n(B+1)} - x*|| <= ||x_{nB} - x*||` for every epoch whose
/// premises hold. Epochs with `e_B > 0` (or when `eta >= 1/L_hat`) are
/// counted vacuous, never violated.
pub fn epoch_monotonicity_audit(
    trace: &Trace,
    p: &dyn FiniteSumProblem,
    rp: &ReferencePoint,
    l_hat: f64,
) -> Result<Vec<EpochAudit>, AnalyzerError> {
    let eta = trace.config.eta;
    let eta_ok = eta < 1.0 / l_hat;
    let mut audits = Vec::new();
    for epoch in 0..trace.completed_epochs() {
        let residuals = epoch_step_residuals(trace, p, epoch, rp)?;
        let e_b: f64 = residuals.iter().sum();
        let start = epoch * trace.n;
        let x_begin = &trace.checkpoints[&start];
        let iterates = epoch_iterates(trace, p, epoch)?;
        let x_end = iterates.last().unwrap();
        let d_begin = x_begin.dist2(&rp.x_star);
        let d_end = x_end.dist2(&rp.x_star);
        let slack: f64 = (0..trace.n)
            .map(|t| {
                let xi = trace.records[(start + t) as usize].xi;
                2.0 * eta * p.component_value((xi - 1) as usize, &rp.x_star)
            })
            .sum();
        let checked = e_b <= 0.0 && eta_ok;
        let violated = checked && d_end > d_begin + AUDIT_TOL;
        let violated_beyond_slack =
            checked && d_end * d_end > d_begin * d_begin + slack + AUDIT_TOL;
        audits.push(EpochAudit {
            epoch,
            epoch_residual: e_b,
            checked,
            violated,
            violated_beyond_slack,
            slack,
        });
    }
    Ok(audits)
}

/// Counters from the per-step audit of the step-distance inequality and
/// the descent inequality
/// `l(x_{k+1}) <= l(x*) + (||x_k - x*||^2 - ||x_{k+1} - x*||^2) / (2 eta)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepAuditSummary {
    pub checked: u64,
    pub vacuous: u64,
    /// `||x_{k+1} - x*|| > ||x_k - x*|| + tol` under the premises.
    pub distance_violations: u64,
    /// Descent inequality violated under the premises.
    pub descent_violations: u64,
}

/// Audits every step of every recoverable epoch. A step is checked only
/// when `e_k <= 0`, `eta < 1/L_hat`, and `x*` approximately minimizes the
/// sampled component (`l_{xi_k}(x*) <= eps_loss`); otherwise it is vacuous.
pub fn per_step_audit(
    trace: &Trace,
    p: &dyn FiniteSumProblem,
    rp: &ReferencePoint,
    l_hat: f64,
    eps_loss: f64,
) -> Result<StepAuditSummary, AnalyzerError> {
    let eta = trace.config.eta;
    let eta_ok = eta < 1.0 / l_hat;
    let mut summary = StepAuditSummary::default();
    for epoch in 0..trace.completed_epochs() {
        let iterates = epoch_iterates(trace, p, epoch)?;
        let start = epoch * trace.n;
        for t in 0..trace.n {
            let rec = &trace.records[(start + t) as usize];
            let i = (rec.xi - 1) as usize;
            let x_k = &iterates[t as usize];
            let x_next = &iterates[t as usize + 1];
            let loss_k = p.component_value(i, x_k);
            let grad_k = p.component_grad(i, x_k);
            let loss_star = p.component_value(i, &rp.x_star);
            let e_k = star_residual(loss_k, &grad_k, x_k, &rp.x_star, loss_star);
            if !(e_k <= 0.0 && eta_ok && loss_star <= eps_loss) {
                summary.vacuous += 1;
                continue;
            }
            summary.checked += 1;
            let d_k = x_k.dist2(&rp.x_star);
            let d_next = x_next.dist2(&rp.x_star);
            if d_next > d_k + AUDIT_TOL {
                summary.distance_violations += 1;
            }
            let loss_next = p.component_value(i, x_next);
            let bound = loss_star + (d_k * d_k - d_next * d_next) / (2.0 * eta);
            if loss_next > bound + AUDIT_TOL {
                summary.descent_violations += 1;
            }
        }
    }
    Ok(summary)
}

/// Loss series of the subsequence that samples component `v` (1-based):
/// `post_update` evaluates at `x_{nB + pi_B^{-1}(v)}` (the iterate right
/// after the component's step) and `pre_update` at the iterate the step was
/// taken from. Both converge together; they are reported side by side
/// rather than picking one.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsequenceSeries {
    pub post_update: Vec<(u64, f64)>,
    pub pre_update: Vec<(u64, f64)>,
}

pub fn subsequence_losses(
    trace: &Trace,
    p: &dyn FiniteSumProblem,
    v: u32,
) -> Result<SubsequenceSeries, AnalyzerError> {
    check_shapes(trace, p)?;
    let schedule = trace.schedule();
    let mut series = SubsequenceSeries {
        post_update: Vec::new(),
        pre_update: Vec::new(),
    };
    for epoch in 0..trace.completed_epochs() {
        let pos = schedule.inverse_position(epoch, v)? as usize;
        let iterates = match epoch_iterates(trace, p, epoch) {
            Ok(it) => it,
            // subsampled series under sparse policies without records
            Err(AnalyzerError::Coverage { .. }) => continue,
            Err(e) => return Err(e),
        };
        let i = (v - 1) as usize;
        series
            .pre_update
            .push((epoch, p.component_value(i, &iterates[pos - 1])));
        series
            .post_update
            .push((epoch, p.component_value(i, &iterates[pos])));
    }
    Ok(series)
}

/// `(B, variance of component gradients at x_{nB})` over all boundaries.
pub fn variance_series(
    trace: &Trace,
    p: &dyn FiniteSumProblem,
) -> Result<Vec<(u64, f64)>, AnalyzerError> {
    check_shapes(trace, p)?;
    let mut series = Vec::new();
    for b in 0..=trace.completed_epochs() {
        let k = b * trace.n;
        let x = trace.checkpoint(k).ok_or(AnalyzerError::Coverage {
            epoch: b,
            missing: vec![k],
        })?;
        series.push((b, full_gradient_stats(p, x).variance));
    }
    Ok(series)
}

/// How the Lipschitz constant used in the audits was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LipschitzUsed {
    /// Closed-form bound exposed by the problem.
    KnownBound(f64),
    /// Local empirical estimate over the trace's bounding ball.
    LocalEstimate(f64),
}

impl LipschitzUsed {
    pub fn value(&self) -> f64 {
        match *self {
            LipschitzUsed::KnownBound(v) | LipschitzUsed::LocalEstimate(v) => v,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LipschitzUsed::KnownBound(_) => "known_bound",
            LipschitzUsed::LocalEstimate(_) => "local_estimate",
        }
    }
}

/// Problem's closed-form bound when available, else an empirical local
/// estimate over the ball covering the trace's boundary checkpoints.
pub fn lipschitz_for_audits(
    trace: &Trace,
    p: &dyn FiniteSumProblem,
) -> Result<LipschitzUsed, AnalyzerError> {
    if let Some(l) = p.lipschitz_bound() {
        return Ok(LipschitzUsed::KnownBound(l));
    }
    let center = trace.final_iterate();
    let radius = trace
        .checkpoints
        .values()
        .map(|x| x.dist2(center))
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let est = estimate_lipschitz(p, center, radius, 30, 0x6175_6469)?;
    Ok(LipschitzUsed::LocalEstimate(est.max(f64::MIN_POSITIVE)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterResidual {
    pub k: u64,
    pub epoch: u64,
    pub t: u64,
    pub xi: u32,
    pub e_k: f64,
    pub component_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub eps_loss: f64,
    pub run_audits: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            eps_loss: DEFAULT_EPS_LOSS,
            run_audits: true,
        }
    }
}

/// Every derived series in one pass over the trace.
#[derive(Debug, Clone)]
pub struct PathReport {
    pub reference: ReferencePoint,
    /// `(B, e_B)` for every completed epoch.
    pub epoch_residuals: Vec<(u64, f64)>,
    /// Per-step residuals for epochs the record policy stored in full
    /// (the paper-style sparse table).
    pub iter_residuals: Vec<IterResidual>,
    /// `(B, ||x_{nB} - x*||)`.
    pub distance_series: Vec<(u64, f64)>,
    /// `(B, f(x_{nB}))`.
    pub full_loss_series: Vec<(u64, f64)>,
    /// `(B, ||x_{nB}||)`.
    pub weight_norm_series: Vec<(u64, f64)>,
    /// `(B, fraction of e_k < 0)` for every completed epoch.
    pub sc_fractions: Vec<(u64, f64)>,
    /// `(B, gradient variance at x_{nB})`.
    pub variance_series: Vec<(u64, f64)>,
    /// Component (1-based) to its post-update subsequence loss series.
    pub subsequence_losses: BTreeMap<u32, Vec<(u64, f64)>>,
    pub epoch_audits: Vec<EpochAudit>,
    pub step_audit: StepAuditSummary,
    pub lipschitz: LipschitzUsed,
}

/// Computes the full report in a single replay sweep over the epochs.
pub fn compute_report(
    trace: &Trace,
    p: &dyn FiniteSumProblem,
    rp: &ReferencePoint,
    opts: &AnalysisOptions,
) -> Result<PathReport, AnalyzerError> {
    check_shapes(trace, p)?;
    let n = trace.n;
    let eta = trace.config.eta;
    let epochs = trace.completed_epochs();
    let schedule = trace.schedule();
    let lipschitz = lipschitz_for_audits(trace, p)?;
    let eta_ok = eta < 1.0 / lipschitz.value();

    // l_i(x*) once per component
    let star_losses: Vec<f64> = (0..n as usize)
        .map(|i| p.component_value(i, &rp.x_star))
        .collect();

    let boundary = |b: u64| -> Result<&ParamVector, AnalyzerError> {
        trace.checkpoint(b * n).ok_or(AnalyzerError::Coverage {
            epoch: b,
            missing: vec![b * n],
        })
    };

    let mut report = PathReport {
        reference: rp.clone(),
        epoch_residuals: Vec::with_capacity(epochs as usize),
        iter_residuals: Vec::new(),
        distance_series: Vec::with_capacity(epochs as usize + 1),
        full_loss_series: Vec::with_capacity(epochs as usize + 1),
        weight_norm_series: Vec::with_capacity(epochs as usize + 1),
        sc_fractions: Vec::with_capacity(epochs as usize),
        variance_series: Vec::with_capacity(epochs as usize + 1),
        subsequence_losses: BTreeMap::new(),
        epoch_audits: Vec::with_capacity(epochs as usize),
        step_audit: StepAuditSummary::default(),
        lipschitz,
    };

    for b in 0..=epochs {
        let x = boundary(b)?;
        report.distance_series.push((b, x.dist2(&rp.x_star)));
        report.full_loss_series.push((b, full_value(p, x)));
        report.weight_norm_series.push((b, x.norm2()));
        report
            .variance_series
            .push((b, full_gradient_stats(p, x).variance));
    }

    for epoch in 0..epochs {
        let start = epoch * n;
        let fully_recorded = (start..=start + n).all(|k| trace.checkpoints.contains_key(&k));
        let perm = schedule.permutation(epoch);
        let mut x = boundary(epoch)?.clone();
        let mut e_b = 0.0;
        let mut negative_steps = 0u64;
        let mut slack = 0.0;
        let d_begin = x.dist2(&rp.x_star);
        for t in 0..n {
            let rec = &trace.records[(start + t) as usize];
            debug_assert_eq!(rec.xi, perm[t as usize]);
            let i = (rec.xi - 1) as usize;
            let loss_k = p.component_value(i, &x);
            let grad_k = p.component_grad(i, &x);
            let e_k = star_residual(loss_k, &grad_k, &x, &rp.x_star, star_losses[i]);
            e_b += e_k;
            slack += 2.0 * eta * star_losses[i];
            if e_k < 0.0 {
                negative_steps += 1;
            }
            if fully_recorded {
                report.iter_residuals.push(IterResidual {
                    k: start + t,
                    epoch,
                    t,
                    xi: rec.xi,
                    e_k,
                    component_loss: loss_k,
                });
            }
            // record the subsequence value after this component's step
            let d_k = x.dist2(&rp.x_star);
            x.axpy_inplace(-eta, &grad_k);
            report
                .subsequence_losses
                .entry(rec.xi)
                .or_default()
                .push((epoch, p.component_value(i, &x)));
            if opts.run_audits {
                let premises = e_k <= 0.0 && eta_ok && star_losses[i] <= opts.eps_loss;
                if premises {
                    report.step_audit.checked += 1;
                    let d_next = x.dist2(&rp.x_star);
                    if d_next > d_k + AUDIT_TOL {
                        report.step_audit.distance_violations += 1;
                    }
                    let loss_next = p.component_value(i, &x);
                    let bound = star_losses[i] + (d_k * d_k - d_next * d_next) / (2.0 * eta);
                    if loss_next > bound + AUDIT_TOL {
                        report.step_audit.descent_violations += 1;
                    }
                } else {
                    report.step_audit.vacuous += 1;
                }
            }
        }
        report.epoch_residuals.push((epoch, e_b));
        report
            .sc_fractions
            .push((epoch, negative_steps as f64 / n as f64));
        if opts.run_audits {
            let d_end = x.dist2(&rp.x_star);
            let checked = e_b <= 0.0 && eta_ok;
            report.epoch_audits.push(EpochAudit {
                epoch,
                epoch_residual: e_b,
                checked,
                violated: checked && d_end > d_begin + AUDIT_TOL,
                violated_beyond_slack: checked
                    && d_end * d_end > d_begin * d_begin + slack + AUDIT_TOL,
                slack,
            });
        }
    }
    Ok(report)
}
