//! The SGD loop with constant learning rate, plus trace recording and
//! binary persistence.
//!
//! The update is `x_{k+1} = x_k - eta * grad l_{xi_k}(x_k)` with `xi_k`
//! drawn from the reshuffled cyclic schedule. Every iteration's
//! `(k, xi_k, loss)` triple is recorded; iterates themselves are
//! checkpointed under a configurable policy. Gradients are never stored:
//! the analyzer recomputes them from checkpoints, which keeps traces small
//! and stays exact because the whole pipeline is deterministic.

use crate::numcore::ParamVector;
use crate::problems::FiniteSumProblem;
use crate::schedule::EpochSchedule;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const TRACE_MAGIC: &[u8; 4] = b"SPTH";
pub const TRACE_VERSION: u32 = 1;

/// Abort threshold for the divergence guard: losses are bounded below, so
/// divergence is signalled by the iterate or the loss blowing up.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("divergence detected at iteration {k} (partial trace preserved)")]
    Diverged { k: u64, trace: Box<Trace> },
    #[error("x0 dimension {got} does not match problem dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("missing epoch-boundary checkpoints at k = {missing:?}")]
    MissingCheckpoints { missing: Vec<u64> },
}

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad trace magic in {path}")]
    BadMagic { path: String },
    #[error("unsupported trace version {found} in {path} (supported: {TRACE_VERSION})")]
    UnsupportedVersion { path: String, found: u32 },
    #[error("truncated or corrupt trace file {path} at byte {offset}")]
    Truncated { path: String, offset: u64 },
}

/// Which iterates get checkpointed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordPolicy {
    /// Only `x_{nB}` for each epoch boundary (including `x_0` and the final
    /// iterate).
    EpochBoundaries,
    /// Boundaries plus every iterate inside every `m`-th epoch.
    EveryMthEpoch(u64),
    /// Every iterate.
    Full,
}

impl RecordPolicy {
    /// Whether iterate `x_k` is checkpointed under this policy, for a run
    /// with `n` components per epoch.
    pub fn records(&self, k: u64, n: u64) -> bool {
        if k.is_multiple_of(n) {
            return true;
        }
        match self {
            RecordPolicy::EpochBoundaries => false,
            RecordPolicy::EveryMthEpoch(m) => (k / n).is_multiple_of(*m),
            RecordPolicy::Full => true,
        }
    }
}

/// How the analysis reference point `x*` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMode {
    /// The run's final iterate.
    FinalIterate,
    /// The problem's planted minimizer.
    Planted,
    /// The iterate at the end of epoch `e`, i.e. `x_{n(e+1)}`.
    EpochEnd(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub eta: f64,
    pub epochs: u64,
    /// Seed of the reshuffling schedule.
    pub seed: u64,
    pub record_policy: RecordPolicy,
    pub reference_mode: ReferenceMode,
}

impl RunConfig {
    fn validate(&self) {
        assert!(self.eta > 0.0, "RunConfig: eta must be positive");
        assert!(self.epochs > 0, "RunConfig: epochs must be positive");
        if let RecordPolicy::EveryMthEpoch(m) = self.record_policy {
            assert!(m >= 1, "RunConfig: m must be >= 1");
        }
    }
}

/// One row of the per-iteration table: the sampled component (1-based) and
/// its loss at the pre-step iterate `x_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub k: u64,
    pub xi: u32,
    pub loss: f64,
}

/// A recorded run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub problem_fingerprint: u64,
    pub config: RunConfig,
    /// Components per epoch.
    pub n: u64,
    /// Problem dimension.
    pub d: u64,
    pub checkpoints: BTreeMap<u64, ParamVector>,
    pub records: Vec<IterRecord>,
    /// Wall-clock seconds of the run. Runtime diagnostic only; not
    /// serialized, so trace files stay bitwise reproducible.
    pub wall_secs: f64,
}

impl Trace {
    pub fn schedule(&self) -> EpochSchedule {
        EpochSchedule::new(self.n as usize, self.config.seed)
    }

    /// Number of completed epochs actually present in the records.
    pub fn completed_epochs(&self) -> u64 {
        self.records.len() as u64 / self.n
    }

    pub fn checkpoint(&self, k: u64) -> Option<&ParamVector> {
        self.checkpoints.get(&k)
    }

    /// The final iterate `x_{n * epochs}` (always checkpointed).
    pub fn final_iterate(&self) -> &ParamVector {
        let last = self.checkpoints.keys().next_back().expect("empty trace");
        &self.checkpoints[last]
    }
}

/// Runs SGD for `epochs * n` iterations. Deterministic given the problem,
/// start point and config. If the problem exposes a Lipschitz bound and
/// `eta >= 1/L`, a warning is printed (the distance-monotonicity hypotheses
/// do not apply) but the run proceeds.
pub fn run(
    p: &dyn FiniteSumProblem,
    x0: &ParamVector,
    cfg: &RunConfig,
) -> Result<Trace, RunError> {
    cfg.validate();
    if x0.dim() != p.dim() {
        return Err(RunError::DimMismatch {
            expected: p.dim(),
            got: x0.dim(),
        });
    }
    if let Some(l) = p.lipschitz_bound() {
        if cfg.eta >= 1.0 / l {
            eprintln!(
                "warning: eta = {} >= 1/L = {}; distance monotonicity is not guaranteed",
                cfg.eta,
                1.0 / l
            );
        }
    }
    let started = std::time::Instant::now();
    let n = p.num_components() as u64;
    let schedule = EpochSchedule::new(p.num_components(), cfg.seed);
    let total = cfg.epochs * n;

    let mut trace = Trace {
        problem_fingerprint: p.fingerprint(),
        config: cfg.clone(),
        n,
        d: p.dim() as u64,
        checkpoints: BTreeMap::new(),
        records: Vec::with_capacity(total as usize),
        wall_secs: 0.0,
    };

    let mut x = x0.clone();
    trace.checkpoints.insert(0, x.clone());
    let mut epoch = u64::MAX;
    let mut perm: Vec<u32> = Vec::new();
    for k in 0..total {
        if k / n != epoch {
            epoch = k / n;
            perm = schedule.permutation(epoch);
        }
        let xi = perm[(k % n) as usize];
        let loss = p.component_value((xi - 1) as usize, &x);
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT || x.norm2() > DIVERGENCE_LIMIT {
            trace.wall_secs = started.elapsed().as_secs_f64();
            return Err(RunError::Diverged {
                k,
                trace: Box::new(trace),
            });
        }
        trace.records.push(IterRecord { k, xi, loss });
        let grad = p.component_grad((xi - 1) as usize, &x);
        x.axpy_inplace(-cfg.eta, &grad);
        if !x.is_finite() {
            trace.wall_secs = started.elapsed().as_secs_f64();
            return Err(RunError::Diverged {
                k,
                trace: Box::new(trace),
            });
        }
        if cfg.record_policy.records(k + 1, n) {
            trace.checkpoints.insert(k + 1, x.clone());
        }
    }
    // final iterate is always a boundary checkpoint
    debug_assert!(trace.checkpoints.contains_key(&total));
    trace.wall_secs = started.elapsed().as_secs_f64();
    Ok(trace)
}

/// `(B, ||x_{nB}||)` for every epoch boundary.
pub fn weight_norm_series(t: &Trace) -> Result<Vec<(u64, f64)>, RunError> {
    let epochs = t.completed_epochs();
    let missing: Vec<u64> = (0..=epochs)
        .map(|b| b * t.n)
        .filter(|k| !t.checkpoints.contains_key(k))
        .collect();
    if !missing.is_empty() {
        return Err(RunError::MissingCheckpoints { missing });
    }
    Ok((0..=epochs)
        .map(|b| (b, t.checkpoints[&(b * t.n)].norm2()))
        .collect())
}

// --- binary persistence -------------------------------------------------
//
// Layout (little-endian after the magic):
//   "SPTH" | version u32 | n u64 | d u64
//   config block:
//     eta f64 | epochs u64 | seed u64
//     record_policy tag u8 | m u64
//     reference_mode tag u8 | e u64
//     problem_fingerprint u64
//   checkpoint count u64
//   per checkpoint: k u64 | d x f64
//   per-iteration table to EOF: k u64 | xi u32 | loss f64

struct TraceReader<R> {
    reader: R,
    path: String,
    offset: u64,
}

impl<R: Read> TraceReader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), TraceIoError> {
        match self.reader.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(TraceIoError::Truncated {
                path: self.path.clone(),
                offset: self.offset,
            }),
            Err(e) => Err(TraceIoError::Io {
                path: self.path.clone(),
                source: e,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8, TraceIoError> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<u32, TraceIoError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, TraceIoError> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64, TraceIoError> {
        Ok(f64::from_bits(self.u64()?))
    }
}

pub fn save_trace(t: &Trace, path: &Path) -> Result<(), TraceIoError> {
    let io_err = |e| TraceIoError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let mut out = |bytes: &[u8]| w.write_all(bytes).map_err(io_err);

    out(TRACE_MAGIC)?;
    out(&TRACE_VERSION.to_le_bytes())?;
    out(&t.n.to_le_bytes())?;
    out(&t.d.to_le_bytes())?;
    out(&t.config.eta.to_bits().to_le_bytes())?;
    out(&t.config.epochs.to_le_bytes())?;
    out(&t.config.seed.to_le_bytes())?;
    let (ptag, m) = match t.config.record_policy {
        RecordPolicy::EpochBoundaries => (0u8, 0u64),
        RecordPolicy::EveryMthEpoch(m) => (1, m),
        RecordPolicy::Full => (2, 0),
    };
    out(&[ptag])?;
    out(&m.to_le_bytes())?;
    let (rtag, e) = match t.config.reference_mode {
        ReferenceMode::FinalIterate => (0u8, 0u64),
        ReferenceMode::Planted => (1, 0),
        ReferenceMode::EpochEnd(e) => (2, e),
    };
    out(&[rtag])?;
    out(&e.to_le_bytes())?;
    out(&t.problem_fingerprint.to_le_bytes())?;

    out(&(t.checkpoints.len() as u64).to_le_bytes())?;
    for (&k, x) in &t.checkpoints {
        out(&k.to_le_bytes())?;
        for &v in x.as_slice() {
            out(&v.to_bits().to_le_bytes())?;
        }
    }
    for r in &t.records {
        out(&r.k.to_le_bytes())?;
        out(&r.xi.to_le_bytes())?;
        out(&r.loss.to_bits().to_le_bytes())?;
    }
    w.flush().map_err(io_err)
}

pub fn load_trace(path: &Path) -> Result<Trace, TraceIoError> {
    let file = File::open(path).map_err(|e| TraceIoError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut r = TraceReader {
        reader: BufReader::new(file),
        path: path.display().to_string(),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRACE_MAGIC {
        return Err(TraceIoError::BadMagic { path: r.path });
    }
    let version = r.u32()?;
    if version != TRACE_VERSION {
        return Err(TraceIoError::UnsupportedVersion {
            path: r.path,
            found: version,
        });
    }
    let n = r.u64()?;
    let d = r.u64()?;
    let eta = r.f64()?;
    let epochs = r.u64()?;
    let seed = r.u64()?;
    let ptag = r.u8()?;
    let m = r.u64()?;
    let record_policy = match ptag {
        0 => RecordPolicy::EpochBoundaries,
        1 => RecordPolicy::EveryMthEpoch(m),
        2 => RecordPolicy::Full,
        _ => {
            return Err(TraceIoError::Truncated {
                path: r.path,
                offset: r.offset,
            })
        }
    };
    let rtag = r.u8()?;
    let e = r.u64()?;
    let reference_mode = match rtag {
        0 => ReferenceMode::FinalIterate,
        1 => ReferenceMode::Planted,
        2 => ReferenceMode::EpochEnd(e),
        _ => {
            return Err(TraceIoError::Truncated {
                path: r.path,
                offset: r.offset,
            })
        }
    };
    let problem_fingerprint = r.u64()?;

    let checkpoint_count = r.u64()?;
    let mut checkpoints = BTreeMap::new();
    for _ in 0..checkpoint_count {
        let k = r.u64()?;
        let mut data = Vec::with_capacity(d as usize);
        for _ in 0..d {
            data.push(r.f64()?);
        }
        checkpoints.insert(k, ParamVector::new(data));
    }
    // per-iteration table runs to end of file
    let mut records = Vec::new();
    loop {
        let mut head = [0u8; 8];
        match r.reader.read_exact(&mut head) {
            Ok(()) => r.offset += 8,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => {
                return Err(TraceIoError::Io {
                    path: r.path,
                    source: e,
                })
            }
        }
        let k = u64::from_le_bytes(head);
        let xi = r.u32()?;
        let loss = r.f64()?;
        records.push(IterRecord { k, xi, loss });
    }
    Ok(Trace {
        problem_fingerprint,
        config: RunConfig {
            eta,
            epochs,
            seed,
            record_policy,
            reference_mode,
        },
        n,
        d,
        checkpoints,
        records,
        wall_secs: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{full_value, make_consistent_least_squares, FiniteSumProblem};

    /// 1-d quadratic l(x) = (x - 1)^2 / 2 as a single-component problem.
    struct Quad1d;
    impl FiniteSumProblem for Quad1d {
        fn num_components(&self) -> usize {
            1
        }
        fn dim(&self) -> usize {
            1
        }
        fn component_value(&self, _i: usize, x: &ParamVector) -> f64 {
            let v = x.as_slice()[0] - 1.0;
            0.5 * v * v
        }
        fn component_grad(&self, _i: usize, x: &ParamVector) -> ParamVector {
            ParamVector::new(vec![x.as_slice()[0] - 1.0])
        }
        fn lipschitz_bound(&self) -> Option<f64> {
            Some(1.0)
        }
        fn fingerprint(&self) -> u64 {
            0xabcd
        }
    }

    fn quad_cfg(epochs: u64) -> RunConfig {
        RunConfig {
            eta: 0.1,
            epochs,
            seed: 3,
            record_policy: RecordPolicy::Full,
            reference_mode: ReferenceMode::FinalIterate,
        }
    }

    #[test]
    fn quadratic_hand_iteration() {
        let trace = run(&Quad1d, &ParamVector::zeros(1), &quad_cfg(2)).unwrap();
        // x1 = 0 + 0.1*1 = 0.1, x2 = 0.1 + 0.1*0.9 = 0.19
        assert!((trace.checkpoints[&1].as_slice()[0] - 0.1).abs() < 1e-15);
        assert!((trace.checkpoints[&2].as_slice()[0] - 0.19).abs() < 1e-15);
        assert_eq!(trace.records.len(), 2);
        assert!((trace.records[0].loss - 0.5).abs() < 1e-15);
    }

    #[test]
    fn least_squares_converges_under_stable_step() {
        let p = make_consistent_least_squares(50, 100, 7).unwrap();
        let eta = 0.9 / p.lipschitz_bound().unwrap();
        let cfg = RunConfig {
            eta,
            epochs: 200,
            seed: 1,
            record_policy: RecordPolicy::EpochBoundaries,
            reference_mode: ReferenceMode::Planted,
        };
        let trace = run(&p, &ParamVector::zeros(100), &cfg).unwrap();
        let final_loss = full_value(&p, trace.final_iterate());
        assert!(final_loss <= 1e-10, "final loss {final_loss}");
    }

    #[test]
    fn oversized_step_triggers_divergence_abort() {
        let p = make_consistent_least_squares(50, 100, 7).unwrap();
        let eta = 10.0 / p.lipschitz_bound().unwrap();
        let cfg = RunConfig {
            eta,
            epochs: 200,
            seed: 1,
            record_policy: RecordPolicy::EpochBoundaries,
            reference_mode: ReferenceMode::Planted,
        };
        match run(&p, &ParamVector::zeros(100), &cfg) {
            Err(RunError::Diverged { k, trace }) => {
                assert!(k < 200 * 50);
                assert!(trace.final_iterate().is_finite());
            }
            other => panic!("expected divergence, got {:?}", other.map(|t| t.records.len())),
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let p = make_consistent_least_squares(5, 8, 2).unwrap();
        let cfg = RunConfig {
            eta: 0.01,
            epochs: 3,
            seed: 9,
            record_policy: RecordPolicy::Full,
            reference_mode: ReferenceMode::FinalIterate,
        };
        let a = run(&p, &ParamVector::zeros(8), &cfg).unwrap();
        let b = run(&p, &ParamVector::zeros(8), &cfg).unwrap();
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn replay_consistency_of_recorded_losses() {
        let p = make_consistent_least_squares(6, 10, 4).unwrap();
        let cfg = RunConfig {
            eta: 0.005,
            epochs: 2,
            seed: 11,
            record_policy: RecordPolicy::Full,
            reference_mode: ReferenceMode::FinalIterate,
        };
        let trace = run(&p, &ParamVector::zeros(10), &cfg).unwrap();
        for r in &trace.records {
            let x = &trace.checkpoints[&r.k];
            let recomputed = p.component_value((r.xi - 1) as usize, x);
            assert!((recomputed - r.loss).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_epoch_touches_every_component_once() {
        let p = make_consistent_least_squares(7, 9, 0).unwrap();
        let cfg = RunConfig {
            eta: 0.001,
            epochs: 3,
            seed: 5,
            record_policy: RecordPolicy::EpochBoundaries,
            reference_mode: ReferenceMode::FinalIterate,
        };
        let trace = run(&p, &ParamVector::zeros(9), &cfg).unwrap();
        for epoch in 0..3 {
            let mut seen = [false; 7];
            for r in &trace.records[epoch * 7..(epoch + 1) * 7] {
                assert!(!seen[(r.xi - 1) as usize]);
                seen[(r.xi - 1) as usize] = true;
            }
        }
    }

    #[test]
    fn weight_norm_series_counts_and_gaps() {
        let trace = run(&Quad1d, &ParamVector::zeros(1), &quad_cfg(5)).unwrap();
        let series = weight_norm_series(&trace).unwrap();
        assert_eq!(series.len(), 6);
        // zero-gradient start stays constant: a planted start never moves
        let p = make_consistent_least_squares(3, 4, 8).unwrap();
        let planted = p.planted_minimizer().unwrap().clone();
        let cfg = RunConfig {
            eta: 0.01,
            epochs: 4,
            seed: 2,
            record_policy: RecordPolicy::EpochBoundaries,
            reference_mode: ReferenceMode::Planted,
        };
        let t2 = run(&p, &planted, &cfg).unwrap();
        let s2 = weight_norm_series(&t2).unwrap();
        assert!(s2.windows(2).all(|w| (w[0].1 - w[1].1).abs() <= 1e-15));
        // gap detection
        let mut broken = trace.clone();
        broken.checkpoints.remove(&2);
        match weight_norm_series(&broken).unwrap_err() {
            RunError::MissingCheckpoints { missing } => assert_eq!(missing, vec![2]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trace_round_trip_is_bit_exact() {
        let p = make_consistent_least_squares(4, 6, 13).unwrap();
        let cfg = RunConfig {
            eta: 0.02,
            epochs: 3,
            seed: 21,
            record_policy: RecordPolicy::EveryMthEpoch(2),
            reference_mode: ReferenceMode::EpochEnd(1),
        };
        let trace = run(&p, &ParamVector::zeros(6), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.bin");
        save_trace(&trace, &path).unwrap();
        let loaded = load_trace(&path).unwrap();
        assert_eq!(loaded.checkpoints, trace.checkpoints);
        assert_eq!(loaded.records, trace.records);
        assert_eq!(loaded.config, trace.config);
        assert_eq!(loaded.n, trace.n);
        assert_eq!(loaded.d, trace.d);
        assert_eq!(loaded.problem_fingerprint, trace.problem_fingerprint);
        // saving the loaded trace reproduces the same bytes
        let path2 = dir.path().join("trace2.bin");
        save_trace(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn trace_io_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(
            load_trace(&path).unwrap_err(),
            TraceIoError::BadMagic { .. }
        ));
        // version bump
        let mut bytes = Vec::new();
        bytes.extend_from_slice(TRACE_MAGIC);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_trace(&path).unwrap_err(),
            TraceIoError::UnsupportedVersion { found: 2, .. }
        ));
        // truncation inside the header
        let mut bytes = Vec::new();
        bytes.extend_from_slice(TRACE_MAGIC);
        bytes.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_trace(&path).unwrap_err(),
            TraceIoError::Truncated { .. }
        ));
    }
}
