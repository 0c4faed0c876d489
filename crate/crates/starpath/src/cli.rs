//! Config-file driven pipeline: `train` runs SGD and writes a trace,
//! `analyze` derives the path diagnostics into CSV tables, `plot` renders
//! them as SVG.
//!
//! Configs are INI-style text with `[problem]`, `[run]`, `[analysis]` and
//! `[output]` sections. Unknown sections or keys are rejected, and every
//! seed must be stated explicitly — nothing is drawn from entropy, so a
//! config pins its outputs bitwise.
//!
//! Exit codes: 2 config parse error, 3 divergence (partial trace is still
//! written), 4 trace/problem fingerprint mismatch, 5 missing report CSV,
//! 1 anything else.
//!
//! CSV schemas (column order is stable):
//!
//! * `epochs.csv` — `epoch,e_B,dist,full_loss,variance,weight_norm`
//!   (stats taken at the iterate ending the epoch)
//! * `iters.csv`  — `k,epoch,t,xi,e_k,component_loss`
//!   (rows only for epochs whose iterates were all checkpointed)
//! * `audits.csv` — `epoch,checked,vacuous,violated,slack_used`

use crate::analyzer::{self, AnalysisOptions, ReferencePoint};
use crate::dataio::{self, Dataset};
use crate::model::{self, Activation, LossKind, MlpSpec};
use crate::numcore::ParamVector;
use crate::problems::{self, full_value, FiniteSumProblem};
use crate::sgdrun::{self, RecordPolicy, ReferenceMode, RunConfig, RunError};
use crate::plot;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

/// Environment variable overriding the config's `[output] dir`.
pub const OUT_ENV: &str = "STARPATH_OUT";

pub const TRACE_FILE: &str = "trace.bin";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run diverged at iteration {k}; partial trace written")]
    Diverged { k: u64 },
    #[error(
        "trace fingerprint {trace:#018x} does not match the configured problem \
         ({problem:#018x}); wrong config or trace file"
    )]
    FingerprintMismatch { trace: u64, problem: u64 },
    #[error("missing report file: {}", .0.display())]
    MissingCsv(PathBuf),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::FingerprintMismatch { .. } => 4,
            CliError::MissingCsv(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

/// Optional per-class-balanced subsetting applied after dataset loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetConfig {
    pub count: usize,
    pub seed: u64,
    pub balanced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataConfig {
    Idx { images: PathBuf, labels: PathBuf },
    Blobs {
        n_per_class: usize,
        classes: usize,
        d_in: usize,
        separation: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    pub init_seed: u64,
    pub batch_size: usize,
    pub data: DataConfig,
    pub subset: Option<SubsetConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemConfig {
    LeastSquares { n: usize, d: usize, seed: u64 },
    PhaseRetrieval { n: usize, d: usize, seed: u64 },
    Mlp(MlpConfig),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisConfig {
    pub reference: ReferenceMode,
    pub eps_loss: f64,
    pub audits: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            reference: ReferenceMode::FinalIterate,
            eps_loss: analyzer::DEFAULT_EPS_LOSS,
            audits: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub run: RunConfig,
    pub analysis: AnalysisConfig,
    pub output_dir: PathBuf,
}

struct Section {
    name: &'static str,
    map: BTreeMap<String, String>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn require(&mut self, key: &str) -> Result<String, CliError> {
        self.take(key).ok_or_else(|| {
            CliError::Config(format!("missing key '{key}' in [{}]", self.name))
        })
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e| {
            CliError::Config(format!("key '{key}' in [{}]: {e} (got '{raw}')", self.name))
        })
    }

    fn parse_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| {
                    CliError::Config(format!(
                        "key '{key}' in [{}]: {e} (got '{raw}')",
                        self.name
                    ))
                }),
        }
    }

    fn finish(self) -> Result<(), CliError> {
        if let Some(key) = self.map.keys().next() {
            return Err(CliError::Config(format!(
                "unknown key '{key}' in [{}]",
                self.name
            )));
        }
        Ok(())
    }
}

fn split_sections(text: &str) -> Result<BTreeMap<String, BTreeMap<String, String>>, CliError> {
    let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line = match raw_line.find(['#', ';']) {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_string();
            if sections.contains_key(&name) {
                return Err(CliError::Config(format!(
                    "line {}: duplicate section [{name}]",
                    idx + 1
                )));
            }
            sections.insert(name.clone(), BTreeMap::new());
            current = Some(name);
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("line {}: expected 'key = value'", idx + 1))
        })?;
        let section = current.as_ref().ok_or_else(|| {
            CliError::Config(format!("line {}: key outside any [section]", idx + 1))
        })?;
        let key = key.trim().to_string();
        let prev = sections
            .get_mut(section)
            .unwrap()
            .insert(key.clone(), value.trim().to_string());
        if prev.is_some() {
            return Err(CliError::Config(format!(
                "line {}: duplicate key '{key}' in [{section}]",
                idx + 1
            )));
        }
    }
    Ok(sections)
}

fn parse_problem(mut s: Section) -> Result<ProblemConfig, CliError> {
    let kind = s.require("kind")?;
    let problem = match kind.as_str() {
        "least_squares" | "phase_retrieval" => {
            let n = s.parse("n")?;
            let d = s.parse("d")?;
            let seed = s.parse("seed")?;
            if kind == "least_squares" {
                ProblemConfig::LeastSquares { n, d, seed }
            } else {
                ProblemConfig::PhaseRetrieval { n, d, seed }
            }
        }
        "mlp" => {
            let layers_raw = s.require("layers")?;
            let layers: Result<Vec<usize>, _> =
                layers_raw.split(',').map(|p| p.trim().parse()).collect();
            let layers = layers.map_err(|e| {
                CliError::Config(format!("key 'layers' in [problem]: {e} (got '{layers_raw}')"))
            })?;
            let activation = match s.require("activation")?.as_str() {
                "relu" => Activation::Relu,
                "tanh" => Activation::Tanh,
                v => {
                    return Err(CliError::Config(format!(
                        "key 'activation' in [problem]: expected relu|tanh, got '{v}'"
                    )))
                }
            };
            let loss = match s.require("loss")?.as_str() {
                "mse" => LossKind::Mse,
                "crossentropy" => LossKind::SoftmaxCrossentropy,
                v => {
                    return Err(CliError::Config(format!(
                        "key 'loss' in [problem]: expected mse|crossentropy, got '{v}'"
                    )))
                }
            };
            let init_seed = s.parse("init_seed")?;
            let batch_size = s.parse("batch_size")?;
            let data = match s.require("dataset")?.as_str() {
                "idx" => DataConfig::Idx {
                    images: PathBuf::from(s.require("images")?),
                    labels: PathBuf::from(s.require("labels")?),
                },
                "blobs" => DataConfig::Blobs {
                    n_per_class: s.parse("n_per_class")?,
                    classes: s.parse("classes")?,
                    d_in: s.parse("d_in")?,
                    separation: s.parse("separation")?,
                    seed: s.parse("data_seed")?,
                },
                v => {
                    return Err(CliError::Config(format!(
                        "key 'dataset' in [problem]: expected idx|blobs, got '{v}'"
                    )))
                }
            };
            let subset = match s.parse_opt::<usize>("subset_count")? {
                None => None,
                Some(count) => Some(SubsetConfig {
                    count,
                    seed: s.parse("subset_seed")?, // explicit seed required
                    balanced: s.parse_opt("subset_balanced")?.unwrap_or(false),
                }),
            };
            ProblemConfig::Mlp(MlpConfig {
                layers,
                activation,
                loss,
                init_seed,
                batch_size,
                data,
                subset,
            })
        }
        v => {
            return Err(CliError::Config(format!(
                "key 'kind' in [problem]: expected least_squares|phase_retrieval|mlp, got '{v}'"
            )))
        }
    };
    s.finish()?;
    Ok(problem)
}

fn parse_record(raw: &str) -> Result<RecordPolicy, CliError> {
    if raw == "boundaries" {
        return Ok(RecordPolicy::EpochBoundaries);
    }
    if raw == "full" {
        return Ok(RecordPolicy::Full);
    }
    if let Some(m) = raw.strip_prefix("every_mth:") {
        let m: u64 = m.trim().parse().map_err(|e| {
            CliError::Config(format!("key 'record' in [run]: bad epoch stride: {e}"))
        })?;
        if m == 0 {
            return Err(CliError::Config(
                "key 'record' in [run]: stride must be >= 1".into(),
            ));
        }
        return Ok(RecordPolicy::EveryMthEpoch(m));
    }
    Err(CliError::Config(format!(
        "key 'record' in [run]: expected boundaries|full|every_mth:<m>, got '{raw}'"
    )))
}

fn parse_reference(raw: &str) -> Result<ReferenceMode, CliError> {
    if raw == "final" {
        return Ok(ReferenceMode::FinalIterate);
    }
    if raw == "planted" {
        return Ok(ReferenceMode::Planted);
    }
    if let Some(e) = raw.strip_prefix("epoch_end:") {
        let e: u64 = e.trim().parse().map_err(|err| {
            CliError::Config(format!("key 'reference' in [analysis]: bad epoch: {err}"))
        })?;
        return Ok(ReferenceMode::EpochEnd(e));
    }
    Err(CliError::Config(format!(
        "key 'reference' in [analysis]: expected final|planted|epoch_end:<e>, got '{raw}'"
    )))
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let mut sections = split_sections(text)?;
    fn grab(
        sections: &mut BTreeMap<String, BTreeMap<String, String>>,
        name: &'static str,
    ) -> Result<Section, CliError> {
        sections
            .remove(name)
            .map(|map| Section { name, map })
            .ok_or_else(|| CliError::Config(format!("missing section [{name}]")))
    }

    let problem = parse_problem(grab(&mut sections, "problem")?)?;

    let mut run = grab(&mut sections, "run")?;
    let eta: f64 = run.parse("eta")?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(CliError::Config(format!(
            "key 'eta' in [run]: must be positive and finite, got {eta}"
        )));
    }
    let epochs: u64 = run.parse("epochs")?;
    if epochs == 0 {
        return Err(CliError::Config("key 'epochs' in [run]: must be >= 1".into()));
    }
    let seed: u64 = run.parse("seed")?;
    let record_policy = match run.take("record") {
        Some(raw) => parse_record(&raw)?,
        None => RecordPolicy::EpochBoundaries,
    };
    run.finish()?;

    let mut analysis_cfg = AnalysisConfig::default();
    if let Some(map) = sections.remove("analysis") {
        let mut a = Section {
            name: "analysis",
            map,
        };
        if let Some(raw) = a.take("reference") {
            analysis_cfg.reference = parse_reference(&raw)?;
        }
        if let Some(eps) = a.parse_opt("eps_loss")? {
            analysis_cfg.eps_loss = eps;
        }
        if let Some(audits) = a.parse_opt("audits")? {
            analysis_cfg.audits = audits;
        }
        a.finish()?;
    }

    let mut output = grab(&mut sections, "output")?;
    let output_dir = PathBuf::from(output.require("dir")?);
    output.finish()?;

    if let Some(name) = sections.keys().next() {
        return Err(CliError::Config(format!("unknown section [{name}]")));
    }

    Ok(ExperimentConfig {
        problem,
        run: RunConfig {
            eta,
            epochs,
            seed,
            record_policy,
            reference_mode: analysis_cfg.reference,
        },
        analysis: analysis_cfg,
        output_dir,
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// `STARPATH_OUT` beats the config's `[output] dir`.
pub fn resolve_out_dir(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.output_dir.clone(),
    }
}

fn load_dataset(mlp: &MlpConfig) -> Result<Dataset, CliError> {
    let ds = match &mlp.data {
        DataConfig::Idx { images, labels } => {
            dataio::load_idx(images, labels).map_err(other)?
        }
        DataConfig::Blobs {
            n_per_class,
            classes,
            d_in,
            separation,
            seed,
        } => dataio::make_blobs(*n_per_class, *classes, *d_in, *separation, *seed),
    };
    match &mlp.subset {
        Some(sub) => dataio::subset(&ds, sub.count, sub.seed, sub.balanced).map_err(other),
        None => Ok(ds),
    }
}

/// Instantiates the configured problem and its start point (zeros for the
/// synthetic families, seeded Glorot initialization for MLPs).
pub fn build_problem(
    cfg: &ExperimentConfig,
) -> Result<(Box<dyn FiniteSumProblem>, ParamVector), CliError> {
    match &cfg.problem {
        ProblemConfig::LeastSquares { n, d, seed } => {
            let p = problems::make_consistent_least_squares(*n, *d, *seed).map_err(other)?;
            let x0 = ParamVector::zeros(*d);
            Ok((Box::new(p), x0))
        }
        ProblemConfig::PhaseRetrieval { n, d, seed } => {
            let p = problems::make_phase_retrieval(*n, *d, *seed).map_err(other)?;
            let x0 = ParamVector::zeros(*d);
            Ok((Box::new(p), x0))
        }
        ProblemConfig::Mlp(mlp) => {
            let spec = MlpSpec {
                layer_sizes: mlp.layers.clone(),
                activation: mlp.activation,
                loss_kind: mlp.loss,
                init_seed: mlp.init_seed,
            };
            spec.validate().map_err(other)?;
            let ds = load_dataset(mlp)?;
            let x0 = model::init_params(&spec);
            let p = model::as_finite_sum(&spec, &ds, mlp.batch_size).map_err(other)?;
            Ok((Box::new(p), x0))
        }
    }
}

pub fn cmd_train(config_path: &Path) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let out_dir = resolve_out_dir(&cfg);
    std::fs::create_dir_all(&out_dir).map_err(other)?;
    let trace_path = out_dir.join(TRACE_FILE);
    let (problem, x0) = build_problem(&cfg)?;
    let trace = match sgdrun::run(problem.as_ref(), &x0, &cfg.run) {
        Ok(t) => t,
        Err(RunError::Diverged { k, trace }) => {
            sgdrun::save_trace(&trace, &trace_path).map_err(other)?;
            eprintln!("diverged at iteration {k}; partial trace at {}", trace_path.display());
            return Err(CliError::Diverged { k });
        }
        Err(e) => return Err(other(e)),
    };
    for b in 0..=trace.completed_epochs() {
        if let Some(x) = trace.checkpoint(b * trace.n) {
            println!("epoch {b} loss {}", full_value(problem.as_ref(), x));
        }
    }
    sgdrun::save_trace(&trace, &trace_path).map_err(other)?;
    println!("wrote {}", trace_path.display());
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

/// Renders the three report tables from a finished analysis.
pub fn report_csvs(report: &analyzer::PathReport) -> (String, String, String) {
    let mut epochs_csv = String::from("epoch,e_B,dist,full_loss,variance,weight_norm\n");
    for &(b, e_b) in &report.epoch_residuals {
        // series index b+1 = boundary ending epoch b
        let idx = b as usize + 1;
        let _ = writeln!(
            epochs_csv,
            "{b},{e_b},{},{},{},{}",
            report.distance_series[idx].1,
            report.full_loss_series[idx].1,
            report.variance_series[idx].1,
            report.weight_norm_series[idx].1,
        );
    }
    let mut iters_csv = String::from("k,epoch,t,xi,e_k,component_loss\n");
    for r in &report.iter_residuals {
        let _ = writeln!(
            iters_csv,
            "{},{},{},{},{},{}",
            r.k, r.epoch, r.t, r.xi, r.e_k, r.component_loss
        );
    }
    let mut audits_csv = String::from("epoch,checked,vacuous,violated,slack_used\n");
    for a in &report.epoch_audits {
        let _ = writeln!(
            audits_csv,
            "{},{},{},{},{}",
            a.epoch,
            u8::from(a.checked),
            u8::from(!a.checked),
            u8::from(a.violated),
            a.slack
        );
    }
    (epochs_csv, iters_csv, audits_csv)
}

pub fn cmd_analyze(trace_path: &Path, config_path: &Path) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let trace = sgdrun::load_trace(trace_path).map_err(other)?;
    let (problem, _) = build_problem(&cfg)?;
    if trace.problem_fingerprint != problem.fingerprint() {
        return Err(CliError::FingerprintMismatch {
            trace: trace.problem_fingerprint,
            problem: problem.fingerprint(),
        });
    }
    let rp = ReferencePoint::from_trace(
        &trace,
        problem.as_ref(),
        cfg.analysis.reference,
        cfg.analysis.eps_loss,
    )
    .map_err(other)?;
    if rp.loss_warning {
        eprintln!(
            "warning: f(x*) = {} exceeds eps_loss = {}; the reference point only \
             approximates a common minimizer and near-zero residual signs are soft",
            rp.achieved_loss, cfg.analysis.eps_loss
        );
    }
    let opts = AnalysisOptions {
        eps_loss: cfg.analysis.eps_loss,
        run_audits: cfg.analysis.audits,
    };
    let report = analyzer::compute_report(&trace, problem.as_ref(), &rp, &opts).map_err(other)?;

    let out_dir = resolve_out_dir(&cfg);
    std::fs::create_dir_all(&out_dir).map_err(other)?;
    let (epochs_csv, iters_csv, audits_csv) = report_csvs(&report);
    write_file(&out_dir.join("epochs.csv"), &epochs_csv)?;
    write_file(&out_dir.join("iters.csv"), &iters_csv)?;
    write_file(&out_dir.join("audits.csv"), &audits_csv)?;

    println!("reference f(x*) = {}", rp.achieved_loss);
    println!(
        "lipschitz constant for audits: {} ({})",
        report.lipschitz.value(),
        report.lipschitz.label()
    );
    if cfg.analysis.audits {
        let s = &report.step_audit;
        println!(
            "step audit: checked {} vacuous {} distance violations {} descent violations {}",
            s.checked, s.vacuous, s.distance_violations, s.descent_violations
        );
        let violated = report.epoch_audits.iter().filter(|a| a.violated).count();
        println!(
            "epoch audit: checked {} violated {}",
            report.epoch_audits.iter().filter(|a| a.checked).count(),
            violated
        );
    }
    // thresholds and the single-reference caveat, stated with the output
    println!("note: fractions count strict e_k < 0; audits use e_k <= 0 and e_B <= 0");
    println!(
        "note: all residuals are measured toward the single reference point above; \
         the per-component choice of minimizer is not quantified over"
    );
    println!("wrote epochs.csv, iters.csv, audits.csv in {}", out_dir.display());
    Ok(())
}

pub fn cmd_plot(report_dir: &Path) -> Result<(), CliError> {
    let outcome = plot::render_dir(report_dir).map_err(|e| match e {
        plot::PlotError::MissingCsv(p) => CliError::MissingCsv(p),
        e => other(e),
    })?;
    for notice in &outcome.notices {
        println!("notice: {notice}");
    }
    for path in &outcome.written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
