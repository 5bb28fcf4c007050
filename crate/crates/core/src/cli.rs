//! Command-line experiment runner.
//!
//! Settings come from an optional TOML file and from flags of the same name
//! (`t_end` in the file is `--t-end` on the command line); flags win.
//! Exit status: 0 all verifiers passed, 1 a verifier failed, 2 bad
//! configuration or input files, 3 the integrator failed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    fmt_f64, integrate, read_trajectory, read_trajectory_table, setup, write_artifacts, write_json,
    ArtifactPaths, InitScheme, InitSpec, IntegratorConfig, Method, ModelKind, ModelSpec, Recording,
    Trajectory,
};
use crate::losses::Field;
use crate::metrics::{default_sink_queries, load_attention_tensor, sink_score, sparsity_score, write_head_scores};
use crate::simplex::ScoreFn;
use crate::theory::{SinkMode, Verifier, VerifierReport};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_VERIFIER_FAILED: i32 = 1;
pub const EXIT_BAD_INPUT: i32 = 2;
pub const EXIT_INTEGRATOR: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Logistic,
    Regression,
    RegressionConditioned,
    Kl,
    GeneralNorm,
    Elementwise,
    Tied,
    Multirow,
    MetricsAnalyze,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Logistic => "logistic",
            Self::Regression => "regression",
            Self::RegressionConditioned => "regression-conditioned",
            Self::Kl => "kl",
            Self::GeneralNorm => "general-norm",
            Self::Elementwise => "elementwise",
            Self::Tied => "tied",
            Self::Multirow => "multirow",
            Self::MetricsAnalyze => "metrics-analyze",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Sparsity,
    Sink,
}

fn parse_score(s: &str) -> std::result::Result<ScoreFn, String> {
    ScoreFn::parse(s).map_err(|e| e.to_string())
}

fn parse_scheme(s: &str) -> std::result::Result<InitScheme, String> {
    InitScheme::parse(s).map_err(|e| e.to_string())
}

/// `0,1,4` or the half-open range `0..5`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Parse(format!("bad seed list {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        return if a < b { Ok((a..b).collect()) } else { Err(bad()) };
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Number of tokens.
    #[arg(long)]
    pub p: Option<usize>,
    /// Logit rows of the multirow model.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Value dimension of the multirow model (defaults to p).
    #[arg(long)]
    pub d: Option<usize>,
    /// Normalization for general-norm: exp, identity, square.
    #[arg(long, value_parser = parse_score)]
    #[serde(default, deserialize_with = "de_score")]
    pub f: Option<ScoreFn>,
    /// Elementwise map: sigmoid, relu.
    #[arg(long, value_parser = parse_score)]
    #[serde(default, deserialize_with = "de_score")]
    pub g: Option<ScoreFn>,
    /// Condition numbers swept by regression-conditioned.
    #[arg(long, value_delimiter = ',')]
    pub kappa: Option<Vec<f64>>,
    /// Integrate in reduced (u, a) coordinates.
    #[arg(long)]
    pub reduced: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    /// assumption1, assumption2, kl-interior, residual.
    #[arg(long, value_parser = parse_scheme)]
    #[serde(default, deserialize_with = "de_scheme")]
    pub scheme: Option<InitScheme>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub target_norm: Option<f64>,
    #[arg(long)]
    pub perp_scale: Option<f64>,
    #[arg(long)]
    pub logit_offset: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Rk45,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GridName {
    Geometric,
    Linear,
    Stride,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    #[arg(long, value_enum)]
    pub method: Option<MethodName>,
    /// Step of the fixed-step method.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub atol: Option<f64>,
    #[arg(long)]
    pub dt_min: Option<f64>,
    #[arg(long)]
    pub dt_max: Option<f64>,
    #[arg(long, value_enum)]
    pub record: Option<GridName>,
    /// First geometric grid point.
    #[arg(long)]
    pub record_first: Option<f64>,
    #[arg(long)]
    pub per_decade: Option<usize>,
    /// Linear grid spacing.
    #[arg(long)]
    pub interval: Option<f64>,
    /// Accepted steps per sample for the stride grid.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Comma-separated verifier names; empty means the defaults for the field.
    #[arg(long, value_delimiter = ',')]
    pub verifiers: Option<Vec<String>>,
    #[arg(long)]
    pub onehot_eps: Option<f64>,
    #[arg(long)]
    pub loss_tol: Option<f64>,
    #[arg(long)]
    pub sink_eps: Option<f64>,
    /// Sink token; omitted with --sink-per-row true.
    #[arg(long)]
    pub sink_token: Option<usize>,
    #[arg(long)]
    pub sink_per_row: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    #[arg(long, value_enum)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub bos_key: Option<usize>,
    /// First scored query (inclusive).
    #[arg(long)]
    pub query_start: Option<usize>,
    /// Last scored query (exclusive).
    #[arg(long)]
    pub query_end: Option<usize>,
    /// Tensor file for the metrics-analyze experiment.
    #[arg(long)]
    pub tensor: Option<PathBuf>,
}

fn de_score<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<ScoreFn>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    s.map(|s| parse_score(&s).map_err(serde::de::Error::custom)).transpose()
}

fn de_scheme<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<InitScheme>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    s.map(|s| parse_scheme(&s).map_err(serde::de::Error::custom)).transpose()
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: Option<Experiment>,
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub jobs: Option<usize>,
    pub rtol: Option<f64>,
    pub t_end: Option<f64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
}

pub fn read_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// `a.x.or(b.x)` for every listed field.
macro_rules! prefer {
    ($a:expr, $b:expr; $($f:ident),+) => {{
        let (a, b) = ($a, $b);
        $( a.$f = a.$f.take().or(b.$f); )+
    }};
}

#[derive(Debug, Parser)]
#[command(name = "polarflow", version, about = "Gradient-flow experiments on the value-softmax model")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seeds as `0,1,2` or `0..5`.
    #[arg(long, global = true)]
    pub seeds: Option<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub rtol: Option<f64>,
    #[arg(long, global = true)]
    pub t_end: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate an experiment for every seed and verify the trajectories.
    Run(RunArgs),
    /// Re-run verifiers on stored trajectories.
    Verify(VerifyArgs),
    /// Sparsity or sink scores of attention-tensor files.
    Analyze(AnalyzeArgs),
    /// Long-format CSV (seed, t, series, index, value) from trajectory CSVs.
    EmitFigureData(EmitArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub experiment: Option<Experiment>,
    #[command(flatten)]
    pub model: ModelSection,
    #[command(flatten)]
    pub init: InitSection,
    #[command(flatten)]
    pub integrator: IntegratorSection,
    #[command(flatten)]
    pub verify: VerifySection,
    #[command(flatten)]
    pub analyze: AnalyzeSection,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Trajectory artifacts (any of .csv, .state.csv, .summary.json).
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    #[command(flatten)]
    pub verify: VerifySection,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    #[command(flatten)]
    pub analyze: AnalyzeSection,
}

#[derive(Debug, Clone, Args)]
pub struct EmitArgs {
    /// Trajectory CSVs sharing one schema.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Output file; defaults to `figure_data.csv` in the output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Fully resolved `run` settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub experiment: Experiment,
    pub model: ModelSpec,
    /// One entry per sweep point; `None` outside the conditioned sweep.
    pub kappas: Vec<Option<f64>>,
    /// Seed is overwritten per run.
    pub init: InitSpec,
    pub integrator: IntegratorConfig,
    pub seeds: Vec<u64>,
    /// Explicit verifiers; empty means the field defaults.
    pub verifiers: Vec<Verifier>,
    pub out: PathBuf,
    pub jobs: usize,
    pub analyze: AnalyzeSection,
}

fn default_p(e: Experiment) -> usize {
    match e {
        Experiment::Multirow => 6,
        _ => 8,
    }
}

fn default_scheme(e: Experiment) -> InitScheme {
    match e {
        Experiment::Regression | Experiment::RegressionConditioned => InitScheme::Assumption2,
        Experiment::Kl => InitScheme::KlInterior,
        Experiment::Tied => InitScheme::Residual,
        _ => InitScheme::Assumption1,
    }
}

/// Geometric `1e5` for the polarizing models, linear `1e3` for regression and KL.
fn default_integrator(e: Experiment, t_end: Option<f64>) -> IntegratorConfig {
    match e {
        Experiment::Regression | Experiment::RegressionConditioned | Experiment::Kl => {
            IntegratorConfig::linear(t_end.unwrap_or(1e3))
        }
        _ => IntegratorConfig::geometric(t_end.unwrap_or(1e5)),
    }
}

fn build_integrator(e: Experiment, rtol: Option<f64>, t_end: Option<f64>, s: &IntegratorSection) -> Result<IntegratorConfig> {
    let mut cfg = default_integrator(e, t_end);
    let t = cfg.t_end;
    match s.record {
        Some(GridName::Geometric) => cfg.record = IntegratorConfig::geometric(t).record,
        Some(GridName::Linear) => cfg.record = IntegratorConfig::linear(t).record,
        Some(GridName::Stride) => cfg.record = Recording::Stride { n: 1 },
        None => {}
    }
    match &mut cfg.record {
        Recording::Geometric { first, per_decade } => {
            *first = s.record_first.unwrap_or(*first);
            *per_decade = s.per_decade.unwrap_or(*per_decade);
        }
        Recording::Linear { interval } => *interval = s.interval.unwrap_or(*interval),
        Recording::Stride { n } => *n = s.stride.unwrap_or(*n),
    }
    if s.method == Some(MethodName::Rk4) {
        let dt = s.dt.ok_or_else(|| Error::Parse("method rk4 needs dt".into()))?;
        cfg.method = Method::Rk4Fixed { dt };
    } else if let Method::Rk45Adaptive { rtol: r, atol, dt_min, dt_max } = &mut cfg.method {
        *r = rtol.unwrap_or(*r);
        *atol = s.atol.unwrap_or(*atol);
        *dt_min = s.dt_min.unwrap_or(*dt_min);
        *dt_max = s.dt_max.unwrap_or(*dt_max);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Verifier list with parameters from `s`; empty when none are named.
pub fn build_verifiers(s: &VerifySection) -> Result<Vec<Verifier>> {
    let names = s.verifiers.clone().unwrap_or_default();
    names
        .iter()
        .filter(|n| !n.trim().is_empty())
        .map(|n| Ok(parametrize(Verifier::parse(n.trim())?, s)))
        .collect()
}

fn parametrize(v: Verifier, s: &VerifySection) -> Verifier {
    match v {
        Verifier::Onehot { eps } => Verifier::Onehot {
            eps: s.onehot_eps.unwrap_or(eps),
        },
        Verifier::VanishingLoss { tol } => Verifier::VanishingLoss {
            tol: s.loss_tol.unwrap_or(tol),
        },
        Verifier::Sink { eps, mode } => Verifier::Sink {
            eps: s.sink_eps.unwrap_or(eps),
            mode: if s.sink_per_row == Some(true) {
                SinkMode::PerRowArgmax
            } else {
                s.sink_token.map_or(mode, SinkMode::Token)
            },
        },
        v => v,
    }
}

/// The verifiers run on a trajectory of `field` when none are requested.
pub fn default_verifiers(field: &Field) -> Vec<Verifier> {
    let names: &[&str] = match field {
        Field::LogisticFull { .. } | Field::LogisticReduced { .. } => &[
            "order",
            "repulsion",
            "vanishing-loss",
            "ratio-bound",
            "polarization-growth",
            "onehot",
        ],
        Field::RegressionFull { .. } => &["repulsion", "vanishing-loss", "exponential-decay", "rank-one", "conservation", "descent"],
        Field::RegressionReduced { .. } => &["repulsion", "vanishing-loss", "exponential-decay", "conservation", "descent"],
        Field::RegressionConditioned { .. } => &["conservation", "descent"],
        Field::Kl { .. } => &["kl", "conservation", "descent"],
        Field::GeneralNorm { .. } => &["nocrossing", "descent"],
        Field::Elementwise { .. } => &["descent"],
        Field::Tied { .. } => &["massive-activation", "descent"],
        Field::MultiRow { .. } => &["sink", "conservation", "descent"],
    };
    names.iter().map(|n| Verifier::parse(n).expect("known name")).collect()
}

/// Merges the config file under the flags and fills experiment defaults.
pub fn resolve(global: &GlobalArgs, args: &RunArgs) -> Result<Plan> {
    let mut file = match &global.config {
        Some(p) => read_config(p)?,
        None => ConfigFile::default(),
    };
    let experiment = args
        .experiment
        .or(file.experiment)
        .ok_or_else(|| Error::Parse("no experiment given (--experiment or `experiment` in the config)".into()))?;
    let mut model = args.model.clone();
    prefer!(&mut model, file.model; p, rows, d, f, g, kappa, reduced);
    let mut init = args.init.clone();
    prefer!(&mut init, file.init; scheme, scale, target_norm, perp_scale, logit_offset);
    let mut integ = args.integrator.clone();
    prefer!(&mut integ, file.integrator; method, dt, atol, dt_min, dt_max, record, record_first, per_decade, interval, stride);
    let mut verify = args.verify.clone();
    prefer!(&mut verify, file.verify; verifiers, onehot_eps, loss_tol, sink_eps, sink_token, sink_per_row);
    let mut analyze = args.analyze.clone();
    prefer!(&mut analyze, std::mem::take(&mut file.analyze); metric, bos_key, query_start, query_end, tensor);

    let seeds = match &global.seeds {
        Some(s) => parse_seeds(s)?,
        None => file.seeds.clone().unwrap_or_else(|| (0..5).collect()),
    };
    if seeds.is_empty() {
        return Err(Error::Parse("empty seed list".into()));
    }
    let rtol = global.rtol.or(file.rtol);
    let t_end = global.t_end.or(file.t_end);
    let p = model.p.unwrap_or_else(|| default_p(experiment));
    let f = model.f.unwrap_or(ScoreFn::Square);
    let g = model.g.unwrap_or(ScoreFn::Sigmoid);
    let kind = match experiment {
        Experiment::Logistic | Experiment::MetricsAnalyze => ModelKind::Logistic,
        Experiment::Regression => ModelKind::Regression,
        Experiment::RegressionConditioned => ModelKind::RegressionConditioned { kappa: 1.0 },
        Experiment::Kl => ModelKind::Kl,
        Experiment::GeneralNorm => ModelKind::GeneralNorm { f },
        Experiment::Elementwise => ModelKind::Elementwise { g },
        Experiment::Tied => ModelKind::Tied,
        Experiment::Multirow => ModelKind::MultiRow {
            rows: model.rows.unwrap_or(5),
            d: model.d.unwrap_or(p),
        },
    };
    let kappas = if experiment == Experiment::RegressionConditioned {
        let k = model.kappa.clone().unwrap_or_else(|| vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        if k.is_empty() {
            return Err(Error::Parse("empty kappa list".into()));
        }
        k.into_iter().map(Some).collect()
    } else {
        vec![None]
    };
    let reduced = model.reduced.unwrap_or(experiment == Experiment::GeneralNorm);
    let mut spec = InitSpec::new(init.scheme.unwrap_or_else(|| default_scheme(experiment)), p, 0);
    spec.scale = init.scale.unwrap_or(if experiment == Experiment::Tied { 0.3 } else { 1.0 });
    spec.target_norm = init.target_norm.unwrap_or(spec.target_norm);
    spec.perp_scale = init.perp_scale.unwrap_or(spec.perp_scale);
    spec.logit_offset = init.logit_offset.unwrap_or(match experiment {
        Experiment::GeneralNorm => f.matched_offset(),
        Experiment::Elementwise => g.matched_offset(),
        _ => 0.0,
    });
    Ok(Plan {
        experiment,
        model: ModelSpec { kind, reduced },
        kappas,
        init: spec,
        integrator: build_integrator(experiment, rtol, t_end, &integ)?,
        seeds,
        verifiers: build_verifiers(&verify)?,
        out: global.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("out")),
        jobs: global.jobs.or(file.jobs).unwrap_or(0),
        analyze,
    })
}

/// Artifact base name `{exp}[_kappa{k}]_seed{s}` inside `out`.
pub fn artifact_base(out: &Path, e: Experiment, kappa: Option<f64>, seed: u64) -> PathBuf {
    let k = kappa.map(|k| format!("_kappa{k}")).unwrap_or_default();
    out.join(format!("{}{k}_seed{seed}", e.name()))
}

/// Exit status of one unit of work.
fn error_status(e: &Error) -> i32 {
    match e {
        Error::Stiffness { .. } | Error::DomainViolation { .. } | Error::DegenerateNormalization { .. } => EXIT_INTEGRATOR,
        _ => EXIT_BAD_INPUT,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub seed: Option<u64>,
    pub kappa: Option<f64>,
    pub artifacts: String,
    pub status: i32,
    pub error: Option<String>,
    pub final_entropy: Option<f64>,
    /// Verifier name to pass/fail.
    pub reports: BTreeMap<String, bool>,
    /// Default verifiers skipped because they do not apply.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PassCount {
    pub passed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaEntropy {
    pub kappa: f64,
    pub mean_final_entropy: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub experiment: String,
    pub status: i32,
    pub runs: Vec<RunRecord>,
    pub pass_counts: BTreeMap<String, PassCount>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub entropy_by_kappa: Vec<KappaEntropy>,
}

impl Aggregate {
    fn new(experiment: &str, runs: Vec<RunRecord>) -> Self {
        let status = combine(runs.iter().map(|r| r.status));
        let mut pass_counts: BTreeMap<String, PassCount> = BTreeMap::new();
        for r in &runs {
            for (name, ok) in &r.reports {
                let c = pass_counts.entry(name.clone()).or_default();
                c.total += 1;
                c.passed += usize::from(*ok);
            }
        }
        let mut by_kappa: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
        for r in &runs {
            if let (Some(k), Some(h)) = (r.kappa, r.final_entropy) {
                let e = by_kappa.entry(k.to_bits()).or_insert((k, 0.0, 0));
                e.1 += h;
                e.2 += 1;
            }
        }
        let mut entropy_by_kappa: Vec<KappaEntropy> = by_kappa
            .into_values()
            .map(|(kappa, sum, n)| KappaEntropy {
                kappa,
                mean_final_entropy: sum / n as f64,
                runs: n,
            })
            .collect();
        entropy_by_kappa.sort_by(|a, b| a.kappa.total_cmp(&b.kappa));
        Self {
            experiment: experiment.to_string(),
            status,
            runs,
            pass_counts,
            entropy_by_kappa,
        }
    }
}

/// Integrator failure dominates bad input, which dominates verifier failure.
fn combine(statuses: impl Iterator<Item = i32>) -> i32 {
    statuses.fold(EXIT_PASS, |acc, s| {
        let rank = |s: i32| match s {
            EXIT_INTEGRATOR => 3,
            EXIT_BAD_INPUT => 2,
            EXIT_VERIFIER_FAILED => 1,
            _ => 0,
        };
        if rank(s) > rank(acc) {
            s
        } else {
            acc
        }
    })
}

/// Runs `verifiers` (or the defaults for the field) and writes one report per
/// verifier as `{base}.{name}.json`.
fn verify_and_write(traj: &Trajectory, verifiers: &[Verifier], base: &Path, record: &mut RunRecord) -> Result<()> {
    let explicit = !verifiers.is_empty();
    let list = if explicit { verifiers.to_vec() } else { default_verifiers(&traj.field) };
    for v in list {
        let report: VerifierReport = match v.run(traj) {
            Ok(r) => r,
            Err(Error::Inapplicable(msg)) if !explicit => {
                record.skipped.push(format!("{}: {msg}", v.name()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let path = PathBuf::from(format!("{}.{}.json", base.display(), v.name()));
        write_json(&report, &path)?;
        if !report.passed {
            record.status = combine([record.status, EXIT_VERIFIER_FAILED].into_iter());
        }
        record.reports.insert(v.name().to_string(), report.passed);
    }
    Ok(())
}

fn run_one(plan: &Plan, kappa: Option<f64>, seed: u64) -> RunRecord {
    let base = artifact_base(&plan.out, plan.experiment, kappa, seed);
    let mut record = RunRecord {
        seed: Some(seed),
        kappa,
        artifacts: base.display().to_string(),
        status: EXIT_PASS,
        error: None,
        final_entropy: None,
        reports: BTreeMap::new(),
        skipped: vec![],
    };
    let mut model = plan.model;
    if let (ModelKind::RegressionConditioned { .. }, Some(k)) = (model.kind, kappa) {
        model.kind = ModelKind::RegressionConditioned { kappa: k };
    }
    let mut spec = plan.init.clone();
    spec.seed = seed;
    let result = setup(&model, &spec).map_err(|e| (e, None)).and_then(|s| {
        integrate(&s.field, &s.x0, &plan.integrator).map_err(|f| (f.error, Some(f.partial)))
    });
    let outcome = match result {
        Ok(traj) => write_artifacts(&traj, None, &base).and_then(|_| {
            record.final_entropy = Some(traj.last().entropy);
            verify_and_write(&traj, &plan.verifiers, &base, &mut record)
        }),
        Err((e, partial)) => {
            if let Some(traj) = partial.filter(|t| !t.samples.is_empty()) {
                if let Err(w) = write_artifacts(&traj, Some(&e), &base) {
                    eprintln!("{}: could not write partial artifacts: {w}", base.display());
                }
            }
            Err(e)
        }
    };
    if let Err(e) = outcome {
        record.status = error_status(&e);
        record.error = Some(e.to_string());
    }
    record
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

/// Executes a resolved plan, writing per-seed artifacts, reports, and
/// `aggregate.json`.
pub fn execute(plan: &Plan) -> Result<Aggregate> {
    fs::create_dir_all(&plan.out)?;
    if plan.experiment == Experiment::MetricsAnalyze {
        let tensor = plan
            .analyze
            .tensor
            .clone()
            .ok_or_else(|| Error::Parse("metrics-analyze needs a tensor file (--tensor)".into()))?;
        let mut record = RunRecord {
            seed: None,
            kappa: None,
            artifacts: String::new(),
            status: EXIT_PASS,
            error: None,
            final_entropy: None,
            reports: BTreeMap::new(),
            skipped: vec![],
        };
        match analyze_file(&tensor, &plan.analyze, &plan.out) {
            Ok(p) => record.artifacts = p.display().to_string(),
            Err(e) => {
                record.status = EXIT_BAD_INPUT;
                record.error = Some(e.to_string());
            }
        }
        let agg = Aggregate::new(plan.experiment.name(), vec![record]);
        write_json(&agg, plan.out.join("aggregate.json"))?;
        return Ok(agg);
    }
    let units: Vec<(Option<f64>, u64)> = plan
        .kappas
        .iter()
        .flat_map(|&k| plan.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let runs: Vec<RunRecord> = pool(plan.jobs)?.install(|| {
        use rayon::prelude::*;
        units.par_iter().map(|&(k, s)| run_one(plan, k, s)).collect()
    });
    let agg = Aggregate::new(plan.experiment.name(), runs);
    write_json(&agg, plan.out.join("aggregate.json"))?;
    Ok(agg)
}

fn print_runs(agg: &Aggregate) {
    for r in &agg.runs {
        let passed = r.reports.values().filter(|&&ok| ok).count();
        let mut line = format!("{}: {passed}/{} verifiers passed", r.artifacts, r.reports.len());
        if let Some(e) = &r.error {
            line.push_str(&format!(", error: {e}"));
        }
        println!("{line}");
        for (name, ok) in &r.reports {
            if !ok {
                println!("  FAILED {name}: {}.{name}.json", r.artifacts);
            }
        }
        for s in &r.skipped {
            println!("  skipped {s}");
        }
    }
    for k in &agg.entropy_by_kappa {
        println!("kappa {}: mean final entropy {:.6} over {} runs", k.kappa, k.mean_final_entropy, k.runs);
    }
}

/// `verify`: reloads each trajectory and writes reports next to it, or into
/// `--out` when given.
pub fn verify_files(global: &GlobalArgs, args: &VerifyArgs) -> Result<Aggregate> {
    let mut section = args.verify.clone();
    if let Some(p) = &global.config {
        prefer!(&mut section, read_config(p)?.verify; verifiers, onehot_eps, loss_tol, sink_eps, sink_token, sink_per_row);
    }
    let verifiers = build_verifiers(&section)?;
    if let Some(out) = &global.out {
        fs::create_dir_all(out)?;
    }
    let mut runs = vec![];
    for file in &args.files {
        let paths = ArtifactPaths::from_any(file);
        let stem = paths.summary.to_string_lossy().trim_end_matches(".summary.json").to_string();
        let base = match &global.out {
            Some(out) => out.join(Path::new(&stem).file_name().unwrap_or_default()),
            None => PathBuf::from(&stem),
        };
        let mut record = RunRecord {
            seed: seed_from_name(&stem),
            kappa: None,
            artifacts: base.display().to_string(),
            status: EXIT_PASS,
            error: None,
            final_entropy: None,
            reports: BTreeMap::new(),
            skipped: vec![],
        };
        let res = read_trajectory(file).and_then(|traj| {
            record.final_entropy = Some(traj.last().entropy);
            verify_and_write(&traj, &verifiers, &base, &mut record)
        });
        if let Err(e) = res {
            record.status = EXIT_BAD_INPUT;
            record.error = Some(e.to_string());
        }
        runs.push(record);
    }
    Ok(Aggregate::new("verify", runs))
}

fn query_range(s: &AnalyzeSection, q: usize) -> Range<usize> {
    let d = default_sink_queries(q);
    s.query_start.unwrap_or(d.start)..s.query_end.unwrap_or(d.end)
}

/// Scores one tensor file into `{out}/{stem}.{metric}.csv`.
pub fn analyze_file(path: &Path, s: &AnalyzeSection, out: &Path) -> Result<PathBuf> {
    let t = load_attention_tensor(path)?;
    let metric = s.metric.unwrap_or(Metric::Sink);
    let scores = match metric {
        Metric::Sparsity => sparsity_score(&t),
        Metric::Sink => sink_score(&t, query_range(s, t.dims()[3]), s.bos_key.unwrap_or(0))?,
    };
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match metric {
        Metric::Sparsity => "sparsity",
        Metric::Sink => "sink",
    };
    let dest = out.join(format!("{stem}.{name}.csv"));
    write_head_scores(&scores, &dest)?;
    Ok(dest)
}

/// Trailing `_seed{n}` in an artifact name.
pub fn seed_from_name(name: &str) -> Option<u64> {
    let file = Path::new(name).file_name()?.to_string_lossy().into_owned();
    let file = file.split('.').next()?.to_string();
    let (_, tail) = file.rsplit_once("_seed")?;
    tail.parse().ok()
}

/// Writes `seed, t, series, index, value` rows for every trajectory CSV;
/// scalar series use index 0. Returns the number of data rows.
pub fn emit_figure_data(files: &[PathBuf], dest: &Path) -> Result<usize> {
    let mut tables = vec![];
    for (k, f) in files.iter().enumerate() {
        let csv = ArtifactPaths::from_any(f).csv;
        let table = read_trajectory_table(&csv)?;
        let seed = seed_from_name(&csv.to_string_lossy()).unwrap_or(k as u64);
        tables.push((seed, table));
    }
    let p = tables[0].1.p;
    if let Some((_, t)) = tables.iter().find(|(_, t)| t.p != p) {
        return Err(Error::SchemaMismatch(format!(
            "trajectories mix p = {p} and p = {}",
            t.p
        )));
    }
    let mut w = csv::Writer::from_path(dest)?;
    w.write_record(["seed", "t", "series", "index", "value"])?;
    let mut n = 0;
    for (seed, table) in &tables {
        for row in &table.rows {
            let t = fmt_f64(row[0]);
            let mut put = |series: &str, index: usize, value: f64| -> Result<()> {
                w.write_record([seed.to_string(), t.clone(), series.to_string(), index.to_string(), fmt_f64(value)])?;
                n += 1;
                Ok(())
            };
            for (c, series) in ["loss", "gamma", "int_gamma", "entropy"].iter().enumerate() {
                put(series, 0, row[c + 1])?;
            }
            for (b, series) in ["sigma", "u", "a"].iter().enumerate() {
                for i in 0..p {
                    put(series, i, row[5 + b * p + i])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(n)
}

/// Parses `args` and runs the chosen subcommand; returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_BAD_INPUT } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    let g = &cli.global;
    let result = match &cli.command {
        Command::Run(args) => resolve(g, args).and_then(|plan| execute(&plan)).map(|agg| {
            print_runs(&agg);
            agg.status
        }),
        Command::Verify(args) => verify_files(g, args).map(|agg| {
            print_runs(&agg);
            agg.status
        }),
        Command::Analyze(args) => {
            let mut section = args.analyze.clone();
            let cfg = g.config.as_deref().map(read_config).transpose();
            cfg.and_then(|cfg| {
                if let Some(cfg) = cfg {
                    prefer!(&mut section, cfg.analyze; metric, bos_key, query_start, query_end, tensor);
                }
                let out = g.out.clone().unwrap_or_else(|| PathBuf::from("out"));
                fs::create_dir_all(&out)?;
                for f in &args.files {
                    println!("{}", analyze_file(f, &section, &out)?.display());
                }
                Ok(EXIT_PASS)
            })
        }
        Command::EmitFigureData(args) => {
            let dest = args.output.clone().unwrap_or_else(|| {
                g.out.clone().unwrap_or_else(|| PathBuf::from("out")).join("figure_data.csv")
            });
            let made = match dest.parent() {
                Some(d) if !d.as_os_str().is_empty() => fs::create_dir_all(d).map_err(Error::from),
                _ => Ok(()),
            };
            made.and_then(|_| emit_figure_data(&args.files, &dest)).map(|n| {
                println!("{}: {n} rows", dest.display());
                EXIT_PASS
            })
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            error_status(&e)
        }
    }
}
