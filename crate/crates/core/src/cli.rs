// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end.
//!
//! Every subcommand parses its flags, calls the library, writes files and
//! prints either a short human summary or (with `--json`) one JSON document
//! on stdout. Exit codes: 0 on success, 1 on usage or validation errors, 2 on
//! I/O or oracle failures.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::calibration::{calibrate, debias_once, CalibrationConfig, LayerPatterns};
use crate::editors::{stable_learning_rate, EditConfig, Solver, DEFAULT_LEARNING_RATE};
use crate::embedding::{build_delta_set, load_embedding_fixture, DeltaSet, EmbeddingSequence};
use crate::error::{Error, Result};
use crate::metrics::{
    average_pixel_shift, biasedness, biasedness_per_category, load_image_pairs, ratio_deviation, worst_biasedness,
    AttributeSpec, MetricRecord, RatioReport,
};
use crate::oracle::{oracle_from_uri, DEFAULT_N_SAMPLES};
use crate::prompt_sets::{expand_guidances, PromptPlan};
use crate::tensor_store::{extract_cross_attention, read_container, write_container};

/// Environment variable consulted when `--oracle` is absent.
pub const ORACLE_ENV: &str = "ATTNEDIT_ORACLE_URL";

#[derive(Debug, Parser)]
#[command(
    name = "attnedit",
    version,
    about = "Cross-attention projection editing for text-to-image checkpoints"
)]
pub struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List cross-attention layers and their shapes.
    Inspect(InspectArgs),
    /// One-shot edit of every cross-attention projection.
    Debias(DebiasArgs),
    /// Edit iteratively until the oracle reports balanced ratios.
    Calibrate(CalibrateArgs),
    /// Compute a bias metric.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Build a delta set from an embedding fixture.
    Delta(DeltaArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PatternArgs {
    /// Name suffix of key projection tensors.
    #[arg(long, default_value = crate::tensor_store::DEFAULT_KEY_PATTERN)]
    pub key_pattern: String,
    /// Name suffix of value projection tensors.
    #[arg(long, default_value = crate::tensor_store::DEFAULT_VALUE_PATTERN)]
    pub value_pattern: String,
}

impl From<&PatternArgs> for LayerPatterns {
    fn from(p: &PatternArgs) -> Self {
        LayerPatterns {
            key: p.key_pattern.clone(),
            value: p.value_pattern.clone(),
        }
    }
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint container.
    #[arg(required_unless_present = "ckpt")]
    pub path: Option<PathBuf>,
    #[arg(long, conflicts_with = "path")]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub patterns: PatternArgs,
}

/// `auto` or a positive number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AutoOr {
    Auto,
    Value(f64),
}

impl FromStr for AutoOr {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(AutoOr::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(AutoOr::Value(v)),
            _ => Err(format!("expected `auto` or a positive number, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    ClosedForm,
    Gradient,
}

impl From<SolverArg> for Solver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::ClosedForm => Solver::ClosedForm,
            SolverArg::Gradient => Solver::Gradient,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EditArgs {
    /// Delta set file, or an embedding fixture whose first prompt is the
    /// source and the rest are guidances.
    #[arg(long)]
    pub deltas: PathBuf,
    /// Regularizer weight; `auto` is 1/L.
    #[arg(long, default_value = "auto")]
    pub lambda: AutoOr,
    /// Gradient step size; `auto` is 1/λ_max(ΔΔᵀ + λI).
    #[arg(long, default_value_t = AutoOr::Value(DEFAULT_LEARNING_RATE))]
    pub lr: AutoOr,
}

impl std::fmt::Display for AutoOr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AutoOr::Auto => f.write_str("auto"),
            AutoOr::Value(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Args)]
pub struct DebiasArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub edit: EditArgs,
    #[arg(long, value_enum, default_value = "closed-form")]
    pub solver: SolverArg,
    /// Step cap for the gradient solver.
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub patterns: PatternArgs,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub edit: EditArgs,
    /// Attribute: `gender`, `race`, `name=cat1,cat2,...` or a JSON file.
    #[arg(long, default_value = "gender")]
    pub attr: String,
    /// `synthetic:[k=..][,seed=..]` or an `http(s)://` bridge URL.
    #[arg(long, env = ORACLE_ENV)]
    pub oracle: Option<String>,
    /// Gradient steps per iteration.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_N_SAMPLES)]
    pub n_samples: u32,
    #[arg(long, default_value_t = 0.1)]
    pub psi_tol: f64,
    #[arg(long, default_value_t = 50)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for per-iteration checkpoints read by the oracle
    /// (default `<out>.iterations`).
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[command(flatten)]
    pub patterns: PatternArgs,
}

#[derive(Debug, Subcommand)]
pub enum MetricsCommand {
    /// Deviation from the uniform ratio.
    Psi {
        /// Comma-separated category counts.
        #[arg(long)]
        counts: String,
        #[arg(long)]
        attr: Option<String>,
        /// Report one category instead of the worst.
        #[arg(long)]
        category: Option<usize>,
    },
    /// Mean ratio drift on preserved concepts; pass `--baseline` and
    /// `--edited` once per concept, in matching order.
    Xi {
        #[arg(long, required = true)]
        baseline: Vec<String>,
        #[arg(long, required = true)]
        edited: Vec<String>,
        #[arg(long)]
        attr: Option<String>,
        #[arg(long, default_value_t = 0)]
        category: usize,
    },
    /// Average pixel shift over same-seed image pairs.
    Aps {
        /// Image-pair manifest.
        #[arg(long)]
        images: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct DeltaArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prompt plan; selects source and guidances by prompt text.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub profession: Option<String>,
    /// Attributes to expand (overrides the plan's); repeatable.
    #[arg(long)]
    pub attr: Vec<String>,
}

/// Parses `gender`, `race`, `name=cat1,cat2,...` or a path to a JSON spec.
pub fn parse_attr(s: &str) -> Result<AttributeSpec> {
    match s {
        "gender" => return Ok(AttributeSpec::gender()),
        "race" => return Ok(AttributeSpec::race()),
        _ => {}
    }
    if let Some((name, cats)) = s.split_once('=') {
        let categories = cats.split(',').map(|c| c.trim().to_string()).collect();
        return AttributeSpec::with_default_prompts(name.trim(), categories);
    }
    let path = Path::new(s);
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return Ok(serde_json::from_str(&text)?);
    }
    Err(Error::InvalidArgument(format!(
        "attribute `{s}`: expected `gender`, `race`, `name=a,b,...` or a .json file"
    )))
}

/// Parses comma-separated counts.
pub fn parse_counts(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|c| {
            c.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad count `{c}` in `{s}`")))
        })
        .collect()
}

fn counts_report(counts: Vec<u64>, attr: Option<&str>) -> Result<RatioReport> {
    let spec = match attr {
        Some(a) => parse_attr(a)?,
        None => AttributeSpec::with_default_prompts(
            "attribute",
            (0..counts.len()).map(|i| format!("category {i}")).collect(),
        )?,
    };
    RatioReport::from_counts(spec, counts)
}

/// Loads a delta set file, or builds one from an embedding fixture (first
/// prompt is the source).
pub fn load_deltas(path: &Path) -> Result<DeltaSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("prompts").is_none() {
        return DeltaSet::load(path);
    }
    let sequences = load_embedding_fixture(path)?;
    let (source, guidances) = sequences
        .split_first()
        .ok_or_else(|| Error::Empty("embedding fixture has no prompts".into()))?;
    build_delta_set(source, guidances)
}

/// Resolves `--lambda` and `--lr` against the delta set.
pub fn edit_config(args: &EditArgs, deltas: &DeltaSet) -> EditConfig {
    let lambda = match args.lambda {
        AutoOr::Auto => deltas.default_lambda(),
        AutoOr::Value(v) => v,
    };
    let learning_rate = match args.lr {
        AutoOr::Auto => stable_learning_rate(&deltas.to_f64(), lambda),
        AutoOr::Value(v) => v,
    };
    EditConfig {
        lambda,
        learning_rate,
        ..EditConfig::default()
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Where `calibrate` writes its trace.
pub fn trace_path(out: &Path) -> PathBuf {
    with_suffix(out, ".trace.json")
}

struct Output<'a> {
    out: &'a mut dyn Write,
    json: bool,
}

impl Output<'_> {
    fn line(&mut self, text: impl std::fmt::Display) -> Result<()> {
        writeln!(self.out, "{text}").map_err(|e| Error::io("<stdout>", e))
    }

    fn json(&mut self, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.line(text)
    }
}

fn inspect(args: &InspectArgs, out: &mut Output) -> Result<()> {
    let path = args.path.as_ref().or(args.ckpt.as_ref()).expect("clap requires one");
    let map = read_container(path)?;
    let layers = extract_cross_attention(&map, &args.patterns.key_pattern, &args.patterns.value_pattern)?;
    if out.json {
        let rows: Vec<_> = layers
            .iter()
            .map(|l| {
                let (m, d) = l.shape();
                json!({
                    "layer_id": l.layer_id,
                    "key": l.key_name,
                    "value": l.value_name,
                    "shape": [m, d],
                    "dtype": l.source_dtype.as_str(),
                })
            })
            .collect();
        return out.json(&json!({ "tensors": map.len(), "layers": rows }));
    }
    out.line(format_args!("{:<56} {:>12} {:>6}", "layer", "shape", "dtype"))?;
    for l in &layers {
        let (m, d) = l.shape();
        out.line(format_args!(
            "{:<56} {:>12} {:>6}",
            l.layer_id,
            format!("{m}x{d}"),
            l.source_dtype.as_str()
        ))?;
    }
    out.line(format_args!(
        "{} cross-attention layers ({} of {} tensors)",
        layers.len(),
        2 * layers.len(),
        map.len()
    ))
}

fn debias(args: &DebiasArgs, out: &mut Output) -> Result<()> {
    let checkpoint = read_container(&args.ckpt)?;
    let deltas = load_deltas(&args.edit.deltas)?;
    let mut config = edit_config(&args.edit, &deltas);
    config.solver = args.solver.into();
    if let Some(steps) = args.steps {
        config.max_steps = steps;
    }
    let edited = debias_once(&checkpoint, &deltas, &config, &(&args.patterns).into())?;
    write_container(&edited, &args.out)?;
    if out.json {
        return out.json(&json!({
            "out": args.out,
            "lambda": config.lambda,
            "learning_rate": config.learning_rate,
            "solver": config.solver,
            "deltas": deltas.len(),
        }));
    }
    out.line(format_args!(
        "wrote {} (lambda {}, {} deltas)",
        args.out.display(),
        config.lambda,
        deltas.len()
    ))
}

fn calibrate_cmd(args: &CalibrateArgs, out: &mut Output) -> Result<()> {
    let uri = args
        .oracle
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("no oracle given; pass --oracle or set {ORACLE_ENV}")))?;
    let mut oracle = oracle_from_uri(uri)?;
    let spec = parse_attr(&args.attr)?;
    let checkpoint = read_container(&args.ckpt)?;
    let deltas = load_deltas(&args.edit.deltas)?;
    let checkpoint_dir = if oracle.needs_checkpoint_file() {
        let dir = args
            .checkpoint_dir
            .clone()
            .unwrap_or_else(|| with_suffix(&args.out, ".iterations"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Some(dir)
    } else {
        None
    };
    let config = CalibrationConfig {
        n_samples: args.n_samples,
        psi_tolerance: args.psi_tol,
        max_iterations: args.max_iterations,
        steps_per_iteration: args.steps,
        edit: edit_config(&args.edit, &deltas),
        seed: args.seed,
        patterns: (&args.patterns).into(),
        checkpoint_dir,
    };
    let trace = trace_path(&args.out);
    let (edited, report) = match calibrate(&checkpoint, &deltas, &spec, oracle.as_mut(), &config) {
        Ok(done) => done,
        Err(Error::Calibration { source, partial }) => {
            partial.save(&trace)?;
            return Err(Error::Calibration { source, partial });
        }
        Err(e) => return Err(e),
    };
    write_container(&edited, &args.out)?;
    report.save(&trace)?;
    if out.json {
        return out.json(&report);
    }
    for it in &report.iterations {
        out.line(format_args!(
            "iteration {:>3}: worst psi {:.4}  response {:.6}",
            it.iteration, it.worst_psi, it.response_norm
        ))?;
    }
    out.line(format_args!(
        "{} after {} iteration(s); wrote {} and {}",
        if report.converged { "converged" } else { "not converged" },
        report.iterations.len(),
        args.out.display(),
        trace.display()
    ))
}

fn metrics(cmd: &MetricsCommand, out: &mut Output) -> Result<()> {
    let record = match cmd {
        MetricsCommand::Psi { counts, attr, category } => {
            let report = counts_report(parse_counts(counts)?, attr.as_deref())?;
            let value = match category {
                Some(i) => biasedness(&report, *i)?,
                None => worst_biasedness(&report),
            };
            if out.json {
                return out.json(&json!({
                    "metric": "psi",
                    "value": value,
                    "n": report.n_total(),
                    "per_category": biasedness_per_category(&report),
                    "spec": report.spec(),
                }));
            }
            MetricRecord {
                metric: "psi".into(),
                value,
                n: report.n_total() as usize,
                spec: Some(report.spec().clone()),
            }
        }
        MetricsCommand::Xi {
            baseline,
            edited,
            attr,
            category,
        } => {
            if baseline.len() != edited.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} --baseline but {} --edited",
                    baseline.len(),
                    edited.len()
                )));
            }
            let pairs = edited
                .iter()
                .zip(baseline)
                .map(|(e, b)| {
                    Ok((
                        counts_report(parse_counts(e)?, attr.as_deref())?,
                        counts_report(parse_counts(b)?, attr.as_deref())?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            MetricRecord {
                metric: "xi".into(),
                value: ratio_deviation(&pairs, *category)?,
                n: pairs.len(),
                spec: Some(pairs[0].0.spec().clone()),
            }
        }
        MetricsCommand::Aps { images } => {
            let pairs = load_image_pairs(images)?;
            MetricRecord {
                metric: "aps".into(),
                value: average_pixel_shift(&pairs)?,
                n: pairs.len(),
                spec: None,
            }
        }
    };
    if out.json {
        out.json(&record)
    } else {
        out.line(record.value)
    }
}

fn find_prompt<'a>(sequences: &'a [EmbeddingSequence], prompt: &str) -> Result<&'a EmbeddingSequence> {
    sequences
        .iter()
        .find(|s| s.prompt() == prompt)
        .ok_or_else(|| Error::InvalidFixture(format!("no embedding for prompt `{prompt}`")))
}

fn delta(args: &DeltaArgs, out: &mut Output) -> Result<()> {
    let sequences = load_embedding_fixture(&args.embeddings)?;
    let selecting = args.plan.is_some() || args.profession.is_some() || !args.attr.is_empty();
    let deltas = if selecting {
        let mut plan = match &args.plan {
            Some(path) => PromptPlan::load(path)?,
            None => PromptPlan::default(),
        };
        if !args.attr.is_empty() {
            plan.attributes = args.attr.iter().map(|a| parse_attr(a)).collect::<Result<_>>()?;
        }
        let profession = match (&args.profession, plan.professions.as_slice()) {
            (Some(p), _) => p.clone(),
            (None, [only]) => only.clone(),
            _ => {
                return Err(Error::InvalidArgument(
                    "--profession is required when the plan lists several professions".into(),
                ))
            }
        };
        let (source, guidances) = expand_guidances(&plan, &profession)?;
        let source = find_prompt(&sequences, &source)?;
        let guidances = guidances
            .iter()
            .map(|g| find_prompt(&sequences, g).cloned())
            .collect::<Result<Vec<_>>>()?;
        build_delta_set(source, &guidances)?
    } else {
        let (source, guidances) = sequences
            .split_first()
            .ok_or_else(|| Error::Empty("embedding fixture has no prompts".into()))?;
        build_delta_set(source, guidances)?
    };
    deltas.save(&args.out)?;
    let norms: Vec<f32> = deltas.deltas().column_iter().map(|c| c.norm()).collect();
    if out.json {
        return out.json(&json!({
            "out": args.out,
            "source_prompt": deltas.source_prompt(),
            "labels": deltas.labels(),
            "d": deltas.d(),
            "norms": norms,
        }));
    }
    for (label, norm) in deltas.labels().iter().zip(&norms) {
        out.line(format_args!("{norm:>12.6}  {label}"))?;
    }
    out.line(format_args!(
        "wrote {} ({} deltas, d = {}) for `{}`",
        args.out.display(),
        deltas.len(),
        deltas.d(),
        deltas.source_prompt()
    ))
}

/// Executes a parsed invocation.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let mut out = Output {
        out: stdout,
        json: cli.json,
    };
    match &cli.command {
        Command::Inspect(a) => inspect(a, &mut out),
        Command::Debias(a) => debias(a, &mut out),
        Command::Calibrate(a) => calibrate_cmd(a, &mut out),
        Command::Metrics(m) => metrics(m, &mut out),
        Command::Delta(a) => delta(a, &mut out),
    }
}

/// Parses `args` (including the program name), runs, and returns the exit
/// code. Output goes to the given writers.
pub fn run_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                1
            } else {
                let _ = write!(stdout, "{text}");
                0
            };
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let _ = writeln!(stderr, "  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

/// [`run_with`] on the process's stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut io::stdout().lock(), &mut io::stderr().lock())
}
