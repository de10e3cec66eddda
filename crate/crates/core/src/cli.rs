//! Argument parsing and the subcommand implementations behind `mactr`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error as ThisError;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    generate_synthetic, stream_time_ordered, write_tsv, DatasetSchema, Instance, Strictness,
    SyntheticConfig,
};
use crate::error::Error;
use crate::eval::{evaluate_model, EvalReport};
use crate::model::{predict, ModelKind};
use crate::train::{
    gradient_check, randomize_for_check, train_on_slice, train_run, BatchReport, ModelState,
    TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_ORDERING: i32 = 4;

/// Tolerance the `gradcheck` subcommand holds analytic gradients to.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
pub const GRADCHECK_EPSILON: f64 = 1e-6;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Run(#[from] Error),

    #[error("{0}")]
    Numeric(String),

    #[error("expected ordering did not hold: {0}")]
    Ordering(String),

    #[error("writing output: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(e) => match e {
                Error::Config(_) => EXIT_USAGE,
                Error::NonFinite { .. } | Error::Dimension { .. } => EXIT_NUMERIC,
                _ => EXIT_DATA,
            },
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Ordering(_) => EXIT_ORDERING,
            CliError::Output(_) => EXIT_DATA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Expectation {
    /// The first model's AUC must exceed the baseline's.
    Better,
    /// Report only.
    None,
}

#[derive(Debug, Parser)]
#[command(
    name = "mactr",
    version,
    about = "Sparse-feature CTR models with per-user memory"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Train one model on a time-ordered TSV file and write a checkpoint.
    Train(Flags),
    /// Score a test file with a checkpoint and print AUC and logloss.
    Eval(Flags),
    /// Print one click probability per test line.
    Predict(Flags),
    /// Write a synthetic train/test split and its schema into a directory.
    Synth(Flags),
    /// Compare analytic gradients with central differences on a toy model.
    Gradcheck(Flags),
    /// Train two models on one synthetic stream and compare them.
    Ab(Flags),
}

#[derive(Debug, Clone, Default, Args)]
struct Flags {
    /// lr, fm, dnn, wd, ma-dnn or ma-wd [default: ma-dnn].
    #[arg(long)]
    model: Option<ModelKind>,
    /// Training TSV, oldest line first.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test TSV.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Schema file listing the feature fields.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Checkpoint to write, or the output directory of `synth`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to read.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Embedding width per field [default: 10].
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Memory width; must equal the last hidden layer [default: last layer].
    #[arg(long)]
    memory_dim: Option<usize>,
    /// Weight of the memory loss [default: 1].
    #[arg(long)]
    alpha: Option<f64>,
    /// Training batch size [default: 128].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adagrad learning rate [default: 0.01].
    #[arg(long)]
    lr: Option<f64>,
    /// Passes over the training file [default: 1].
    #[arg(long)]
    epochs: Option<usize>,
    /// Hash buckets per field [default: from the schema].
    #[arg(long)]
    buckets: Option<u64>,
    /// Seed of parameter initialisation [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Let the prediction loss reach memory through the network input [default: on].
    #[arg(long, value_enum)]
    loss1_to_memory: Option<Switch>,
    /// Skip malformed data lines instead of failing.
    #[arg(long)]
    lenient: bool,

    /// Baseline model of `ab`.
    #[arg(long)]
    baseline: Option<ModelKind>,
    /// Ordering `ab` enforces [default: better].
    #[arg(long, value_enum)]
    expect: Option<Expectation>,
    /// Synthetic users [default: 500].
    #[arg(long)]
    users: Option<usize>,
    /// Ad clusters [default: 8].
    #[arg(long)]
    clusters: Option<usize>,
    /// Ads in each cluster [default: 5].
    #[arg(long)]
    ads_per_cluster: Option<usize>,
    /// Synthetic impressions, train and test together [default: 200000].
    #[arg(long)]
    impressions: Option<usize>,
    /// Preference sharpness [default: 0.35].
    #[arg(long)]
    sharpness: Option<f64>,
    /// Click rate of a non-preferred ad [default: 0.1].
    #[arg(long)]
    base_ctr: Option<f64>,
    /// Seed of the synthetic generator [default: 7].
    #[arg(long)]
    data_seed: Option<u64>,
    /// Random restarts of `gradcheck` [default: 10].
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Predict,
    Synth,
    Gradcheck,
    Ab,
}

/// A fully resolved invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub command: Command,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub config: TrainConfig,
    /// Whether `--buckets` was given; otherwise `train` takes the schema's.
    pub buckets_explicit: bool,
    pub strictness: Strictness,
    pub synth: SyntheticConfig,
    pub baseline: ModelKind,
    pub expect: Expectation,
    pub trials: usize,
    pub warnings: Vec<String>,
}

fn require(path: &Option<PathBuf>, flag: &str, command: &str) -> Result<(), CliError> {
    if path.is_none() {
        return Err(CliError::Usage(format!("{command} requires --{flag}")));
    }
    Ok(())
}

/// Defaults used by `gradcheck` for any dimension not given on the command line.
pub fn gradcheck_defaults() -> TrainConfig {
    TrainConfig {
        embedding_dim: 4,
        layer_dims: vec![6, 4, 3],
        memory_dim: 3,
        batch_size: 16,
        num_buckets: 1 << 10,
        ..TrainConfig::default()
    }
}

fn build_config(
    f: &Flags,
    base: TrainConfig,
    kinds: &[ModelKind],
    warnings: &mut Vec<String>,
) -> Result<TrainConfig, CliError> {
    let mut c = base;
    if let Some(k) = f.model {
        c.model_kind = k;
    }
    if let Some(v) = f.embedding_dim {
        c.embedding_dim = v;
    }
    if let Some(v) = &f.layers {
        c.layer_dims = v.clone();
    }
    if let Some(v) = f.alpha {
        c.alpha = v;
    }
    if let Some(v) = f.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = f.lr {
        c.learning_rate = v;
    }
    if let Some(v) = f.epochs {
        c.epochs = v;
    }
    if let Some(v) = f.buckets {
        c.num_buckets = v;
    }
    if let Some(v) = f.seed {
        c.seed = v;
    }
    if let Some(s) = f.loss1_to_memory {
        c.loss1_to_memory_input = s == Switch::On;
    }

    let last = c.layer_dims.last().copied().unwrap_or(0);
    let memory = kinds.iter().any(|k| k.has_memory());
    match f.memory_dim {
        Some(d) if memory && d != last => {
            return Err(CliError::Usage(format!(
                "--memory-dim {d} must equal the last layer width {last}"
            )));
        }
        Some(d) => c.memory_dim = d,
        None => {
            if memory && c.memory_dim != last {
                warnings.push(format!(
                    "memory dimension set to {last} to match the last layer"
                ));
            }
            c.memory_dim = last;
        }
    }
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

fn build_synth(f: &Flags, num_buckets: u64) -> Result<SyntheticConfig, CliError> {
    let d = SyntheticConfig::default();
    let s = SyntheticConfig {
        num_users: f.users.unwrap_or(d.num_users),
        num_ad_clusters: f.clusters.unwrap_or(d.num_ad_clusters),
        num_ads_per_cluster: f.ads_per_cluster.unwrap_or(d.num_ads_per_cluster),
        impressions: f.impressions.unwrap_or(d.impressions),
        preference_sharpness: f.sharpness.unwrap_or(d.preference_sharpness),
        base_ctr: f.base_ctr.unwrap_or(d.base_ctr),
        seed: f.data_seed.unwrap_or(d.seed),
        num_buckets,
    };
    s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(s)
}

/// Parses a full argument vector, program name first.
pub fn parse_args<I, T>(argv: I) -> Result<RunSpec, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    resolve(cli)
        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::ValueValidation, format!("{e}\n")))
}

fn resolve(cli: Cli) -> Result<RunSpec, CliError> {
    let (command, f) = match cli.command {
        Sub::Train(f) => (Command::Train, f),
        Sub::Eval(f) => (Command::Eval, f),
        Sub::Predict(f) => (Command::Predict, f),
        Sub::Synth(f) => (Command::Synth, f),
        Sub::Gradcheck(f) => (Command::Gradcheck, f),
        Sub::Ab(f) => (Command::Ab, f),
    };
    let mut warnings = Vec::new();
    let baseline = f.baseline.unwrap_or(ModelKind::Dnn);
    let (base, kinds) = match command {
        Command::Gradcheck => (
            gradcheck_defaults(),
            vec![f.model.unwrap_or(ModelKind::MaDnn)],
        ),
        Command::Ab => (
            TrainConfig::default(),
            vec![f.model.unwrap_or(ModelKind::MaDnn), baseline],
        ),
        _ => (
            TrainConfig::default(),
            vec![f.model.unwrap_or(ModelKind::MaDnn)],
        ),
    };
    let config = build_config(&f, base, &kinds, &mut warnings)?;
    let synth = build_synth(&f, config.num_buckets)?;

    match command {
        Command::Train => {
            require(&f.train, "train", "train")?;
            require(&f.schema, "schema", "train")?;
            require(&f.out, "out", "train")?;
        }
        Command::Eval | Command::Predict => {
            let name = if command == Command::Eval {
                "eval"
            } else {
                "predict"
            };
            require(&f.checkpoint, "checkpoint", name)?;
            require(&f.test, "test", name)?;
            require(&f.schema, "schema", name)?;
        }
        Command::Synth => require(&f.out, "out", "synth")?,
        Command::Gradcheck | Command::Ab => {}
    }
    let trials = f.trials.unwrap_or(10);
    if trials == 0 {
        return Err(CliError::Usage("--trials must be >= 1".into()));
    }

    Ok(RunSpec {
        command,
        train: f.train,
        test: f.test,
        schema: f.schema,
        out: f.out,
        checkpoint: f.checkpoint,
        config,
        buckets_explicit: f.buckets.is_some(),
        strictness: if f.lenient {
            Strictness::Lenient
        } else {
            Strictness::Strict
        },
        synth,
        baseline,
        expect: f.expect.unwrap_or(Expectation::Better),
        trials,
        warnings,
    })
}

fn path(p: &Option<PathBuf>) -> &Path {
    p.as_deref().expect("checked by resolve")
}

fn run_train(spec: &RunSpec, out: &mut dyn Write) -> Result<(), CliError> {
    let schema = DatasetSchema::load(path(&spec.schema))?;
    let mut config = spec.config.clone();
    if !spec.buckets_explicit {
        config.num_buckets = schema.num_buckets();
    }
    let train = path(&spec.train);
    let (state, reports) = train_run(&config, &schema, || {
        stream_time_ordered(train, &schema, spec.strictness)
    })?;
    writeln!(out, "{}", BatchReport::CSV_HEADER)?;
    for r in &reports {
        writeln!(out, "{}", r.to_csv_line())?;
    }
    save_checkpoint(&state, path(&spec.out))?;
    Ok(())
}

fn load_for_scoring(spec: &RunSpec) -> Result<(ModelState, DatasetSchema), CliError> {
    let schema = DatasetSchema::load(path(&spec.schema))?;
    let state = load_checkpoint(path(&spec.checkpoint))?;
    if state.schema_digest != schema.digest() {
        return Err(Error::Schema(format!(
            "checkpoint was trained on schema {:#018x}, given schema is {:#018x}",
            state.schema_digest,
            schema.digest()
        ))
        .into());
    }
    Ok((state, schema))
}

fn run_eval(spec: &RunSpec, out: &mut dyn Write) -> Result<(), CliError> {
    let (state, schema) = load_for_scoring(spec)?;
    let test = stream_time_ordered(path(&spec.test), &schema, spec.strictness)?;
    let report = evaluate_model(&state.params, &state.memory, test)?;
    writeln!(out, "{}", EvalReport::CSV_HEADER)?;
    writeln!(out, "{}", report.to_csv_line())?;
    Ok(())
}

fn run_predict(spec: &RunSpec, out: &mut dyn Write) -> Result<(), CliError> {
    let (state, schema) = load_for_scoring(spec)?;
    for inst in stream_time_ordered(path(&spec.test), &schema, spec.strictness)? {
        let (y_hat, _) = predict(&state.params, &inst?, &state.memory)?;
        writeln!(out, "{y_hat}")?;
    }
    Ok(())
}

fn run_synth(spec: &RunSpec, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let dir = path(&spec.out);
    fs::create_dir_all(dir).map_err(|source| Error::Io { offset: 0, source })?;
    let data = generate_synthetic(&spec.synth)?;
    for w in &data.warnings {
        writeln!(err, "warning: {w}")?;
    }
    write_tsv(&dir.join("train.tsv"), &data.train_records())?;
    write_tsv(&dir.join("test.tsv"), &data.test_records())?;
    fs::write(dir.join("schema.txt"), data.schema.to_text())
        .map_err(|source| Error::Io { offset: 0, source })?;
    writeln!(out, "split,impressions")?;
    writeln!(out, "train,{}", data.train_len())?;
    writeln!(out, "test,{}", data.test_len)?;
    Ok(())
}

/// Small stream used by `gradcheck`: few users so the batch repeats some.
fn gradcheck_batch(
    config: &TrainConfig,
    seed: u64,
) -> Result<(DatasetSchema, Vec<Instance>), Error> {
    let data = generate_synthetic(&SyntheticConfig {
        num_users: 3,
        num_ad_clusters: 3,
        num_ads_per_cluster: 2,
        impressions: config.batch_size + 1,
        num_buckets: config.num_buckets,
        seed,
        ..SyntheticConfig::default()
    })?;
    let batch = data.impressions[..config.batch_size]
        .iter()
        .map(|i| i.record.to_instance(&data.schema))
        .collect();
    Ok((data.schema, batch))
}

/// Largest relative gradient error over `trials` randomized restarts.
pub fn run_gradcheck(config: &TrainConfig, trials: usize) -> Result<(f64, String), Error> {
    let mut worst = (0.0, String::new());
    for t in 0..trials as u64 {
        let seed = config.seed.wrapping_add(t);
        let (schema, batch) = gradcheck_batch(config, seed)?;
        let mut state = ModelState::init(
            &TrainConfig {
                seed,
                ..config.clone()
            },
            &schema,
        )?;
        randomize_for_check(&mut state, &batch, seed);
        let report = gradient_check(&state, &batch, GRADCHECK_EPSILON)?;
        if report.max_rel_error >= worst.0 {
            worst = (
                report.max_rel_error,
                format!("seed {seed}: {}", report.worst),
            );
        }
    }
    Ok(worst)
}

fn run_gradcheck_cmd(spec: &RunSpec, out: &mut dyn Write) -> Result<(), CliError> {
    let (err, detail) = run_gradcheck(&spec.config, spec.trials)?;
    writeln!(out, "model,trials,max_rel_error")?;
    writeln!(out, "{},{},{:e}", spec.config.model_kind, spec.trials, err)?;
    if err.is_nan() || err >= GRADCHECK_TOLERANCE {
        return Err(CliError::Numeric(format!(
            "relative gradient error {err:e} exceeds {GRADCHECK_TOLERANCE:e} ({detail})"
        )));
    }
    Ok(())
}

/// Two models trained and evaluated on the same synthetic stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AbReport {
    pub first: EvalReport,
    pub baseline: EvalReport,
    pub warnings: Vec<String>,
}

impl AbReport {
    pub fn auc_delta(&self) -> f64 {
        self.first.auc - self.baseline.auc
    }

    pub fn write_table(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "{}", EvalReport::CSV_HEADER)?;
        writeln!(out, "{}", self.first.to_csv_line())?;
        writeln!(out, "{}", self.baseline.to_csv_line())?;
        writeln!(out, "auc_delta,{:+.6}", self.auc_delta())
    }
}

/// Generates one stream, trains `first` and `baseline` with the same
/// config and seed on its training part, and evaluates both on the tail.
pub fn run_ab_experiment(
    synth: &SyntheticConfig,
    first: ModelKind,
    baseline: ModelKind,
    config: &TrainConfig,
) -> Result<AbReport, Error> {
    let data = generate_synthetic(&SyntheticConfig {
        num_buckets: config.num_buckets,
        ..synth.clone()
    })?;
    let train = data.train_instances();
    let test = data.test_instances();
    let mut rows = Vec::with_capacity(2);
    for kind in [first, baseline] {
        let cfg = TrainConfig {
            model_kind: kind,
            ..config.clone()
        };
        let (state, _) = train_on_slice(&cfg, &data.schema, &train)?;
        rows.push(evaluate_model(
            &state.params,
            &state.memory,
            test.iter().cloned().map(Ok),
        )?);
    }
    let baseline = rows.pop().expect("two rows");
    let first = rows.pop().expect("two rows");
    Ok(AbReport {
        first,
        baseline,
        warnings: data.warnings,
    })
}

fn run_ab(spec: &RunSpec, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let report = run_ab_experiment(
        &spec.synth,
        spec.config.model_kind,
        spec.baseline,
        &spec.config,
    )?;
    for w in &report.warnings {
        writeln!(err, "warning: {w}")?;
    }
    report.write_table(out)?;
    let improved = report.auc_delta() > 0.0;
    if spec.expect == Expectation::Better && !improved {
        return Err(CliError::Ordering(format!(
            "{} AUC {:.6} is not above {} AUC {:.6}",
            report.first.model, report.first.auc, report.baseline.model, report.baseline.auc
        )));
    }
    Ok(())
}

pub fn run(spec: &RunSpec, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    for w in &spec.warnings {
        writeln!(err, "warning: {w}")?;
    }
    match spec.command {
        Command::Train => run_train(spec, out),
        Command::Eval => run_eval(spec, out),
        Command::Predict => run_predict(spec, out),
        Command::Synth => run_synth(spec, out, err),
        Command::Gradcheck => run_gradcheck_cmd(spec, out),
        Command::Ab => run_ab(spec, out, err),
    }
}

/// Parses `argv`, runs it and returns the process exit code.
pub fn main_with_args<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let spec = match parse_args(argv) {
        Ok(spec) => spec,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match run(&spec, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
