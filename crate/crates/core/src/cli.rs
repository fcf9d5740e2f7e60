//! Command-line interface.
//!
//! Every subcommand reads an optional TOML file (`--config`) and then applies
//! flags on top. Exit codes: 0 success, 2 usage or configuration, 3 data
//! validation, 4 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, load_dataset, split, write_dataset, Dataset, LoadOptions, SplitSpec, Splits, SyntheticSpec};
use crate::evaluation::{
    ablation_experiment, config_digest, robustness_experiment, sensitivity_experiment, sparsity_experiment,
    write_report, ExperimentOutcome,
};
use crate::graphs::GraphSet;
use crate::model::{DisenGcd, StudentMode, Variant};
use crate::trainer::{evaluate_split, load_checkpoint, save_checkpoint, train_bilevel, TrainConfig};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const THREADS_ENV: &str = "DISENGCD_THREADS";

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const METAGRAPH_JSON: &str = "metagraph.json";
pub const METAGRAPH_DOT: &str = "metagraph.dot";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const RUN_LOG: &str = "run_log.json";

#[derive(Debug, Parser)]
#[command(name = "disengcd", version, about = "Disentangled graph cognitive diagnosis", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, history and structure.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Split fractions `train,val,test`.
        #[arg(long, value_delimiter = ',')]
        split: Option<Vec<f64>>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split to score.
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Split fractions `train,val,test`.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Per-concept mastery for students.
    Diagnose {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        /// Report every student.
        #[arg(long, conflicts_with = "students")]
        all: bool,
        /// External student ids.
        students: Vec<String>,
    },
    /// Run an experiment harness and write its report.
    Experiment {
        #[command(subcommand)]
        kind: ExperimentKind,
    },
    /// Write a synthetic dataset with its ground truth.
    Synth(SynthArgs),
    /// Write the learned structure of a checkpoint as JSON and DOT.
    ExportMetagraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExperimentKind {
    Robustness {
        #[command(flatten)]
        common: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
        ratios: Vec<f64>,
    },
    Sparsity {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Fractions of training records deleted.
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
        deletions: Vec<f64>,
    },
    Sensitivity {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Hyper-node counts.
        #[arg(long = "P", id = "sweep", value_delimiter = ',', default_value = "4,5,6,7")]
        hyper_nodes: Vec<usize>,
    },
    Ablation {
        #[command(flatten)]
        common: ExperimentArgs,
    },
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Default, Args)]
pub struct DataArgs {
    /// TOML run configuration; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub logs: Option<PathBuf>,
    #[arg(long)]
    pub q: Option<PathBuf>,
    /// Concept dependency CSV.
    #[arg(long)]
    pub dependency: Option<PathBuf>,
    /// Keep the first of repeated logs instead of failing.
    #[arg(long)]
    pub dedupe: bool,
    /// Drop students with fewer logs.
    #[arg(long)]
    pub min_logs: Option<usize>,
    /// Seed for the split and the model.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub hyper_nodes: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub student_mode: Option<StudentMode>,
    #[arg(long)]
    pub noise_ratio: Option<f64>,
    #[arg(long)]
    pub delete_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub students: usize,
    #[arg(long, default_value_t = 100)]
    pub exercises: usize,
    #[arg(long, default_value_t = 10)]
    pub concepts: usize,
    #[arg(long, default_value_t = 50)]
    pub logs_per_student: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// File form of a run. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub logs: Option<PathBuf>,
    pub q: Option<PathBuf>,
    pub dependency: Option<PathBuf>,
    pub dedupe: bool,
    pub min_logs: usize,
    pub split: Option<[f64; 3]>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn apply_data(&mut self, args: &DataArgs) {
        if let Some(p) = &args.logs {
            self.logs = Some(p.clone());
        }
        if let Some(p) = &args.q {
            self.q = Some(p.clone());
        }
        if let Some(p) = &args.dependency {
            self.dependency = Some(p.clone());
        }
        self.dedupe |= args.dedupe;
        if let Some(n) = args.min_logs {
            self.min_logs = n;
        }
        if let Some(s) = args.seed {
            self.seed = Some(s);
        }
        if let Some(o) = &args.out {
            self.out = Some(o.clone());
        }
    }

    fn apply_split(&mut self, fractions: &Option<Vec<f64>>) -> Result<()> {
        match fractions.as_deref() {
            None => {}
            Some(&[train, val, test]) => self.split = Some([train, val, test]),
            Some(f) => return Err(Error::Config(format!("split needs three fractions, got {}", f.len()))),
        }
        Ok(())
    }

    fn apply_train(&mut self, args: &TrainArgs) {
        let t = &mut self.train;
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = args.$flag.clone() { t.$field = v; })*
            };
        }
        set!(lr => lr, batch_size => batch_size, epochs => max_epochs, patience => patience,
             hyper_nodes => hyper_nodes, layers => layers, lambda => lambda, variant => variant,
             student_mode => student_mode, noise_ratio => noise_ratio, delete_fraction => delete_fraction);
    }

    /// Combines a file (if given) with flags and validates the result.
    pub fn resolve(data: &DataArgs, fractions: &Option<Vec<f64>>, train: Option<&TrainArgs>) -> Result<Self> {
        let mut config = match &data.config {
            Some(path) => Self::from_file(path)?,
            None => Self::default(),
        };
        config.apply_data(data);
        config.apply_split(fractions)?;
        if let Some(t) = train {
            config.apply_train(t);
        }
        if let Some(seed) = config.seed {
            config.train.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.split_spec()?;
        self.train.validate()
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let [train, val, test] = self.split.unwrap_or([0.6, 0.1, 0.3]);
        SplitSpec::new(train, val, test, self.seed.unwrap_or(0))
    }

    fn required<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("--{flag} is required (flag or config key `{flag}`)")))
    }

    pub fn load(&self) -> Result<Dataset> {
        let options = LoadOptions {
            dedupe: self.dedupe,
            min_logs_per_student: self.min_logs,
        };
        load_dataset(
            self.required(&self.logs, "logs")?,
            self.required(&self.q, "q")?,
            self.dependency.as_deref(),
            &options,
        )
    }

    pub fn splits(&self) -> Result<(Dataset, Splits)> {
        let dataset = self.load()?;
        let splits = split(&dataset, &self.split_spec()?)?;
        Ok((dataset, splits))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.required(&self.out, "out")
    }

    /// Digest of everything except the output location.
    pub fn digest(&self) -> String {
        config_digest(&Self {
            out: None,
            ..self.clone()
        })
    }
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) | Error::Io { .. } | Error::Version { .. } | Error::FieldShape { .. } => EXIT_CONFIG,
        Error::Validation(_) | Error::Parse { .. } => EXIT_VALIDATION,
        Error::Numeric(_) | Error::Diverged { .. } => EXIT_NUMERIC,
    }
}

fn error_kind(error: &Error) -> &'static str {
    match error {
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
        Error::Version { .. } => "version",
        Error::FieldShape { .. } => "shape",
        Error::Validation(_) => "validation",
        Error::Parse { .. } => "parse",
        Error::Numeric(_) => "numeric",
        Error::Diverged { .. } => "diverged",
    }
}

/// Reads `DISENGCD_THREADS`. Work is single-threaded; the value is
/// validated and logged.
pub fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Timestamps and timings live here only, so the other outputs stay
/// reproducible.
#[derive(Serialize)]
struct RunLog<'a> {
    command: &'a str,
    config_digest: &'a str,
    started_unix: f64,
    seconds: f64,
    threads: usize,
    warnings: &'a [String],
}

struct Session {
    command: &'static str,
    started: f64,
    clock: Instant,
    threads: usize,
}

impl Session {
    fn start(command: &'static str) -> Result<Self> {
        Ok(Self {
            command,
            started: unix_now(),
            clock: Instant::now(),
            threads: thread_cap()?,
        })
    }

    fn finish(&self, dir: &Path, digest: &str, warnings: &[String]) -> Result<()> {
        for w in warnings {
            eprintln!("warning: {w}");
        }
        write_json(
            &dir.join(RUN_LOG),
            &RunLog {
                command: self.command,
                config_digest: digest,
                started_unix: self.started,
                seconds: self.clock.elapsed().as_secs_f64(),
                threads: self.threads,
                warnings,
            },
        )
    }
}

fn load_model(path: &Path) -> Result<DisenGcd> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_checkpoint(path)?.model)
}

fn write_structure(model: &DisenGcd, dir: &Path) -> Result<Option<PathBuf>> {
    let Some(export) = model.structure() else {
        return Ok(None);
    };
    write_text(&dir.join(METAGRAPH_JSON), &export.to_json())?;
    write_text(&dir.join(METAGRAPH_DOT), &export.to_dot())?;
    Ok(Some(dir.join(METAGRAPH_JSON)))
}

#[derive(Serialize)]
struct TrainSummary {
    config_digest: String,
    best_epoch: usize,
    epochs_run: usize,
    variant: String,
    student_mode: String,
    n_students: usize,
    n_exercises: usize,
    n_concepts: usize,
    val: crate::evaluation::MetricReport,
}

fn cmd_train(config: RunConfig) -> Result<()> {
    let session = Session::start("train")?;
    let out = config.out_dir()?.to_path_buf();
    let (dataset, splits) = config.splits()?;
    let digest = config.digest();
    let mut warnings = splits.warnings.clone();

    let outcome = train_bilevel(&splits.train, &splits.val, &config.train)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    save_checkpoint(&outcome.checkpoint, &out.join(CHECKPOINT_FILE))?;
    outcome.history.write_csv(&out.join(HISTORY_FILE))?;
    if write_structure(&outcome.model, &out)?.is_none() {
        warnings.push(format!("student mode {} has no structure to export", config.train.student_mode));
    }
    let resolved = toml::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&out.join(RESOLVED_CONFIG), &resolved)?;

    let graphs = GraphSet::build(&splits.train)?;
    let (_, val) = evaluate_split(&outcome.model, &graphs, &splits.val)?;
    let summary = TrainSummary {
        config_digest: digest.clone(),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.epochs.len(),
        variant: config.train.variant.to_string(),
        student_mode: config.train.student_mode.to_string(),
        n_students: dataset.n_students(),
        n_exercises: dataset.n_exercises(),
        n_concepts: dataset.n_concepts(),
        val: val.labelled("val", &digest),
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
    session.finish(&out, &digest, &warnings)
}

fn cmd_eval(config: RunConfig, checkpoint: &Path, which: &str) -> Result<()> {
    let session = Session::start("eval")?;
    let model = load_model(checkpoint)?;
    let (dataset, splits) = config.splits()?;
    model.check_dataset(&dataset)?;
    let target = match which {
        "train" => &splits.train,
        "val" => &splits.val,
        _ => &splits.test,
    };
    let graphs = GraphSet::build(&splits.train)?;
    let digest = config_digest(&(config.digest(), model.config()));
    let (_, report) = evaluate_split(&model, &graphs, target)?;
    let report = report.labelled(which, &digest);
    let text = serde_json::to_string_pretty(&report).expect("serializable");
    println!("{text}");
    if let Some(out) = &config.out {
        write_text(&out.join(format!("metrics_{which}.json")), &(text + "\n"))?;
        session.finish(out, &digest, &splits.warnings)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnosisOutput {
    config_digest: String,
    concepts: Vec<String>,
    reports: Vec<crate::diagnosis::MasteryReport>,
    unknown: Vec<String>,
}

fn cmd_diagnose(config: RunConfig, checkpoint: &Path, all: bool, students: &[String]) -> Result<()> {
    let session = Session::start("diagnose")?;
    let model = load_model(checkpoint)?;
    let (dataset, splits) = config.splits()?;
    model.check_dataset(&dataset)?;
    if !all && students.is_empty() {
        return Err(Error::Config("name at least one student id or pass --all".into()));
    }
    let ids = dataset.ids();
    let (indices, unknown) = if all {
        ((0..dataset.n_students()).collect(), Vec::new())
    } else {
        let index = ids.student_index();
        let mut found = Vec::new();
        let mut unknown = Vec::new();
        for s in students {
            match index.get(s.as_str()) {
                Some(&i) => found.push(i),
                None => unknown.push(s.clone()),
            }
        }
        (found, unknown)
    };
    let graphs = GraphSet::build(&splits.train)?;
    let digest = config_digest(&(config.digest(), model.config()));
    let output = DiagnosisOutput {
        config_digest: digest.clone(),
        concepts: ids.concepts.clone(),
        reports: model.diagnose(&graphs, &dataset, &indices)?,
        unknown,
    };
    let text = serde_json::to_string_pretty(&output).expect("serializable");
    println!("{text}");
    if let Some(out) = &config.out {
        write_text(&out.join("diagnosis.json"), &(text + "\n"))?;
        session.finish(out, &digest, &[])?;
    }
    Ok(())
}

fn cmd_experiment(kind: &ExperimentKind) -> Result<()> {
    let session = Session::start("experiment")?;
    let (common, name) = match kind {
        ExperimentKind::Robustness { common, .. } => (common, "robustness"),
        ExperimentKind::Sparsity { common, .. } => (common, "sparsity"),
        ExperimentKind::Sensitivity { common, .. } => (common, "sensitivity"),
        ExperimentKind::Ablation { common } => (common, "ablation"),
    };
    let config = RunConfig::resolve(&common.data, &common.split, Some(&common.train))?;
    let out = config.out_dir()?.to_path_buf();
    let (_, splits) = config.splits()?;
    let t = &config.train;
    let outcome: ExperimentOutcome = match kind {
        ExperimentKind::Robustness { ratios, .. } => robustness_experiment(&splits, t, ratios)?,
        ExperimentKind::Sparsity { deletions, .. } => sparsity_experiment(&splits, t, deletions)?,
        ExperimentKind::Sensitivity { hyper_nodes, .. } => sensitivity_experiment(&splits, t, hyper_nodes)?,
        ExperimentKind::Ablation { .. } => ablation_experiment(&splits, t)?,
    };
    let digest = config_digest(&(config.digest(), kind_key(kind)));
    let (csv, json) = write_report(&out, name, &digest, &outcome.rows)?;
    println!("{}", csv.display());
    println!("{}", json.display());
    let mut warnings = splits.warnings.clone();
    warnings.extend(outcome.warnings);
    session.finish(&out, &digest, &warnings)
}

fn kind_key(kind: &ExperimentKind) -> String {
    match kind {
        ExperimentKind::Robustness { ratios, .. } => format!("robustness:{ratios:?}"),
        ExperimentKind::Sparsity { deletions, .. } => format!("sparsity:{deletions:?}"),
        ExperimentKind::Sensitivity { hyper_nodes, .. } => format!("sensitivity:{hyper_nodes:?}"),
        ExperimentKind::Ablation { .. } => "ablation".into(),
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let session = Session::start("synth")?;
    let spec = SyntheticSpec {
        n_students: args.students,
        n_exercises: args.exercises,
        n_concepts: args.concepts,
        logs_per_student: args.logs_per_student,
        seed: args.seed,
    };
    let (dataset, truth) = generate_synthetic(&spec)?;
    write_dataset(&dataset, &args.out)?;
    let digest = config_digest(&spec);
    write_json(
        &args.out.join("truth.json"),
        &serde_json::json!({ "config_digest": digest, "spec": spec, "truth": truth }),
    )?;
    println!("{} logs written to {}", dataset.logs().len(), args.out.display());
    session.finish(&args.out, &digest, &[])
}

fn cmd_export(checkpoint: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    match write_structure(&model, out)? {
        Some(path) => {
            println!("{}", path.display());
            Ok(())
        }
        None => Err(Error::Config(format!(
            "student mode {} has no meta-multigraph to export",
            model.config().student_mode
        ))),
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { data, split, train } => cmd_train(RunConfig::resolve(&data, &split, Some(&train))?),
        Command::Eval {
            data,
            checkpoint,
            split,
            fractions,
        } => cmd_eval(RunConfig::resolve(&data, &fractions, None)?, &checkpoint, &split),
        Command::Diagnose {
            data,
            checkpoint,
            fractions,
            all,
            students,
        } => cmd_diagnose(RunConfig::resolve(&data, &fractions, None)?, &checkpoint, all, &students),
        Command::Experiment { kind } => cmd_experiment(&kind),
        Command::Synth(args) => cmd_synth(&args),
        Command::ExportMetagraph { checkpoint, out } => cmd_export(&checkpoint, &out),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
/// Failures are reported on stderr as one JSON object.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            let body = serde_json::json!({ "error": error_kind(&e), "message": e.to_string(), "exit_code": code });
            eprintln!("{body}");
            code
        }
    }
}
