use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::MetricReport;
use crate::dataset::{delete_records, inject_noise, Splits};
use crate::graphs::GraphSet;
use crate::model::{StudentMode, Variant};
use crate::trainer::{evaluate_split, train_bilevel, TrainConfig, TrainOutcome};
use crate::{Error, Result};

/// One trained-and-tested configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub experiment: String,
    pub variant: String,
    pub student_mode: String,
    pub hyper_nodes: usize,
    pub noise_ratio: f64,
    pub delete_fraction: f64,
    pub seed: u64,
    pub acc: f64,
    pub rmse: f64,
    pub auc: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub test: MetricReport,
    pub warnings: Vec<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutcome {
    pub rows: Vec<ExperimentRow>,
    /// Wall-clock seconds per row; kept out of the rows so reports stay
    /// reproducible.
    pub seconds: Vec<f64>,
    pub warnings: Vec<String>,
}

impl ExperimentOutcome {
    fn push(&mut self, experiment: &str, config: &TrainConfig, run: RunResult) {
        self.rows.push(ExperimentRow {
            experiment: experiment.to_string(),
            variant: config.variant.to_string(),
            student_mode: config.student_mode.to_string(),
            hyper_nodes: config.hyper_nodes,
            noise_ratio: config.noise_ratio,
            delete_fraction: config.delete_fraction,
            seed: config.seed,
            acc: run.test.acc,
            rmse: run.test.rmse,
            auc: run.test.auc,
            best_epoch: run.outcome.best_epoch,
            epochs_run: run.outcome.history.epochs.len(),
        });
        self.seconds.push(run.seconds);
        self.warnings.extend(run.warnings);
    }
}

/// Applies `delete_fraction` to train and `noise_ratio` to train and
/// validation, trains from scratch, and evaluates on the untouched test
/// split. The interaction graph comes from the perturbed train split.
pub fn run_once(splits: &Splits, config: &TrainConfig) -> Result<RunResult> {
    config.validate()?;
    let start = Instant::now();
    let mut warnings = Vec::new();
    let mut train = splits.train.clone();
    if config.delete_fraction > 0.0 {
        train = delete_records(&train, config.delete_fraction, config.seed.wrapping_add(17))?;
    }
    let mut val = splits.val.clone();
    if config.noise_ratio > 0.0 {
        let (t, w) = inject_noise(&train, config.noise_ratio, config.seed.wrapping_add(31))?;
        warnings.extend(w);
        let (v, w) = inject_noise(&val, config.noise_ratio, config.seed.wrapping_add(47))?;
        warnings.extend(w);
        train = t;
        val = v;
    }
    let outcome = train_bilevel(&train, &val, config)?;
    let graphs = GraphSet::build(&train)?;
    let (_, test) = evaluate_split(&outcome.model, &graphs, &splits.test)?;
    Ok(RunResult {
        outcome,
        test: test.labelled("test", super::config_digest(config)),
        warnings,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One run per noise ratio.
pub fn robustness_experiment(splits: &Splits, config: &TrainConfig, ratios: &[f64]) -> Result<ExperimentOutcome> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("noise ratio {r} is not in [0, 1]")));
    }
    let mut out = ExperimentOutcome::default();
    for &ratio in ratios {
        let c = TrainConfig {
            noise_ratio: ratio,
            ..config.clone()
        };
        out.push("robustness", &c, run_once(splits, &c)?);
    }
    Ok(out)
}

/// One run per fraction of deleted training records.
pub fn sparsity_experiment(splits: &Splits, config: &TrainConfig, fractions: &[f64]) -> Result<ExperimentOutcome> {
    let mut out = ExperimentOutcome::default();
    for &fraction in fractions {
        let c = TrainConfig {
            delete_fraction: fraction,
            ..config.clone()
        };
        out.push("sparsity", &c, run_once(splits, &c)?);
    }
    Ok(out)
}

/// One run per hyper-node count.
pub fn sensitivity_experiment(splits: &Splits, config: &TrainConfig, hyper_nodes: &[usize]) -> Result<ExperimentOutcome> {
    if let Some(p) = hyper_nodes.iter().find(|&&p| p < 2) {
        return Err(Error::Config(format!("P must be at least 2, got {p}")));
    }
    let mut out = ExperimentOutcome::default();
    for &p in hyper_nodes {
        let c = TrainConfig {
            hyper_nodes: p,
            ..config.clone()
        };
        out.push("sensitivity", &c, run_once(splits, &c)?);
    }
    Ok(out)
}

/// The five graph-assignment variants, then the full variant with the
/// naive, fixed-path and meta-graph student modules.
pub fn ablation_experiment(splits: &Splits, config: &TrainConfig) -> Result<ExperimentOutcome> {
    let mut settings: Vec<(Variant, StudentMode)> =
        Variant::ALL.iter().map(|&v| (v, StudentMode::MetaMultigraph)).collect();
    for mode in [StudentMode::Naive, StudentMode::FixedPaths, StudentMode::MetaGraph] {
        settings.push((Variant::Full, mode));
    }
    let mut out = ExperimentOutcome::default();
    for (variant, student_mode) in settings {
        let c = TrainConfig {
            variant,
            student_mode,
            ..config.clone()
        };
        out.push("ablation", &c, run_once(splits, &c)?);
    }
    Ok(out)
}

/// Writes `report_<experiment>_<digest>.csv` and `.json` into `dir`.
pub fn write_report(dir: &Path, experiment: &str, digest: &str, rows: &[ExperimentRow]) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = format!("report_{experiment}_{digest}");
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| Error::parse(&csv_path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::parse(&csv_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;

    let json_path = dir.join(format!("{stem}.json"));
    let body = serde_json::json!({ "experiment": experiment, "config_digest": digest, "rows": rows });
    let text = serde_json::to_string_pretty(&body).expect("rows serialize");
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}
