//! First-order bilevel training with early stopping, and checkpoints.
//!
//! Every step draws a training batch and updates the network weights ω with
//! the path weights α frozen, then draws a validation batch and updates α
//! with ω frozen.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diagnosis::bce_loss;
use crate::evaluation::{metrics, MetricReport};
use crate::graphs::GraphSet;
use crate::model::{DisenGcd, Dims, ModelConfig, StudentMode, Trainable, Variant, ALPHA};
use crate::numeric::{AdamState, NumericError, DEFAULT_LEARNING_RATE};
use crate::student_meta::{FixedEdge, DEFAULT_HYPER_NODES, DEFAULT_LAMBDA};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, FORMAT_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation AUC before stopping.
    pub patience: usize,
    pub seed: u64,
    pub hyper_nodes: usize,
    pub layers: usize,
    pub lambda: f64,
    pub variant: Variant,
    pub student_mode: StudentMode,
    pub fixed_paths: Option<Vec<FixedEdge>>,
    pub noise_ratio: f64,
    pub delete_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LEARNING_RATE,
            batch_size: 256,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            hyper_nodes: DEFAULT_HYPER_NODES,
            layers: crate::gat::DEFAULT_LAYERS,
            lambda: DEFAULT_LAMBDA,
            variant: Variant::Full,
            student_mode: StudentMode::MetaMultigraph,
            fixed_paths: None,
            noise_ratio: 0.0,
            delete_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hyper_nodes: self.hyper_nodes,
            layers: self.layers,
            lambda: self.lambda,
            variant: self.variant,
            student_mode: self.student_mode,
            fixed_paths: self.fixed_paths.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return Err(Error::Config(format!("noise ratio {} is not in [0, 1]", self.noise_ratio)));
        }
        if !(0.0..1.0).contains(&self.delete_fraction) {
            return Err(Error::Config(format!(
                "delete fraction {} is not in [0, 1)",
                self.delete_fraction
            )));
        }
        self.model_config().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_rmse: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc,val_rmse,val_auc\n");
        for r in &self.epochs {
            let auc = r.val_auc.map(|a| a.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.val_acc, r.val_rmse, auc
            )
            .expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation AUC.
    pub model: DisenGcd,
    pub history: History,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub checkpoint: Checkpoint,
}

fn triples(ds: &Dataset, order: &[usize]) -> Vec<(usize, usize, f64)> {
    order
        .iter()
        .map(|&t| {
            let l = ds.logs()[t];
            (l.student, l.exercise, f64::from(l.response))
        })
        .collect()
}

struct Bilevel<'a> {
    graphs: &'a GraphSet,
    train: &'a Dataset,
    model: DisenGcd,
    weight_opt: AdamState,
    alpha_opt: AdamState,
}

impl Bilevel<'_> {
    /// One gradient step on the chosen group. Returns the batch loss.
    fn step(&mut self, batch: &[(usize, usize, f64)], group: Trainable) -> std::result::Result<f64, NumericError> {
        let (g, _) = self
            .model
            .build_loss(self.graphs, self.train.q_matrix(), batch, group)
            .map_err(|e| NumericError::Contract(e.to_string()))?;
        let bindings = self.model.bindings();
        let values = g.evaluate(&bindings)?;
        let loss = values.get(g.loss().expect("loss set")).get(0, 0);
        if !loss.is_finite() {
            return Err(NumericError::NonFinite("loss".into()));
        }
        let grads = g.gradients(&values)?;
        drop(values);
        match group {
            Trainable::Weights => self.weight_opt.update(self.model.weights_mut(), &grads)?,
            Trainable::Alpha => {
                let mut alpha = BTreeMap::from([(ALPHA.to_string(), self.model.alpha().clone())]);
                self.alpha_opt.update(&mut alpha, &grads)?;
                let a = alpha.remove(ALPHA).expect("alpha");
                if !a.is_finite() {
                    return Err(NumericError::NonFinite("alpha".into()));
                }
                self.model.set_alpha(a).map_err(|e| NumericError::Contract(e.to_string()))?;
            }
            Trainable::Nothing => {}
        }
        Ok(loss)
    }
}

/// Validation predictions, loss and metrics.
pub fn evaluate_split(model: &DisenGcd, graphs: &GraphSet, split: &Dataset) -> Result<(f64, MetricReport)> {
    let preds = model.predict(graphs, split)?;
    let labels = split.labels();
    Ok((bce_loss(&preds, &labels), metrics(&preds, &labels)?))
}

/// Trains from a fresh initialization seeded by `config.seed`. The
/// interaction graph is built from `train`.
pub fn train_bilevel(train: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.logs().is_empty() || val.logs().is_empty() {
        return Err(Error::Validation("training and validation splits must be non-empty".into()));
    }
    let graphs = GraphSet::build(train)?;
    let model = DisenGcd::new(config.model_config(), Dims::of(train), config.seed)?;
    let mut state = Bilevel {
        graphs: &graphs,
        train,
        model,
        weight_opt: AdamState::new(config.lr),
        alpha_opt: AdamState::new(config.lr),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9));
    let mut history = History::default();
    let mut best = Checkpoint::new(state.model.clone(), 0);
    let mut best_auc = f64::NEG_INFINITY;
    let mut since_best = 0;
    let train_alpha = state.model.uses_alpha();

    let mut val_order: Vec<usize> = (0..val.logs().len()).collect();
    let mut val_cursor = val_order.len();
    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train.logs().len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let before = state.model.clone();
            let diverged = |reason: String| Error::Diverged {
                epoch,
                reason,
                last_finite: Box::new(before.clone()),
            };
            let batch = triples(train, chunk);
            let loss = state
                .step(&batch, Trainable::Weights)
                .map_err(|e| diverged(format!("training step: {e}")))?;
            loss_sum += loss * chunk.len() as f64;

            if train_alpha {
                let mut picks = Vec::with_capacity(config.batch_size);
                while picks.len() < config.batch_size.min(val_order.len()) {
                    if val_cursor == val_order.len() {
                        val_order.shuffle(&mut rng);
                        val_cursor = 0;
                    }
                    picks.push(val_order[val_cursor]);
                    val_cursor += 1;
                }
                state
                    .step(&triples(val, &picks), Trainable::Alpha)
                    .map_err(|e| diverged(format!("path-weight step: {e}")))?;
            }
        }

        let (val_loss, report) = evaluate_split(&state.model, &graphs, val)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.logs().len() as f64,
            val_loss,
            val_acc: report.acc,
            val_rmse: report.rmse,
            val_auc: report.auc,
        });
        let score = report.auc.unwrap_or(report.acc);
        if score > best_auc {
            best_auc = score;
            since_best = 0;
            best = Checkpoint {
                model: state.model.clone(),
                weight_optimizer: state.weight_opt.clone(),
                alpha_optimizer: state.alpha_opt.clone(),
                epoch,
                rng: Some(RngState::capture(&rng)),
            };
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best.model.clone(),
        history,
        best_epoch: best.epoch,
        checkpoint: best,
    })
}
