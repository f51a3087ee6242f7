//! Mini-batch training with early stopping, prediction and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{GraphBatch, Model, ModelKind, BCE_EPS};
use crate::error::{Error, Result};
use crate::graph::OmissionGraph;
use crate::metrics::{evaluate_predictions, MetricsReport, PredictionRecord};
use crate::nn::{AdamW, AdamWConfig};
use crate::tape::{ParamSet, Tape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseTraining {
    /// The base probe is optimized together with everything else.
    #[default]
    Joint,
    /// The probe is fitted alone first, then frozen while the rest trains.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub base_training: BaseTraining,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 2e-5,
            weight_decay: 0.01,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            base_training: BaseTraining::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub stopped_early: bool,
}

/// Trains `model` in place and leaves it holding the parameters of the
/// best validation epoch.
pub fn train(model: &mut Model, train: &[OmissionGraph], val: &[OmissionGraph], cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation splits"));
    }
    let enc = model.config.encoder_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_batches = |rng: &mut ChaCha8Rng| -> Result<Vec<GraphBatch>> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng);
        order
            .chunks(cfg.batch_size)
            .map(|c| GraphBatch::new(&c.iter().map(|&i| &train[i]).collect::<Vec<_>>(), enc))
            .collect()
    };
    let adam_cfg = AdamWConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };

    let base_only = cfg.base_training == BaseTraining::Frozen && model.config.kind == ModelKind::OmiGraph;
    if base_only {
        fit_base_probe(model, train, val, cfg)?;
        model.set_base_trainable(false);
    }

    let initial_loss = mean_loss(model, &train_batches(&mut rng.clone())?)?;
    let mut opt = AdamW::new(&model.params, adam_cfg);
    let mut best: (f64, usize, ParamSet) = (f64::NEG_INFINITY, 0, model.params.clone());
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let batches = train_batches(&mut rng)?;
        let mut total = 0.0;
        for b in &batches {
            let targets = b.targets()?;
            let grads = {
                let mut t = Tape::new(&model.params);
                let f = model.forward(&mut t, b)?;
                let loss = t.bce_mean(f.y_hat, targets, BCE_EPS);
                let l = t.value(loss)[[0, 0]];
                if !l.is_finite() {
                    return Err(Error::Diverged { epoch, loss: l });
                }
                total += l * b.ids.len() as f64;
                t.backward(loss)
            };
            if !grads.all_finite() {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
            opt.step(&mut model.params, &grads);
        }
        let train_loss = total / train.len() as f64;
        let val_f1 = evaluate(model, val)?.macro_f1;
        log::debug!("epoch {epoch}: loss {train_loss:.6}, val macF1 {val_f1:.4}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_macro_f1: val_f1,
        });
        if val_f1 > best.0 {
            best = (val_f1, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.params = best.2;
    if base_only {
        model.set_base_trainable(true);
    }
    Ok(TrainHistory {
        initial_loss,
        epochs,
        best_epoch: best.1,
        best_val_macro_f1: best.0,
        stopped_early,
    })
}

/// Fits only the base probe, with the same stopping rule.
fn fit_base_probe(model: &mut Model, train: &[OmissionGraph], val: &[OmissionGraph], cfg: &TrainConfig) -> Result<()> {
    let mut probe = Model::new(crate::detector::ModelConfig {
        kind: ModelKind::TargetOnly,
        ..model.config.clone()
    })?;
    self::train(&mut probe, train, val, &TrainConfig {
        base_training: BaseTraining::Joint,
        ..cfg.clone()
    })?;
    for (dst, src) in model.probe.params().into_iter().zip(probe.probe.params()) {
        *model.params.get_mut(dst) = probe.params.get(src).clone();
    }
    Ok(())
}

fn mean_loss(model: &Model, batches: &[GraphBatch]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for b in batches {
        let mut t = Tape::new(&model.params);
        let f = model.forward(&mut t, b)?;
        let loss = t.bce_mean(f.y_hat, b.targets()?, BCE_EPS);
        total += t.value(loss)[[0, 0]] * b.ids.len() as f64;
        n += b.ids.len();
    }
    Ok(total / n as f64)
}

pub const EVAL_BATCH: usize = 64;

/// Predictions for every graph, in input order. Batches run in parallel.
pub fn predict(model: &Model, graphs: &[OmissionGraph]) -> Result<Vec<PredictionRecord>> {
    let chunks: Vec<&[OmissionGraph]> = graphs.chunks(EVAL_BATCH).collect();
    let out: Result<Vec<Vec<PredictionRecord>>> = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&OmissionGraph> = chunk.iter().collect();
            let b = GraphBatch::new(&refs, model.config.encoder_dim)?;
            let mut t = Tape::new(&model.params);
            let f = model.forward(&mut t, &b)?;
            let col = |v: Option<crate::tape::Var>, i: usize| v.map(|v| t.value(v)[[i, 0]]);
            chunk
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    Ok(PredictionRecord {
                        item_id: g.target_id.clone(),
                        y_hat: t.value(f.y_hat)[[i, 0]],
                        y: g.label.ok_or_else(|| Error::MissingLabel(g.target_id.clone()))?,
                        mode: model.config.fusion,
                        base_score: col(f.base_logit, i).map(crate::tape::sigmoid),
                        omi_logit: col(f.omi_logit, i),
                    })
                })
                .collect()
        })
        .collect();
    Ok(out?.into_iter().flatten().collect())
}

pub fn evaluate(model: &Model, graphs: &[OmissionGraph]) -> Result<MetricsReport> {
    if graphs.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    evaluate_predictions(&predict(model, graphs)?)
}

/// Serialized model with the hash of the run config that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub model: Model,
    pub history: Option<TrainHistory>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(model: Model, config_hash: String, history: Option<TrainHistory>) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash,
            seed: model.config.seed,
            model,
            history,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if c.format_version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                c.format_version
            )));
        }
        if !c.model.params.all_finite() {
            return Err(Error::invalid("checkpoint holds non-finite parameters"));
        }
        Ok(c)
    }
}
