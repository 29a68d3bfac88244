//! Training loop, evaluation and ROC curves.

mod roc;
mod sgd;

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::augment::{AugmentationPolicy, Augmenter};
use crate::config::RunConfig;
use crate::dataset::{make_batches, Composition, DatasetManifest, Loader, Split};
use crate::error::{KwsError, Result};
use crate::model::checkpoint::{self, TrainingMeta};
use crate::model::{Model, ModelSpec};
use crate::tensor::{softmax_rows, Graph, Mode, Tensor};

pub use roc::{micro_roc, RocCurve, RocPoint};
pub use sgd::{cosine_lr, Sgd};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_epochs: 200,
            lr0: 0.1,
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-3,
            patience: 20,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(KwsError::config(format!("train.{what}")));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub roc: RocCurve,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Best-validation model on the test split, when the split is non-empty.
    pub test: Option<Evaluation>,
}

/// Loss and accuracy accumulated over batches.
#[derive(Default)]
struct Running {
    loss: f64,
    correct: usize,
    n: usize,
}

impl Running {
    fn add(&mut self, loss: f64, probs: &[f64], labels: &[usize], k: usize) {
        self.loss += loss * labels.len() as f64;
        self.correct += labels.iter().enumerate().filter(|(i, &l)| argmax(&probs[i * k..(i + 1) * k]) == l).count();
        self.n += labels.len();
    }

    fn loss(&self) -> f64 {
        self.loss / self.n.max(1) as f64
    }

    fn acc(&self) -> f64 {
        self.correct as f64 / self.n.max(1) as f64
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

fn check_classes(spec: &ModelSpec, manifest: &DatasetManifest) -> Result<()> {
    if spec.num_classes != manifest.num_classes() {
        return Err(KwsError::config(format!(
            "model has {} classes but the dataset vocabulary has {}",
            spec.num_classes,
            manifest.num_classes()
        )));
    }
    Ok(())
}

/// Top-1 accuracy, mean cross-entropy, confusion matrix and micro-averaged
/// ROC over one split. Batch norm uses running statistics.
pub fn evaluate(
    model: &Model,
    manifest: &DatasetManifest,
    split: Split,
    composition: Composition,
    seed: u64,
    batch_size: usize,
) -> Result<Evaluation> {
    check_classes(model.spec(), manifest)?;
    let loader = Loader::new(manifest, manifest.noise_bank()?, None, seed);
    let k = model.spec().num_classes;
    let mut run = Running::default();
    let mut confusion = vec![vec![0; k]; k];
    let (mut scores, mut all_labels) = (Vec::new(), Vec::new());
    for batch in make_batches(manifest, split, batch_size, composition, seed, 0)? {
        let (x, labels) = loader.load(&batch, 0, false)?;
        let logits = model.forward(&x, Mode::Eval)?;
        let probs = softmax_rows(logits.data(), labels.len(), k);
        let loss = labels.iter().enumerate().map(|(i, &l)| -probs[i * k + l].max(1e-300).ln()).sum::<f64>()
            / labels.len() as f64;
        run.add(loss, &probs, &labels, k);
        for (i, &l) in labels.iter().enumerate() {
            confusion[l][argmax(&probs[i * k..(i + 1) * k])] += 1;
        }
        scores.extend_from_slice(&probs);
        all_labels.extend_from_slice(&labels);
    }
    Ok(Evaluation {
        accuracy: run.acc(),
        loss: run.loss(),
        confusion,
        roc: micro_roc(&scores, &all_labels, k)?,
        samples: run.n,
    })
}

/// Loads a checkpoint and evaluates it.
pub fn evaluate_checkpoint(
    path: &Path,
    manifest: &DatasetManifest,
    split: Split,
    composition: Composition,
    seed: u64,
    batch_size: usize,
) -> Result<Evaluation> {
    let (model, _) = checkpoint::load(path)?;
    evaluate(&model, manifest, split, composition, seed, batch_size)
}

/// Runs one optimizer step on a batch; returns the batch loss and the
/// softmax outputs.
pub fn train_step(model: &mut Model, opt: &mut Sgd, x: Tensor, labels: &[usize], lr: f64) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = model.forward_graph(&mut g, xv, Mode::Train, true)?;
    let loss = g.cross_entropy(out.logits, labels)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(KwsError::Numeric(format!("training loss became {value}")));
    }
    let probs = softmax_rows(g.data(out.logits), labels.len(), model.spec().num_classes);
    g.backward(loss)?;
    let grads: Vec<Option<&[f64]>> = out.bound.vars().iter().map(|&v| g.grad(v)).collect();
    opt.step(model.params_mut(), &grads, lr)?;
    model.params_mut().apply_updates(&out.norm_updates);
    Ok((value, probs))
}

fn meta(model: &Model, opt: &Sgd, manifest: &DatasetManifest, epoch: usize, seed: u64, best: f64) -> TrainingMeta {
    TrainingMeta {
        epoch: epoch as u32,
        seed,
        best_val_loss: best,
        class_names: manifest.class_names(),
        velocity: opt.export(model.params()),
    }
}

/// Trains under `run` on the manifest's train split, selecting the
/// checkpoint with the lowest validation loss. With `out` set, writes
/// `metrics.jsonl`, `best.ckpt` and `last.ckpt` there.
pub fn train(run: &RunConfig, manifest: &DatasetManifest, out: Option<&Path>) -> Result<(Model, TrainReport)> {
    run.validate()?;
    let cfg = &run.train;
    let spec = run.model_spec_with_classes(manifest.num_classes())?;
    check_classes(&spec, manifest)?;
    let mut model = Model::build(&spec, run.seed)?;
    let mut opt = Sgd::new(model.params(), cfg.momentum, cfg.weight_decay);
    let noise = manifest.noise_bank()?;
    let augmenter = if cfg.augment {
        let policy = if noise.is_empty() {
            log::warn!("no background noise found; noise mixing disabled");
            AugmentationPolicy { noise: crate::augment::Disturbance { p: 0.0, ..run.augment.noise }, ..run.augment }
        } else {
            run.augment
        };
        Some(Augmenter::new(policy, noise.clone())?)
    } else {
        None
    };
    let loader = Loader::new(manifest, noise, augmenter, run.seed);
    let composition = run.data.composition;

    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| KwsError::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((File::create(&p).map_err(|e| KwsError::io(&p, e))?, p))
        }
        None => None,
    };
    let k = spec.num_classes;
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let lr = cosine_lr(epoch, cfg.max_epochs, cfg.lr0, cfg.lr_decay);
        let mut tr = Running::default();
        for batch in make_batches(manifest, Split::Train, cfg.batch_size, composition, run.seed, epoch as u64)? {
            let (x, labels) = loader.load(&batch, epoch as u64, true)?;
            let (loss, probs) = train_step(&mut model, &mut opt, x, &labels, lr)?;
            tr.add(loss, &probs, &labels, k);
        }
        let val = evaluate(&model, manifest, Split::Validation, composition, run.seed, cfg.batch_size)?;
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: tr.loss(),
            train_acc: tr.acc(),
            val_loss: val.loss,
            val_acc: val.accuracy,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.4} train {:.4}/{:.3} val {:.4}/{:.3}",
            m.train_loss,
            m.train_acc,
            m.val_loss,
            m.val_acc
        );
        if let Some((f, p)) = &mut log {
            let line = serde_json::to_string(&m).map_err(|e| KwsError::Contract(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| KwsError::io(p.as_path(), e))?;
        }
        epochs.push(m);
        if val.loss < best.0 {
            best = (val.loss, epoch, model.clone());
            if let Some(dir) = out {
                checkpoint::save(&dir.join("best.ckpt"), &model, &meta(&model, &opt, manifest, epoch, run.seed, val.loss))?;
            }
        } else if epoch - best.1 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    if let Some(dir) = out {
        let last = epochs.len() - 1;
        checkpoint::save(&dir.join("last.ckpt"), &model, &meta(&model, &opt, manifest, last, run.seed, best.0))?;
    }
    let (best_val_loss, best_epoch, best_model) = best;
    let test = if manifest.count(Split::Test) > 0 {
        Some(evaluate(&best_model, manifest, Split::Test, composition, run.seed, cfg.batch_size)?)
    } else {
        None
    };
    Ok((best_model, TrainReport { epochs, best_epoch, best_val_loss, stopped_early, test }))
}
