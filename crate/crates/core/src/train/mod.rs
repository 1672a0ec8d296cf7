//! Losses, optimizer, scheduler, checkpoints and the training loop.

mod checkpoint;
mod loss;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Model;
use crate::data::{augment_pair, sample_seed, to_batch, AugmentConfig, SamplePair};
use crate::error::{Error, Result};
use crate::metrics::{confusion_from_probs, ConfusionCounts, Metrics, THRESHOLD};
use crate::tensor::{Tape, Tensor};

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use loss::{half_label, triple_loss};
pub use optim::{AdamW, Plateau};

pub const CSV_HEADER: &str = "epoch,loss,precision,recall,f1,iou,lr";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Leading epochs without validation.
    pub warmup: usize,
    pub patience: usize,
    pub factor: f64,
    pub augment: Option<AugmentConfig>,
    /// Stop after this many optimizer steps, finishing with a validation.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-3,
            epochs: 100,
            batch: 4,
            warmup: 3,
            patience: 12,
            factor: 0.1,
            augment: Some(AugmentConfig::default()),
            max_steps: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Validation metrics; `None` during warm-up.
    pub val: Option<Metrics>,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let val = match &self.val {
            Some(m) => format!("{},{},{},{}", m.precision, m.recall, m.f1, m.iou),
            None => ",,,".to_string(),
        };
        format!("{},{},{val},{}", self.epoch, self.loss, self.lr)
    }
}

/// Callbacks invoked as training progresses.
pub trait Observer {
    fn epoch(&mut self, _log: &EpochLog) -> Result<()> {
        Ok(())
    }

    /// Called when validation F1 strictly improves on the best so far.
    fn improved(&mut self, _model: &Model, _log: &EpochLog) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the best validation F1, or the final model when no
    /// validation ran.
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub last: Model,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

/// Loss weights the model can honour: branch terms are dropped for the
/// single-decoder variant.
pub fn effective_weights(model: &Model) -> [f64; 3] {
    let w = model.config.loss_weights;
    if model.config.variant.has_branches() {
        w
    } else {
        [w[0], 0.0, 0.0]
    }
}

/// Loss and per-parameter gradients for one batch.
pub fn loss_and_grads(model: &Model, t1: &Tensor<f32>, t2: &Tensor<f32>, label: &Tensor<f32>, weights: [f64; 3]) -> Result<(f64, Vec<Tensor<f32>>)> {
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let masks = model.forward_bound(&p, tape.constant(t1.clone()), tape.constant(t2.clone()))?;
    let loss = triple_loss(&masks, label, weights)?;
    let value = f64::from(loss.value().item());
    let grads = tape.backward(loss)?;
    Ok((value, p.gradients(&grads)))
}

/// L2 norm of the gradients of every parameter whose name starts with `prefix`.
pub fn grad_norm(model: &Model, t1: &Tensor<f32>, t2: &Tensor<f32>, label: &Tensor<f32>, weights: [f64; 3], prefix: &str) -> Result<f64> {
    let (_, grads) = loss_and_grads(model, t1, t2, label, weights)?;
    let sq: f64 = model
        .params
        .iter()
        .zip(&grads)
        .filter(|((name, _), _)| name.starts_with(prefix))
        .flat_map(|(_, g)| g.data().iter().map(|&v| f64::from(v) * f64::from(v)))
        .sum();
    Ok(sq.sqrt())
}

/// Confusion counts of the fusion output at the 0.5 threshold.
pub fn evaluate(model: &Model, samples: &[SamplePair], batch: usize) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let (t1, t2, label) = to_batch(&refs)?;
        let (fusion, _, _) = model.predict(&t1, &t2)?;
        counts += confusion_from_probs(fusion.data(), label.data(), THRESHOLD)?;
    }
    Ok(counts)
}

/// Seeded training with AdamW, plateau decay on validation F1 and best-F1
/// model retention. Deterministic given the model, data and configuration.
pub fn train(mut model: Model, cfg: &TrainConfig, train_set: &[SamplePair], val_set: &[SamplePair], observer: &mut dyn Observer) -> Result<TrainOutcome> {
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if cfg.epochs > 0 && (train_set.is_empty() || val_set.is_empty()) {
        return Err(Error::Data(format!(
            "training needs non-empty sets, got {} training and {} validation samples",
            train_set.len(),
            val_set.len()
        )));
    }
    let weights = effective_weights(&model);
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut plateau = Plateau::new(cfg.patience, cfg.factor);
    let mut best: Option<(Model, usize)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let epoch_seed = sample_seed(cfg.seed, epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let lr = opt.lr;
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let samples: Vec<SamplePair> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| match &cfg.augment {
                    Some(aug) => augment_pair(&train_set[i], aug, sample_seed(epoch_seed, b * cfg.batch + j)),
                    None => train_set[i].clone(),
                })
                .collect();
            let refs: Vec<&SamplePair> = samples.iter().collect();
            let (t1, t2, label) = to_batch(&refs)?;
            let (loss, grads) = loss_and_grads(&model, &t1, &t2, &label, weights)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {loss} at batch {}", b + 1),
                });
            }
            opt.step(&mut model.params, &grads).map_err(|e| match e {
                Error::Diverged { detail, .. } => Error::Diverged { epoch, detail },
                other => other,
            })?;
            total += loss;
            batches += 1;
            steps += 1;
        }
        let done = cfg.max_steps.is_some_and(|m| steps >= m);
        let val = if epoch > cfg.warmup || done {
            Some(evaluate(&model, val_set, cfg.batch)?.metrics())
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            loss: if batches == 0 { 0.0 } else { total / batches as f64 },
            val,
            lr,
        };
        if let Some(m) = &entry.val {
            let improved = plateau.best().is_none_or(|b| m.f1 > b);
            opt.lr = plateau.step(m.f1, opt.lr);
            if improved {
                observer.improved(&model, &entry)?;
                best = Some((model.clone(), epoch));
            }
        }
        observer.epoch(&entry)?;
        log.push(entry);
        if done {
            break;
        }
    }

    let (best, best_epoch) = match best {
        Some((m, e)) => (m, Some(e)),
        None => (model.clone(), None),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
        steps,
    })
}
