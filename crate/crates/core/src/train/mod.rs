//! Adam training loop with a per-epoch cosine schedule, frozen-parameter
//! checks and validation mIoU.

mod adam;
mod schedule;

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use schedule::cosine_lr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{augment, collate, sample_seed, AugmentConfig, ConfusionMatrix, MiouReport, Sample};
use crate::error::{config_err, Error, Result};
use crate::exec::Exec;
use crate::model::Model;
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub augment: AugmentConfig,
    /// Validate every this many epochs (the last epoch always validates).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr0: 0.005,
            seed: 0,
            loss: LossKind::CrossEntropy,
            augment: AugmentConfig::default(),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(config_err("epochs, batch_size and eval_every must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(config_err(format!("lr0 must be positive, got {}", self.lr0)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub val_miou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.loss).collect()
    }

    pub fn lrs(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.lr).collect()
    }

    pub fn val_mious(&self) -> Vec<Option<f64>> {
        self.epochs.iter().map(|r| r.val_miou).collect()
    }

    /// `epoch,lr,loss,val_miou`, one row per epoch; skipped validations are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss,val_miou\n");
        for r in &self.epochs {
            let v = r.val_miou.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.loss, v));
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        let last = self.epochs.last();
        let best = self.epochs.iter().filter_map(|r| r.val_miou).fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        });
        let summary = serde_json::json!({
            "epochs": self.epochs.len(),
            "initial_loss": self.epochs.first().map(|r| r.loss),
            "final_loss": last.map(|r| r.loss),
            "final_val_miou": last.and_then(|r| r.val_miou),
            "best_val_miou": best,
            "log": self.epochs,
        });
        Ok(serde_json::to_string_pretty(&summary)?)
    }
}

/// Everything needed to continue an interrupted run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub next_epoch: usize,
    pub adam: Adam,
    pub log: TrainLog,
}

/// One optimizer step on a batch. Returns the loss before the update.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    images: &FeatureMap,
    labels: &[u8],
    lr: f64,
    exec: Exec,
) -> Result<f64> {
    let mut tape = Tape::with_exec(exec);
    let logits = model.forward_tape(&mut tape, images)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    adam.update(&mut model.params, &grads, lr)?;
    Ok(value)
}

/// Full-size prediction over `samples`, one image at a time so sizes may differ.
pub fn evaluate(model: &Model, samples: &[Sample], exec: Exec) -> Result<MiouReport> {
    if samples.is_empty() {
        return Err(config_err("evaluation set is empty"));
    }
    let num_classes = model.config().num_classes;
    let per_sample = exec.map(samples.len(), |i| -> Result<ConfusionMatrix> {
        let s = &samples[i];
        let pred = model.predict(&s.image)?;
        let mut cm = ConfusionMatrix::new(num_classes)?;
        cm.add(&pred[0], &s.label.data)?;
        Ok(cm)
    });
    let mut total = ConfusionMatrix::new(num_classes)?;
    for cm in per_sample {
        total.merge(&cm?)?;
    }
    total.report()
}

fn check_dataset(samples: &[Sample], num_classes: usize) -> Result<()> {
    for s in samples {
        s.validate_labels(num_classes)?;
    }
    Ok(())
}

pub fn train(model: &mut Model, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainLog> {
    let mut state = TrainState::default();
    train_until(model, train_set, val_set, cfg, &mut state, cfg.epochs, Exec::default(), |_, _| Ok(()))?;
    Ok(state.log)
}

/// Runs epochs `state.next_epoch..stop_epoch`, calling `on_epoch` after each
/// one. Resuming from a saved `state` reproduces the uninterrupted run.
#[allow(clippy::too_many_arguments)]
pub fn train_until(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    state: &mut TrainState,
    stop_epoch: usize,
    exec: Exec,
    mut on_epoch: impl FnMut(&Model, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(config_err("training set is empty"));
    }
    let num_classes = model.config().num_classes;
    check_dataset(train_set, num_classes)?;
    check_dataset(val_set, num_classes)?;
    let stop_epoch = stop_epoch.min(cfg.epochs);
    let frozen = model.params.frozen_snapshot();

    for epoch in state.next_epoch..stop_epoch {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, u64::MAX, epoch as u64)));

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let augmented = exec.map(chunk.len(), |j| {
                let idx = chunk[j];
                let seed = sample_seed(cfg.seed ^ cfg.augment.seed, idx as u64, epoch as u64);
                augment(&train_set[idx], &cfg.augment, &mut ChaCha8Rng::seed_from_u64(seed))
            });
            let augmented = augmented.into_iter().collect::<Result<Vec<_>>>()?;
            let (images, labels) = collate(&augmented)?;
            let loss = train_step(model, &mut state.adam, &images, &labels, lr, exec).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg} (epoch {epoch}, batch {b}, lr {lr})")),
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
        }

        let changed = model.params.changed_since(&frozen);
        if !changed.is_empty() {
            return Err(Error::Precondition(format!(
                "frozen parameters changed during epoch {epoch}: {changed:?}"
            )));
        }

        let validate = !val_set.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        let val_miou = if validate {
            Some(evaluate(model, val_set, exec)?.mean)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / batches as f64,
            val_miou,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.6} loss {:.5} val mIoU {}",
            record.loss,
            val_miou.map_or("-".into(), |v| format!("{v:.4}"))
        );
        state.log.epochs.push(record);
        state.next_epoch = epoch + 1;
        on_epoch(model, state)?;
    }
    Ok(())
}
