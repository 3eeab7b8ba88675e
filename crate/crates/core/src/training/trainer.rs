use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::{step_rng, Batch, Dataset, SliceBank, Stream, WeightScheme};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::losses::total_loss_grad;
use crate::network::{load_checkpoint, save_checkpoint, Checkpoint, DenseFcn, ForwardCtx};
use crate::scalar::Scalar;

pub const EPOCHS_CSV: &str = "epochs.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_dice: Option<f64>,
    pub seconds: f64,
    /// Training samples drawn during the epoch.
    pub train_samples: u64,
}

/// Training state persisted with each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub global_step: u64,
    pub best_val_dice: Option<f64>,
    pub history: Vec<EpochReport>,
}

pub struct Trainer<'a, T> {
    config: TrainConfig,
    model: DenseFcn<T>,
    adam: Adam<T>,
    train: &'a SliceBank<'a>,
    val: Option<&'a SliceBank<'a>>,
    epochs_done: usize,
    global_step: u64,
    best_val_dice: Option<f64>,
    history: Vec<EpochReport>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        config: TrainConfig,
        train: &'a SliceBank<'a>,
        val: Option<&'a SliceBank<'a>>,
    ) -> Result<Self> {
        config.validate()?;
        let model = DenseFcn::new(config.network_spec(), config.seed)?;
        let adam = Adam::new(&model, config.lr);
        Ok(Self {
            config,
            model,
            adam,
            train,
            val,
            epochs_done: 0,
            global_step: 0,
            best_val_dice: None,
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Self::save`]. Only the
    /// epoch budget may differ from the checkpointed configuration.
    pub fn resume(
        config: TrainConfig,
        checkpoint: Checkpoint<T>,
        train: &'a SliceBank<'a>,
        val: Option<&'a SliceBank<'a>>,
    ) -> Result<Self> {
        config.validate()?;
        let progress: Progress = serde_json::from_value(checkpoint.progress)
            .map_err(|e| Error::Checkpoint(format!("checkpoint has no training progress: {e}")))?;
        let comparable = TrainConfig {
            epochs: progress.config.epochs,
            prefetch: progress.config.prefetch,
            ..config.clone()
        };
        if comparable != progress.config {
            return Err(Error::Checkpoint(
                "configuration differs from the checkpointed run (only epochs and prefetch may change)".into(),
            ));
        }
        let optimizer = checkpoint
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Ok(Self {
            config,
            model: checkpoint.model,
            adam: Adam::from_state(optimizer),
            train,
            val,
            epochs_done: progress.epochs_done,
            global_step: progress.global_step,
            best_val_dice: progress.best_val_dice,
            history: progress.history,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }
    pub fn model(&self) -> &DenseFcn<T> {
        &self.model
    }
    pub fn into_model(self) -> DenseFcn<T> {
        self.model
    }
    pub fn optimizer(&self) -> &Adam<T> {
        &self.adam
    }
    pub fn history(&self) -> &[EpochReport] {
        &self.history
    }
    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }
    pub fn global_step(&self) -> u64 {
        self.global_step
    }
    pub fn best_val_dice(&self) -> Option<f64> {
        self.best_val_dice
    }
    pub fn train_bank(&self) -> &'a SliceBank<'a> {
        self.train
    }

    pub fn progress(&self) -> Progress {
        Progress {
            config: self.config.clone(),
            epochs_done: self.epochs_done,
            global_step: self.global_step,
            best_val_dice: self.best_val_dice,
            history: self.history.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let progress = serde_json::to_value(self.progress())?;
        save_checkpoint(path, &self.model, Some(self.adam.state()), &progress)
    }

    fn nonfinite(&self, detail: String) -> Error {
        Error::NonfiniteLoss {
            epoch: self.epochs_done + 1,
            step: self.global_step,
            detail,
        }
    }

    /// One optimization step on `batch`; returns the total loss.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<f64> {
        self.model.zero_grad();
        let mut ctx = ForwardCtx::train(step_rng(
            self.config.seed,
            Stream::Dropout,
            self.global_step,
        ));
        let probs = self.model.forward(&batch.input, &mut ctx)?;
        if !probs.is_finite() {
            return Err(self.nonfinite("non-finite network output".into()));
        }
        let weights = self.config.loss_weights();
        let (terms, dprobs) = match total_loss_grad(
            self.config.target,
            &probs,
            &batch.target,
            &batch.wmap,
            &self.model,
            &weights,
        ) {
            Ok(v) => v,
            Err(Error::NonfiniteInput(detail)) => return Err(self.nonfinite(detail)),
            Err(e) => return Err(e),
        };
        self.model.backward(&dprobs);
        self.model.add_l2_grad(T::of(weights.l2));
        self.adam.step(&mut self.model);
        self.global_step += 1;
        if !self.model.is_finite() {
            return Err(self.nonfinite("non-finite parameter after update".into()));
        }
        Ok(terms.total.as_f64())
    }

    /// Mean loss and mean soft dice over the validation iterations of
    /// `epoch`, forward only.
    pub fn validate(&self, epoch: usize) -> Result<(Option<f64>, Option<f64>)> {
        let (Some(val), n) = (self.val, self.config.iters_val_per_epoch) else {
            return Ok((None, None));
        };
        if n == 0 {
            return Ok((None, None));
        }
        let weights = self.config.loss_weights();
        let (mut loss, mut dice) = (0.0, 0.0);
        for i in 0..n {
            let step = (epoch as u64) * n as u64 + i as u64;
            let batch: Batch<T> = val.sample_batch(
                &mut step_rng(self.config.seed, Stream::ValSampling, step),
                self.config.batch_size,
            )?;
            let probs = self.model.infer(&batch.input)?;
            let (terms, _) = total_loss_grad(
                self.config.target,
                &probs,
                &batch.target,
                &batch.wmap,
                &self.model,
                &weights,
            )?;
            loss += terms.total.as_f64();
            dice += terms.dice.as_f64();
        }
        Ok((Some(loss / n as f64), Some(dice / n as f64)))
    }

    /// Runs the configured number of training iterations followed by the
    /// validation iterations.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let start = Instant::now();
        let drawn_before = self.train.samples_drawn();
        let iters = self.config.iters_train_per_epoch;
        let (seed, bs, first) = (self.config.seed, self.config.batch_size, self.global_step);
        let make = |bank: &SliceBank<'_>, i: usize| -> Result<Batch<T>> {
            bank.sample_batch(
                &mut step_rng(seed, Stream::TrainSampling, first + i as u64),
                bs,
            )
        };
        let mut total = 0.0;
        if self.config.prefetch == 0 {
            for i in 0..iters {
                let batch = make(self.train, i)?;
                total += self.train_step(&batch)?;
            }
        } else {
            // batches are keyed by iteration number, so queue depth does not
            // change what is trained on
            let bank = self.train;
            let (tx, rx) = mpsc::sync_channel::<Result<Batch<T>>>(self.config.prefetch);
            let outcome: Result<f64> = std::thread::scope(|s| {
                s.spawn(move || {
                    for i in 0..iters {
                        let b = make(bank, i);
                        let failed = b.is_err();
                        if tx.send(b).is_err() || failed {
                            break;
                        }
                    }
                });
                let mut sum = 0.0;
                for _ in 0..iters {
                    let batch = rx.recv().expect("producer sends one batch per iteration")?;
                    sum += self.train_step(&batch)?;
                }
                Ok(sum)
            });
            total = outcome?;
        }
        let epoch = self.epochs_done + 1;
        let (val_loss, val_dice) = self.validate(epoch)?;
        if let Some(d) = val_dice {
            if self.best_val_dice.is_none_or(|b| d > b) {
                self.best_val_dice = Some(d);
            }
        }
        self.epochs_done = epoch;
        let report = EpochReport {
            epoch,
            train_loss: total / iters as f64,
            val_loss,
            val_dice,
            seconds: start.elapsed().as_secs_f64(),
            train_samples: self.train.samples_drawn() - drawn_before,
        };
        self.history.push(report.clone());
        Ok(report)
    }
}

/// Writes the epoch log as CSV.
pub fn write_epoch_csv(path: &Path, reports: &[EpochReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "val_dice", "seconds"])?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    for r in reports {
        w.write_record([
            r.epoch.to_string(),
            format!("{}", r.train_loss),
            opt(r.val_loss),
            opt(r.val_dice),
            format!("{:.3}", r.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Files produced by [`train_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub epochs_csv: PathBuf,
    pub history: Vec<EpochReport>,
}

/// Trains on the dataset's train split, validating on its validation split,
/// until `config.epochs` epochs are done. With `resume`, continues from that
/// checkpoint. Checkpoints and the epoch log go to `out_dir`.
pub fn train_model<T: Scalar>(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let scheme = WeightScheme {
        edge_band: config.edge_band,
        edge_weight: config.edge_weight,
        tumor_weight: config.tumor_weight,
    };
    let train = SliceBank::new(
        dataset.cases_of(&dataset.split.train)?,
        config.target,
        config.slice_margin,
        scheme,
    )?;
    let val = match SliceBank::new(
        dataset.cases_of(&dataset.split.validation)?,
        config.target,
        config.slice_margin,
        scheme,
    ) {
        Ok(b) => Some(b),
        Err(Error::NoEligibleSlices) => None,
        Err(e) => return Err(e),
    };
    let mut trainer = match resume {
        Some(path) => Trainer::resume(
            config.clone(),
            load_checkpoint::<T>(path)?,
            &train,
            val.as_ref(),
        )?,
        None => Trainer::new(config.clone(), &train, val.as_ref())?,
    };
    let best = out_dir.join(BEST_CHECKPOINT);
    let last = out_dir.join(FINAL_CHECKPOINT);
    let csv = out_dir.join(EPOCHS_CSV);
    while trainer.epochs_done() < config.epochs {
        let before = trainer.best_val_dice();
        let report = trainer.run_epoch()?;
        trainer.save(&last)?;
        let improved = report.val_dice.is_some() && trainer.best_val_dice() != before;
        if improved || report.val_dice.is_none() || !best.exists() {
            trainer.save(&best)?;
        }
        write_epoch_csv(&csv, trainer.history())?;
    }
    if !last.exists() {
        trainer.save(&last)?;
        trainer.save(&best)?;
        write_epoch_csv(&csv, trainer.history())?;
    }
    Ok(TrainOutcome {
        best_checkpoint: best,
        final_checkpoint: last,
        epochs_csv: csv,
        history: trainer.history().to_vec(),
    })
}
