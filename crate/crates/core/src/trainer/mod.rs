//! Training loop: Adam steps over shuffled mini-batches, validation after
//! every epoch, plateau decay, early stopping and best-checkpoint tracking.

mod adam;
mod checkpoint;
mod schedule;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, restore_into, save_checkpoint,
    structural_diff, Checkpoint, CheckpointMeta, OptimizerEntry, TensorEntry, CHECKPOINT_MAGIC,
};
pub(crate) use checkpoint::write_atomic;
pub use schedule::{trace, EpochAction, ScheduleState, MIN_REL_IMPROVEMENT};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::{RunConfig, TrainerConfig};
use crate::data::{split_811, Dataset, DatasetView, Split};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossPlan};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{group_by_presence, Batch, TriMF};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Batch size for loss/metric passes that take no gradient step.
pub const EVAL_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auroc_macro: f64,
    pub val_auprc_macro: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: String,
    pub pairs: Vec<String>,
    pub param_count: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_lr: f64,
    pub lr_decays: usize,
    pub train_samples: usize,
    pub seconds: f64,
    pub val: EvalReport,
    pub test: EvalReport,
}

pub struct TrainOutcome<T> {
    pub model: TriMF,
    /// Parameters of the best validation epoch.
    pub store: ParamStore<T>,
    pub plan: LossPlan,
    pub history: Vec<EpochRecord>,
    pub report: TrainReport,
}

/// Optimizer and schedule around one model.
pub struct Trainer<T> {
    pub model: TriMF,
    pub store: ParamStore<T>,
    pub plan: LossPlan,
    pub adam: AdamState<T>,
    pub schedule: ScheduleState,
    pub batch_size: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: TriMF, store: ParamStore<T>, plan: LossPlan, cfg: &TrainerConfig, seed: u64) -> Self {
        let adam = AdamState::new(
            AdamConfig::new(cfg.learning_rate, cfg.weight_decay, cfg.decoupled_wd),
            &store,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            model,
            store,
            plan,
            adam,
            schedule: ScheduleState::new(cfg.lr_decay, cfg.plateau_patience, cfg.stop_patience, cfg.max_epochs),
            batch_size: cfg.batch_size,
            rng,
        }
    }

    pub fn lr(&self) -> f64 {
        self.adam.config.lr
    }

    /// View positions whose samples carry every modality the model uses.
    pub fn trainable_positions(&self, view: &DatasetView<'_>) -> Vec<usize> {
        let needed = self.model.arch.modalities();
        (0..view.len())
            .filter(|&p| view.presence(p).intersect(needed) == needed)
            .collect()
    }

    /// One pass over `view` in a fresh shuffled order; returns the mean
    /// training loss. `epoch` only labels diagnostics.
    pub fn train_epoch(&mut self, view: &DatasetView<'_>, epoch: usize) -> Result<f64> {
        let mut positions = self.trainable_positions(view);
        if positions.is_empty() {
            return Err(Error::Data("no training sample has every modality the model needs".into()));
        }
        positions.shuffle(&mut self.rng);
        let needed = self.model.arch.modalities();
        let mut total = 0.0;
        for (b, chunk) in positions.chunks(self.batch_size).enumerate() {
            let numerical = |e: Error| {
                if e.is_numerical() {
                    Error::Numerical {
                        epoch,
                        batch: b,
                        source: Box::new(e),
                    }
                } else {
                    e
                }
            };
            let samples: Vec<_> = chunk.iter().map(|&p| view.sample(p)).collect();
            let batch = Batch::<T>::from_samples(
                &samples,
                &self.model.arch.inputs,
                view.dataset.header.label_count,
                needed,
            )?;
            let tape = Tape::new();
            let grads = {
                let ctx = Ctx::new(&tape, &self.store);
                let out = self.model.forward(ctx, &batch).map_err(numerical)?;
                let loss = combined_loss(&out, &batch.targets, &self.plan).map_err(numerical)?;
                let value = loss.total.item().f64();
                if !value.is_finite() {
                    return Err(numerical(Error::NonFinite { op: "loss" }));
                }
                total += value * chunk.len() as f64;
                loss.total.backward().map_err(numerical)?
            };
            self.store.zero_grads();
            grads.accumulate_into(&mut self.store)?;
            self.adam.step(&mut self.store)?;
            if let Some((name, _)) = self
                .store
                .iter()
                .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Numerical {
                    epoch,
                    batch: b,
                    source: Box::new(Error::Contract(format!("parameter {name} became non-finite"))),
                });
            }
        }
        Ok(total / positions.len() as f64)
    }

    /// Applies the schedule to a finished epoch, decaying the learning rate
    /// when asked to.
    pub fn finish_epoch(&mut self, val_loss: f64) -> (bool, EpochAction) {
        let (improved, action) = self.schedule.end_of_epoch(val_loss);
        if action == EpochAction::DecayLr {
            self.adam.config.lr *= self.schedule.decay_factor;
        }
        (improved, action)
    }
}

/// Mean objective over `view` (no gradient) plus raw logits in view order.
pub fn loss_and_logits<T: Scalar>(
    model: &TriMF,
    store: &ParamStore<T>,
    plan: &LossPlan,
    view: &DatasetView<'_>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut logits = vec![Vec::new(); view.len()];
    let mut total = 0.0;
    for (_, positions) in group_by_presence(view) {
        for chunk in positions.chunks(EVAL_BATCH) {
            let batch = Batch::<T>::from_view(view, chunk, &model.arch.inputs)?;
            let tape = Tape::new();
            let out = model.forward(Ctx::new(&tape, store), &batch)?;
            let loss = combined_loss(&out, &batch.targets, plan)?;
            total += loss.total.item().f64() * chunk.len() as f64;
            let values = out.logits.value();
            for (row, &pos) in chunk.iter().enumerate() {
                logits[pos] = values.row(row).iter().map(|v| v.f64()).collect();
            }
        }
    }
    Ok((total / view.len().max(1) as f64, logits))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn validation_metrics(view: &DatasetView<'_>, logits: &[Vec<f64>]) -> (f64, f64) {
    let label_count = view.dataset.header.label_count;
    let scores: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|&x| sigmoid(x)).collect()).collect();
    let labels: Vec<Vec<bool>> = view.samples().map(|s| s.labels.to_bools(label_count)).collect();
    match EvalReport::from_scores(&scores, &labels, view.mask.to_string(), Vec::new()) {
        Ok(r) => (r.macro_auroc, r.macro_auprc),
        Err(_) => (f64::NAN, f64::NAN),
    }
}

fn metrics_csv(history: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in history {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Contract(format!("csv buffer: {e}")))
}

/// Trains on `split.train`, selects on `split.val` and reports on
/// `split.test`. With `out_dir`, writes `config.json`, `checkpoint.best`,
/// `metrics.csv` and `report.json` there.
pub fn train_on_split<T: Scalar>(
    run: &RunConfig,
    dataset: &Dataset,
    split: &Split,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let started = Instant::now();
    let (arch, plan) = run.build(dataset.header.shapes()?, dataset.header.label_count)?;
    let (model, store) = TriMF::new::<T>(arch, run.seed)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("config.json"), serde_json::to_string_pretty(run)?.as_bytes())?;
    }
    log::info!(
        "training {} (pairs {:?}, {} parameters), λ=({}, {}, {}, {})",
        run.variant,
        model.arch.pairs,
        model.arch.param_count(),
        plan.lambda1,
        plan.effective_weights().lambda2,
        plan.effective_weights().lambda3,
        plan.effective_weights().lambda4
    );

    let train_view = dataset.subset(&split.train);
    let val_view = dataset.subset(&split.val);
    let test_view = dataset.subset(&split.test);
    let mut trainer = Trainer::new(model, store, plan, &run.trainer, run.seed);
    let train_samples = trainer.trainable_positions(&train_view).len();
    let meta_for = |epoch: usize, val_loss: f64, arch| -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            epoch,
            val_loss,
            seed: run.seed,
            arch,
            run: serde_json::to_value(run)?,
        })
    };

    let mut best = trainer.store.clone();
    let mut history = Vec::new();
    let mut decays = 0;
    loop {
        let epoch = trainer.schedule.epoch + 1;
        let lr = trainer.lr();
        let train_loss = trainer.train_epoch(&train_view, epoch)?;
        let (val_loss, logits) = loss_and_logits(&trainer.model, &trainer.store, &trainer.plan, &val_view)
            .map_err(|e| {
                if e.is_numerical() {
                    Error::Numerical { epoch, batch: 0, source: Box::new(e) }
                } else {
                    e
                }
            })?;
        let (val_auroc_macro, val_auprc_macro) = validation_metrics(&val_view, &logits);
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_auroc_macro,
            val_auprc_macro,
        });
        let (improved, action) = trainer.finish_epoch(val_loss);
        log::debug!("epoch {epoch}: lr {lr:.6} train {train_loss:.5} val {val_loss:.5} auroc {val_auroc_macro:.4}");
        if improved {
            best.copy_values_from(&trainer.store)?;
            if let Some(dir) = out_dir {
                let meta = meta_for(epoch, val_loss, trainer.model.arch.clone())?;
                save_checkpoint(&dir.join("checkpoint.best"), &meta, &trainer.store, Some(&trainer.adam))?;
            }
        }
        if let Some(dir) = out_dir {
            write_atomic(&dir.join("metrics.csv"), &metrics_csv(&history)?)?;
        }
        match action {
            EpochAction::Stop => break,
            EpochAction::DecayLr => decays += 1,
            EpochAction::Continue => {}
        }
    }

    let Trainer { model, plan, schedule, adam, .. } = trainer;
    let val = evaluate(&model, &best, &val_view, EVAL_BATCH)?;
    let test = evaluate(&model, &best, &test_view, EVAL_BATCH)?;
    let report = TrainReport {
        variant: run.variant.to_string(),
        pairs: model.arch.pairs.iter().map(|p| p.to_string()).collect(),
        param_count: model.arch.param_count(),
        epochs_run: schedule.epoch,
        best_epoch: schedule.best_epoch,
        best_val_loss: schedule.best_val_loss.unwrap_or(f64::NAN),
        final_lr: adam.config.lr,
        lr_decays: decays,
        train_samples,
        seconds: started.elapsed().as_secs_f64(),
        val,
        test,
    };
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(TrainOutcome {
        model,
        store: best,
        plan,
        history,
        report,
    })
}

/// Splits `dataset` 8:1:1 with the run seed and trains.
pub fn train<T: Scalar>(run: &RunConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    let split = split_811(dataset, run.seed)?;
    train_on_split(run, dataset, &split, out_dir)
}
