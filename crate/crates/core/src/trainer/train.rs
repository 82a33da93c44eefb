use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, EpochRecord, Progress, RngState};
use super::config::{ModelConfig, TrainConfig};
use super::model::Model;
use super::optim::AdamW;
use crate::dataio::{Dataset, MultimodalSample};
use crate::error::{Error, Result};
use crate::mselector::weight_slot;
use crate::numcore::{Graph, Tensor};
use crate::objective::{compute_metrics, MetricReport};
use crate::Modality;

pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";

/// Per-epoch record of a run plus its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Active ablation flags, `full` when none.
    pub ablation: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub stopped_early: bool,
}

impl History {
    pub fn from_checkpoint(c: &Checkpoint) -> Self {
        History {
            ablation: c.model.ablation.to_string(),
            model: c.model.clone(),
            train: c.train.clone(),
            epochs: c.history.clone(),
            best_epoch: c.progress.best_epoch,
            best_val_mae: c.progress.best_val_mae,
            stopped_early: c.progress.stopped_early,
        }
    }
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch, without optimizer state.
    pub best: Checkpoint,
    /// State after the last completed epoch; resume from here.
    pub last: Checkpoint,
    pub history: History,
}

impl Model {
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(&c.model, c.dims, 0)?;
        model.load_params(c.params.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(model)
    }
}

impl Checkpoint {
    /// The evaluation checkpoint of the best epoch: best parameters, progress
    /// and history as they stood after that epoch, no optimizer state.
    pub fn best_snapshot(&self) -> Option<Checkpoint> {
        let best = self.progress.best_epoch?;
        let params = if self.best_params.is_empty() {
            self.params.clone()
        } else {
            self.params
                .iter()
                .zip(&self.best_params)
                .map(|((n, _), t)| (n.clone(), t.clone()))
                .collect()
        };
        Some(Checkpoint {
            model: self.model.clone(),
            dims: self.dims,
            train: self.train.clone(),
            progress: Progress {
                epochs_done: best + 1,
                best_epoch: Some(best),
                best_val_mae: self.progress.best_val_mae,
                stale_epochs: 0,
                stopped_early: false,
            },
            history: self.history[..=best].to_vec(),
            precision: self.precision,
            params,
            adam_step: 0,
            moments: Vec::new(),
            best_params: Vec::new(),
            rng: RngState {
                seed: self.rng.seed,
                stream: best as u64 + 1,
            },
        })
    }
}

struct RunState {
    model: Model,
    opt: AdamW,
    progress: Progress,
    history: Vec<EpochRecord>,
    best_params: Vec<Tensor>,
}

impl RunState {
    fn checkpoint(&self, train: &TrainConfig) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            dims: self.model.dims,
            train: train.clone(),
            progress: self.progress.clone(),
            history: self.history.clone(),
            precision: train.precision,
            params: self.model.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            adam_step: self.opt.step,
            moments: self.opt.m.iter().cloned().zip(self.opt.v.iter().cloned()).collect(),
            best_params: self.best_params.clone(),
            rng: RngState {
                seed: train.seed,
                stream: self.progress.epochs_done as u64,
            },
        }
    }
}

fn nonempty<'a>(ds: &'a Dataset, split: &str) -> Result<Vec<&'a MultimodalSample>> {
    let s = ds.split(split)?;
    if s.is_empty() {
        return Err(Error::Dataset(format!("split `{split}` is empty")));
    }
    Ok(s)
}

/// Trains from fresh parameters on the `train` split, selecting by `val` MAE.
pub fn train(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(model_cfg, ds.manifest.dims, cfg.seed)?;
    for t in model.store.values_mut() {
        cfg.precision.quantize(t);
    }
    let opt = AdamW::new(&model.store);
    run(
        ds,
        RunState {
            model,
            opt,
            progress: Progress::default(),
            history: Vec::new(),
            best_params: Vec::new(),
        },
        cfg,
    )
}

/// Continues a run from its last checkpoint up to `cfg.max_epochs`.
///
/// Everything but `max_epochs` and `patience` must match the original run.
pub fn resume(ds: &Dataset, last: &Checkpoint, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    last.check_compatible(&last.model, &ds.manifest.dims)?;
    let fixed = TrainConfig {
        max_epochs: last.train.max_epochs,
        patience: last.train.patience,
        ..cfg.clone()
    };
    if fixed != last.train || cfg.precision != last.precision {
        return Err(Error::Incompatible(
            "resume must keep the learning rate, batch size, weight decay, seed and precision".into(),
        ));
    }
    if last.moments.len() != last.params.len() {
        return Err(Error::Incompatible("checkpoint carries no optimizer state".into()));
    }
    let model = Model::from_checkpoint(last)?;
    let mut opt = AdamW::new(&model.store);
    opt.step = last.adam_step;
    opt.m = last.moments.iter().map(|(m, _)| m.clone()).collect();
    opt.v = last.moments.iter().map(|(_, v)| v.clone()).collect();
    let mut progress = last.progress.clone();
    if progress.stale_epochs < cfg.patience {
        progress.stopped_early = false;
    }
    run(
        ds,
        RunState {
            model,
            opt,
            progress,
            history: last.history.clone(),
            best_params: last.best_params.clone(),
        },
        cfg,
    )
}

fn diverged(epoch: usize, err: Error, last: Checkpoint) -> Error {
    match err {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            reason: format!("non-finite value in {op}"),
            last_finite: Box::new(last),
        },
        other => other,
    }
}

fn run(ds: &Dataset, mut st: RunState, cfg: &TrainConfig) -> Result<TrainOutcome> {
    nonempty(ds, TRAIN_SPLIT)?;
    let val = nonempty(ds, VAL_SPLIT)?;
    let label_range = ds.manifest.label_range;
    while st.progress.epochs_done < cfg.max_epochs && !st.progress.stopped_early {
        let epoch = st.progress.epochs_done;
        let start = st.checkpoint(cfg);
        let batches = ds.iterate_batches(TRAIN_SPLIT, cfg.batch_size, cfg.seed, epoch as u64)?;
        let (mut loss, mut reg, mut nce, mut n) = (0.0, 0.0, 0.0, 0usize);
        for batch in &batches {
            let step = (|| {
                let mut g = Graph::with_params(&st.model.store);
                let bl = st.model.batch_loss(&mut g, batch)?;
                let value = g.value(bl.total).item();
                let grads = g.backward(bl.total)?.param_grads();
                Ok::<_, Error>((value, bl.regression, bl.nce, grads))
            })();
            let (value, r, c, grads) = step.map_err(|e| diverged(epoch, e, start.clone()))?;
            st.opt
                .update(&mut st.model.store, &grads, cfg.learning_rate, cfg.weight_decay, cfg.precision)
                .map_err(|e| diverged(epoch, e, start.clone()))?;
            let k = batch.len() as f64;
            loss += value * k;
            reg += r * k;
            nce += c * k;
            n += batch.len();
        }
        let val_mae = evaluate(&st.model, &val, label_range)
            .map_err(|e| diverged(epoch, e, start.clone()))?
            .metrics
            .mae;
        let n = n as f64;
        st.history.push(EpochRecord {
            epoch,
            train_loss: loss / n,
            train_regression: reg / n,
            train_nce: nce / n,
            val_mae,
        });
        let p = &mut st.progress;
        p.epochs_done += 1;
        if p.best_val_mae.is_none_or(|b| val_mae < b) {
            p.best_val_mae = Some(val_mae);
            p.best_epoch = Some(epoch);
            p.stale_epochs = 0;
            st.best_params = st.model.store.iter().map(|(_, _, t)| t.clone()).collect();
        } else {
            p.stale_epochs += 1;
            if p.stale_epochs >= cfg.patience {
                p.stopped_early = true;
            }
        }
    }
    let last = st.checkpoint(cfg);
    let best = last
        .best_snapshot()
        .ok_or_else(|| Error::InvalidArgument("no epoch was run; max_epochs is already reached".into()))?;
    let history = History::from_checkpoint(&last);
    Ok(TrainOutcome { best, last, history })
}

/// One row of the per-sample selection table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionRow {
    pub id: String,
    pub w_a: f64,
    pub w_t: f64,
    pub w_v: f64,
    pub primary: Modality,
    pub planted_primary: Option<Modality>,
    pub y_true: f64,
    pub y_pred: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricReport,
    /// In split order.
    pub rows: Vec<SelectionRow>,
}

impl Evaluation {
    /// Fraction of rows whose chosen primary equals the planted one, over
    /// rows that have a planted primary.
    pub fn selection_accuracy(&self) -> Option<f64> {
        let planted: Vec<_> = self.rows.iter().filter_map(|r| r.planted_primary.map(|p| p == r.primary)).collect();
        if planted.is_empty() {
            return None;
        }
        Some(planted.iter().filter(|&&hit| hit).count() as f64 / planted.len() as f64)
    }
}

pub fn evaluate(model: &Model, samples: &[&MultimodalSample], label_range: [f64; 2]) -> Result<Evaluation> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let (y, sel) = model.predict(s)?;
        let w = |m: Modality| sel.weights[weight_slot(m)];
        rows.push(SelectionRow {
            id: s.id.clone(),
            w_a: w(Modality::Acoustic),
            w_t: w(Modality::Language),
            w_v: w(Modality::Visual),
            primary: sel.primary(),
            planted_primary: s.planted_primary,
            y_true: s.label,
            y_pred: y,
        });
    }
    let pred: Vec<f64> = rows.iter().map(|r| r.y_pred).collect();
    let truth: Vec<f64> = rows.iter().map(|r| r.y_true).collect();
    let metrics = compute_metrics(&pred, &truth, label_range)?;
    Ok(Evaluation { metrics, rows })
}

/// Evaluates a checkpoint on a named split of `ds`.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, ds: &Dataset, split: &str) -> Result<Evaluation> {
    if ckpt.dims != ds.manifest.dims {
        return Err(Error::Incompatible(format!(
            "checkpoint expects feature widths {:?}, dataset has {:?}",
            ckpt.dims, ds.manifest.dims
        )));
    }
    let model = Model::from_checkpoint(ckpt)?;
    evaluate(&model, &ds.split(split)?, ds.manifest.label_range)
}
