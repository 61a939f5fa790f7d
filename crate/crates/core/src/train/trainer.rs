use indexmap::IndexMap;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{Protocol, ResolvedSplit, TrainConfig};
use super::metrics::{compute_metrics, Metrics, Scored};
use super::prepare::{frames, Prepared};
use crate::data::{build_eval_windows, build_windows, Dataset, NormStats, StatePanel, WindowSample};
use crate::error::{Error, Result};
use crate::model::{prediction_loss, total_loss, Batch, WindowInput, WorldModel};
use crate::params::{clip_grad_norm, Adam};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub vq_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub lr: f64,
}

fn state_indices(data: &Dataset, names: &[String]) -> Result<Vec<usize>> {
    names.iter().map(|s| data.panel.state_index(s)).collect()
}

/// Model outputs against targets for a set of windows.
pub fn score(prepared: &Prepared, model: &WorldModel, data: &Dataset, masked: bool, windows: &[WindowSample]) -> Result<Vec<Scored>> {
    let pred = prepared.predict(model, data, masked, windows)?;
    let y = prepared.targets(windows);
    Ok(collect_scored(windows, &pred, &y))
}

fn collect_scored(windows: &[WindowSample], pred: &Array2<f64>, y: &Array2<f64>) -> Vec<Scored> {
    let mut out = Vec::with_capacity(pred.len());
    for (i, w) in windows.iter().enumerate() {
        for h in 0..pred.ncols() {
            out.push(Scored { state: w.state, horizon: h, prediction: pred[[i, h]], target: y[[i, h]] });
        }
    }
    out
}

/// Training loop state.
pub struct Trainer<'d> {
    pub data: &'d Dataset,
    pub config: TrainConfig,
    pub split: ResolvedSplit,
    pub model: WorldModel,
    pub prepared: Prepared,
    train_windows: Vec<WindowSample>,
    val_windows: Vec<WindowSample>,
    adam: Adam,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    codebook_rng: ChaCha8Rng,
}

impl<'d> Trainer<'d> {
    pub fn new(data: &'d Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.model.outputs != 1 {
            return Err(Error::Config("only the outcome channel is forecast; outputs must be 1".into()));
        }
        let split = config.split.resolve(data.panel.states(), data.panel.num_months(), config.seed)?;
        let model = WorldModel::for_dataset(config.model.clone(), data, config.seed)?;
        let stats = NormStats::fit(&data.panel, split.train.clone())?;
        let train_states = state_indices(data, &split.train_states)?;
        let masked: Vec<usize> = match split.protocol {
            Protocol::Id => Vec::new(),
            Protocol::Ood => state_indices(data, &split.test_states)?,
        };
        let prepared = Prepared::new(&model, data, stats, &masked)?;
        let (h, f) = (config.model.history, config.model.horizon);
        let train_windows = build_windows(&data.panel, h, f, split.train.clone(), &train_states)?;
        let val_windows = build_eval_windows(&data.panel, h, f, split.val.clone(), &train_states)?;
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(k);
            r
        };
        Ok(Trainer {
            data,
            config: config.clone(),
            split,
            model,
            prepared,
            train_windows,
            val_windows,
            adam: Adam::new(config.adam),
            shuffle_rng: stream(1),
            dropout_rng: stream(2),
            codebook_rng: stream(3),
        })
    }

    pub fn train_windows(&self) -> &[WindowSample] {
        &self.train_windows
    }

    /// One optimisation step on `windows`. Returns `(total loss, vq loss)`.
    pub fn step(&mut self, windows: &[WindowSample]) -> Result<(f64, f64)> {
        let frames = frames(&self.prepared.train_inputs);
        let inputs: Vec<WindowInput> = windows.iter().map(|w| self.prepared.window_input(w)).collect();
        let batch = Batch { graph: &self.data.graph, frames: &frames, policy_sets: &self.prepared.sets, windows: &inputs };
        let y = self.prepared.targets(windows);
        let target = y.into_shape_with_order((windows.len() * self.config.model.horizon, 1)).expect("contiguous");

        let mut fwd = self.model.forward(&batch, Some(&mut self.dropout_rng), None)?;
        let pred_loss = prediction_loss(&mut fwd.tape, fwd.prediction, target)?;
        let loss = total_loss(&mut fwd.tape, pred_loss, fwd.vq_loss, self.config.lambda);
        let loss_value = fwd.tape.scalar(loss);
        let vq_value = fwd.vq_value();
        if !loss_value.is_finite() {
            return Err(Error::Divergence(format!(
                "loss {loss_value} (prediction {}, vq {vq_value}) after {} optimiser steps",
                fwd.tape.scalar(pred_loss),
                self.adam.steps()
            )));
        }
        let mut grads = fwd.tape.backward(loss);
        let mut named: IndexMap<String, Array2<f64>> = IndexMap::new();
        for (name, var) in fwd.binder.bound() {
            if let Some(g) = grads.take(var) {
                named.insert(name.to_string(), g);
            }
        }
        let entities = fwd.entities.map(|e| fwd.tape.value(e).clone());
        let assignments = std::mem::take(&mut fwd.assignments);
        drop(fwd);

        let norm = clip_grad_norm(&mut named, self.config.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("gradient norm {norm} after {} optimiser steps", self.adam.steps())));
        }
        self.adam.step(&mut self.model.params, &named);

        if self.model.config.ablations.uses_codebook() {
            if let Some(e) = entities {
                let cb = &mut self.model.codebook;
                if !cb.initialized {
                    cb.init_from(e.view(), &mut self.codebook_rng);
                } else {
                    cb.ema_update(e.view(), &assignments, Some(&mut self.codebook_rng));
                }
            }
        }
        Ok((loss_value, vq_value))
    }

    /// Validation metrics on the normalised scale.
    pub fn validate(&self) -> Result<Metrics> {
        let scored = score(&self.prepared, &self.model, self.data, true, &self.val_windows)?;
        Ok(compute_metrics(&scored, self.data.panel.states()))
    }

    /// Runs one shuffled epoch and returns `(mean total loss, mean vq loss)` over batches.
    pub fn epoch(&mut self) -> Result<(f64, f64)> {
        let mut order = self.train_windows.clone();
        order.shuffle(&mut self.shuffle_rng);
        let (mut loss, mut vq, mut n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let (l, v) = self.step(chunk)?;
            loss += l;
            vq += v;
            n += 1;
        }
        Ok((loss / n as f64, vq / n as f64))
    }

    /// Trains to completion, calling `on_epoch` after each epoch, and returns the best
    /// validation checkpoint. Ties keep the earliest epoch.
    pub fn run(mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Checkpoint> {
        let mut history = Vec::new();
        let mut best: Option<(f64, usize, WorldModel)> = None;
        let mut since_best = 0;
        for epoch in 1..=self.config.max_epochs {
            let (train_loss, vq_loss) = self.epoch()?;
            let val = self.validate()?;
            if !val.mae.is_finite() {
                return Err(Error::Divergence(format!("validation MAE {} at epoch {epoch}", val.mae)));
            }
            let record = EpochRecord { epoch, train_loss, vq_loss, val_mae: val.mae, val_rmse: val.rmse, lr: self.config.adam.lr };
            log::info!("epoch {epoch}: loss {train_loss:.5} vq {vq_loss:.5} val_mae {:.5}", val.mae);
            on_epoch(&record);
            history.push(record);
            match &best {
                Some((b, _, _)) if val.mae >= *b => {
                    since_best += 1;
                    if since_best >= self.config.patience {
                        break;
                    }
                }
                _ => {
                    best = Some((val.mae, epoch, self.model.clone()));
                    since_best = 0;
                }
            }
        }
        let (_, best_epoch, model) = best.expect("at least one epoch");
        Ok(Checkpoint {
            model,
            norm: self.prepared.stats.clone(),
            config: self.config.clone(),
            split: self.split.clone(),
            states: self.data.panel.states().to_vec(),
            first_month: self.data.panel.first_month(),
            history,
            best_epoch,
        })
    }
}

pub fn train(data: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
    Trainer::new(data, config)?.run(|_| {})
}

/// Test-period metrics on both the normalised and raw-count scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub windows: usize,
    pub normalized: Metrics,
    pub raw: Metrics,
    pub persistence_normalized: Metrics,
    pub persistence_raw: Metrics,
}

/// Last observed outcome repeated over the horizon.
pub fn persistence_forecast(panel: &StatePanel, windows: &[WindowSample]) -> Array2<f64> {
    let horizon = windows.first().map_or(0, |w| w.horizon);
    let oc = panel.outcome_channel();
    Array2::from_shape_fn((windows.len(), horizon), |(i, _)| {
        let w = &windows[i];
        panel.features()[[w.state, w.history_range().end - 1, oc]]
    })
}

fn to_raw(stats: &NormStats, oc: usize, scored: &[Scored]) -> Vec<Scored> {
    scored
        .iter()
        .map(|s| Scored {
            prediction: stats.denormalize_value(s.state, oc, s.prediction),
            target: stats.denormalize_value(s.state, oc, s.target),
            ..*s
        })
        .collect()
}

/// Scores the checkpoint on the test period. ID uses every state; OOD uses the held-out
/// states, which must match the checkpoint's own split.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, protocol: Protocol) -> Result<EvalReport> {
    ckpt.check_compatible(data)?;
    if protocol != ckpt.split.protocol {
        return Err(Error::SplitMismatch(format!(
            "checkpoint was trained with the {:?} protocol, evaluation requested {:?}",
            ckpt.split.protocol, protocol
        )));
    }
    let prepared = Prepared::new(&ckpt.model, data, ckpt.norm.clone(), &[])?;
    let states = state_indices(data, &ckpt.split.test_states)?;
    let cfg = &ckpt.model.config;
    let windows = build_eval_windows(&data.panel, cfg.history, cfg.horizon, ckpt.split.test.clone(), &states)?;
    let scored = score(&prepared, &ckpt.model, data, false, &windows)?;
    let y = prepared.targets(&windows);
    let persistence = collect_scored(&windows, &persistence_forecast(&prepared.panel, &windows), &y);
    let oc = data.panel.outcome_channel();
    let names = data.panel.states();
    Ok(EvalReport {
        protocol,
        windows: windows.len(),
        normalized: compute_metrics(&scored, names),
        raw: compute_metrics(&to_raw(&prepared.stats, oc, &scored), names),
        persistence_normalized: compute_metrics(&persistence, names),
        persistence_raw: compute_metrics(&to_raw(&prepared.stats, oc, &persistence), names),
    })
}
