use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::data::{Dataset, NormStats, StatePanel, WindowSample};
use crate::error::Result;
use crate::model::{Batch, PolicySetInput, TokenInput, WindowInput, WorldModel};
use crate::month::Month;

/// Origin of absolute token positions.
pub fn position_origin() -> Month {
    Month::new(2019, 1).expect("valid month")
}

/// Windows are scored in chunks of this many during evaluation.
pub const EVAL_CHUNK: usize = 64;

/// Model input features from normalised levels `(states, months, channels)`: the levels
/// themselves, or month-over-month changes with zeros in the first month.
pub fn model_inputs(levels: &Array3<f64>, difference: bool) -> Array3<f64> {
    if !difference {
        return levels.clone();
    }
    let mut out = Array3::zeros(levels.dim());
    for t in 1..levels.dim().1 {
        let d = &levels.index_axis(Axis(1), t) - &levels.index_axis(Axis(1), t - 1);
        out.index_axis_mut(Axis(1), t).assign(&d);
    }
    out
}

/// One `(states, channels)` view per month.
pub fn frames(inputs: &Array3<f64>) -> Vec<ArrayView2<'_, f64>> {
    (0..inputs.dim().1).map(|t| inputs.index_axis(Axis(1), t)).collect()
}

/// Normalised panels, model inputs and the interned table of active policy sets for
/// every (state, month).
#[derive(Debug, Clone)]
pub struct Prepared {
    pub stats: NormStats,
    /// Normalised levels with every state visible.
    pub panel: StatePanel,
    pub inputs: Array3<f64>,
    /// Inputs seen during training: held-out states sit at their training mean.
    pub train_inputs: Array3<f64>,
    pub sets: Vec<PolicySetInput>,
    pub set_ids: Vec<Vec<String>>,
    set_lookup: BTreeMap<Vec<String>, usize>,
    set_index: Array2<usize>,
}

impl Prepared {
    pub fn new(model: &WorldModel, data: &Dataset, stats: NormStats, masked_states: &[usize]) -> Result<Self> {
        let (panel, stats) = crate::data::normalize(&data.panel, Some(&stats), None)?;
        let difference = model.config.difference_inputs;
        let inputs = model_inputs(panel.features(), difference);
        let mut masked = panel.features().clone();
        for &st in masked_states {
            masked.slice_mut(s![st, .., ..]).fill(0.0);
        }
        let train_inputs = model_inputs(&masked, difference);
        let mut prepared = Prepared {
            stats,
            panel,
            inputs,
            train_inputs,
            sets: Vec::new(),
            set_ids: Vec::new(),
            set_lookup: BTreeMap::new(),
            set_index: Array2::zeros((data.panel.num_states(), data.panel.num_months())),
        };
        prepared.intern(model, data, Vec::new())?;
        for (si, state) in data.panel.states().iter().enumerate() {
            for (ti, &month) in data.panel.months().iter().enumerate() {
                let ids = data.corpus.active_ids(state, month);
                prepared.set_index[[si, ti]] = prepared.intern(model, data, ids)?;
            }
        }
        Ok(prepared)
    }

    /// Index of the policy set `ids` (sorted, deduplicated), preparing it on first use.
    pub fn intern(&mut self, model: &WorldModel, data: &Dataset, mut ids: Vec<String>) -> Result<usize> {
        ids.sort();
        ids.dedup();
        if let Some(&i) = self.set_lookup.get(&ids) {
            return Ok(i);
        }
        let set = model.prepare_policy_set(&ids, &data.corpus, &data.entities)?;
        let i = self.sets.len();
        self.sets.push(set);
        self.set_ids.push(ids.clone());
        self.set_lookup.insert(ids, i);
        Ok(i)
    }

    /// Index of an already interned policy set with exactly these ids (sorted, deduplicated).
    pub fn find(&self, ids: &[String]) -> Option<usize> {
        self.set_lookup.get(ids).copied()
    }

    /// Index of the empty policy set.
    pub fn empty_set(&self) -> usize {
        0
    }

    pub fn set_at(&self, state: usize, month: usize) -> usize {
        self.set_index[[state, month]]
    }

    /// Normalised outcome of `state` at month index `t`.
    pub fn outcome(&self, state: usize, t: usize) -> f64 {
        self.panel.features()[[state, t, self.panel.outcome_channel()]]
    }

    pub fn window_input(&self, w: &WindowSample) -> WindowInput {
        let origin = position_origin();
        WindowInput {
            state: w.state,
            tokens: w
                .history_range()
                .map(|t| TokenInput {
                    frame: t,
                    position: self.panel.months()[t].since(origin),
                    policy_set: self.set_at(w.state, t),
                })
                .collect(),
            anchor: self.outcome(w.state, w.history_range().end - 1),
        }
    }

    /// Normalised outcome targets, one row per window.
    pub fn targets(&self, windows: &[WindowSample]) -> Array2<f64> {
        let horizon = windows.first().map_or(0, |w| w.horizon);
        let mut y = Array2::zeros((windows.len(), horizon));
        for (i, w) in windows.iter().enumerate() {
            y.row_mut(i).assign(&w.target(&self.panel));
        }
        y
    }

    /// Model outputs in evaluation mode, one row of `horizon` values per window. `masked`
    /// selects the training view of the inputs.
    pub fn predict(&self, model: &WorldModel, data: &Dataset, masked: bool, windows: &[WindowSample]) -> Result<Array2<f64>> {
        let inputs: Vec<WindowInput> = windows.iter().map(|w| self.window_input(w)).collect();
        let source = if masked { &self.train_inputs } else { &self.inputs };
        predict_inputs(model, data, &frames(source), &self.sets, &inputs)
    }
}

/// Evaluation-mode forward over arbitrary frames and windows, in chunks of [`EVAL_CHUNK`].
pub fn predict_inputs(
    model: &WorldModel,
    data: &Dataset,
    frames: &[ArrayView2<f64>],
    sets: &[PolicySetInput],
    windows: &[WindowInput],
) -> Result<Array2<f64>> {
    let horizon = model.config.horizon;
    let mut out = Array2::zeros((windows.len(), horizon));
    for (c, chunk) in windows.chunks(EVAL_CHUNK).enumerate() {
        let batch = Batch { graph: &data.graph, frames, policy_sets: sets, windows: chunk };
        let fwd = model.forward(&batch, None, None)?;
        let pred = fwd.predictions();
        for i in 0..chunk.len() {
            for h in 0..horizon {
                out[[c * EVAL_CHUNK + i, h]] = pred[[i * horizon + h, 0]];
            }
        }
    }
    Ok(out)
}
