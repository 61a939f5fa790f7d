//! The trained model as a simulator: forecasts, counterfactual policy edits and search over
//! policy schedules.
//!
//! Multi-period rollouts feed each period's predicted outcomes back as the next window's
//! outcome channel. Every other feature, of the scenario state and of all other states, is
//! held at its value in the last observed history month.

mod scenario;
pub mod search;

use std::borrow::Cow;

use ndarray::{s, Array1, Array3, Axis};
use serde::{Deserialize, Serialize};

pub use scenario::{Activation, EditKind, FeaturePatch, PolicyEdit, Scenario, Timeline};
pub use search::{Plan, SearchConfig, SearchNode, SearchTree, TreeDump};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{PolicySetInput, TokenInput, WindowInput};
use crate::month::Month;
use crate::train::{frames, model_inputs, position_origin, predict_inputs, Checkpoint, Prepared};

/// One forecast month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub month: Month,
    pub normalized: f64,
    /// Outcome on the raw count scale.
    pub count: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory(pub Vec<TrajectoryPoint>);

impl Trajectory {
    /// Sum of raw counts, left to right.
    pub fn total(&self) -> f64 {
        self.0.iter().map(|p| p.count).sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub factual: Trajectory,
    pub counterfactual: Trajectory,
    /// Raw-scale cumulative difference, counterfactual minus factual.
    pub delta: f64,
}

/// A scenario bound to the dataset: state and window located, edits applied, feature
/// patches folded into the normalised panel.
#[derive(Debug, Clone)]
pub struct Resolved<'s> {
    pub state: usize,
    /// Month index of the first history month.
    pub start: usize,
    pub timeline: Timeline,
    levels: Cow<'s, Array3<f64>>,
    inputs: Cow<'s, Array3<f64>>,
}

/// A checkpoint, its dataset and the prepared inputs, immutable once built.
#[derive(Debug, Clone)]
pub struct Simulator {
    checkpoint: Checkpoint,
    data: Dataset,
    prepared: Prepared,
}

impl Simulator {
    pub fn new(checkpoint: Checkpoint, data: Dataset) -> Result<Self> {
        checkpoint.check_compatible(&data)?;
        let prepared = Prepared::new(&checkpoint.model, &data, checkpoint.norm.clone(), &[])?;
        Ok(Simulator { checkpoint, data, prepared })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn prepared(&self) -> &Prepared {
        &self.prepared
    }

    pub fn history(&self) -> usize {
        self.checkpoint.model.config.history
    }

    pub fn horizon(&self) -> usize {
        self.checkpoint.model.config.horizon
    }

    fn month(&self, t: usize) -> Month {
        self.data.panel.first_month().offset(t as i64)
    }

    pub fn resolve<'s>(&'s self, scenario: &Scenario) -> Result<Resolved<'s>> {
        let panel = &self.data.panel;
        let state = panel.state_index(&scenario.state)?;
        let h = self.history();
        let start = panel.month_index(scenario.window_start).ok_or_else(|| {
            Error::WindowOutOfRange(format!(
                "window start {} is outside {} to {}",
                scenario.window_start,
                panel.first_month(),
                panel.last_month()
            ))
        })?;
        if start + h > panel.num_months() {
            return Err(Error::WindowOutOfRange(format!(
                "a {h}-month window from {} runs past {}",
                scenario.window_start,
                panel.last_month()
            )));
        }
        let (first, last) = (self.month(start), self.month(start + h - 1));
        let mut timeline = Timeline::factual(&self.data.corpus, &scenario.state);
        for edit in &scenario.edits {
            timeline.apply(edit, &self.data.corpus, first, last)?;
        }

        let normalized = self.prepared.panel.features();
        if scenario.overrides.is_empty() {
            return Ok(Resolved {
                state,
                start,
                timeline,
                levels: Cow::Borrowed(normalized),
                inputs: Cow::Borrowed(&self.prepared.inputs),
            });
        }
        let mut levels = normalized.clone();
        for patch in &scenario.overrides {
            let ch = panel
                .channels()
                .iter()
                .position(|c| *c == patch.channel)
                .ok_or_else(|| Error::Value(format!("unknown channel {}", patch.channel)))?;
            if patch.month < first || patch.month > last {
                return Err(Error::Value(format!("override month {} is outside the window", patch.month)));
            }
            if !patch.value.is_finite() {
                return Err(Error::Value(format!("override value for {} is not finite", patch.channel)));
            }
            let t = start + patch.month.since(first) as usize;
            levels[[state, t, ch]] = self.checkpoint.norm.normalize_value(state, ch, patch.value);
        }
        let inputs = model_inputs(&levels, self.checkpoint.model.config.difference_inputs);
        Ok(Resolved { state, start, timeline, levels: Cow::Owned(levels), inputs: Cow::Owned(inputs) })
    }

    fn policy_set(&self, ids: &[String]) -> Result<PolicySetInput> {
        match self.prepared.find(ids) {
            Some(i) => Ok(self.prepared.sets[i].clone()),
            None => self.checkpoint.model.prepare_policy_set(ids, &self.data.corpus, &self.data.entities),
        }
    }

    /// Normalised forecasts for the window of `state` starting at month index `start`, over
    /// panels `levels` and `inputs` that may extend past the dataset.
    fn predict(
        &self,
        levels: &Array3<f64>,
        inputs: &Array3<f64>,
        state: usize,
        start: usize,
        timeline: &Timeline,
    ) -> Result<Array1<f64>> {
        let h = self.history();
        let origin = position_origin();
        let mut sets: Vec<PolicySetInput> = Vec::new();
        let mut seen: Vec<Vec<String>> = Vec::new();
        let mut tokens = Vec::with_capacity(h);
        for t in start..start + h {
            let month = self.month(t);
            let ids = timeline.active_at(month);
            let local = match seen.iter().position(|s| *s == ids) {
                Some(i) => i,
                None => {
                    sets.push(self.policy_set(&ids)?);
                    seen.push(ids);
                    seen.len() - 1
                }
            };
            tokens.push(TokenInput { frame: t, position: month.since(origin), policy_set: local });
        }
        let anchor = levels[[state, start + h - 1, self.data.panel.outcome_channel()]];
        let window = WindowInput { state, tokens, anchor };
        let out = predict_inputs(&self.checkpoint.model, &self.data, &frames(inputs), &sets, &[window])?;
        Ok(out.row(0).to_owned())
    }

    fn points(&self, state: usize, first: usize, normalized: &Array1<f64>) -> Vec<TrajectoryPoint> {
        let oc = self.data.panel.outcome_channel();
        normalized
            .iter()
            .enumerate()
            .map(|(k, &z)| TrajectoryPoint {
                month: self.month(first + k),
                normalized: z,
                count: self.checkpoint.norm.denormalize_value(state, oc, z),
            })
            .collect()
    }

    pub fn forecast(&self, scenario: &Scenario) -> Result<Trajectory> {
        let r = self.resolve(scenario)?;
        self.forecast_resolved(&r)
    }

    pub fn forecast_resolved(&self, r: &Resolved) -> Result<Trajectory> {
        let z = self.predict(&r.levels, &r.inputs, r.state, r.start, &r.timeline)?;
        Ok(Trajectory(self.points(r.state, r.start + self.history(), &z)))
    }

    /// Forecasts the scenario with and without `edit`.
    pub fn counterfactual(&self, scenario: &Scenario, edit: &PolicyEdit) -> Result<Counterfactual> {
        let r = self.resolve(scenario)?;
        let factual = self.forecast_resolved(&r)?;
        let mut edited = r.clone();
        let first = self.month(r.start);
        let last = self.month(r.start + self.history() - 1);
        edited.timeline.apply(edit, &self.data.corpus, first, last)?;
        let counterfactual = self.forecast_resolved(&edited)?;
        let delta = counterfactual.total() - factual.total();
        Ok(Counterfactual { factual, counterfactual, delta })
    }

    /// Runs `schedule.len()` decision periods. In period `d` the policies in `schedule[d]`
    /// are enacted in the last month of that period's window and stay in force; the window
    /// then moves forward by the horizon.
    pub fn rollout(&self, r: &Resolved, schedule: &[Vec<String>]) -> Result<Trajectory> {
        let (h, f) = (self.history(), self.horizon());
        let oc = self.data.panel.outcome_channel();
        let observed_end = r.start + h;
        let len = observed_end + schedule.len().saturating_sub(1) * f;
        let (n, _, c) = r.levels.dim();
        let mut levels = Array3::zeros((n, len, c));
        levels.slice_mut(s![.., ..observed_end, ..]).assign(&r.levels.slice(s![.., ..observed_end, ..]));
        let frozen = r.levels.index_axis(Axis(1), observed_end - 1).to_owned();
        for t in observed_end..len {
            levels.index_axis_mut(Axis(1), t).assign(&frozen);
        }
        let difference = self.checkpoint.model.config.difference_inputs;
        let mut inputs = if len == r.inputs.dim().1 {
            r.inputs.clone().into_owned()
        } else {
            let mut inputs = Array3::zeros((n, len, c));
            inputs.slice_mut(s![.., ..observed_end, ..]).assign(&r.inputs.slice(s![.., ..observed_end, ..]));
            inputs
        };
        let mut timeline = r.timeline.clone();
        let mut points = Vec::with_capacity(schedule.len() * f);
        for (d, action) in schedule.iter().enumerate() {
            let start = r.start + d * f;
            let decision = self.month(start + h - 1);
            for id in action {
                self.data.corpus.get(id)?;
                timeline.enact(id, decision);
            }
            let z = self.predict(&levels, &inputs, r.state, start, &timeline)?;
            points.extend(self.points(r.state, start + h, &z));
            for (k, &v) in z.iter().enumerate() {
                let t = start + h + k;
                if t < len {
                    levels[[r.state, t, oc]] = v;
                }
            }
            for t in (start + h).min(len)..(start + h + f + 1).min(len) {
                let row = if difference {
                    &levels.slice(s![r.state, t, ..]) - &levels.slice(s![r.state, t - 1, ..])
                } else {
                    levels.slice(s![r.state, t, ..]).to_owned()
                };
                inputs.slice_mut(s![r.state, t, ..]).assign(&row);
            }
        }
        Ok(Trajectory(points))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_total_sums_counts() {
        let m: Month = "2020-01".parse().unwrap();
        let t = Trajectory(vec![
            TrajectoryPoint { month: m, normalized: 0.0, count: 1.5 },
            TrajectoryPoint { month: m.offset(1), normalized: 0.0, count: 2.25 },
        ]);
        assert_eq!(t.total(), 3.75);
        assert_eq!(serde_json::to_string(&t).unwrap(), r#"[{"month":"2020-01","normalized":0.0,"count":1.5},{"month":"2020-02","normalized":0.0,"count":2.25}]"#);
    }
}
