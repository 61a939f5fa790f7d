use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One scored forecast value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub state: usize,
    /// Zero-based horizon offset.
    pub horizon: usize,
    pub prediction: f64,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SliceMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    #[serde(rename = "mae_1_3")]
    pub mae_1_3: f64,
    #[serde(rename = "rmse_1_3")]
    pub rmse_1_3: f64,
    #[serde(rename = "mae_4_6")]
    pub mae_4_6: f64,
    #[serde(rename = "rmse_4_6")]
    pub rmse_4_6: f64,
    pub count: usize,
    pub per_state: BTreeMap<String, SliceMetrics>,
}

#[derive(Default)]
struct Acc {
    abs: f64,
    sq: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, err: f64) {
        self.abs += err.abs();
        self.sq += err * err;
        self.n += 1;
    }

    fn finish(&self) -> SliceMetrics {
        if self.n == 0 {
            return SliceMetrics::default();
        }
        let n = self.n as f64;
        let mae = self.abs / n;
        let rmse = (self.sq / n).sqrt().max(mae);
        SliceMetrics { mae, rmse, count: self.n }
    }
}

/// Averages over every (state, window, horizon) triple. Horizons 1–3 are offsets 0..3
/// and horizons 4–6 are offsets 3..6; an empty slice reports zeros.
pub fn compute_metrics(scored: &[Scored], state_names: &[String]) -> Metrics {
    let mut all = Acc::default();
    let mut early = Acc::default();
    let mut late = Acc::default();
    let mut per_state: BTreeMap<usize, Acc> = BTreeMap::new();
    for s in scored {
        let err = s.prediction - s.target;
        all.push(err);
        match s.horizon {
            0..=2 => early.push(err),
            3..=5 => late.push(err),
            _ => {}
        }
        per_state.entry(s.state).or_default().push(err);
    }
    let (a, e, l) = (all.finish(), early.finish(), late.finish());
    Metrics {
        mae: a.mae,
        rmse: a.rmse,
        mae_1_3: e.mae,
        rmse_1_3: e.rmse,
        mae_4_6: l.mae,
        rmse_4_6: l.rmse,
        count: a.count,
        per_state: per_state
            .into_iter()
            .map(|(k, acc)| (state_names.get(k).cloned().unwrap_or_else(|| k.to_string()), acc.finish()))
            .collect(),
    }
}
