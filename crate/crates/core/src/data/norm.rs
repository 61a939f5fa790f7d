use std::ops::Range;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::panel::StatePanel;
use crate::error::{Error, Result};

/// Per-(state, channel) z-score statistics fitted on training months.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
    /// `(state, channel)` pairs whose training variance was zero; their std is 1.
    pub degenerate: Vec<(usize, usize)>,
}

impl NormStats {
    /// Fits statistics over months `train` (indices into the panel grid).
    pub fn fit(panel: &StatePanel, train: Range<usize>) -> Result<Self> {
        if train.is_empty() || train.end > panel.num_months() {
            return Err(Error::Config(format!(
                "training range {train:?} invalid for {} months",
                panel.num_months()
            )));
        }
        let (n, _, c) = panel.features().dim();
        let len = train.len() as f64;
        let mut mean = Array2::zeros((n, c));
        let mut std = Array2::ones((n, c));
        let mut degenerate = Vec::new();
        for s in 0..n {
            for ch in 0..c {
                let xs = (train.start..train.end).map(|t| panel.features()[[s, t, ch]]);
                let mu = xs.clone().sum::<f64>() / len;
                let var = xs.map(|x| (x - mu) * (x - mu)).sum::<f64>() / len;
                mean[[s, ch]] = mu;
                if var > 0.0 {
                    std[[s, ch]] = var.sqrt();
                } else {
                    degenerate.push((s, ch));
                }
            }
        }
        if !degenerate.is_empty() {
            log::debug!("{} (state, channel) pairs have zero training variance", degenerate.len());
        }
        Ok(NormStats { mean, std, degenerate })
    }

    pub fn is_degenerate(&self, state: usize, channel: usize) -> bool {
        self.degenerate.contains(&(state, channel))
    }

    pub fn normalize_value(&self, state: usize, channel: usize, raw: f64) -> f64 {
        (raw - self.mean[[state, channel]]) / self.std[[state, channel]]
    }

    pub fn denormalize_value(&self, state: usize, channel: usize, z: f64) -> f64 {
        z * self.std[[state, channel]] + self.mean[[state, channel]]
    }

    fn check(&self, panel: &StatePanel) -> Result<()> {
        let (n, _, c) = panel.features().dim();
        if self.mean.dim() != (n, c) || self.std.dim() != (n, c) {
            return Err(Error::Shape(format!(
                "stats {:?} do not match panel ({n}, {c})",
                self.mean.dim()
            )));
        }
        Ok(())
    }

    /// Inverse of [`normalize`] on a whole panel.
    pub fn denormalize(&self, panel: &StatePanel) -> Result<StatePanel> {
        self.check(panel)?;
        let mut out = panel.features().clone();
        for ((s, _, ch), v) in out.indexed_iter_mut() {
            *v = self.denormalize_value(s, ch, *v);
        }
        Ok(panel.with_features(out))
    }
}

/// Z-scores the panel with `stats`, or fits them on `train` months first.
pub fn normalize(
    panel: &StatePanel,
    stats: Option<&NormStats>,
    train: Option<Range<usize>>,
) -> Result<(StatePanel, NormStats)> {
    let stats = match (stats, train) {
        (Some(s), _) => s.clone(),
        (None, Some(range)) => NormStats::fit(panel, range)?,
        (None, None) => return Err(Error::Config("normalize needs stats or a training range".into())),
    };
    stats.check(panel)?;
    let mut out: Array3<f64> = panel.features().clone();
    for ((s, _, ch), v) in out.indexed_iter_mut() {
        *v = stats.normalize_value(s, ch, *v);
    }
    Ok((panel.with_features(out), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::month::Month;
    use proptest::prelude::*;

    fn panel_from(values: Array3<f64>) -> StatePanel {
        let (n, t, c) = values.dim();
        let start: Month = "2019-01".parse().unwrap();
        StatePanel::new(
            (0..n).map(|i| format!("S{i:02}")).collect(),
            (0..t).map(|i| start.offset(i as i64)).collect(),
            (0..c).map(|i| format!("c{i}")).collect(),
            values,
            0,
        )
        .unwrap()
    }

    #[test]
    fn zscore_uses_training_months_only() {
        // training values 8, 12 -> mean 10, std 2; later value 14 -> 2.0
        let mut v = Array3::zeros((1, 3, 2));
        v[[0, 0, 0]] = 8.0;
        v[[0, 1, 0]] = 12.0;
        v[[0, 2, 0]] = 14.0;
        for t in 0..3 {
            v[[0, t, 1]] = 5.0;
        }
        let (norm, stats) = normalize(&panel_from(v), None, Some(0..2)).unwrap();
        assert_eq!(stats.mean[[0, 0]], 10.0);
        assert_eq!(stats.std[[0, 0]], 2.0);
        assert_eq!(norm.features()[[0, 2, 0]], 2.0);
        // constant channel: flagged, std forced to 1, all zeros
        assert!(stats.is_degenerate(0, 1));
        assert_eq!(stats.std[[0, 1]], 1.0);
        assert!((0..3).all(|t| norm.features()[[0, t, 1]] == 0.0));
    }

    #[test]
    fn needs_stats_or_range() {
        let p = panel_from(Array3::zeros((1, 2, 1)));
        assert!(matches!(normalize(&p, None, None), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn round_trip_identity(seed in 0u64..1000, n in 1usize..4, t in 2usize..10, c in 1usize..4) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v = Array3::from_shape_fn((n, t, c), |_| rng.random_range(-1e4..1e4));
            let panel = panel_from(v);
            let (norm, stats) = normalize(&panel, None, Some(0..t)).unwrap();
            let back = stats.denormalize(&norm).unwrap();
            let max_err = back.features().iter().zip(panel.features().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            prop_assert!(max_err < 1e-9, "max abs error {max_err}");
        }
    }
}
