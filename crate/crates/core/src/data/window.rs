use std::ops::Range;

use ndarray::{s, Array1, ArrayView2};

use super::panel::StatePanel;
use crate::error::{Error, Result};

/// A (state, start month) sliding-window sample. History covers `[t0, t0 + history)`,
/// targets cover the following `horizon` months of the outcome channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowSample {
    pub state: usize,
    pub t0: usize,
    pub history: usize,
    pub horizon: usize,
}

impl WindowSample {
    pub fn history_range(&self) -> Range<usize> {
        self.t0..self.t0 + self.history
    }

    pub fn target_range(&self) -> Range<usize> {
        self.t0 + self.history..self.t0 + self.history + self.horizon
    }

    /// The centre state's history features `(history, channels)`.
    pub fn history_features<'p>(&self, panel: &'p StatePanel) -> ArrayView2<'p, f64> {
        panel.features().view().slice_move(s![self.state, self.history_range(), ..])
    }

    /// The outcome channel over the target months.
    pub fn target(&self, panel: &StatePanel) -> Array1<f64> {
        panel
            .features()
            .slice(s![self.state, self.target_range(), panel.outcome_channel()])
            .to_owned()
    }
}

/// Stride-1 windows lying entirely inside `split` (month indices), for every state in `states`.
pub fn build_windows(
    panel: &StatePanel,
    history: usize,
    horizon: usize,
    split: Range<usize>,
    states: &[usize],
) -> Result<Vec<WindowSample>> {
    if history == 0 || horizon == 0 {
        return Err(Error::Config("history and horizon must be positive".into()));
    }
    if split.end > panel.num_months() {
        return Err(Error::Config(format!("split {split:?} exceeds {} months", panel.num_months())));
    }
    let need = history + horizon;
    if split.len() < need {
        return Err(Error::SplitTooShort { len: split.len(), need });
    }
    let per_state = split.len() - need + 1;
    let mut out = Vec::with_capacity(per_state * states.len());
    for &state in states {
        for k in 0..per_state {
            out.push(WindowSample { state, t0: split.start + k, history, horizon });
        }
    }
    Ok(out)
}

/// Evaluation windows: all target months lie inside `split`, while history may reach back
/// before the split start (never before month 0).
pub fn build_eval_windows(
    panel: &StatePanel,
    history: usize,
    horizon: usize,
    split: Range<usize>,
    states: &[usize],
) -> Result<Vec<WindowSample>> {
    if split.end > panel.num_months() {
        return Err(Error::Config(format!("split {split:?} exceeds {} months", panel.num_months())));
    }
    if split.len() < horizon {
        return Err(Error::SplitTooShort { len: split.len(), need: horizon });
    }
    let first_target = split.start.max(history);
    let mut out = Vec::new();
    for &state in states {
        for target_start in first_target..=split.end - horizon {
            out.push(WindowSample { state, t0: target_start - history, history, horizon });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::month::Month;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn panel(n: usize, t: usize) -> StatePanel {
        let start: Month = "2019-01".parse().unwrap();
        StatePanel::new(
            (0..n).map(|i| format!("S{i}")).collect(),
            (0..t).map(|i| start.offset(i as i64)).collect(),
            vec!["y".into()],
            Array3::from_shape_fn((n, t, 1), |(s, m, _)| (s * 1000 + m) as f64),
            0,
        )
        .unwrap()
    }

    #[test]
    fn training_span_yields_37_per_state() {
        let p = panel(2, 72);
        let w = build_windows(&p, 6, 6, 0..48, &[0, 1]).unwrap();
        assert_eq!(w.len(), 2 * 37);
        assert!(w.iter().all(|w| w.target_range().end <= 48));
    }

    #[test]
    fn boundary_and_too_short() {
        let p = panel(1, 24);
        assert_eq!(build_windows(&p, 6, 6, 0..12, &[0]).unwrap().len(), 1);
        assert!(matches!(
            build_windows(&p, 6, 6, 0..11, &[0]),
            Err(Error::SplitTooShort { len: 11, need: 12 })
        ));
    }

    #[test]
    fn window_contents() {
        let p = panel(2, 20);
        let w = build_windows(&p, 3, 2, 5..20, &[1]).unwrap()[0];
        assert_eq!(w.history_features(&p).column(0).to_vec(), vec![1005.0, 1006.0, 1007.0]);
        assert_eq!(w.target(&p).to_vec(), vec![1008.0, 1009.0]);
    }

    #[test]
    fn eval_windows_keep_targets_inside_split() {
        let p = panel(1, 72);
        let w = build_eval_windows(&p, 6, 6, 48..60, &[0]).unwrap();
        assert_eq!(w.len(), 7);
        assert_eq!(w[0].t0, 42);
        assert!(w.iter().all(|w| w.target_range().start >= 48 && w.target_range().end <= 60));
    }

    proptest! {
        #[test]
        fn count_law(t in 1usize..80, th in 1usize..12, tf in 1usize..12) {
            let p = panel(1, 80);
            match build_windows(&p, th, tf, 0..t, &[0]) {
                Ok(w) => prop_assert_eq!(w.len(), t - th - tf + 1),
                Err(Error::SplitTooShort { .. }) => prop_assert!(t < th + tf),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
