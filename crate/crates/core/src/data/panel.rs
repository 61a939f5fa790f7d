use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::month::Month;

/// Column order of `states.csv` after the `state,month` key columns.
pub const CHANNELS: [&str; 12] = [
    "overdose_deaths",
    "unemployment_rate",
    "labor_force_participation",
    "ui_claims",
    "age_0_18",
    "age_18_55",
    "age_55_plus",
    "race_white",
    "race_black",
    "race_asian",
    "race_ai",
    "drug_crime",
];

pub const OUTCOME_CHANNEL: usize = 0;

/// Channels reported as percentages; every other reference channel is a count.
const PERCENT_CHANNELS: [usize; 2] = [1, 2];

/// Feature groups that can be dropped for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Economic,
    Demographic,
    Crime,
}

impl FeatureGroup {
    pub fn channels(self) -> &'static [usize] {
        match self {
            FeatureGroup::Economic => &[1, 2, 3],
            FeatureGroup::Demographic => &[4, 5, 6, 7, 8, 9, 10],
            FeatureGroup::Crime => &[11],
        }
    }
}

/// Monthly per-state feature tensor `(states, months, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePanel {
    states: Vec<String>,
    months: Vec<Month>,
    channels: Vec<String>,
    features: Array3<f64>,
    outcome_channel: usize,
}

impl StatePanel {
    /// Builds a panel, sorting states lexicographically and checking the month grid.
    pub fn new(
        states: Vec<String>,
        months: Vec<Month>,
        channels: Vec<String>,
        features: Array3<f64>,
        outcome_channel: usize,
    ) -> Result<Self> {
        let (n, t, c) = features.dim();
        if n != states.len() || t != months.len() || c != channels.len() {
            return Err(Error::Shape(format!(
                "features {:?} vs {} states, {} months, {} channels",
                features.dim(),
                states.len(),
                months.len(),
                channels.len()
            )));
        }
        if outcome_channel >= c {
            return Err(Error::Schema(format!("outcome channel {outcome_channel} >= {c}")));
        }
        for w in months.windows(2) {
            if w[1] != w[0].offset(1) {
                return Err(Error::MissingMonth {
                    state: "*".into(),
                    month: w[0].offset(1).to_string(),
                });
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite feature value".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| states[a].cmp(&states[b]));
        for w in order.windows(2) {
            if states[w[0]] == states[w[1]] {
                return Err(Error::Schema(format!("duplicate state {}", states[w[0]])));
            }
        }
        let features = features.select(ndarray::Axis(0), &order);
        let states = order.iter().map(|&i| states[i].clone()).collect();
        Ok(StatePanel { states, months, channels, features, outcome_channel })
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn months(&self) -> &[Month] {
        &self.months
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn features(&self) -> &Array3<f64> {
        &self.features
    }

    pub fn outcome_channel(&self) -> usize {
        self.outcome_channel
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_months(&self) -> usize {
        self.months.len()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn state_index(&self, state: &str) -> Result<usize> {
        self.states
            .binary_search_by(|s| s.as_str().cmp(state))
            .map_err(|_| Error::UnknownState(state.to_string()))
    }

    /// Index of `month` in the panel grid, if covered.
    pub fn month_index(&self, month: Month) -> Option<usize> {
        let first = *self.months.first()?;
        let i = month.since(first);
        (i >= 0 && (i as usize) < self.months.len()).then_some(i as usize)
    }

    pub fn first_month(&self) -> Month {
        self.months[0]
    }

    pub fn last_month(&self) -> Month {
        *self.months.last().expect("panel has months")
    }

    /// All states' features at month index `t`, shape `(states, channels)`.
    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.features.index_axis(ndarray::Axis(1), t)
    }

    /// One state's series, shape `(months, channels)`.
    pub fn series(&self, state: usize) -> ArrayView2<'_, f64> {
        self.features.index_axis(ndarray::Axis(0), state)
    }

    pub fn with_features(&self, features: Array3<f64>) -> StatePanel {
        StatePanel { features, ..self.clone() }
    }

    /// Writes the panel in `states.csv` layout. Only valid for the reference channel set.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["state".to_string(), "month".to_string()];
        header.extend(self.channels.iter().cloned());
        w.write_record(&header)?;
        for (s, state) in self.states.iter().enumerate() {
            for (t, month) in self.months.iter().enumerate() {
                let mut row = vec![state.clone(), month.to_string()];
                row.extend((0..self.num_channels()).map(|c| self.features[[s, t, c]].to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads `states.csv`, enforcing the reference header and a gap-free month grid per state.
pub fn load_state_panel(path: &Path) -> Result<StatePanel> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected: Vec<&str> = ["state", "month"].into_iter().chain(CHANNELS).collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Schema(format!(
            "expected columns {}, found {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut rows: BTreeMap<String, BTreeMap<Month, [f64; 12]>> = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != expected.len() {
            return Err(Error::Schema(format!("row {} has {} fields", line + 2, record.len())));
        }
        let state = record[0].to_string();
        if state.is_empty() {
            return Err(Error::Schema(format!("row {} has an empty state id", line + 2)));
        }
        let month: Month = record[1].parse()?;
        let mut values = [0.0; 12];
        for (c, v) in values.iter_mut().enumerate() {
            let raw = &record[c + 2];
            *v = raw.parse::<f64>().map_err(|_| {
                Error::Value(format!("row {}: {} = {raw:?} is not a number", line + 2, CHANNELS[c]))
            })?;
            if !v.is_finite() {
                return Err(Error::Value(format!("row {}: {} is not finite", line + 2, CHANNELS[c])));
            }
            if *v < 0.0 && !PERCENT_CHANNELS.contains(&c) {
                return Err(Error::Value(format!(
                    "row {}: negative count {} = {v}",
                    line + 2,
                    CHANNELS[c]
                )));
            }
        }
        if rows.entry(state.clone()).or_default().insert(month, values).is_some() {
            return Err(Error::Schema(format!("duplicate row for {state} {month}")));
        }
    }
    if rows.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }

    let first = rows.values().filter_map(|m| m.keys().next()).min().copied().expect("non-empty");
    let last = rows.values().filter_map(|m| m.keys().last()).max().copied().expect("non-empty");
    let months: Vec<Month> = (0..=last.since(first)).map(|i| first.offset(i)).collect();

    let mut features = Array3::zeros((rows.len(), months.len(), CHANNELS.len()));
    for (s, (state, series)) in rows.iter().enumerate() {
        for (t, month) in months.iter().enumerate() {
            let values = series.get(month).ok_or_else(|| Error::MissingMonth {
                state: state.clone(),
                month: month.to_string(),
            })?;
            for (c, v) in values.iter().enumerate() {
                features[[s, t, c]] = *v;
            }
        }
    }
    StatePanel::new(
        rows.into_keys().collect(),
        months,
        CHANNELS.iter().map(|s| s.to_string()).collect(),
        features,
        OUTCOME_CHANNEL,
    )
}
