use serde::{Deserialize, Serialize};

use crate::data::PolicyCorpus;
use crate::error::{Error, Result};
use crate::month::Month;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EditKind {
    Replace,
    Remove,
    Advance,
}

/// One edit of a state's policy timeline.
///
/// `month` is the month from which a REPLACE or REMOVE takes effect and defaults to the
/// policy's enactment month. For ADVANCE it may be given as the current enactment month,
/// as a consistency check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEdit {
    pub kind: EditKind,
    pub policy_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub month: Option<Month>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u32>,
}

impl PolicyEdit {
    pub fn replace(policy_id: &str, month: Option<Month>, replacement: &str) -> Self {
        PolicyEdit {
            kind: EditKind::Replace,
            policy_id: policy_id.into(),
            month,
            replacement: Some(replacement.into()),
            offset: None,
        }
    }

    pub fn remove(policy_id: &str, month: Option<Month>) -> Self {
        PolicyEdit { kind: EditKind::Remove, policy_id: policy_id.into(), month, replacement: None, offset: None }
    }

    pub fn advance(policy_id: &str, offset: u32) -> Self {
        PolicyEdit { kind: EditKind::Advance, policy_id: policy_id.into(), month: None, replacement: None, offset: Some(offset) }
    }
}

/// Raw-scale replacement of one feature of the scenario state in one history month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturePatch {
    pub month: Month,
    pub channel: String,
    pub value: f64,
}

/// A forecasting question: one state, one history window, and optional edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub state: String,
    /// First month of the history window.
    pub window_start: Month,
    #[serde(default)]
    pub edits: Vec<PolicyEdit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<FeaturePatch>,
}

impl Scenario {
    pub fn new(state: &str, window_start: Month) -> Self {
        Scenario { state: state.into(), window_start, edits: Vec::new(), pool: None, overrides: Vec::new() }
    }

    pub fn with_edit(mut self, edit: PolicyEdit) -> Self {
        self.edits.push(edit);
        self
    }
}

/// A policy in force from `start` until just before `end`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activation {
    pub policy_id: String,
    pub start: Month,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<Month>,
}

impl Activation {
    pub fn active_at(&self, month: Month) -> bool {
        self.start <= month && self.end.is_none_or(|e| month < e)
    }
}

/// The policy history of one state.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timeline {
    activations: Vec<Activation>,
}

impl Timeline {
    /// The recorded history of `state`.
    pub fn factual(corpus: &PolicyCorpus, state: &str) -> Self {
        let activations = corpus
            .for_state(state)
            .map(|r| Activation { policy_id: r.policy_id.clone(), start: r.enacted_month, end: r.repealed_month })
            .collect();
        Timeline { activations }
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    /// Sorted, deduplicated ids of the policies in force at `month`.
    pub fn active_at(&self, month: Month) -> Vec<String> {
        let mut ids: Vec<String> =
            self.activations.iter().filter(|a| a.active_at(month)).map(|a| a.policy_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Adds `policy_id` in force from `month` on.
    pub fn enact(&mut self, policy_id: &str, month: Month) {
        self.activations.push(Activation { policy_id: policy_id.into(), start: month, end: None });
    }

    fn find(&self, policy_id: &str) -> Result<usize> {
        self.activations
            .iter()
            .position(|a| a.policy_id == policy_id)
            .ok_or_else(|| Error::InvalidEdit(format!("policy {policy_id} is not in the state's timeline")))
    }

    /// Applies `edit` for a history window covering months `[first, last]`. The months whose
    /// policy set changes must overlap the window.
    pub fn apply(&mut self, edit: &PolicyEdit, corpus: &PolicyCorpus, first: Month, last: Month) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidEdit(m));
        let i = self.find(&edit.policy_id)?;
        let target = self.activations[i].clone();
        match edit.kind {
            EditKind::Replace | EditKind::Remove => {
                if edit.offset.is_some() {
                    return invalid(format!("{:?} takes no offset", edit.kind));
                }
                let at = edit.month.unwrap_or(target.start);
                if !target.active_at(at) {
                    return invalid(format!("policy {} is not in force at {at}", edit.policy_id));
                }
                let replacement = match (edit.kind, &edit.replacement) {
                    (EditKind::Replace, Some(r)) => {
                        corpus.get(r)?;
                        Some(r.clone())
                    }
                    (EditKind::Replace, None) => return invalid("REPLACE needs a replacement policy".into()),
                    (_, Some(_)) => return invalid("REMOVE takes no replacement".into()),
                    (_, None) => None,
                };
                check_overlap(at, target.end, first, last)?;
                if at == target.start {
                    self.activations.remove(i);
                } else {
                    self.activations[i].end = Some(at);
                }
                if let Some(r) = replacement {
                    self.activations.push(Activation { policy_id: r, start: at, end: target.end });
                }
            }
            EditKind::Advance => {
                if edit.replacement.is_some() {
                    return invalid("ADVANCE takes no replacement".into());
                }
                let offset = match edit.offset {
                    Some(o) if o > 0 => o,
                    _ => return invalid("ADVANCE offset must be positive".into()),
                };
                if let Some(m) = edit.month {
                    if m != target.start {
                        return invalid(format!("policy {} was enacted {}, not {m}", edit.policy_id, target.start));
                    }
                }
                let start = target.start.offset(-i64::from(offset));
                check_overlap(start, Some(target.start), first, last)?;
                self.activations[i].start = start;
            }
        }
        Ok(())
    }
}

fn check_overlap(from: Month, to: Option<Month>, first: Month, last: Month) -> Result<()> {
    let ends_before = to.is_some_and(|t| t <= first);
    if from > last || ends_before {
        return Err(Error::InvalidEdit(format!("edit changes no month inside the window {first} to {last}")));
    }
    Ok(())
}
