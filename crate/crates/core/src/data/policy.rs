use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::month::Month;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triplet {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        Triplet { subject: subject.into(), relation: relation.into(), object: object.into() }
    }
}

/// Monitored-substance coverage for prescription-control codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubstanceCoverage {
    #[serde(rename = "schedules_ii_v")]
    SchedulesIIToV,
    #[serde(rename = "schedules_ii_iv")]
    SchedulesIIToIV,
    #[serde(rename = "drugs_of_concern")]
    DrugsOfConcern,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPopulation {
    RecoveryResidents,
    Youth,
    Homeless,
    IncarceratedOrDetained,
    MentalIllness,
}

/// Fixed 14-field policy code record: six prescription-control fields, eight recovery-support fields.
/// Absent fields mean "not specified".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCodes {
    #[serde(rename = "prescriber_mandatory_PDMP_use", default)]
    pub prescriber_mandatory_pdmp_use: Option<u8>,
    #[serde(rename = "dispenser_mandatory_PDMP_use", default)]
    pub dispenser_mandatory_pdmp_use: Option<u8>,
    #[serde(default)]
    pub substance_monitored: Option<SubstanceCoverage>,
    #[serde(default)]
    pub max_initial_days_adult: Option<i64>,
    #[serde(default)]
    pub max_initial_days_minor: Option<i64>,
    #[serde(default)]
    pub mme_daily_limit: Option<i64>,
    #[serde(default)]
    pub establish_program: Option<u8>,
    #[serde(default)]
    pub expand_program: Option<u8>,
    #[serde(default)]
    pub general_funding: Option<u8>,
    #[serde(default)]
    pub dedicated_funding: Option<u8>,
    #[serde(default)]
    pub certification_requirement: Option<u8>,
    #[serde(default)]
    pub operating_standards: Option<u8>,
    #[serde(default)]
    pub reporting_requirement: Option<u8>,
    #[serde(default)]
    pub target_population: Option<TargetPopulation>,
}

impl PolicyCodes {
    pub(crate) fn binaries(&self) -> [(&'static str, Option<u8>); 9] {
        [
            ("prescriber_mandatory_PDMP_use", self.prescriber_mandatory_pdmp_use),
            ("dispenser_mandatory_PDMP_use", self.dispenser_mandatory_pdmp_use),
            ("establish_program", self.establish_program),
            ("expand_program", self.expand_program),
            ("general_funding", self.general_funding),
            ("dedicated_funding", self.dedicated_funding),
            ("certification_requirement", self.certification_requirement),
            ("operating_standards", self.operating_standards),
            ("reporting_requirement", self.reporting_requirement),
        ]
    }

    pub(crate) fn integers(&self) -> [(&'static str, Option<i64>); 3] {
        [
            ("max_initial_days_adult", self.max_initial_days_adult),
            ("max_initial_days_minor", self.max_initial_days_minor),
            ("mme_daily_limit", self.mme_daily_limit),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.binaries() {
            if let Some(v) = v {
                if v > 1 {
                    return Err(Error::Schema(format!("{name} must be 0 or 1, got {v}")));
                }
            }
        }
        for (name, v) in self.integers() {
            if let Some(v) = v {
                if v < 0 {
                    return Err(Error::Schema(format!("{name} must be non-negative, got {v}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub policy_id: String,
    pub state: String,
    pub enacted_month: Month,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repealed_month: Option<Month>,
    pub triplets: Vec<Triplet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_codes: Option<PolicyCodes>,
}

impl PolicyRecord {
    /// In force at `month`: enacted at or before it and not yet repealed.
    pub fn active_at(&self, month: Month) -> bool {
        self.enacted_month <= month && self.repealed_month.is_none_or(|r| month < r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.policy_id.is_empty() || self.state.is_empty() {
            return Err(Error::Schema("policy with empty id or state".into()));
        }
        for t in &self.triplets {
            if t.subject.is_empty() || t.relation.is_empty() || t.object.is_empty() {
                return Err(Error::Schema(format!("policy {} has an empty triplet field", self.policy_id)));
            }
        }
        if let Some(r) = self.repealed_month {
            if r <= self.enacted_month {
                return Err(Error::Schema(format!("policy {} repealed before enactment", self.policy_id)));
            }
        }
        if let Some(codes) = &self.policy_codes {
            codes.validate()?;
        }
        Ok(())
    }
}

/// The union of triplets of co-active policies, as an entity/edge set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct PolicyKg {
    triplets: BTreeSet<Triplet>,
}

impl PolicyKg {
    pub fn from_triplets<'a>(triplets: impl IntoIterator<Item = &'a Triplet>) -> Self {
        PolicyKg { triplets: triplets.into_iter().cloned().collect() }
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> impl Iterator<Item = &Triplet> {
        self.triplets.iter()
    }

    pub fn num_triplets(&self) -> usize {
        self.triplets.len()
    }

    /// Entity names in lexicographic order.
    pub fn entities(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self
            .triplets
            .iter()
            .flat_map(|t| [t.subject.as_str(), t.object.as_str()])
            .collect();
        set.into_iter().collect()
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.triplets.contains(t)
    }
}

/// All policy records, indexed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyCorpus {
    records: BTreeMap<String, PolicyRecord>,
}

impl PolicyCorpus {
    pub fn new(records: Vec<PolicyRecord>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in records {
            r.validate()?;
            let id = r.policy_id.clone();
            if map.insert(id.clone(), r).is_some() {
                return Err(Error::Schema(format!("duplicate policy id {id}")));
            }
        }
        Ok(PolicyCorpus { records: map })
    }

    pub fn get(&self, id: &str) -> Result<&PolicyRecord> {
        self.records.get(id).ok_or_else(|| Error::UnknownPolicy(id.to_string()))
    }

    pub fn records(&self) -> impl Iterator<Item = &PolicyRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn for_state<'a>(&'a self, state: &'a str) -> impl Iterator<Item = &'a PolicyRecord> + 'a {
        self.records.values().filter(move |r| r.state == state)
    }

    /// Ids of policies in force for `state` at `month`, sorted.
    pub fn active_ids(&self, state: &str, month: Month) -> Vec<String> {
        self.for_state(state).filter(|r| r.active_at(month)).map(|r| r.policy_id.clone()).collect()
    }

    /// Knowledge graph over the union of the given policies' triplets.
    pub fn kg_for<S: AsRef<str>>(&self, ids: &[S]) -> Result<PolicyKg> {
        let mut triplets = BTreeSet::new();
        for id in ids {
            triplets.extend(self.get(id.as_ref())?.triplets.iter().cloned());
        }
        Ok(PolicyKg { triplets })
    }

    /// Enacted months must not be later than the panel end.
    pub fn check_against_range(&self, last: Month) -> Result<()> {
        for r in self.records.values() {
            if r.enacted_month > last {
                return Err(Error::Schema(format!(
                    "policy {} enacted {} after panel end {last}",
                    r.policy_id, r.enacted_month
                )));
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in self.records.values() {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// The knowledge graph of policies in force for `state` at `month`; empty when none are.
pub fn active_policies(corpus: &PolicyCorpus, state: &str, month: Month) -> PolicyKg {
    let mut triplets = BTreeSet::new();
    for r in corpus.for_state(state).filter(|r| r.active_at(month)) {
        triplets.extend(r.triplets.iter().cloned());
    }
    PolicyKg { triplets }
}

pub fn load_policies(path: &Path) -> Result<PolicyCorpus> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PolicyRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("policies line {}: {e}", i + 1)))?;
        records.push(record);
    }
    PolicyCorpus::new(records)
}
