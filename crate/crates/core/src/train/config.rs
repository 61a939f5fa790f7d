use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// All states; later months are held out.
    #[default]
    Id,
    /// A subset of states is held out entirely.
    Ood,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "id" => Ok(Protocol::Id),
            "ood" => Ok(Protocol::Ood),
            other => Err(Error::Config(format!("unknown protocol {other:?} (expected id or ood)"))),
        }
    }
}

/// Month and state partition settings. Unset month counts default to 2/3, 1/6, 1/6 of the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub protocol: Protocol,
    pub train_months: Option<usize>,
    pub val_months: Option<usize>,
    /// Held-out states for the OOD protocol; drawn by seeded shuffle when absent.
    pub test_states: Option<Vec<String>>,
    pub ood_test_count: usize,
    /// Training states for OOD; defaults to every state not held out.
    pub ood_train_count: Option<usize>,
    /// Seed for the OOD shuffle; defaults to the run seed.
    pub ood_seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            protocol: Protocol::Id,
            train_months: None,
            val_months: None,
            test_states: None,
            ood_test_count: 9,
            ood_train_count: None,
            ood_seed: None,
        }
    }
}

/// Concrete month ranges and state lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSplit {
    pub protocol: Protocol,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    /// States whose windows are trained on (sorted).
    pub train_states: Vec<String>,
    /// States evaluated on the test period (sorted).
    pub test_states: Vec<String>,
}

impl SplitConfig {
    pub fn resolve(&self, states: &[String], num_months: usize, seed: u64) -> Result<ResolvedSplit> {
        let train_len = self.train_months.unwrap_or((num_months as f64 * 2.0 / 3.0).round() as usize);
        let val_len = self.val_months.unwrap_or((num_months as f64 / 6.0).round() as usize);
        if train_len + val_len >= num_months || train_len == 0 || val_len == 0 {
            return Err(Error::Config(format!(
                "train ({train_len}) and validation ({val_len}) months leave no test months out of {num_months}"
            )));
        }
        let train = 0..train_len;
        let val = train_len..train_len + val_len;
        let test = train_len + val_len..num_months;
        let (train_states, test_states) = match self.protocol {
            Protocol::Id => (states.to_vec(), states.to_vec()),
            Protocol::Ood => {
                let test: Vec<String> = match &self.test_states {
                    Some(list) => {
                        for s in list {
                            if !states.contains(s) {
                                return Err(Error::UnknownState(s.clone()));
                            }
                        }
                        list.clone()
                    }
                    None => {
                        if self.ood_test_count == 0 || self.ood_test_count >= states.len() {
                            return Err(Error::Config(format!(
                                "ood_test_count {} must be between 1 and {}",
                                self.ood_test_count,
                                states.len() - 1
                            )));
                        }
                        let mut shuffled = states.to_vec();
                        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(self.ood_seed.unwrap_or(seed)));
                        shuffled.truncate(self.ood_test_count);
                        shuffled
                    }
                };
                let mut remaining: Vec<String> = states.iter().filter(|s| !test.contains(s)).cloned().collect();
                if let Some(n) = self.ood_train_count {
                    if n + test.len() > states.len() {
                        return Err(Error::Config(format!(
                            "{} training plus {} test states exceed the {} available",
                            n,
                            test.len(),
                            states.len()
                        )));
                    }
                    remaining.truncate(n);
                }
                if remaining.is_empty() {
                    return Err(Error::Config("no training states left".into()));
                }
                let mut test = test;
                test.sort();
                remaining.sort();
                (remaining, test)
            }
        };
        Ok(ResolvedSplit { protocol: self.protocol, train, val, test, train_states, test_states })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    /// Weight of the commitment loss.
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub split: SplitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            lambda: 1.0,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            grad_clip: 5.0,
            seed: 0,
            split: SplitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch_size and max_epochs must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !(self.adam.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lambda must be >= 0, lr and grad_clip > 0".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}
