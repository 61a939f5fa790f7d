use serde::{Deserialize, Serialize};

use crate::data::FeatureGroup;
use crate::error::{Error, Result};

/// How token positions are fed to the sinusoidal encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    /// Months since 2019-01.
    #[default]
    Absolute,
    /// Offset within the history window, starting at 0.
    Relative,
}

/// Switches that remove parts of the model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Retrieval becomes the identity map and the commitment loss is dropped.
    pub no_vq: bool,
    /// Entity embeddings skip relational message passing (projection only).
    pub no_kg_encoder: bool,
    /// Policies are represented by their fixed-width code vectors instead of the KG.
    pub no_kg: bool,
    /// No policy conditioning at all.
    pub no_policy: bool,
    /// No positional encoding columns.
    pub no_pe: bool,
    /// Feature groups zeroed at the model input.
    pub feature_drop: Vec<FeatureGroup>,
}

impl Ablations {
    pub fn uses_kg(&self) -> bool {
        !self.no_policy && !self.no_kg
    }

    pub fn uses_codebook(&self) -> bool {
        self.uses_kg() && !self.no_vq
    }

    pub fn dropped_channels(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.feature_drop.iter().flat_map(|g| g.channels().iter().copied()).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width, shared by state embeddings, entity embeddings and codes.
    pub d: usize,
    pub k_hops: usize,
    pub kg_layers: usize,
    pub relation_cap: usize,
    pub codebook_size: usize,
    pub ema_decay: f64,
    pub ema_eps: f64,
    /// Steps without any assignment after which a code is re-seeded.
    pub dead_code_steps: u64,
    pub tau_temp: f64,
    pub d_p: usize,
    pub d_pe: usize,
    pub pe_mode: PeMode,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub history: usize,
    pub horizon: usize,
    pub outputs: usize,
    /// Forecasts are offsets from the window's last observed outcome.
    pub anchor_last: bool,
    /// Frames carry month-over-month changes instead of levels.
    pub difference_inputs: bool,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            k_hops: 1,
            kg_layers: 2,
            relation_cap: 32,
            codebook_size: 64,
            ema_decay: 0.99,
            ema_eps: 1e-5,
            dead_code_steps: 500,
            tau_temp: 1.0,
            d_p: 6,
            d_pe: 16,
            pe_mode: PeMode::Absolute,
            heads: 4,
            ffn: 256,
            dropout: 0.1,
            history: 6,
            horizon: 6,
            outputs: 1,
            anchor_last: true,
            difference_inputs: true,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and gradient checks.
    pub fn tiny(d: usize, history: usize, horizon: usize) -> Self {
        ModelConfig {
            d,
            codebook_size: 4,
            d_p: 4,
            d_pe: 4,
            heads: 2,
            ffn: 2 * d,
            history,
            horizon,
            ..Default::default()
        }
    }

    pub fn effective_kg_layers(&self) -> usize {
        if self.ablations.no_kg_encoder {
            0
        } else {
            self.kg_layers
        }
    }

    pub fn pe_width(&self) -> usize {
        if self.ablations.no_pe {
            0
        } else {
            self.d_pe
        }
    }

    /// Width of the fused token before the input projection.
    pub fn token_width(&self) -> usize {
        let policy = if self.ablations.no_policy { 0 } else { self.d };
        self.d + policy + self.pe_width()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.history == 0 || self.horizon == 0 || self.outputs == 0 {
            return bad("d, history, horizon and outputs must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} is not divisible by heads={}", self.d, self.heads));
        }
        if self.d_p == 0 || self.d_p % 2 != 0 {
            return bad(format!("d_p={} must be positive and even", self.d_p));
        }
        if self.d_pe % 2 != 0 {
            return bad(format!("d_pe={} must be even", self.d_pe));
        }
        if self.codebook_size == 0 {
            return bad("codebook_size must be at least 1".into());
        }
        if self.relation_cap < 2 {
            return bad("relation_cap must leave room for the overflow bucket".into());
        }
        if !(self.tau_temp > 0.0) {
            return bad("tau_temp must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}
