//! Synthetic worlds with a known policy-response kernel, for testing and desk-scale experiments.
//!
//! Outcome for state `s` at month `t`:
//!
//! ```text
//! y[s,t] = level[s] + slope[s]*t + amp*sin(2π(t + phase[s])/12) + dev[s,t]
//!        + Σ_{own policies p} effect_p * k_p(t)
//!        + spillover * Σ_{neighbours n} Σ_{policies p of n} effect_p * k_p(t)
//! k_p(t) = clamp((t - enact_p - lag_p + 1) / ramp_p, 0, 1)
//! dev[s,t] = ar * dev[s,t-1] + noise * ε
//! ```
//!
//! With `ramp = 1` the response is a step at `enact + lag`.
//!
//! Entity embeddings are random vectors plus a shared direction scaled by the mean effect
//! of the archetypes mentioning the entity, so that policy semantics say something about
//! the sign and size of the response.
//!
//! Noise, covariates, per-state parameters, adoption and entity embeddings each draw from a
//! separate ChaCha stream, so toggling policies never shifts the noise sequence.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::entities::EntityEmbeddingTable;
use super::graph::StateGraph;
use super::panel::{StatePanel, CHANNELS, OUTCOME_CHANNEL};
use super::policy::{
    PolicyCodes, PolicyCorpus, PolicyRecord, SubstanceCoverage, TargetPopulation, Triplet,
};
use crate::error::{Error, Result};
use crate::month::Month;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Archetype {
    pub name: String,
    /// Outcome shift in deaths per month once fully phased in.
    pub effect: f64,
    /// Months between enactment and the first effect.
    pub lag: usize,
    /// Months over which the effect phases in linearly.
    pub ramp: usize,
}

impl Default for Archetype {
    fn default() -> Self {
        Archetype { name: "archetype".into(), effect: -5.0, lag: 2, ramp: 1 }
    }
}

/// Explicit enactment, overriding random adoption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledPolicy {
    pub state: usize,
    pub archetype: usize,
    pub month: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub num_months: usize,
    pub start_month: Month,
    pub ar_coef: f64,
    pub level_range: (f64, f64),
    pub max_slope: f64,
    pub seasonal_amplitude: f64,
    pub init_deviation: f64,
    pub noise_std: f64,
    pub archetypes: Vec<Archetype>,
    /// Probability that a state enacts a given archetype at some point.
    pub adoption_prob: f64,
    pub spillover: f64,
    pub entity_dim: usize,
    /// Length of the effect-aligned component in archetype entity embeddings, relative to
    /// the unit-scale random part. Zero gives purely random embeddings.
    pub effect_signal: f64,
    pub schedule: Option<Vec<ScheduledPolicy>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let archetypes = [
            ("recovery_housing", -6.0),
            ("pdmp_mandate", -4.0),
            ("naloxone_access", -3.0),
            ("treatment_funding", 3.0),
            ("prescribing_limit", 5.0),
            ("peer_support", 6.0),
        ]
        .into_iter()
        .map(|(name, effect)| Archetype { name: name.into(), effect, lag: 2, ramp: 1 })
        .collect();
        SynthConfig {
            grid_rows: 3,
            grid_cols: 4,
            num_months: 72,
            start_month: Month::new(2019, 1).expect("valid month"),
            ar_coef: 0.8,
            level_range: (60.0, 120.0),
            max_slope: 0.3,
            seasonal_amplitude: 4.0,
            init_deviation: 5.0,
            noise_std: 0.1,
            archetypes,
            adoption_prob: 0.7,
            spillover: 0.25,
            entity_dim: 16,
            effect_signal: 1.0,
            schedule: None,
        }
    }
}

impl SynthConfig {
    pub fn num_states(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_states() == 0 {
            return bad("grid must have at least one state");
        }
        if self.num_months < 2 {
            return bad("need at least two months");
        }
        if !(0.0..1.0).contains(&self.ar_coef.abs()) {
            return bad("ar_coef must satisfy |ar_coef| < 1");
        }
        if !(self.level_range.0 <= self.level_range.1) || self.level_range.0 < 0.0 {
            return bad("level_range must be a non-negative interval");
        }
        if self.noise_std < 0.0 || self.max_slope < 0.0 || self.init_deviation < 0.0 || self.effect_signal < 0.0 {
            return bad("noise_std, max_slope, init_deviation and effect_signal must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.adoption_prob) {
            return bad("adoption_prob must lie in [0, 1]");
        }
        if self.entity_dim == 0 {
            return bad("entity_dim must be positive");
        }
        if let Some(schedule) = &self.schedule {
            for p in schedule {
                if p.state >= self.num_states() || p.archetype >= self.archetypes.len() || p.month >= self.num_months {
                    return bad("scheduled policy out of range");
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth parameters behind a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub levels: Vec<f64>,
    pub slopes: Vec<f64>,
    pub phases: Vec<f64>,
    pub init_deviations: Vec<f64>,
    pub ar_coef: f64,
    pub seasonal_amplitude: f64,
    pub spillover: f64,
    pub archetypes: Vec<Archetype>,
    /// `(state, archetype, month index)` of each enactment.
    pub enactments: Vec<ScheduledPolicy>,
    /// Deterministic trend component (level + slope + season), `(states, months)`.
    pub trend: Array2<f64>,
    /// AR(1) deviation including noise, `(states, months)`.
    pub deviation: Array2<f64>,
    /// Policy contribution including spillover, `(states, months)`.
    pub policy_offset: Array2<f64>,
}

impl SynthTruth {
    /// Noise-free one-step conditional mean of the outcome.
    pub fn expected_next(&self, state: usize, t: usize, current_deviation: f64) -> f64 {
        self.trend[[state, t]] + self.ar_coef * current_deviation + self.policy_offset[[state, t]]
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub panel: StatePanel,
    pub graph: StateGraph,
    pub corpus: PolicyCorpus,
    pub entities: EntityEmbeddingTable,
    pub truth: SynthTruth,
}

const RELATIONS: [&str; 6] = ["funds", "regulates", "requires", "targets", "expands", "certifies"];

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn state_name(i: usize) -> String {
    format!("S{i:02}")
}

/// Triplets describing an archetype's intervention pathway. Archetypes 0 and 1 share
/// the `recovery_residence` entity.
pub fn archetype_triplets(index: usize, archetype: &Archetype) -> Vec<Triplet> {
    let name = &archetype.name;
    let rel = |k: usize| RELATIONS[(index + k) % RELATIONS.len()];
    let mut t = vec![
        Triplet::new(&format!("{name}_act"), rel(0), &format!("{name}_program")),
        Triplet::new(&format!("{name}_program"), rel(1), &format!("{name}_target")),
        Triplet::new(&format!("{name}_agency"), rel(2), &format!("{name}_program")),
    ];
    if index < 2 {
        t.push(Triplet::new(&format!("{name}_program"), "supports", "recovery_residence"));
    }
    t
}

fn archetype_codes(rng: &mut ChaCha8Rng) -> PolicyCodes {
    let bin = |rng: &mut ChaCha8Rng| Some(rng.random_range(0..2u8));
    let substances = [SubstanceCoverage::SchedulesIIToV, SubstanceCoverage::SchedulesIIToIV, SubstanceCoverage::DrugsOfConcern];
    let populations = [
        TargetPopulation::RecoveryResidents,
        TargetPopulation::Youth,
        TargetPopulation::Homeless,
        TargetPopulation::IncarceratedOrDetained,
        TargetPopulation::MentalIllness,
    ];
    PolicyCodes {
        prescriber_mandatory_pdmp_use: bin(rng),
        dispenser_mandatory_pdmp_use: bin(rng),
        substance_monitored: Some(substances[rng.random_range(0..3)]),
        max_initial_days_adult: Some(rng.random_range(3..=30)),
        max_initial_days_minor: Some(rng.random_range(3..=14)),
        mme_daily_limit: Some(rng.random_range(30..=120)),
        establish_program: bin(rng),
        expand_program: bin(rng),
        general_funding: bin(rng),
        dedicated_funding: bin(rng),
        certification_requirement: bin(rng),
        operating_standards: bin(rng),
        reporting_requirement: bin(rng),
        target_population: Some(populations[rng.random_range(0..5)]),
    }
}

/// Generates a synthetic world. Deterministic for a fixed `(seed, config)`.
pub fn synth_generate(seed: u64, config: &SynthConfig) -> Result<SynthWorld> {
    config.validate()?;
    let n = config.num_states();
    let t_len = config.num_months;
    let names: Vec<String> = (0..n).map(state_name).collect();
    let graph = StateGraph::grid(&names, config.grid_cols)?;

    let mut params_rng = stream(seed, 0);
    let mut noise_rng = stream(seed, 1);
    let mut cov_rng = stream(seed, 2);
    let mut adopt_rng = stream(seed, 3);
    let mut embed_rng = stream(seed, 4);

    let (lo, hi) = config.level_range;
    let mut levels = Vec::with_capacity(n);
    let mut slopes = Vec::with_capacity(n);
    let mut phases = Vec::with_capacity(n);
    let mut init_deviations = Vec::with_capacity(n);
    for _ in 0..n {
        levels.push(if hi > lo { params_rng.random_range(lo..hi) } else { lo });
        slopes.push(if config.max_slope > 0.0 {
            params_rng.random_range(-config.max_slope..config.max_slope)
        } else {
            0.0
        });
        phases.push(params_rng.random_range(0.0..12.0));
        init_deviations.push(if config.init_deviation > 0.0 {
            params_rng.random_range(-config.init_deviation..config.init_deviation)
        } else {
            0.0
        });
    }

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let stationary_sd = config.noise_std / (1.0 - config.ar_coef * config.ar_coef).sqrt();
    let mut trend = Array2::zeros((n, t_len));
    let mut deviation = Array2::zeros((n, t_len));
    for s in 0..n {
        let mut dev = init_deviations[s] + stationary_sd * std_normal.sample(&mut noise_rng);
        for t in 0..t_len {
            if t > 0 {
                dev = config.ar_coef * dev + config.noise_std * std_normal.sample(&mut noise_rng);
            }
            deviation[[s, t]] = dev;
            trend[[s, t]] = levels[s]
                + slopes[s] * t as f64
                + config.seasonal_amplitude * (2.0 * PI * (t as f64 + phases[s]) / 12.0).sin();
        }
    }

    let enactments: Vec<ScheduledPolicy> = match &config.schedule {
        Some(s) => s.clone(),
        None => {
            let mut out = Vec::new();
            for s in 0..n {
                for a in 0..config.archetypes.len() {
                    let adopt = adopt_rng.random_bool(config.adoption_prob);
                    let month = adopt_rng.random_range(1..t_len);
                    if adopt {
                        out.push(ScheduledPolicy { state: s, archetype: a, month });
                    }
                }
            }
            out
        }
    };

    let mut own = Array2::<f64>::zeros((n, t_len));
    for e in &enactments {
        let a = &config.archetypes[e.archetype];
        for t in (e.month + a.lag)..t_len {
            let k = ((t + 1 - e.month - a.lag) as f64 / a.ramp.max(1) as f64).min(1.0);
            own[[e.state, t]] += a.effect * k;
        }
    }
    let mut policy_offset = own.clone();
    for s in 0..n {
        for &nb in graph.neighbors(s) {
            for t in 0..t_len {
                policy_offset[[s, t]] += config.spillover * own[[nb, t]];
            }
        }
    }

    let mut features = Array3::zeros((n, t_len, CHANNELS.len()));
    for s in 0..n {
        let population: f64 = cov_rng.random_range(1.0e6..2.0e7);
        let unemployment_base: f64 = cov_rng.random_range(3.0..7.0);
        let lfp_base: f64 = cov_rng.random_range(58.0..68.0);
        let crime_rate: f64 = cov_rng.random_range(2.0e-4..8.0e-4);
        let age_shares = [0.22, 0.50, 0.28];
        let race_shares = [0.70, 0.15, 0.06, 0.02];
        let growth: f64 = cov_rng.random_range(-5e-4..2e-3);
        let mut unemployment = unemployment_base;
        for t in 0..t_len {
            let y = trend[[s, t]] + deviation[[s, t]] + policy_offset[[s, t]];
            if y < 0.0 {
                return Err(Error::Config(format!(
                    "outcome for {} went negative ({y:.2}) at month {t}; raise level_range",
                    names[s]
                )));
            }
            unemployment = (unemployment + 0.15 * std_normal.sample(&mut cov_rng)).clamp(1.0, 15.0);
            let pop_t = population * (1.0 + growth).powi(t as i32);
            let row = [
                y,
                unemployment,
                (lfp_base + 0.3 * std_normal.sample(&mut cov_rng)).clamp(40.0, 80.0),
                (pop_t * unemployment / 100.0 * 0.08 * (1.0 + 0.05 * std_normal.sample(&mut cov_rng))).max(0.0),
                pop_t * age_shares[0],
                pop_t * age_shares[1],
                pop_t * age_shares[2],
                pop_t * race_shares[0],
                pop_t * race_shares[1],
                pop_t * race_shares[2],
                pop_t * race_shares[3],
                (pop_t * crime_rate * (1.0 + 0.1 * std_normal.sample(&mut cov_rng))).max(0.0),
            ];
            for (c, v) in row.into_iter().enumerate() {
                features[[s, t, c]] = v;
            }
        }
    }
    let months: Vec<Month> = (0..t_len).map(|t| config.start_month.offset(t as i64)).collect();
    let panel = StatePanel::new(
        names.clone(),
        months.clone(),
        CHANNELS.iter().map(|c| c.to_string()).collect(),
        features,
        OUTCOME_CHANNEL,
    )?;

    let codes: Vec<PolicyCodes> = config.archetypes.iter().map(|_| archetype_codes(&mut adopt_rng)).collect();
    let mut records = Vec::new();
    for e in &enactments {
        let a = &config.archetypes[e.archetype];
        records.push(PolicyRecord {
            policy_id: format!("{} {}", names[e.state], a.name),
            state: names[e.state].clone(),
            enacted_month: months[e.month],
            repealed_month: None,
            triplets: archetype_triplets(e.archetype, a),
            policy_codes: Some(codes[e.archetype].clone()),
        });
    }
    let corpus = PolicyCorpus::new(records)?;

    // entities lean along a shared direction in proportion to the mean effect of the
    // archetypes that mention them
    let max_effect = config.archetypes.iter().map(|a| a.effect.abs()).fold(0.0, f64::max);
    let mut mentions: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for (i, a) in config.archetypes.iter().enumerate() {
        for t in archetype_triplets(i, a) {
            for entity in [t.subject, t.object] {
                mentions.entry(entity).or_default().insert(i);
            }
        }
    }
    let scale = 1.0 / (config.entity_dim as f64).sqrt();
    let direction: Vec<f64> = {
        let raw: Vec<f64> = (0..config.entity_dim).map(|_| std_normal.sample(&mut embed_rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.into_iter().map(|v| v / norm).collect()
    };
    let mut vectors = BTreeMap::new();
    for (entity, archetypes) in mentions {
        let mean_effect = archetypes.iter().map(|&i| config.archetypes[i].effect).sum::<f64>() / archetypes.len() as f64;
        let lean = if max_effect > 0.0 { config.effect_signal * mean_effect / max_effect } else { 0.0 };
        let v: Vec<f64> =
            direction.iter().map(|d| scale * std_normal.sample(&mut embed_rng) + lean * d).collect();
        vectors.insert(entity, v);
    }
    let entities = EntityEmbeddingTable::new(vectors)?;

    Ok(SynthWorld {
        panel,
        graph,
        corpus,
        entities,
        truth: SynthTruth {
            levels,
            slopes,
            phases,
            init_deviations,
            ar_coef: config.ar_coef,
            seasonal_amplitude: config.seasonal_amplitude,
            spillover: config.spillover,
            archetypes: config.archetypes.clone(),
            enactments,
            trend,
            deviation,
            policy_offset,
        },
    })
}
