//! Panel, graph and policy corpus loading, normalisation, windowing and synthetic worlds.

mod entities;
mod graph;
mod norm;
mod panel;
mod policy;
pub mod synth;
mod window;

use std::path::Path;

pub use entities::{load_entities, EntityEmbeddingTable};
pub use graph::{load_adjacency, StateGraph};
pub use norm::{normalize, NormStats};
pub use panel::{load_state_panel, FeatureGroup, StatePanel, CHANNELS, OUTCOME_CHANNEL};
pub use policy::{
    active_policies, load_policies, PolicyCodes, PolicyCorpus, PolicyKg, PolicyRecord, SubstanceCoverage,
    TargetPopulation, Triplet,
};
pub use synth::{synth_generate, SynthConfig, SynthTruth, SynthWorld};
pub use window::{build_eval_windows, build_windows, WindowSample};

use crate::error::{Error, Result};

/// Everything the model reads: panel, adjacency, policy corpus and entity embeddings.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub panel: StatePanel,
    pub graph: StateGraph,
    pub corpus: PolicyCorpus,
    pub entities: EntityEmbeddingTable,
}

impl Dataset {
    pub fn new(panel: StatePanel, graph: StateGraph, corpus: PolicyCorpus, entities: EntityEmbeddingTable) -> Result<Self> {
        if graph.nodes() != panel.states() {
            return Err(Error::Schema("graph nodes do not match panel states".into()));
        }
        for r in corpus.records() {
            panel.state_index(&r.state)?;
        }
        corpus.check_against_range(panel.last_month())?;
        entities.check_coverage(&corpus)?;
        Ok(Dataset { panel, graph, corpus, entities })
    }

    /// Loads `states.csv`, `adjacency.csv`, `policies.jsonl` and `entities.jsonl` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let panel = load_state_panel(&dir.join("states.csv"))?;
        let graph = load_adjacency(&dir.join("adjacency.csv"), panel.states())?;
        let corpus = load_policies(&dir.join("policies.jsonl"))?;
        let entities = load_entities(&dir.join("entities.jsonl"))?;
        Dataset::new(panel, graph, corpus, entities)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.panel.write_csv(&dir.join("states.csv"))?;
        self.graph.write_csv(&dir.join("adjacency.csv"))?;
        self.corpus.write_jsonl(&dir.join("policies.jsonl"))?;
        self.entities.write_jsonl(&dir.join("entities.jsonl"))?;
        Ok(())
    }
}

impl From<SynthWorld> for Dataset {
    fn from(w: SynthWorld) -> Self {
        Dataset { panel: w.panel, graph: w.graph, corpus: w.corpus, entities: w.entities }
    }
}
