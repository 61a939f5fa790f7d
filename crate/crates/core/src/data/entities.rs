use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::policy::PolicyCorpus;
use crate::error::{Error, Result};

/// Precomputed sentence embeddings used to initialise knowledge-graph entities.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityEmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct EntityLine {
    entity: String,
    embedding: Vec<f64>,
}

impl EntityEmbeddingTable {
    pub fn new(vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let dim = vectors.values().next().map_or(0, Vec::len);
        for (name, v) in &vectors {
            if v.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "entity {name:?} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Value(format!("entity {name:?} has a non-finite component")));
            }
        }
        Ok(EntityEmbeddingTable { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, entity: &str) -> Result<&[f64]> {
        self.vectors
            .get(entity)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding(entity.to_string()))
    }

    /// Every entity mentioned by any policy triplet must have an embedding.
    pub fn check_coverage(&self, corpus: &PolicyCorpus) -> Result<()> {
        for r in corpus.records() {
            for t in &r.triplets {
                self.get(&t.subject)?;
                self.get(&t.object)?;
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (entity, embedding) in &self.vectors {
            serde_json::to_writer(&mut f, &EntityLine { entity: entity.clone(), embedding: embedding.clone() })?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

pub fn load_entities(path: &Path) -> Result<EntityEmbeddingTable> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut vectors = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: EntityLine =
            serde_json::from_str(&line).map_err(|e| Error::Schema(format!("entities line {}: {e}", i + 1)))?;
        if vectors.insert(e.entity.clone(), e.embedding).is_some() {
            return Err(Error::Schema(format!("duplicate entity {:?}", e.entity)));
        }
    }
    EntityEmbeddingTable::new(vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_and_finiteness() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![1.0, 2.0]);
        m.insert("b".to_string(), vec![1.0]);
        assert!(matches!(EntityEmbeddingTable::new(m.clone()), Err(Error::DimensionMismatch(_))));
        m.insert("b".to_string(), vec![1.0, f64::INFINITY]);
        assert!(matches!(EntityEmbeddingTable::new(m), Err(Error::Value(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let mut m = BTreeMap::new();
        m.insert("naloxone".to_string(), vec![0.25, -1.5, 3.0]);
        m.insert("pdmp".to_string(), vec![0.1, 0.2, 0.3]);
        let table = EntityEmbeddingTable::new(m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("entities.jsonl");
        table.write_jsonl(&path).unwrap();
        let loaded = load_entities(&path).unwrap();
        assert_eq!(loaded, table);
        assert_eq!(loaded.dim(), 3);
        assert!(matches!(loaded.get("fentanyl"), Err(Error::MissingEmbedding(_))));
    }
}
