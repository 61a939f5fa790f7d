use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use crate::error::{Error, Result};

/// Undirected state adjacency. Node order is the canonical (lexicographic) state order.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGraph {
    nodes: Vec<String>,
    edges: BTreeSet<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl StateGraph {
    /// Builds a graph over `nodes` from name pairs; `(a, b)` and `(b, a)` collapse to one edge.
    pub fn from_edges<S: AsRef<str>>(nodes: &[String], pairs: &[(S, S)]) -> Result<Self> {
        let mut sorted = nodes.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != nodes.len() {
            return Err(Error::Schema("duplicate node id".into()));
        }
        let index: HashMap<&str, usize> =
            sorted.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let lookup = |s: &str| index.get(s).copied().ok_or_else(|| Error::UnknownState(s.to_string()));
        let mut edges = BTreeSet::new();
        for (a, b) in pairs {
            let (a, b) = (a.as_ref(), b.as_ref());
            let (i, j) = (lookup(a)?, lookup(b)?);
            if i == j {
                return Err(Error::SelfLoop(a.to_string()));
            }
            edges.insert((i.min(j), i.max(j)));
        }
        let mut neighbors = vec![Vec::new(); sorted.len()];
        for &(i, j) in &edges {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(StateGraph { nodes: sorted, edges, neighbors })
    }

    /// 4-neighbour grid over `nodes` laid out row-major.
    pub fn grid(nodes: &[String], cols: usize) -> Result<Self> {
        if cols == 0 || nodes.len() % cols != 0 {
            return Err(Error::Config(format!("{} nodes do not fill a grid of width {cols}", nodes.len())));
        }
        let mut sorted = nodes.to_vec();
        sorted.sort();
        let mut pairs = Vec::new();
        for i in 0..sorted.len() {
            let (r, c) = (i / cols, i % cols);
            if c + 1 < cols {
                pairs.push((sorted[i].clone(), sorted[i + 1].clone()));
            }
            if (r + 1) * cols + c < sorted.len() {
                pairs.push((sorted[i].clone(), sorted[i + cols].clone()));
            }
        }
        StateGraph::from_edges(&sorted, &pairs)
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Neighbours of `node` in ascending index order.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn index(&self, state: &str) -> Result<usize> {
        self.nodes
            .binary_search_by(|s| s.as_str().cmp(state))
            .map_err(|_| Error::UnknownState(state.to_string()))
    }

    /// True for the published contiguous-US shape (48 states, 194 edges).
    pub fn is_reference_shape(&self) -> bool {
        self.num_nodes() == 48 && self.num_edges() == 194
    }

    /// Hop distance from `source` to every node; `None` when unreachable.
    pub fn distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.nodes.len()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].expect("queued nodes have a distance");
            for &v in &self.neighbors[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["src", "dst"])?;
        for &(i, j) in &self.edges {
            w.write_record([&self.nodes[i], &self.nodes[j]])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads `adjacency.csv` (`src,dst`) over the given node set.
pub fn load_adjacency(path: &Path, nodes: &[String]) -> Result<StateGraph> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["src", "dst"] {
        return Err(Error::Schema(format!(
            "expected columns src,dst, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 2 {
            return Err(Error::Schema(format!("edge row with {} fields", record.len())));
        }
        pairs.push((record[0].to_string(), record[1].to_string()));
    }
    StateGraph::from_edges(nodes, &pairs)
}
