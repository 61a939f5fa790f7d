//! K-hop neighbourhood encoder over the state graph.
//!
//! Layer update for a node `i`: `h_i ← relu([h_i ‖ mean_{j∈N(i)} h_j] · W_k + b_k)`, starting
//! from `h_i = x_i · W_0 + b_0`. Only the nodes a center can actually reach in `K` hops are
//! evaluated, so nodes further away cannot influence the result in any way.

use std::sync::Arc;

use indexmap::IndexSet;
use ndarray::{Array1, Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use super::binder::Binder;
use crate::data::StateGraph;
use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Induced subgraph of all nodes within `K` hops of a center.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    pub center: usize,
    /// Node indices in ascending order.
    pub nodes: Vec<usize>,
    /// Edges `(a, b)` with `a < b`, both endpoints in `nodes`.
    pub edges: Vec<(usize, usize)>,
}

pub fn khop_subgraph(graph: &StateGraph, state: &str, k: usize) -> Result<Subgraph> {
    let center = graph.index(state)?;
    let dist = graph.distances(center);
    let nodes: Vec<usize> = (0..graph.num_nodes()).filter(|&n| matches!(dist[n], Some(d) if d <= k)).collect();
    let edges = graph.edges().filter(|&(a, b)| nodes.binary_search(&a).is_ok() && nodes.binary_search(&b).is_ok()).collect();
    Ok(Subgraph { center, nodes, edges })
}

pub fn init_params(store: &mut ParamStore, channels: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) {
    store.insert_xavier("spatial.in.w", channels, d, rng);
    store.insert_zeros("spatial.in.b", 1, d);
    for layer in 1..=k {
        store.insert_xavier(&format!("spatial.l{layer}.w"), 2 * d, d, rng);
        store.insert_zeros(&format!("spatial.l{layer}.b"), 1, d);
    }
}

struct LayerPlan {
    self_rows: Vec<usize>,
    neighbor_rows: Arc<Vec<Vec<usize>>>,
}

/// Which (frame, node) instances each layer must evaluate for a set of centers.
pub struct SpatialPlan {
    inputs: Vec<(usize, usize)>,
    layers: Vec<LayerPlan>,
    center_rows: Vec<usize>,
}

impl SpatialPlan {
    /// `centers` holds `(frame, node)` pairs; the encoder output has one row per entry.
    pub fn new(graph: &StateGraph, centers: &[(usize, usize)], k: usize) -> Self {
        let mut level: IndexSet<(usize, usize)> = IndexSet::new();
        let center_rows = centers.iter().map(|c| level.insert_full(*c).0).collect();
        let mut layers = Vec::with_capacity(k);
        for _ in 0..k {
            let mut below: IndexSet<(usize, usize)> = IndexSet::new();
            let mut self_rows = Vec::with_capacity(level.len());
            let mut neighbor_rows = Vec::with_capacity(level.len());
            for &(frame, node) in &level {
                self_rows.push(below.insert_full((frame, node)).0);
                let nbrs = graph.neighbors(node);
                if nbrs.is_empty() {
                    log::debug!("node {node} has no neighbours; using a zero aggregate");
                }
                neighbor_rows.push(nbrs.iter().map(|&nb| below.insert_full((frame, nb)).0).collect());
            }
            layers.push(LayerPlan { self_rows, neighbor_rows: Arc::new(neighbor_rows) });
            level = below;
        }
        layers.reverse();
        SpatialPlan { inputs: level.into_iter().collect(), layers, center_rows }
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }
}

/// Encodes every center of `plan`. `frames[f]` is a `(nodes, channels)` matrix; columns
/// listed in `dropped` are read as zero.
pub fn encode<'a>(
    tape: &mut Tape<'a>,
    binder: &mut Binder<'a>,
    plan: &SpatialPlan,
    frames: &[ArrayView2<f64>],
    dropped: &[usize],
) -> Var {
    let channels = frames.first().map_or(0, |f| f.ncols());
    let mut x = Array2::zeros((plan.inputs.len(), channels));
    for (row, &(frame, node)) in plan.inputs.iter().enumerate() {
        x.row_mut(row).assign(&frames[frame].row(node));
        for &c in dropped {
            x[[row, c]] = 0.0;
        }
    }
    let x = tape.constant(x);
    let mut h = binder.linear(tape, "spatial.in", x);
    for (i, layer) in plan.layers.iter().enumerate() {
        h = sage_layer(tape, binder, &format!("spatial.l{}", i + 1), h, layer.self_rows.clone(), layer.neighbor_rows.clone());
    }
    tape.gather_rows(h, plan.center_rows.clone())
}

/// One aggregation layer: output row `r` combines input row `self_rows[r]` with the mean of
/// rows `neighbor_rows[r]` (zero when empty).
pub fn sage_layer<'a>(
    tape: &mut Tape<'a>,
    binder: &mut Binder<'a>,
    prefix: &str,
    h: Var,
    self_rows: Vec<usize>,
    neighbor_rows: Arc<Vec<Vec<usize>>>,
) -> Var {
    let own = tape.gather_rows(h, self_rows);
    let agg = tape.mean_rows(h, neighbor_rows);
    let cat = tape.concat_cols(&[own, agg]);
    let pre = binder.linear(tape, prefix, cat);
    tape.relu(pre)
}

/// Embedding of one state for a single `(nodes, channels)` frame.
pub fn encode_state(
    params: &ParamStore,
    graph: &StateGraph,
    frame: ArrayView2<f64>,
    state: usize,
    k: usize,
    dropped: &[usize],
) -> Array1<f64> {
    let plan = SpatialPlan::new(graph, &[(0, state)], k);
    let mut tape = Tape::new();
    let mut binder = Binder::new(params);
    let out = encode(&mut tape, &mut binder, &plan, &[frame], dropped);
    tape.value(out).row(0).to_owned()
}
