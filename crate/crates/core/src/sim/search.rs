//! Search over policy schedules: UCT tree search and exhaustive enumeration.
//!
//! A schedule is one action per decision period, and an action is a set of policies enacted
//! together (possibly none). Both searches work on action indices and a cost callback, so
//! they can be tested against closed-form cost functions as well as the world model.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Simulator, Trajectory};
use crate::error::{Error, Result};
use crate::sim::Scenario;

/// Largest schedule space [`exhaustive`] will enumerate.
pub const EXHAUSTIVE_LIMIT: u128 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Decision periods.
    pub depth: usize,
    /// Simulations.
    pub budget: usize,
    pub exploration: f64,
    /// Largest number of policies enacted in one period.
    pub max_subset: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { depth: 2, budget: 1000, exploration: std::f64::consts::SQRT_2, max_subset: 1, seed: 0 }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::BudgetZero);
        }
        if self.depth == 0 {
            return Err(Error::Config("search depth must be at least 1".into()));
        }
        if self.max_subset == 0 {
            return Err(Error::Config("max_subset must be at least 1".into()));
        }
        if !(self.exploration.is_finite() && self.exploration >= 0.0) {
            return Err(Error::Config("exploration constant must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// The no-op followed by every subset of the deduplicated pool with at most `max_subset`
/// members, in lexicographic order of sorted id lists.
pub fn actions(pool: &[String], max_subset: usize) -> Vec<Vec<String>> {
    let mut ids = pool.to_vec();
    ids.sort();
    ids.dedup();
    let mut out = vec![Vec::new()];
    let mut stack: Vec<(usize, Vec<String>)> = vec![(0, Vec::new())];
    while let Some((from, prefix)) = stack.pop() {
        if prefix.len() == max_subset {
            continue;
        }
        for (i, id) in ids.iter().enumerate().skip(from) {
            let mut next = prefix.clone();
            next.push(id.clone());
            out.push(next.clone());
            stack.push((i + 1, next));
        }
    }
    out.sort();
    out
}

/// Number of schedules of `depth` periods over `actions` choices, saturating.
pub fn space_size(actions: usize, depth: usize) -> u128 {
    (0..depth).fold(1u128, |acc, _| acc.saturating_mul(actions as u128))
}

/// Lowest-cost schedule by full enumeration. Ties keep the lexicographically smallest
/// index sequence.
pub fn exhaustive(
    n_actions: usize,
    depth: usize,
    mut cost: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<(Vec<usize>, f64)> {
    let size = space_size(n_actions, depth);
    if size > EXHAUSTIVE_LIMIT {
        return Err(Error::SpaceTooLarge(size));
    }
    if n_actions == 0 {
        return Err(Error::EmptyPool);
    }
    let mut schedule = vec![0usize; depth];
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let c = cost(&schedule)?;
        if best.as_ref().is_none_or(|(_, b)| c < *b) {
            best = Some((schedule.clone(), c));
        }
        let Some(pos) = (0..depth).rev().find(|&d| schedule[d] + 1 < n_actions) else { break };
        schedule[pos] += 1;
        schedule[pos + 1..].fill(0);
    }
    Ok(best.expect("at least one schedule"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchNode {
    pub depth: usize,
    /// Action taken from the parent; `None` at the root.
    pub action: Option<usize>,
    pub n: u64,
    /// Sum of backed-up normalised rewards.
    pub value: f64,
    /// Sum of backed-up raw costs.
    pub cost: f64,
    /// Child node index by action.
    pub children: BTreeMap<usize, usize>,
    untried: Vec<usize>,
    samples: u64,
}

impl SearchNode {
    fn new(depth: usize, action: Option<usize>, n_actions: usize, terminal: bool) -> Self {
        SearchNode {
            depth,
            action,
            n: 0,
            value: 0.0,
            cost: 0.0,
            children: BTreeMap::new(),
            untried: if terminal { Vec::new() } else { (0..n_actions).collect() },
            samples: 0,
        }
    }

    pub fn mean_value(&self) -> f64 {
        if self.samples == 0 { 0.0 } else { self.value / self.samples as f64 }
    }

    pub fn mean_cost(&self) -> f64 {
        if self.samples == 0 { 0.0 } else { self.cost / self.samples as f64 }
    }
}

/// Search tree after a run. Node 0 is the root.
#[derive(Debug, Clone)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
    pub depth: usize,
    pub simulations: usize,
    /// Cost of every schedule evaluated.
    pub costs: BTreeMap<Vec<usize>, f64>,
    /// Every normalised reward handed to backpropagation, in order.
    pub rewards: Vec<f64>,
}

impl SearchTree {
    pub fn root(&self) -> &SearchNode {
        &self.nodes[0]
    }

    /// Follows the most-visited child from the root (ties by lower mean cost, then lower
    /// action index) and completes the path with the cheapest evaluated schedule sharing it.
    pub fn best(&self) -> (Vec<usize>, f64) {
        let mut prefix = Vec::new();
        let mut node = &self.nodes[0];
        while let Some(&child) = node.children.values().max_by(|&&a, &&b| {
            let (a, b) = (&self.nodes[a], &self.nodes[b]);
            a.n.cmp(&b.n).then(b.mean_cost().total_cmp(&a.mean_cost())).then(b.action.cmp(&a.action))
        }) {
            node = &self.nodes[child];
            prefix.push(node.action.expect("child has an action"));
        }
        let (schedule, cost) = self
            .costs
            .iter()
            .filter(|(s, _)| s.starts_with(&prefix))
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)))
            .expect("every visited node lies on an evaluated schedule");
        (schedule.clone(), *cost)
    }

    /// Nested view of the tree, with action indices mapped through `label`.
    pub fn dump<T: Clone>(&self, label: impl Fn(usize) -> T) -> TreeDump<T> {
        self.dump_node(0, &label)
    }

    fn dump_node<T: Clone>(&self, i: usize, label: &impl Fn(usize) -> T) -> TreeDump<T> {
        let node = &self.nodes[i];
        TreeDump {
            action: node.action.map(label),
            n: node.n,
            mean_value: node.mean_value(),
            mean_cost: node.mean_cost(),
            children: node.children.values().map(|&c| self.dump_node(c, label)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDump<T> {
    pub action: Option<T>,
    pub n: u64,
    pub mean_value: f64,
    pub mean_cost: f64,
    pub children: Vec<TreeDump<T>>,
}

impl<T> TreeDump<T> {
    /// Whether every node with children has one more visit than its children together.
    pub fn visits_conserved(&self) -> bool {
        (self.children.is_empty() || self.n == 1 + self.children.iter().map(|c| c.n).sum::<u64>())
            && self.children.iter().all(|c| c.visits_conserved())
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(|c| c.size()).sum::<usize>()
    }
}

/// UCT search for the schedule of `config.depth` actions with the lowest `cost`. Costs are
/// memoised per schedule; rewards are costs min-max normalised over everything observed so
/// far, with lower cost scoring higher.
pub fn mcts(n_actions: usize, config: &SearchConfig, mut cost: impl FnMut(&[usize]) -> Result<f64>) -> Result<SearchTree> {
    config.validate()?;
    if n_actions == 0 {
        return Err(Error::EmptyPool);
    }
    let depth = config.depth;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut root = SearchNode::new(0, None, n_actions, false);
    root.n = 1;
    let mut tree = SearchTree { nodes: vec![root], depth, simulations: 0, costs: BTreeMap::new(), rewards: Vec::new() };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);

    for _ in 0..config.budget {
        let mut path = vec![0usize];
        let mut schedule = Vec::with_capacity(depth);
        loop {
            let current = *path.last().expect("non-empty");
            let node = &tree.nodes[current];
            let level = node.depth;
            if level == depth {
                break;
            }
            if !node.untried.is_empty() {
                let pick = rng.random_range(0..node.untried.len());
                let action = tree.nodes[current].untried.swap_remove(pick);
                let child = SearchNode::new(level + 1, Some(action), n_actions, level + 1 == depth);
                tree.nodes.push(child);
                let id = tree.nodes.len() - 1;
                tree.nodes[current].children.insert(action, id);
                path.push(id);
                schedule.push(action);
                break;
            }
            let ln_parent = (node.n as f64).ln();
            let (&action, &child) = node
                .children
                .iter()
                .max_by(|a, b| {
                    let score = |c: usize| {
                        let c = &tree.nodes[c];
                        c.mean_value() + config.exploration * (ln_parent / c.n as f64).sqrt()
                    };
                    score(*a.1).total_cmp(&score(*b.1)).then(b.0.cmp(a.0))
                })
                .expect("expanded node has children");
            path.push(child);
            schedule.push(action);
        }
        let all: Vec<usize> = (0..n_actions).collect();
        while schedule.len() < depth {
            schedule.push(*all.choose(&mut rng).expect("non-empty"));
        }
        let c = match tree.costs.get(&schedule) {
            Some(&c) => c,
            None => {
                let c = cost(&schedule)?;
                if !c.is_finite() {
                    return Err(Error::Value(format!("schedule cost {c} is not finite")));
                }
                tree.costs.insert(schedule.clone(), c);
                c
            }
        };
        lo = lo.min(c);
        hi = hi.max(c);
        let reward = if hi > lo { (hi - c) / (hi - lo) } else { 0.5 };
        tree.rewards.push(reward);
        for &i in &path {
            let node = &mut tree.nodes[i];
            node.n += 1;
            node.samples += 1;
            node.value += reward;
            node.cost += c;
        }
        tree.simulations += 1;
    }
    Ok(tree)
}

/// Result of a schedule search through the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    /// Policies enacted in each decision period.
    pub schedule: Vec<Vec<String>>,
    /// Cumulative predicted outcome on the raw-count scale.
    pub cost: f64,
    /// Cost of enacting nothing in every period.
    pub baseline_cost: f64,
    pub trajectory: Trajectory,
    /// Simulations run; 0 for exhaustive search.
    pub simulations: usize,
    /// Distinct schedules evaluated.
    pub evaluated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<TreeDump<Vec<String>>>,
}

impl Simulator {
    fn pool(&self, scenario: &Scenario, pool: Option<&[String]>) -> Result<Vec<String>> {
        let pool = pool.or(scenario.pool.as_deref()).unwrap_or(&[]).to_vec();
        for id in &pool {
            self.data.corpus.get(id)?;
        }
        Ok(pool)
    }

    fn plan(&self, scenario: &Scenario, acts: &[Vec<String>], indices: &[usize], simulations: usize, evaluated: usize, tree: Option<TreeDump<Vec<String>>>) -> Result<Plan> {
        let r = self.resolve(scenario)?;
        let schedule: Vec<Vec<String>> = indices.iter().map(|&a| acts[a].clone()).collect();
        let trajectory = self.rollout(&r, &schedule)?;
        let baseline = self.rollout(&r, &vec![Vec::new(); indices.len()])?;
        Ok(Plan { schedule, cost: trajectory.total(), baseline_cost: baseline.total(), trajectory, simulations, evaluated, tree })
    }

    /// Tree search over schedules of `config.depth` periods drawn from `pool`, or from the
    /// scenario's own pool when `pool` is `None`.
    pub fn optimize(&self, scenario: &Scenario, pool: Option<&[String]>, config: &SearchConfig) -> Result<Plan> {
        config.validate()?;
        let pool = self.pool(scenario, pool)?;
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        let acts = actions(&pool, config.max_subset);
        let r = self.resolve(scenario)?;
        let tree = mcts(acts.len(), config, |s| {
            let schedule: Vec<Vec<String>> = s.iter().map(|&a| acts[a].clone()).collect();
            Ok(self.rollout(&r, &schedule)?.total())
        })?;
        let (best, _) = tree.best();
        let dump = tree.dump(|a| acts[a].clone());
        self.plan(scenario, &acts, &best, tree.simulations, tree.costs.len(), Some(dump))
    }

    /// Enumerates every schedule. An empty pool yields the all-no-op schedule.
    pub fn optimize_exhaustive(&self, scenario: &Scenario, pool: Option<&[String]>, depth: usize, max_subset: usize) -> Result<Plan> {
        if depth == 0 || max_subset == 0 {
            return Err(Error::Config("depth and max_subset must be at least 1".into()));
        }
        let pool = self.pool(scenario, pool)?;
        let acts = actions(&pool, max_subset);
        let r = self.resolve(scenario)?;
        let mut evaluated = 0;
        let (best, _) = exhaustive(acts.len(), depth, |s| {
            evaluated += 1;
            let schedule: Vec<Vec<String>> = s.iter().map(|&a| acts[a].clone()).collect();
            Ok(self.rollout(&r, &schedule)?.total())
        })?;
        self.plan(scenario, &acts, &best, 0, evaluated, None)
    }
}
