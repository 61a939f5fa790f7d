//! Policy knowledge-graph encoding, code-vector fallback and codebook retrieval.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::binder::Binder;
use crate::data::{EntityEmbeddingTable, PolicyCodes, PolicyCorpus, SubstanceCoverage, TargetPopulation};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Width of an encoded policy code vector: 9 binaries, 3-way substance one-hot,
/// 3 scaled integers, 5-way target-population one-hot.
pub const CODE_WIDTH: usize = 20;

/// Relation strings with their own weights. Everything else shares the overflow slot,
/// which is always the last index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationVocab {
    names: Vec<String>,
}

impl RelationVocab {
    /// Keeps the `cap - 1` most frequent relations (ties broken by name), sorted by name.
    pub fn build(corpus: &PolicyCorpus, cap: usize) -> Self {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for r in corpus.records() {
            for t in &r.triplets {
                *freq.entry(t.relation.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut names: Vec<String> = ranked.into_iter().take(cap.saturating_sub(1)).map(|(n, _)| n.to_string()).collect();
        names.sort();
        RelationVocab { names }
    }

    pub fn from_names(mut names: Vec<String>) -> Self {
        names.sort();
        names.dedup();
        RelationVocab { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of forward relation slots, including the overflow slot.
    pub fn slots(&self) -> usize {
        self.names.len() + 1
    }

    pub fn index(&self, relation: &str) -> usize {
        self.names.binary_search_by(|n| n.as_str().cmp(relation)).unwrap_or(self.names.len())
    }
}

/// Corpus-wide bounds for the three integer policy-code fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeBounds {
    pub min: [i64; 3],
    pub max: [i64; 3],
}

impl CodeBounds {
    pub fn from_corpus(corpus: &PolicyCorpus) -> Self {
        let mut min = [i64::MAX; 3];
        let mut max = [i64::MIN; 3];
        for codes in corpus.records().filter_map(|r| r.policy_codes.as_ref()) {
            for (i, (_, v)) in codes.integers().into_iter().enumerate() {
                if let Some(v) = v {
                    min[i] = min[i].min(v);
                    max[i] = max[i].max(v);
                }
            }
        }
        for i in 0..3 {
            if min[i] > max[i] {
                min[i] = 0;
                max[i] = 0;
            }
        }
        CodeBounds { min, max }
    }

    fn scale(&self, i: usize, v: i64) -> f64 {
        let span = self.max[i] - self.min[i];
        if span <= 0 {
            0.0
        } else {
            ((v - self.min[i]) as f64 / span as f64).clamp(0.0, 1.0)
        }
    }
}

fn substance_index(s: SubstanceCoverage) -> usize {
    match s {
        SubstanceCoverage::SchedulesIIToV => 0,
        SubstanceCoverage::SchedulesIIToIV => 1,
        SubstanceCoverage::DrugsOfConcern => 2,
    }
}

fn population_index(p: TargetPopulation) -> usize {
    match p {
        TargetPopulation::RecoveryResidents => 0,
        TargetPopulation::Youth => 1,
        TargetPopulation::Homeless => 2,
        TargetPopulation::IncarceratedOrDetained => 3,
        TargetPopulation::MentalIllness => 4,
    }
}

/// Encodes a code record as a [`CODE_WIDTH`] vector. Missing fields read as zero.
pub fn encode_code_vector(codes: &PolicyCodes, bounds: &CodeBounds) -> Result<Array1<f64>> {
    codes.validate()?;
    let mut out = Array1::zeros(CODE_WIDTH);
    for (i, (_, v)) in codes.binaries().into_iter().enumerate() {
        out[i] = f64::from(v.unwrap_or(0));
    }
    if let Some(s) = codes.substance_monitored {
        out[9 + substance_index(s)] = 1.0;
    }
    for (i, (_, v)) in codes.integers().into_iter().enumerate() {
        if let Some(v) = v {
            out[12 + i] = bounds.scale(i, v);
        }
    }
    if let Some(p) = codes.target_population {
        out[15 + population_index(p)] = 1.0;
    }
    Ok(out)
}

/// A knowledge graph resolved against the entity table and relation vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedKg {
    pub entities: Vec<String>,
    /// Initial entity embeddings, one row per entity.
    pub init: Array2<f64>,
    /// `(subject, relation slot, object)` in entity indices.
    pub edges: Vec<(usize, usize, usize)>,
}

/// Everything the model needs about a set of simultaneously active policies.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySetInput {
    /// Sorted, deduplicated policy ids.
    pub ids: Vec<String>,
    pub kg: PreparedKg,
    /// Element-wise maximum of the member policies' code vectors.
    pub codes: Array1<f64>,
}

impl PolicySetInput {
    pub fn is_empty(&self) -> bool {
        self.kg.entities.is_empty()
    }
}

/// Resolves `ids` into a [`PolicySetInput`]. With `require_codes` every policy must carry codes.
pub fn prepare_policy_set<S: AsRef<str>>(
    ids: &[S],
    corpus: &PolicyCorpus,
    entities: &EntityEmbeddingTable,
    vocab: &RelationVocab,
    bounds: &CodeBounds,
    require_codes: bool,
) -> Result<PolicySetInput> {
    let mut ids: Vec<String> = ids.iter().map(|s| s.as_ref().to_string()).collect();
    ids.sort();
    ids.dedup();
    let kg = corpus.kg_for(&ids)?;
    let names: Vec<String> = kg.entities().into_iter().map(str::to_string).collect();
    let mut init = Array2::zeros((names.len(), entities.dim()));
    for (i, name) in names.iter().enumerate() {
        init.row_mut(i).assign(&ndarray::ArrayView1::from(entities.get(name)?));
    }
    let pos = |e: &str| names.binary_search_by(|n| n.as_str().cmp(e)).expect("entity listed");
    let edges = kg.triplets().map(|t| (pos(&t.subject), vocab.index(&t.relation), pos(&t.object))).collect();
    let mut codes = Array1::zeros(CODE_WIDTH);
    for id in &ids {
        match &corpus.get(id)?.policy_codes {
            Some(c) => {
                let v = encode_code_vector(c, bounds)?;
                codes.zip_mut_with(&v, |a: &mut f64, &b| *a = a.max(b));
            }
            None if require_codes => {
                return Err(Error::Schema(format!("policy {id} has no policy_codes")));
            }
            None => {}
        }
    }
    Ok(PolicySetInput { ids, kg: PreparedKg { entities: names, init, edges }, codes })
}

pub fn init_kg_params(store: &mut ParamStore, d_s: usize, d: usize, layers: usize, slots: usize, rng: &mut ChaCha8Rng) {
    store.insert_xavier("kg.proj.w", d_s, d, rng);
    store.insert_zeros("kg.proj.b", 1, d);
    for l in 1..=layers {
        store.insert_xavier(&format!("kg.l{l}.self.w"), d, d, rng);
        store.insert_zeros(&format!("kg.l{l}.self.b"), 1, d);
        for r in 0..2 * slots {
            store.insert_xavier(&format!("kg.l{l}.rel{r}.w"), d, d, rng);
        }
    }
}

/// Encodes the entities of several KGs at once. Returns the stacked embeddings and, per
/// KG, the rows that belong to it. Messages flow subject→object under the forward slot
/// and object→subject under `slot + slots`.
pub fn encode_kgs<'a>(
    tape: &mut Tape<'a>,
    binder: &mut Binder<'a>,
    kgs: &[&PreparedKg],
    layers: usize,
    slots: usize,
) -> (Var, Vec<Vec<usize>>) {
    let total: usize = kgs.iter().map(|k| k.entities.len()).sum();
    let d_s = kgs.iter().map(|k| k.init.ncols()).next().unwrap_or(0);
    let mut init = Array2::zeros((total, d_s));
    let mut rows_of = Vec::with_capacity(kgs.len());
    let mut lists: Vec<Vec<Vec<usize>>> = vec![Vec::new(); 2 * slots];
    let mut offset = 0;
    for kg in kgs {
        let n = kg.entities.len();
        init.slice_mut(ndarray::s![offset..offset + n, ..]).assign(&kg.init);
        rows_of.push((offset..offset + n).collect());
        for &(s, r, o) in &kg.edges {
            for (slot, dst, src) in [(r, o, s), (r + slots, s, o)] {
                let l = &mut lists[slot];
                if l.is_empty() {
                    l.resize(total, Vec::new());
                }
                l[offset + dst].push(offset + src);
            }
        }
        offset += n;
    }
    let used: Vec<(usize, Arc<Vec<Vec<usize>>>)> = lists
        .into_iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(slot, mut l)| {
            for nb in &mut l {
                nb.sort_unstable();
                nb.dedup();
            }
            (slot, Arc::new(l))
        })
        .collect();
    let x = tape.constant(init);
    let mut h = binder.linear(tape, "kg.proj", x);
    for layer in 1..=layers {
        let mut acc = binder.linear(tape, &format!("kg.l{layer}.self"), h);
        for (slot, l) in &used {
            let m = tape.mean_rows(h, l.clone());
            let msg = binder.linear_nobias(tape, &format!("kg.l{layer}.rel{slot}"), m);
            acc = tape.add(acc, msg);
        }
        h = tape.relu(acc);
    }
    (h, rows_of)
}

/// Soft codebook read-out: `softmax(cos(u, c_k) / τ) · C` for every row `u` of `queries`.
/// A zero query has cosine 0 with every code and so reads out the code mean.
pub fn retrieve(tape: &mut Tape, queries: Var, codes: Var, tau: f64) -> Var {
    let qn = tape.row_normalize(queries);
    let cn = tape.row_normalize(codes);
    let cos = tape.matmul_t(qn, cn);
    let logits = tape.scale(cos, 1.0 / tau);
    let weights = tape.softmax_rows(logits);
    tape.matmul(weights, codes)
}

/// Retrieval weights for a single query, outside any tape.
pub fn retrieval_weights(query: &Array1<f64>, codes: &Array2<f64>, tau: f64) -> Array1<f64> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone().insert_axis(ndarray::Axis(0)));
    let qn = tape.row_normalize(q);
    let c = tape.constant(codes.clone());
    let cn = tape.row_normalize(c);
    let cos = tape.matmul_t(qn, cn);
    let logits = tape.scale(cos, 1.0 / tau);
    let w = tape.softmax_rows(logits);
    tape.value(w).row(0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PolicyRecord, Triplet};
    use crate::month::Month;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn record(id: &str, triplets: &[(&str, &str, &str)], codes: Option<PolicyCodes>) -> PolicyRecord {
        PolicyRecord {
            policy_id: id.into(),
            state: "A".into(),
            enacted_month: Month::new(2020, 1).unwrap(),
            repealed_month: None,
            triplets: triplets.iter().map(|(s, r, o)| Triplet::new(s, r, o)).collect(),
            policy_codes: codes,
        }
    }

    fn table(names: &[&str], dim: usize) -> EntityEmbeddingTable {
        let mut m = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            m.insert(n.to_string(), (0..dim).map(|j| ((i * dim + j) as f64 * 0.37).sin()).collect());
        }
        EntityEmbeddingTable::new(m).unwrap()
    }

    #[test]
    fn vocab_caps_and_overflows() {
        let corpus = PolicyCorpus::new(vec![record(
            "p",
            &[("a", "funds", "b"), ("b", "funds", "c"), ("a", "zeta", "c"), ("c", "alpha", "a")],
            None,
        )])
        .unwrap();
        let v = RelationVocab::build(&corpus, 3);
        assert_eq!(v.names(), &["alpha".to_string(), "funds".to_string()]);
        assert_eq!(v.index("zeta"), 2);
        assert_eq!(v.index("never_seen"), 2);
        assert_eq!(v.slots(), 3);
    }

    #[test]
    fn integer_scaling_uses_corpus_bounds() {
        let lo = PolicyCodes { max_initial_days_adult: Some(3), ..Default::default() };
        let hi = PolicyCodes { max_initial_days_adult: Some(30), ..Default::default() };
        let corpus = PolicyCorpus::new(vec![record("a", &[("x", "r", "y")], Some(lo)), record("b", &[("x", "r", "y")], Some(hi))]).unwrap();
        let bounds = CodeBounds::from_corpus(&corpus);
        let seven = PolicyCodes { max_initial_days_adult: Some(7), ..Default::default() };
        let v = encode_code_vector(&seven, &bounds).unwrap();
        assert!((v[12] - 4.0 / 27.0).abs() < 1e-15);
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn code_vector_layout() {
        let codes = PolicyCodes {
            prescriber_mandatory_pdmp_use: Some(1),
            substance_monitored: Some(SubstanceCoverage::DrugsOfConcern),
            target_population: Some(TargetPopulation::Youth),
            ..Default::default()
        };
        let bounds = CodeBounds { min: [0; 3], max: [10; 3] };
        let v = encode_code_vector(&codes, &bounds).unwrap();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[11], 1.0);
        assert_eq!(v[16], 1.0);
        assert_eq!(v.sum(), 3.0);
    }

    #[test]
    fn duplicate_triplets_collapse() {
        let once = PolicyCorpus::new(vec![record("p", &[("a", "r", "b")], None)]).unwrap();
        let twice = PolicyCorpus::new(vec![record("p", &[("a", "r", "b"), ("a", "r", "b")], None)]).unwrap();
        let ent = table(&["a", "b"], 3);
        let vocab = RelationVocab::from_names(vec!["r".into()]);
        let bounds = CodeBounds::from_corpus(&once);
        let s1 = prepare_policy_set(&["p"], &once, &ent, &vocab, &bounds, false).unwrap();
        let s2 = prepare_policy_set(&["p"], &twice, &ent, &vocab, &bounds, false).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn one_layer_two_nodes_matches_hand_formula() {
        let corpus = PolicyCorpus::new(vec![record("p", &[("a", "r", "b")], None)]).unwrap();
        let ent = table(&["a", "b"], 2);
        let vocab = RelationVocab::from_names(vec!["r".into()]);
        let set = prepare_policy_set(&["p"], &corpus, &ent, &vocab, &CodeBounds::from_corpus(&corpus), false).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_kg_params(&mut store, 2, 2, 1, vocab.slots(), &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let (h, rows) = encode_kgs(&mut tape, &mut binder, &[&set.kg], 1, vocab.slots());
        assert_eq!(rows, vec![vec![0, 1]]);
        let proj = set.kg.init.dot(store.expect("kg.proj.w")) + store.expect("kg.proj.b");
        let self_part = proj.dot(store.expect("kg.l1.self.w")) + store.expect("kg.l1.self.b");
        // b receives a's state through forward slot 0; a receives b's through inverse slot 2
        let to_b = proj.row(0).dot(store.expect("kg.l1.rel0.w"));
        let to_a = proj.row(1).dot(store.expect("kg.l1.rel2.w"));
        let expect_a = (&self_part.row(0) + &to_a).mapv(|v| v.max(0.0));
        let expect_b = (&self_part.row(1) + &to_b).mapv(|v| v.max(0.0));
        let got = tape.value(h);
        for j in 0..2 {
            assert!((got[[0, j]] - expect_a[j]).abs() < 1e-12);
            assert!((got[[1, j]] - expect_b[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_entity_no_neighbours() {
        let corpus = PolicyCorpus::new(vec![record("p", &[("a", "r", "a")], None)]).unwrap();
        let ent = table(&["a"], 3);
        let vocab = RelationVocab::from_names(vec![]);
        let set = prepare_policy_set(&["p"], &corpus, &ent, &vocab, &CodeBounds::from_corpus(&corpus), false).unwrap();
        assert_eq!(set.kg.entities, vec!["a".to_string()]);
        let mut store = ParamStore::new();
        init_kg_params(&mut store, 3, 3, 2, vocab.slots(), &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let (h, _) = encode_kgs(&mut tape, &mut binder, &[&set.kg], 0, vocab.slots());
        let proj = set.kg.init.dot(store.expect("kg.proj.w")) + store.expect("kg.proj.b");
        assert!(tape.value(h).iter().zip(&proj).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn retrieval_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let codes = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let mean = codes.mean_axis(ndarray::Axis(0)).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(array![[0.3, -0.2, 0.9, 0.1]]);
        let c = tape.constant(codes.clone());
        let out = retrieve(&mut tape, q, c, 1e9);
        assert!(tape.value(out).row(0).iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-6));

        let single = array![[0.5, 1.5, -2.0, 0.0]];
        let mut tape = Tape::new();
        let q = tape.constant(array![[9.0, -3.0, 0.2, 1.0]]);
        let c = tape.constant(single.clone());
        let out = retrieve(&mut tape, q, c, 1.0);
        assert_eq!(tape.value(out), &single);
    }

    #[test]
    fn zero_query_is_uniform() {
        let codes = array![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]];
        let w = retrieval_weights(&array![0.0, 0.0], &codes, 0.5);
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn sharp_retrieval_picks_matching_code() {
        let codes = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut tape = Tape::new();
        let q = tape.constant(codes.row(1).to_owned().insert_axis(ndarray::Axis(0)));
        let c = tape.constant(codes.clone());
        let out = retrieve(&mut tape, q, c, 0.01);
        assert!(tape.value(out).row(0).iter().zip(codes.row(1)).all(|(a, b)| (a - b).abs() < 1e-4));
    }
}
