//! The world model: spatial encoder, policy conditioning, temporal backbone and forecast head.

mod binder;
pub mod codebook;
mod config;
pub mod policy;
pub mod spatial;
pub mod temporal;

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use binder::Binder;
pub use codebook::Codebook;
pub use config::{Ablations, ModelConfig, PeMode};
pub use policy::{CodeBounds, PolicySetInput, PreparedKg, RelationVocab, CODE_WIDTH};

use crate::data::{Dataset, EntityEmbeddingTable, PolicyCorpus, StateGraph, OUTCOME_CHANNEL};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// One history month of one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenInput {
    /// Index into [`Batch::frames`].
    pub frame: usize,
    /// Month position fed to the positional encoding in absolute mode.
    pub position: i64,
    /// Index into [`Batch::policy_sets`]; the center state's active policies at this month.
    pub policy_set: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowInput {
    pub state: usize,
    pub tokens: Vec<TokenInput>,
    /// Added to every forecast of the window when `anchor_last` is set.
    pub anchor: f64,
}

/// A batch of windows over shared frames and policy sets.
pub struct Batch<'b> {
    pub graph: &'b StateGraph,
    /// `(nodes, channels)` feature matrices, already normalised.
    pub frames: &'b [ArrayView2<'b, f64>],
    pub policy_sets: &'b [PolicySetInput],
    pub windows: &'b [WindowInput],
}

/// A recorded forward pass. `prediction` has `windows · horizon` rows and `outputs` columns.
pub struct Forward<'a> {
    pub tape: Tape<'a>,
    pub binder: Binder<'a>,
    pub prediction: Var,
    /// Per-token state embeddings.
    pub spatial: Var,
    /// Per-token policy vectors of width `d_p`.
    pub policy: Option<Var>,
    pub codes: Option<Var>,
    /// Encoded entity embeddings of all non-empty policy sets in the batch.
    pub entities: Option<Var>,
    /// Nearest-code index for every row of `entities`.
    pub assignments: Vec<usize>,
    pub vq_loss: Option<Var>,
    pub self_attention: Var,
    pub cross_attention: Var,
}

impl Forward<'_> {
    pub fn predictions(&self) -> &Array2<f64> {
        self.tape.value(self.prediction)
    }

    pub fn vq_value(&self) -> f64 {
        self.vq_loss.map_or(0.0, |v| self.tape.scalar(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub codebook: Codebook,
    pub vocab: RelationVocab,
    pub bounds: CodeBounds,
    pub channels: usize,
    pub entity_dim: usize,
    pub outcome_channel: usize,
}

impl WorldModel {
    pub fn new(
        config: ModelConfig,
        channels: usize,
        entity_dim: usize,
        vocab: RelationVocab,
        bounds: CodeBounds,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(10);
        let d = config.d;
        let mut params = ParamStore::new();
        spatial::init_params(&mut params, channels, d, config.k_hops, &mut rng);
        let ab = &config.ablations;
        if ab.uses_kg() {
            policy::init_kg_params(&mut params, entity_dim, d, config.effective_kg_layers(), vocab.slots(), &mut rng);
            params.insert_xavier("policy.null", 1, d, &mut rng);
            params.insert_xavier("policy.w1.w", d, config.d_p / 2, &mut rng);
            params.insert_xavier("policy.w2.w", d, config.d_p / 2, &mut rng);
        } else if !ab.no_policy {
            params.insert_xavier("policy.codes.w", CODE_WIDTH, config.d_p, &mut rng);
            params.insert_zeros("policy.codes.b", 1, config.d_p);
        }
        if !ab.no_policy {
            params.insert_xavier("temporal.fuse.w", config.d_p, d, &mut rng);
        }
        temporal::init_params(&mut params, config.token_width(), d, config.ffn, config.horizon, config.outputs, &mut rng);
        let mut init = ParamStore::new();
        init.insert_xavier("codes", config.codebook_size, d, &mut rng);
        let codes = init.expect("codes").clone();
        let codebook = Codebook::new(codes, config.ema_decay, config.ema_eps, config.dead_code_steps);
        Ok(WorldModel { config, params, codebook, vocab, bounds, channels, entity_dim, outcome_channel: OUTCOME_CHANNEL })
    }

    /// A freshly initialised model sized for `data`.
    pub fn for_dataset(config: ModelConfig, data: &Dataset, seed: u64) -> Result<Self> {
        let vocab = RelationVocab::build(&data.corpus, config.relation_cap);
        let bounds = CodeBounds::from_corpus(&data.corpus);
        let mut model = WorldModel::new(config, data.panel.num_channels(), data.entities.dim(), vocab, bounds, seed)?;
        model.outcome_channel = data.panel.outcome_channel();
        Ok(model)
    }

    pub fn prepare_policy_set<S: AsRef<str>>(
        &self,
        ids: &[S],
        corpus: &PolicyCorpus,
        entities: &EntityEmbeddingTable,
    ) -> Result<PolicySetInput> {
        let require_codes = self.config.ablations.no_kg && !self.config.ablations.no_policy;
        policy::prepare_policy_set(ids, corpus, entities, &self.vocab, &self.bounds, require_codes)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        for f in batch.frames {
            if f.ncols() != self.channels {
                return Err(Error::DimensionMismatch(format!("frame has {} channels, model expects {}", f.ncols(), self.channels)));
            }
        }
        for w in batch.windows {
            if w.tokens.len() != self.config.history {
                return Err(Error::DimensionMismatch(format!(
                    "window has {} tokens, model expects {}",
                    w.tokens.len(),
                    self.config.history
                )));
            }
            for t in &w.tokens {
                let frame = batch.frames.get(t.frame).ok_or_else(|| Error::Shape(format!("frame {} out of range", t.frame)))?;
                if w.state >= frame.nrows() {
                    return Err(Error::Shape(format!("state {} out of range", w.state)));
                }
                if t.policy_set >= batch.policy_sets.len() {
                    return Err(Error::Shape(format!("policy set {} out of range", t.policy_set)));
                }
            }
        }
        Ok(())
    }

    /// Records a forward pass. Passing an RNG enables dropout. `sg_codes` overrides the
    /// codes used for nearest-code assignment and the commitment target.
    pub fn forward<'a>(
        &'a self,
        batch: &Batch,
        mut rng: Option<&mut ChaCha8Rng>,
        sg_codes: Option<&Array2<f64>>,
    ) -> Result<Forward<'a>> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let ab = &cfg.ablations;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let tokens: Vec<(usize, TokenInput)> =
            batch.windows.iter().flat_map(|w| w.tokens.iter().map(move |t| (w.state, *t))).collect();

        let centers: Vec<(usize, usize)> = tokens.iter().map(|(s, t)| (t.frame, *s)).collect();
        let plan = spatial::SpatialPlan::new(batch.graph, &centers, cfg.k_hops);
        let dropped = ab.dropped_channels();
        let h = spatial::encode(&mut tape, &mut binder, &plan, batch.frames, &dropped);

        let mut out_policy = None;
        let mut out_codes = None;
        let mut out_entities = None;
        let mut assignments = Vec::new();
        let mut vq_loss = None;
        let mut parts = vec![h];
        if !ab.no_policy {
            // referenced policy sets, in ascending index order
            let mut local: BTreeMap<usize, usize> = BTreeMap::new();
            for (_, t) in &tokens {
                local.entry(t.policy_set).or_insert(0);
            }
            for (i, v) in local.values_mut().enumerate() {
                *v = i;
            }
            let sets: Vec<&PolicySetInput> = local.keys().map(|&k| &batch.policy_sets[k]).collect();
            let token_set: Vec<usize> = tokens.iter().map(|(_, t)| local[&t.policy_set]).collect();
            let p = if ab.no_kg {
                let mut x = Array2::zeros((sets.len(), CODE_WIDTH));
                for (i, s) in sets.iter().enumerate() {
                    x.row_mut(i).assign(&s.codes);
                }
                let x = tape.constant(x);
                let p_sets = binder.linear(&mut tape, "policy.codes", x);
                tape.gather_rows(p_sets, token_set)
            } else {
                let kg_sets: Vec<usize> = (0..sets.len()).filter(|&i| !sets[i].is_empty()).collect();
                let null = binder.var(&mut tape, "policy.null");
                let encoded = if kg_sets.is_empty() {
                    None
                } else {
                    let kgs: Vec<&PreparedKg> = kg_sets.iter().map(|&i| &sets[i].kg).collect();
                    Some(policy::encode_kgs(&mut tape, &mut binder, &kgs, cfg.effective_kg_layers(), self.vocab.slots()))
                };
                // branch-2 query per set: mean entity embedding, or the null vector
                let (pool_src, null_row, kg_rows) = match &encoded {
                    Some((e, rows)) => {
                        let n = tape.shape(*e).0;
                        (tape.concat_rows(&[*e, null]), n, rows.clone())
                    }
                    None => (null, 0, Vec::new()),
                };
                let mut set_lists = vec![vec![null_row]; sets.len()];
                for (j, &i) in kg_sets.iter().enumerate() {
                    set_lists[i] = kg_rows[j].clone();
                }
                let pooled = tape.mean_rows(pool_src, Arc::new(set_lists));
                let (r1, r2_sets) = if ab.no_vq {
                    (h, pooled)
                } else {
                    let c = tape.param(&self.codebook.codes);
                    out_codes = Some(c);
                    (
                        policy::retrieve(&mut tape, h, c, cfg.tau_temp),
                        policy::retrieve(&mut tape, pooled, c, cfg.tau_temp),
                    )
                };
                let r2 = tape.gather_rows(r2_sets, token_set.clone());
                let b1 = binder.linear_nobias(&mut tape, "policy.w1", r1);
                let b2 = binder.linear_nobias(&mut tape, "policy.w2", r2);
                if let Some((e, rows)) = &encoded {
                    out_entities = Some(*e);
                    if !ab.no_vq {
                        let sg = sg_codes.unwrap_or(&self.codebook.codes);
                        assignments = codebook::quantize_rows(tape.value(*e).view(), sg);
                        let target = sg.select(ndarray::Axis(0), &assignments);
                        let diff = tape.constant(target);
                        let diff = tape.sub(*e, diff);
                        let sq = tape.square(diff);
                        let per_entity = tape.sum_cols(sq);
                        let per_kg = tape.mean_rows(per_entity, Arc::new(rows.clone()));
                        let kg_index: BTreeMap<usize, usize> = kg_sets.iter().enumerate().map(|(j, &i)| (i, j)).collect();
                        let picks: Vec<usize> = token_set.iter().filter_map(|i| kg_index.get(i).copied()).collect();
                        let per_token = tape.gather_rows(per_kg, picks);
                        vq_loss = Some(tape.mean_all(per_token));
                    }
                }
                tape.concat_cols(&[b1, b2])
            };
            out_policy = Some(p);
            parts.push(binder.linear_nobias(&mut tape, "temporal.fuse", p));
        }
        if !ab.no_pe {
            let mut pe = Array2::zeros((tokens.len(), cfg.d_pe));
            for (row, (_, t)) in tokens.iter().enumerate() {
                let pos = match cfg.pe_mode {
                    PeMode::Absolute => t.position as f64,
                    PeMode::Relative => (row % cfg.history) as f64,
                };
                pe.row_mut(row).assign(&temporal::positional_encoding(pos, cfg.d_pe));
            }
            parts.push(tape.constant(pe));
        }
        let z = tape.concat_cols(&parts);
        let x = binder.linear(&mut tape, "temporal.in", z);
        let windows = batch.windows.len();
        let (o, self_attention) =
            temporal::encoder_layer(&mut tape, &mut binder, x, windows, cfg.history, cfg.heads, cfg.dropout, rng.as_deref_mut());
        let (mut prediction, cross_attention) =
            temporal::predict_head(&mut tape, &mut binder, o, windows, cfg.history, cfg.horizon, cfg.heads);
        if cfg.anchor_last {
            let mut anchor = Array2::zeros(tape.shape(prediction));
            for (w, win) in batch.windows.iter().enumerate() {
                anchor.slice_mut(ndarray::s![w * cfg.horizon..(w + 1) * cfg.horizon, 0]).fill(win.anchor);
            }
            let anchor = tape.constant(anchor);
            prediction = tape.add(prediction, anchor);
        }
        Ok(Forward {
            tape,
            binder,
            prediction,
            spatial: h,
            policy: out_policy,
            codes: out_codes,
            entities: out_entities,
            assignments,
            vq_loss,
            self_attention,
            cross_attention,
        })
    }
}

/// Mean over rows of the squared L2 error: `1/(N·T_f) Σ ‖ŷ − y‖²` for row-stacked predictions.
pub fn prediction_loss(tape: &mut Tape, prediction: Var, target: Array2<f64>) -> Result<Var> {
    if tape.shape(prediction) != target.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", tape.shape(prediction), target.dim())));
    }
    let y = tape.constant(target);
    let diff = tape.sub(prediction, y);
    let sq = tape.square(diff);
    let per_row = tape.sum_cols(sq);
    Ok(tape.mean_all(per_row))
}

/// `prediction + λ · vq`.
pub fn total_loss(tape: &mut Tape, prediction: Var, vq: Option<Var>, lambda: f64) -> Var {
    match vq {
        Some(v) if lambda != 0.0 => {
            let w = tape.scale(v, lambda);
            tape.add(prediction, w)
        }
        _ => prediction,
    }
}
