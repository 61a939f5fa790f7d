//! Sinusoidal positions, the pre-norm Transformer encoder layer and the query-token head.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::binder::Binder;
use crate::params::ParamStore;
use crate::tape::{AttnGroup, Tape, Var};

/// `PE(t)[2i] = sin(t / 10000^{2i/d})`, `PE(t)[2i+1] = cos(t / 10000^{2i/d})`.
pub fn positional_encoding(t: f64, d_pe: usize) -> Array1<f64> {
    let mut out = Array1::zeros(d_pe);
    for i in 0..d_pe / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / d_pe as f64);
        out[2 * i] = (t / freq).sin();
        out[2 * i + 1] = (t / freq).cos();
    }
    out
}

fn init_attention(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for part in ["q", "k", "v", "o"] {
        store.insert_xavier(&format!("{prefix}.{part}.w"), d, d, rng);
        store.insert_zeros(&format!("{prefix}.{part}.b"), 1, d);
    }
}

pub fn init_params(
    store: &mut ParamStore,
    token_width: usize,
    d: usize,
    ffn: usize,
    horizon: usize,
    outputs: usize,
    rng: &mut ChaCha8Rng,
) {
    store.insert_xavier("temporal.in.w", token_width, d, rng);
    store.insert_zeros("temporal.in.b", 1, d);
    store.insert_ones("enc.ln1.g", 1, d);
    store.insert_zeros("enc.ln1.b", 1, d);
    init_attention(store, "enc.attn", d, rng);
    store.insert_ones("enc.ln2.g", 1, d);
    store.insert_zeros("enc.ln2.b", 1, d);
    store.insert_xavier("enc.ffn1.w", d, ffn, rng);
    store.insert_zeros("enc.ffn1.b", 1, ffn);
    store.insert_xavier("enc.ffn2.w", ffn, d, rng);
    store.insert_zeros("enc.ffn2.b", 1, d);
    store.insert_xavier("head.queries", horizon, d, rng);
    init_attention(store, "head.attn", d, rng);
    store.insert_xavier("head.out.w", d, outputs, rng);
    store.insert_zeros("head.out.b", 1, outputs);
}

/// Inverted dropout; a no-op without an RNG.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = Array2::from_shape_fn(tape.shape(x), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
            tape.mul_const(x, mask)
        }
        _ => x,
    }
}

/// Multi-head attention with learned projections `{prefix}.{q,k,v,o}`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head<'a>(
    tape: &mut Tape<'a>,
    binder: &mut Binder<'a>,
    prefix: &str,
    queries: Var,
    memory: Var,
    groups: Arc<Vec<AttnGroup>>,
    heads: usize,
) -> (Var, Var) {
    let q = binder.linear(tape, &format!("{prefix}.q"), queries);
    let k = binder.linear(tape, &format!("{prefix}.k"), memory);
    let v = binder.linear(tape, &format!("{prefix}.v"), memory);
    let att = tape.attention(q, k, v, groups, heads);
    (binder.linear(tape, &format!("{prefix}.o"), att), att)
}

/// Pre-norm encoder layer over `windows` sequences of `len` rows each. Returns the output
/// and the attention node (for inspecting weights).
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer<'a>(
    tape: &mut Tape<'a>,
    binder: &mut Binder<'a>,
    x: Var,
    windows: usize,
    len: usize,
    heads: usize,
    p_drop: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Var, Var) {
    let groups: Arc<Vec<AttnGroup>> = Arc::new(
        (0..windows).map(|w| AttnGroup { queries: w * len..(w + 1) * len, keys: w * len..(w + 1) * len }).collect(),
    );
    let g1 = binder.var(tape, "enc.ln1.g");
    let b1 = binder.var(tape, "enc.ln1.b");
    let n1 = tape.layer_norm(x, g1, b1);
    let (attn_out, att) = multi_head(tape, binder, "enc.attn", n1, n1, groups, heads);
    let attn_out = dropout(tape, attn_out, p_drop, rng.as_deref_mut());
    let x1 = tape.add(x, attn_out);
    let g2 = binder.var(tape, "enc.ln2.g");
    let b2 = binder.var(tape, "enc.ln2.b");
    let n2 = tape.layer_norm(x1, g2, b2);
    let f = binder.linear(tape, "enc.ffn1", n2);
    let f = tape.relu(f);
    let f = binder.linear(tape, "enc.ffn2", f);
    let f = dropout(tape, f, p_drop, rng);
    (tape.add(x1, f), att)
}

/// Learned horizon queries cross-attend over each window's encoder output. Returns
/// `(windows·horizon) × outputs` predictions and the cross-attention node.
pub fn predict_head<'a>(
    tape: &mut Tape<'a>,
    binder: &mut Binder<'a>,
    memory: Var,
    windows: usize,
    len: usize,
    horizon: usize,
    heads: usize,
) -> (Var, Var) {
    let queries = binder.var(tape, "head.queries");
    let rows: Vec<usize> = (0..windows).flat_map(|_| 0..horizon).collect();
    let q = tape.gather_rows(queries, rows);
    let groups: Arc<Vec<AttnGroup>> = Arc::new(
        (0..windows)
            .map(|w| AttnGroup { queries: w * horizon..(w + 1) * horizon, keys: w * len..(w + 1) * len })
            .collect(),
    );
    let (out, att) = multi_head(tape, binder, "head.attn", q, memory, groups, heads);
    (binder.linear(tape, "head.out", out), att)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn pe_at_zero() {
        let pe = positional_encoding(0.0, 6);
        assert_eq!(pe.to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pe_direct_formula() {
        let pe = positional_encoding(5.0, 4);
        let expect = [5f64.sin(), 5f64.cos(), (5.0 / 100.0f64).sin(), (5.0 / 100.0f64).cos()];
        for (a, b) in pe.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pe_bounded() {
        for t in [0.0, 1.0, 17.0, 1234.5, 1e6] {
            assert!(positional_encoding(t, 16).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    fn store(d: usize, horizon: usize) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(&mut s, d, d, 2 * d, horizon, 1, &mut ChaCha8Rng::seed_from_u64(2));
        s
    }

    #[test]
    fn identical_tokens_identical_outputs() {
        let s = store(4, 2);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&s);
        let x = tape.constant(Array2::from_shape_fn((2, 4), |(_, j)| j as f64 * 0.3 - 0.5));
        let (o, att) = encoder_layer(&mut tape, &mut binder, x, 1, 2, 2, 0.1, None);
        let v = tape.value(o);
        assert_eq!(v.row(0), v.row(1));
        for p in tape.attention_probs(att).unwrap() {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let s = store(4, 1);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&s);
        let x = tape.constant(Array2::from_shape_fn((1, 4), |(_, j)| j as f64));
        let (_, att) = encoder_layer(&mut tape, &mut binder, x, 1, 1, 2, 0.0, None);
        for p in tape.attention_probs(att).unwrap() {
            assert_eq!(p[[0, 0]], 1.0);
        }
    }

    #[test]
    fn horizon_queries_are_independent() {
        let mut s = store(4, 3);
        let mem = Array2::from_shape_fn((2, 4), |(i, j)| ((i * 4 + j) as f64).cos());
        let run = |s: &ParamStore| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(s);
            let m = tape.constant(mem.clone());
            let (y, _) = predict_head(&mut tape, &mut binder, m, 1, 2, 3, 2);
            tape.value(y).clone()
        };
        let before = run(&s);
        s.get_mut("head.queries").unwrap().row_mut(2).mapv_inplace(|v| v + 0.7);
        let after = run(&s);
        assert_eq!(before.row(0), after.row(0));
        assert_eq!(before.row(1), after.row(1));
        assert_ne!(before.row(2), after.row(2));
    }

    #[test]
    fn dropout_only_with_rng() {
        let mut tape = Tape::new();
        let x = tape.constant(Array2::ones((10, 10)));
        let y = dropout(&mut tape, x, 0.5, None);
        assert_eq!(x, y);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = dropout(&mut tape, x, 0.5, Some(&mut rng));
        assert!(tape.value(z).iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(tape.value(z).iter().any(|&v| v == 0.0));
    }
}
