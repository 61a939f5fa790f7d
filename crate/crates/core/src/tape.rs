//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix. Operations are evaluated eagerly and recorded on a
//! [`Tape`]; [`Tape::backward`] walks the record in reverse and accumulates gradients.
//! Row-wise operations never mix rows, so a row's result does not depend on which other
//! rows share the batch.

use std::borrow::Cow;
use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention block: query rows attend over key/value rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnGroup {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    /// Adds a `1 × n` row to every row.
    AddRow(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Array2<f64>),
    Relu(usize),
    Square(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    /// Output row `i` is the mean of input rows `lists[i]`, zero when empty.
    MeanRows(usize, Arc<Vec<Vec<usize>>>),
    SumCols(usize),
    MeanAll(usize),
    SoftmaxRows(usize),
    RowNormalize(usize, Vec<f64>),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        groups: Arc<Vec<AttnGroup>>,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    /// Forward value of a constant, gradient passed to the input unchanged.
    StraightThrough(usize),
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation. Leaves may borrow parameter storage.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn softmax_row_inplace(mut row: ndarray::ArrayViewMut1<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: &'a Array2<f64>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients, owning its value.
    pub fn param_owned(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, value: &'a Array2<f64>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on a non-scalar node");
        val[[0, 0]]
    }

    /// Attention probabilities of an [`Tape::attention`] node, one matrix per (group, head).
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a.0, b.0), &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1 x n row");
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a.0, row.0), &[a.0, row.0])
    }

    /// `x · w + b` with `b` a `1 × n` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, Op::Scale(a.0, s), &[a.0])
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let out = self.value(a) * &c;
        self.push(out, Op::MulConst(a.0, c), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a.0), &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a.0), &[a.0])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(out, Op::ConcatCols(idx.clone()), &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(out, Op::ConcatRows(idx.clone()), &idx)
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &rows);
        self.push(out, Op::GatherRows(a.0, rows), &[a.0])
    }

    /// Row `i` of the result is the mean of the rows `lists[i]` of `a`, summed in list order.
    pub fn mean_rows(&mut self, a: Var, lists: Arc<Vec<Vec<usize>>>) -> Var {
        let src = self.value(a);
        let mut out = Array2::zeros((lists.len(), src.ncols()));
        for (i, list) in lists.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let mut row = out.row_mut(i);
            for &j in list {
                row += &src.row(j);
            }
            row /= list.len() as f64;
        }
        self.push(out, Op::MeanRows(a.0, lists), &[a.0])
    }

    /// Per-row sum, `n × d → n × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a.0), &[a.0])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let m = val.sum() / val.len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a.0), &[a.0])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for row in out.rows_mut() {
            softmax_row_inplace(row);
        }
        self.push(out, Op::SoftmaxRows(a.0), &[a.0])
    }

    /// Scales rows to unit L2 norm; all-zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            norms.push(n);
            if n > 0.0 {
                row /= n;
            }
        }
        self.push(out, Op::RowNormalize(a.0, norms.clone()), &[a.0])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.dot(&row) / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Multi-head scaled dot-product attention. Columns split evenly across `heads`;
    /// within each group, query rows attend over that group's key rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: Arc<Vec<AttnGroup>>, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        assert_eq!(kv.ncols(), d);
        assert_eq!(vv.ncols(), d);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(groups.len() * heads);
        for g in groups.iter() {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![g.queries.clone(), cols.clone()]);
                let kh = kv.slice(s![g.keys.clone(), cols.clone()]);
                let vh = vv.slice(s![g.keys.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                for row in p.rows_mut() {
                    softmax_row_inplace(row);
                }
                out.slice_mut(s![g.queries.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q: q.0, k: k.0, v: v.0, groups, heads, probs }, &[q.0, k.0, v.0])
    }

    /// Forward value `target`, backward identity into `input`.
    pub fn straight_through(&mut self, input: Var, target: Array2<f64>) -> Var {
        assert_eq!(self.shape(input), target.dim(), "straight_through shape mismatch");
        self.push(target, Op::StraightThrough(input.0), &[input.0])
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], idx: usize, delta: Array2<f64>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |j: usize| -> &Array2<f64> { &self.nodes[j].value };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[*a].requires_grad {
                    self.accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if self.nodes[*b].requires_grad {
                    self.accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.nodes[*a].requires_grad {
                    self.accumulate(grads, *a, g.dot(val(*b)));
                }
                if self.nodes[*b].requires_grad {
                    self.accumulate(grads, *b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g * *s),
            Op::MulConst(a, c) => self.accumulate(grads, *a, g * c),
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |gv, &x| *gv *= 2.0 * x);
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    if self.nodes[p].requires_grad {
                        self.accumulate(grads, p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = val(p).nrows();
                    if self.nodes[p].requires_grad {
                        self.accumulate(grads, p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(k);
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanRows(a, lists) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (k, list) in lists.iter().enumerate() {
                    if list.is_empty() {
                        continue;
                    }
                    let share = g.row(k).to_owned() / list.len() as f64;
                    for &j in list {
                        let mut dst = d.row_mut(j);
                        dst += &share;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumCols(a) => {
                let (n, m) = val(*a).dim();
                let d = Array2::from_shape_fn((n, m), |(r, _)| g[[r, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::MeanAll(a) => {
                let dim = val(*a).dim();
                let d = Array2::from_elem(dim, g[[0, 0]] / (dim.0 * dim.1) as f64);
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut d = Array2::zeros(y.dim());
                for ((yr, gr), mut dr) in y.rows().into_iter().zip(g.rows()).zip(d.rows_mut()) {
                    let dot = yr.dot(&gr);
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowNormalize(a, norms) => {
                let y = &self.nodes[i].value;
                let mut d = Array2::zeros(y.dim());
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot = yr.dot(&gr);
                    let mut dr = d.row_mut(r);
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = (gv - yv * dot) / n;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gamma_v = val(*gamma);
                if self.nodes[*gamma].requires_grad {
                    self.accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.nodes[*beta].requires_grad {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.nodes[*x].requires_grad {
                    let dxhat = g * gamma_v;
                    let d_cols = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dh = dh.sum() / d_cols;
                        let mean_dh_xh = dh.dot(&xh) / d_cols;
                        let mut out = dx.row_mut(r);
                        for ((o, &a), &b) in out.iter_mut().zip(dh).zip(xh) {
                            *o = inv_std[r] * (a - mean_dh - b * mean_dh_xh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention { q, k, v, groups, heads, probs } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let d = qv.ncols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dk = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                for (gi, grp) in groups.iter().enumerate() {
                    for h in 0..*heads {
                        let p = &probs[gi * heads + h];
                        let cols = h * dh..(h + 1) * dh;
                        let go = g.slice(s![grp.queries.clone(), cols.clone()]);
                        let qh = qv.slice(s![grp.queries.clone(), cols.clone()]);
                        let kh = kv.slice(s![grp.keys.clone(), cols.clone()]);
                        let vh = vv.slice(s![grp.keys.clone(), cols.clone()]);
                        let mut dvh = dv.slice_mut(s![grp.keys.clone(), cols.clone()]);
                        dvh += &p.t().dot(&go);
                        let dp = go.dot(&vh.t());
                        let mut ds = Array2::zeros(p.dim());
                        for ((pr, dpr), mut dsr) in p.rows().into_iter().zip(dp.rows()).zip(ds.rows_mut()) {
                            let dot = pr.dot(&dpr);
                            for ((o, &pv), &dpv) in dsr.iter_mut().zip(pr).zip(dpr) {
                                *o = pv * (dpv - dot) * scale;
                            }
                        }
                        let mut dqh = dq.slice_mut(s![grp.queries.clone(), cols.clone()]);
                        dqh += &ds.dot(&kh);
                        let mut dkh = dk.slice_mut(s![grp.keys.clone(), cols]);
                        dkh += &ds.t().dot(&qh);
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::StraightThrough(a) => self.accumulate(grads, *a, g.clone()),
        }
    }
}
