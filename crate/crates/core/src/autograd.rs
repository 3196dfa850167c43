//! Reverse-mode differentiation over matrix-valued values.
//!
//! A [`Tape`] records each operation as it is evaluated. Operations are coarse:
//! besides the usual dense algebra there are fused kernels for the pieces of
//! the model that would otherwise explode into thousands of tiny nodes (edge
//! attention, the ragged GRU scan, per-table column pooling and the three
//! training losses). Each fused kernel caches exactly what its backward pass
//! needs.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm_acc, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Softplus,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => math::tanh(x),
            Activation::Sigmoid => math::sigmoid(x),
            Activation::Softplus => math::softplus(x),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Derivative given the pre-activation `x` and the activation `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => math::sigmoid(x),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

/// One referenced column of one node, as consumed by [`Tape::column_pool`].
#[derive(Debug, Clone, PartialEq)]
pub struct PooledColumn {
    pub table: usize,
    /// Global column index; selects rows `8*column..8*column+8` of the stacked weights.
    pub column: usize,
    pub cases: [f64; 8],
}

/// Inputs of the per-table max pooling over column embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnPoolInput {
    pub embed_dim: usize,
    /// Number of catalog columns of each table.
    pub columns_per_table: Vec<usize>,
    /// Referenced columns per output row.
    pub rows: Vec<Vec<PooledColumn>>,
}

/// An ordered pair participating in the ranking loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankPair {
    pub i: usize,
    pub j: usize,
    /// `+1` when plan `i` is slower than plan `j`, else `-1`.
    pub sign: f64,
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    /// In-edge sources grouped by destination (CSR).
    offsets: Vec<usize>,
    sources: Vec<usize>,
    /// Attention weight per (edge, head).
    alpha: Vec<f64>,
}

struct GruCache {
    xi: Var,
    wh: Var,
    bh: Var,
    seqs: Vec<Vec<usize>>,
    /// Per step: h_prev, r, z, n, gh_n (each `hidden` wide).
    steps: Vec<f64>,
}

struct PoolCache {
    weights: Var,
    input: ColumnPoolInput,
    /// Index into the row's column list, or `u32::MAX` for the implicit zero.
    argmax: Vec<u32>,
}

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Blend {
        a: Var,
        b: Var,
        gate: Var,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    Attention(Box<AttentionCache>),
    Gru(Box<GruCache>),
    ColumnPool(Box<PoolCache>),
    GaussianNll {
        mu: Var,
        var: Var,
        targets: Vec<f64>,
        floor: f64,
    },
    PairRank {
        cost: Var,
        pairs: Vec<RankPair>,
        margin: f64,
    },
    ContributionMse {
        est: Var,
        actual: Vec<f64>,
        groups: Vec<(usize, usize)>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Const | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b)
            | Op::AddRowBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _) | Op::Act(a, _) | Op::GatherRows(a, _) | Op::Sum(a) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Blend { a, b, gate } => vec![*a, *b, *gate],
            Op::WeightedSum(terms) => terms.iter().map(|t| t.0).collect(),
            Op::Attention(c) => vec![c.q, c.k, c.v],
            Op::Gru(c) => vec![c.xi, c.wh, c.bh],
            Op::ColumnPool(c) => vec![c.weights],
            Op::GaussianNll { mu, var, .. } => vec![*mu, *var],
            Op::PairRank { cost, .. } => vec![*cost],
            Op::ContributionMse { est, .. } => vec![*est],
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    /// Whether any parameter feeds into this node.
    needs_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad =
            matches!(op, Op::Param(_)) || op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const)
    }

    /// A constant that still receives an adjoint in [`Tape::backward`].
    pub fn leaf(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Const);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Loads a parameter; repeated loads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(b.cols(), self.value(x).cols(), "bias width mismatch");
        let b = b.data().to_vec();
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            for (o, bb) in value.row_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        self.push(value, Op::AddRowBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        for (o, x) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= x;
        }
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut value = self.value(a).clone();
        for (o, x) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= x;
        }
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let value = self.value(x).map(|v| act.apply(v));
        self.push(value, Op::Act(x, act))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat row mismatch");
                let w = src.cols();
                value.row_mut(r)[offset..offset + w].copy_from_slice(src.row(r));
                offset += w;
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let src = self.value(x);
        let mut value = Matrix::zeros(rows.len(), src.cols());
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).copy_from_slice(src.row(r));
        }
        self.push(value, Op::GatherRows(x, rows))
    }

    /// `g ⊙ a + (1 - g) ⊙ b` with `g = sigmoid(gate)`; `gate` is `1x1` or `1xcols`.
    pub fn blend(&mut self, a: Var, b: Var, gate: Var) -> Var {
        let (va, vb, vg) = (self.value(a), self.value(b), self.value(gate));
        assert_eq!(va.shape(), vb.shape(), "blend shape mismatch");
        let per_channel = vg.cols() > 1;
        assert!(
            !per_channel || vg.cols() == va.cols(),
            "gate width mismatch"
        );
        let g: Vec<f64> = vg.data().iter().map(|&x| math::sigmoid(x)).collect();
        let mut value = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            for c in 0..va.cols() {
                let gc = if per_channel { g[c] } else { g[0] };
                value.set(r, c, gc * va.get(r, c) + (1.0 - gc) * vb.get(r, c));
            }
        }
        self.push(value, Op::Blend { a, b, gate })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(x))
    }

    /// Weighted sum of `1x1` values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        self.push(Matrix::scalar(s), Op::WeightedSum(terms.to_vec()))
    }

    /// Multi-head dot-product attention over in-edges.
    ///
    /// `edges` are `(source, target)`; each target attends over its sources.
    /// Targets without in-edges produce a zero row.
    pub fn edge_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        edges: &[(usize, usize)],
        heads: usize,
    ) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let n = vq.rows();
        let width = vq.cols();
        assert!(
            heads > 0 && width % heads == 0,
            "width must divide into heads"
        );
        let dh = width / heads;
        let inv = 1.0 / math::sqrt(dh as f64);

        let mut offsets = vec![0usize; n + 1];
        for &(_, t) in edges {
            offsets[t + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut sources = vec![0usize; edges.len()];
        for &(s, t) in edges {
            sources[fill[t]] = s;
            fill[t] += 1;
        }

        let mut alpha = vec![0.0; edges.len() * heads];
        let mut out = Matrix::zeros(n, width);
        let mut scores = Vec::new();
        for t in 0..n {
            let (lo, hi) = (offsets[t], offsets[t + 1]);
            if lo == hi {
                continue;
            }
            let qt = vq.row(t);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                scores.clear();
                for &s in &sources[lo..hi] {
                    let ks = &vk.row(s)[cols.clone()];
                    let dot: f64 = qt[cols.clone()].iter().zip(ks).map(|(a, b)| a * b).sum();
                    scores.push(dot * inv);
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = math::exp(*sc - max);
                    z += *sc;
                }
                for (e, sc) in scores.iter().enumerate() {
                    let a = sc / z;
                    alpha[(lo + e) * heads + h] = a;
                    let vs = &vv.row(sources[lo + e])[cols.clone()];
                    for (o, x) in out.row_mut(t)[cols.clone()].iter_mut().zip(vs) {
                        *o += a * x;
                    }
                }
            }
        }
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            offsets,
            sources,
            alpha,
        };
        self.push(out, Op::Attention(Box::new(cache)))
    }

    /// Runs a GRU over each row sequence of `xi` from a zero state.
    ///
    /// `xi` holds the input projections (with input bias) laid out as
    /// `[reset | update | candidate]`; `wh` is `hidden x 3*hidden` and `bh`
    /// is `1 x 3*hidden`. Returns one final hidden state per sequence.
    pub fn gru(&mut self, xi: Var, wh: Var, bh: Var, seqs: Vec<Vec<usize>>) -> Var {
        let (vx, vw, vb) = (self.value(xi), self.value(wh), self.value(bh));
        let hidden = vw.rows();
        assert_eq!(vw.cols(), 3 * hidden, "recurrent weight shape");
        assert_eq!(vx.cols(), 3 * hidden, "input projection width");
        assert_eq!(vb.shape(), (1, 3 * hidden), "recurrent bias shape");
        let total_steps: usize = seqs.iter().map(Vec::len).sum();
        let mut steps = Vec::with_capacity(total_steps * 5 * hidden);
        let mut out = Matrix::zeros(seqs.len(), hidden);
        let mut h = vec![0.0; hidden];
        let mut gh = vec![0.0; 3 * hidden];
        for (s, seq) in seqs.iter().enumerate() {
            h.iter_mut().for_each(|x| *x = 0.0);
            for &row in seq {
                let x = vx.row(row);
                gh.copy_from_slice(vb.data());
                for (k, &hk) in h.iter().enumerate() {
                    if hk != 0.0 {
                        for (g, w) in gh.iter_mut().zip(vw.row(k)) {
                            *g += hk * w;
                        }
                    }
                }
                let base = steps.len();
                steps.resize(base + 5 * hidden, 0.0);
                let cache = &mut steps[base..];
                for j in 0..hidden {
                    let r = math::sigmoid(x[j] + gh[j]);
                    let z = math::sigmoid(x[hidden + j] + gh[hidden + j]);
                    let n = math::tanh(x[2 * hidden + j] + r * gh[2 * hidden + j]);
                    cache[j] = h[j];
                    cache[hidden + j] = r;
                    cache[2 * hidden + j] = z;
                    cache[3 * hidden + j] = n;
                    cache[4 * hidden + j] = gh[2 * hidden + j];
                    h[j] = (1.0 - z) * n + z * h[j];
                }
            }
            out.row_mut(s).copy_from_slice(&h);
        }
        let cache = GruCache {
            xi,
            wh,
            bh,
            seqs,
            steps,
        };
        self.push(out, Op::Gru(Box::new(cache)))
    }

    /// Per-table max pooling of column embeddings `E(c) = F(c) · M(c)`.
    ///
    /// `weights` stacks one `8 x embed_dim` block per catalog column. Output row
    /// `i` is the concatenation over tables of the elementwise max over all of
    /// that table's columns; columns the row does not reference embed to zero.
    pub fn column_pool(&mut self, weights: Var, input: ColumnPoolInput) -> Var {
        let w = self.value(weights);
        let dc = input.embed_dim;
        assert_eq!(w.cols(), dc, "column embedding width");
        let tables = input.columns_per_table.len();
        let mut out = Matrix::zeros(input.rows.len(), tables * dc);
        let mut argmax = vec![u32::MAX; input.rows.len() * tables * dc];
        let mut referenced = vec![0usize; tables];
        let mut emb = vec![0.0; dc];
        for (r, cols) in input.rows.iter().enumerate() {
            referenced.iter_mut().for_each(|x| *x = 0);
            for c in cols {
                referenced[c.table] += 1;
            }
            let row = out.row_mut(r);
            for (t, &count) in referenced.iter().enumerate() {
                // With every column referenced there is no implicit zero candidate.
                if count > 0 && count >= input.columns_per_table[t] {
                    row[t * dc..(t + 1) * dc]
                        .iter_mut()
                        .for_each(|x| *x = f64::NEG_INFINITY);
                }
            }
            for (ci, c) in cols.iter().enumerate() {
                emb.iter_mut().for_each(|x| *x = 0.0);
                for (s, &f) in c.cases.iter().enumerate() {
                    if f != 0.0 {
                        for (e, m) in emb.iter_mut().zip(w.row(8 * c.column + s)) {
                            *e += f * m;
                        }
                    }
                }
                for (j, &e) in emb.iter().enumerate() {
                    let slot = c.table * dc + j;
                    if e > row[slot] {
                        row[slot] = e;
                        argmax[r * tables * dc + slot] = ci as u32;
                    }
                }
            }
        }
        let cache = PoolCache {
            weights,
            input,
            argmax,
        };
        self.push(out, Op::ColumnPool(Box::new(cache)))
    }

    /// `(1/N) Σ [ ln(v)/2 + (y - mu)^2 / v ]` with `v = max(var, floor)`.
    pub fn gaussian_nll(&mut self, mu: Var, var: Var, targets: Vec<f64>, floor: f64) -> Var {
        let (vm, vv) = (self.value(mu).data(), self.value(var).data());
        assert_eq!(vm.len(), targets.len());
        assert_eq!(vv.len(), targets.len());
        let value = gaussian_nll_value(vm, vv, &targets, floor);
        self.push(
            Matrix::scalar(value),
            Op::GaussianNll {
                mu,
                var,
                targets,
                floor,
            },
        )
    }

    /// `Σ exp(max(0, -sign * (C_i - C_j) + margin))` over the pairs.
    pub fn pair_rank(&mut self, cost: Var, pairs: Vec<RankPair>, margin: f64) -> Var {
        let c = self.value(cost).data();
        let value = pairs
            .iter()
            .map(|p| math::exp(hinge(c[p.i], c[p.j], p.sign, margin)))
            .sum();
        self.push(
            Matrix::scalar(value),
            Op::PairRank {
                cost,
                pairs,
                margin,
            },
        )
    }

    /// Mean over groups of the within-group mean squared error.
    pub fn contribution_mse(
        &mut self,
        est: Var,
        actual: Vec<f64>,
        groups: Vec<(usize, usize)>,
    ) -> Var {
        let e = self.value(est).data();
        assert_eq!(e.len(), actual.len());
        let value = contribution_mse_value(e, &actual, &groups);
        self.push(
            Matrix::scalar(value),
            Op::ContributionMse {
                est,
                actual,
                groups,
            },
        )
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Adjoints {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Adjoints { adj }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    gemm_acc(g, false, vb, true, slot(adj, *a, va.shape()));
                }
                if self.wants(*b) {
                    gemm_acc(va, true, g, false, slot(adj, *b, vb.shape()));
                }
            }
            Op::AddRowBias(x, b) => {
                slot(adj, *x, g.shape()).add_assign(g);
                let db = slot(adj, *b, (1, g.cols()));
                for r in 0..g.rows() {
                    for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }
            Op::Add(a, b) => {
                slot(adj, *a, g.shape()).add_assign(g);
                slot(adj, *b, g.shape()).add_assign(g);
            }
            Op::Sub(a, b) => {
                slot(adj, *a, g.shape()).add_assign(g);
                let db = slot(adj, *b, g.shape());
                for (d, x) in db.data_mut().iter_mut().zip(g.data()) {
                    *d -= x;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = slot(adj, *a, g.shape());
                    for ((d, x), y) in da.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *d += x * y;
                    }
                }
                if self.wants(*b) {
                    let db = slot(adj, *b, g.shape());
                    for ((d, x), y) in db.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale(a, k) => {
                let da = slot(adj, *a, g.shape());
                for (d, x) in da.data_mut().iter_mut().zip(g.data()) {
                    *d += k * x;
                }
            }
            Op::Act(x, act) if self.wants(*x) => {
                let vx = self.value(*x);
                let y = &node.value;
                let dx = slot(adj, *x, g.shape());
                for (((d, gi), xi), yi) in dx
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(vx.data())
                    .zip(y.data())
                {
                    *d += gi * act.derivative(*xi, *yi);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    if !self.wants(p) {
                        offset += shape.1;
                        continue;
                    }
                    let dp = slot(adj, p, shape);
                    for r in 0..shape.0 {
                        for (d, x) in dp.row_mut(r).iter_mut().zip(&g.row(r)[offset..]) {
                            *d += x;
                        }
                    }
                    offset += shape.1;
                }
            }
            Op::GatherRows(x, rows) if self.wants(*x) => {
                let shape = self.value(*x).shape();
                let dx = slot(adj, *x, shape);
                for (i, &r) in rows.iter().enumerate() {
                    for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
            }
            Op::Blend { a, b, gate } => {
                let (va, vb, vg) = (self.value(*a), self.value(*b), self.value(*gate));
                let per_channel = vg.cols() > 1;
                let gs: Vec<f64> = vg.data().iter().map(|&x| math::sigmoid(x)).collect();
                let gate_at = |c: usize| if per_channel { gs[c] } else { gs[0] };
                let cols = g.cols();
                {
                    let da = slot(adj, *a, g.shape());
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            da.data_mut()[r * cols + c] += gate_at(c) * g.get(r, c);
                        }
                    }
                }
                {
                    let db = slot(adj, *b, g.shape());
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            db.data_mut()[r * cols + c] += (1.0 - gate_at(c)) * g.get(r, c);
                        }
                    }
                }
                let dgate = slot(adj, *gate, vg.shape());
                for r in 0..g.rows() {
                    for c in 0..cols {
                        let gc = gate_at(c);
                        let d = g.get(r, c) * (va.get(r, c) - vb.get(r, c)) * gc * (1.0 - gc);
                        if per_channel {
                            dgate.data_mut()[c] += d;
                        } else {
                            dgate.data_mut()[0] += d;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gs = g.item();
                let dx = slot(adj, *x, self.value(*x).shape());
                dx.data_mut().iter_mut().for_each(|d| *d += gs);
            }
            Op::WeightedSum(terms) => {
                let gs = g.item();
                for &(v, w) in terms {
                    slot(adj, v, (1, 1)).data_mut()[0] += gs * w;
                }
            }
            Op::Act(..) | Op::GatherRows(..) => {}
            Op::Attention(cache) => self.backprop_attention(cache, g, adj),
            Op::Gru(cache) => self.backprop_gru(cache, g, adj),
            Op::ColumnPool(cache) => {
                let shape = self.value(cache.weights).shape();
                let dw = slot(adj, cache.weights, shape);
                let dc = cache.input.embed_dim;
                let width = g.cols();
                for (r, cols) in cache.input.rows.iter().enumerate() {
                    for slot_idx in 0..width {
                        let am = cache.argmax[r * width + slot_idx];
                        if am == u32::MAX {
                            continue;
                        }
                        let c = &cols[am as usize];
                        let j = slot_idx % dc;
                        let gv = g.get(r, slot_idx);
                        for (s, &f) in c.cases.iter().enumerate() {
                            dw.data_mut()[(8 * c.column + s) * dc + j] += f * gv;
                        }
                    }
                }
            }
            Op::GaussianNll {
                mu,
                var,
                targets,
                floor,
            } => {
                let gs = g.item();
                let (vm, vv) = (self.value(*mu), self.value(*var));
                let n = targets.len() as f64;
                let mut dmu = Matrix::zeros(vm.rows(), vm.cols());
                let mut dvar = Matrix::zeros(vv.rows(), vv.cols());
                for (idx, &y) in targets.iter().enumerate() {
                    let m = vm.data()[idx];
                    let raw = vv.data()[idx];
                    let v = raw.max(*floor);
                    let resid = y - m;
                    dmu.data_mut()[idx] = gs * (-2.0 * resid / v) / n;
                    if raw > *floor {
                        dvar.data_mut()[idx] = gs * (0.5 / v - resid * resid / (v * v)) / n;
                    }
                }
                slot(adj, *mu, dmu.shape()).add_assign(&dmu);
                slot(adj, *var, dvar.shape()).add_assign(&dvar);
            }
            Op::PairRank {
                cost,
                pairs,
                margin,
            } => {
                let gs = g.item();
                let vc = self.value(*cost).data().to_vec();
                let dc = slot(adj, *cost, self.value(*cost).shape());
                for p in pairs {
                    let arg = hinge(vc[p.i], vc[p.j], p.sign, *margin);
                    if arg > 0.0 {
                        let t = math::exp(arg);
                        dc.data_mut()[p.i] += gs * t * (-p.sign);
                        dc.data_mut()[p.j] += gs * t * p.sign;
                    }
                }
            }
            Op::ContributionMse {
                est,
                actual,
                groups,
            } => {
                let gs = g.item();
                let ve = self.value(*est).data().to_vec();
                let de = slot(adj, *est, self.value(*est).shape());
                let ng = groups.len() as f64;
                for &(lo, hi) in groups {
                    let k = (hi - lo) as f64;
                    for idx in lo..hi {
                        de.data_mut()[idx] += gs * (-2.0 * (actual[idx] - ve[idx])) / (k * ng);
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, c: &AttentionCache, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let (vq, vk, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let n = vq.rows();
        let width = vq.cols();
        let heads = c.heads;
        let dh = width / heads;
        let inv = 1.0 / math::sqrt(dh as f64);
        let mut dq = Matrix::zeros(n, width);
        let mut dk = Matrix::zeros(vk.rows(), width);
        let mut dv = Matrix::zeros(vv.rows(), width);
        let mut dalpha = Vec::new();
        for t in 0..n {
            let (lo, hi) = (c.offsets[t], c.offsets[t + 1]);
            if lo == hi {
                continue;
            }
            let gt = g.row(t);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                dalpha.clear();
                let mut weighted = 0.0;
                for e in lo..hi {
                    let s = c.sources[e];
                    let a = c.alpha[e * heads + h];
                    let vs = &vv.row(s)[cols.clone()];
                    let da: f64 = gt[cols.clone()].iter().zip(vs).map(|(x, y)| x * y).sum();
                    dalpha.push(da);
                    weighted += a * da;
                    for (d, x) in dv.row_mut(s)[cols.clone()]
                        .iter_mut()
                        .zip(&gt[cols.clone()])
                    {
                        *d += a * x;
                    }
                }
                for (idx, e) in (lo..hi).enumerate() {
                    let s = c.sources[e];
                    let a = c.alpha[e * heads + h];
                    let ds = a * (dalpha[idx] - weighted) * inv;
                    if ds == 0.0 {
                        continue;
                    }
                    for col in cols.clone() {
                        dq.data_mut()[t * width + col] += ds * vk.get(s, col);
                        dk.data_mut()[s * width + col] += ds * vq.get(t, col);
                    }
                }
            }
        }
        slot(adj, c.q, dq.shape()).add_assign(&dq);
        slot(adj, c.k, dk.shape()).add_assign(&dk);
        slot(adj, c.v, dv.shape()).add_assign(&dv);
    }

    fn backprop_gru(&self, c: &GruCache, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let vw = self.value(c.wh);
        let hidden = vw.rows();
        let mut dxi = Matrix::zeros(self.value(c.xi).rows(), 3 * hidden);
        let mut dwh = Matrix::zeros(hidden, 3 * hidden);
        let mut dbh = vec![0.0; 3 * hidden];
        let mut dh = vec![0.0; hidden];
        let mut dgh = vec![0.0; 3 * hidden];
        let mut dh_prev = vec![0.0; hidden];
        let mut step_base = 0usize;
        let stride = 5 * hidden;
        for (s, seq) in c.seqs.iter().enumerate() {
            dh.copy_from_slice(g.row(s));
            let first = step_base;
            step_base += seq.len();
            for (t, &row) in seq.iter().enumerate().rev() {
                let cache = &c.steps[(first + t) * stride..(first + t + 1) * stride];
                let dx = dxi.row_mut(row);
                for j in 0..hidden {
                    let h_prev = cache[j];
                    let r = cache[hidden + j];
                    let z = cache[2 * hidden + j];
                    let n = cache[3 * hidden + j];
                    let ghn = cache[4 * hidden + j];
                    let dn = dh[j] * (1.0 - z);
                    let dz = dh[j] * (h_prev - n);
                    dh_prev[j] = dh[j] * z;
                    let dan = dn * (1.0 - n * n);
                    let dr = dan * ghn;
                    let dar = dr * r * (1.0 - r);
                    let daz = dz * z * (1.0 - z);
                    dx[j] += dar;
                    dx[hidden + j] += daz;
                    dx[2 * hidden + j] += dan;
                    dgh[j] = dar;
                    dgh[hidden + j] = daz;
                    dgh[2 * hidden + j] = dan * r;
                }
                for (d, x) in dbh.iter_mut().zip(&dgh) {
                    *d += x;
                }
                for k in 0..hidden {
                    let h_prev = cache[k];
                    let wrow = vw.row(k);
                    let mut acc = 0.0;
                    for (w, d) in wrow.iter().zip(&dgh) {
                        acc += w * d;
                    }
                    dh_prev[k] += acc;
                    if h_prev != 0.0 {
                        for (dw, d) in dwh.row_mut(k).iter_mut().zip(&dgh) {
                            *dw += h_prev * d;
                        }
                    }
                }
                dh.copy_from_slice(&dh_prev);
            }
        }
        slot(adj, c.xi, dxi.shape()).add_assign(&dxi);
        slot(adj, c.wh, dwh.shape()).add_assign(&dwh);
        slot(adj, c.bh, (1, 3 * hidden)).add_assign(&Matrix::row_vector(dbh));
    }

    /// Parameter gradients collected from a finished backward pass.
    pub fn param_grads(&self, adjoints: &Adjoints, num_params: usize) -> Grads {
        let mut grads = Grads::new(num_params);
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = adjoints.get_index(i) {
                    grads.accumulate(id, g);
                }
            }
        }
        grads
    }
}

fn slot(adj: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    adj[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

#[inline]
fn hinge(ci: f64, cj: f64, sign: f64, margin: f64) -> f64 {
    (-sign * (ci - cj) + margin).max(0.0)
}

pub(crate) fn gaussian_nll_value(mu: &[f64], var: &[f64], y: &[f64], floor: f64) -> f64 {
    let n = y.len() as f64;
    mu.iter()
        .zip(var)
        .zip(y)
        .map(|((&m, &v), &t)| {
            let v = v.max(floor);
            math::ln(v) / 2.0 + (t - m) * (t - m) / v
        })
        .sum::<f64>()
        / n
}

pub(crate) fn contribution_mse_value(
    est: &[f64],
    actual: &[f64],
    groups: &[(usize, usize)],
) -> f64 {
    let total: f64 = groups
        .iter()
        .map(|&(lo, hi)| {
            let k = (hi - lo) as f64;
            (lo..hi)
                .map(|i| (actual[i] - est[i]) * (actual[i] - est[i]))
                .sum::<f64>()
                / k
        })
        .sum();
    total / groups.len() as f64
}

/// Adjoints of every node reachable from the backward root.
pub struct Adjoints {
    adj: Vec<Option<Matrix>>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adj[v.0].as_ref()
    }

    fn get_index(&self, i: usize) -> Option<&Matrix> {
        self.adj[i].as_ref()
    }
}

/// Convenience: forward value and parameter gradients of a scalar loss.
pub fn value_and_grads(tape: &Tape, loss: Var, store: &ParamStore) -> (f64, Grads) {
    let adj = tape.backward(loss);
    (tape.value(loss).item(), tape.param_grads(&adj, store.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Compares the tape gradient of every input entry with central differences.
    fn check_inputs(inputs: &[Matrix], build: &dyn Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let adj = tape.backward(out);
        let h = 1e-6;
        for (idx, m) in inputs.iter().enumerate() {
            let analytic = adj
                .get(vars[idx])
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
            for e in 0..m.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Matrix> = inputs.to_vec();
                    perturbed[idx].data_mut()[e] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.iter().map(|m| t.constant(m.clone())).collect();
                    let o = build(&mut t, &vs);
                    t.value(o).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                let denom = a.abs().max(numeric.abs()).max(1e-5);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "input {idx} entry {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = [
            random_matrix(&mut rng, 3, 4),
            random_matrix(&mut rng, 4, 2),
            random_matrix(&mut rng, 1, 2),
            random_matrix(&mut rng, 3, 2),
        ];
        check_inputs(&inputs, &|t, v| {
            let m = t.matmul(v[0], v[1]);
            let b = t.add_row_bias(m, v[2]);
            let a = t.activation(b, Activation::Tanh);
            let s = t.activation(a, Activation::Softplus);
            let p = t.mul(s, v[3]);
            let q = t.sub(p, v[3]);
            let c = t.concat_cols(&[q, a]);
            let g = t.gather_rows(c, vec![2, 0, 2]);
            let l = t.activation(g, Activation::LeakyRelu(0.1));
            let sg = t.activation(l, Activation::Sigmoid);
            let sc = t.scale(sg, 1.7);
            t.sum(sc)
        });
    }

    #[test]
    fn blend_gradients_scalar_and_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for gate_cols in [1, 3] {
            let inputs = [
                random_matrix(&mut rng, 2, 3),
                random_matrix(&mut rng, 2, 3),
                random_matrix(&mut rng, 1, gate_cols),
                random_matrix(&mut rng, 2, 3),
            ];
            check_inputs(&inputs, &|t, v| {
                let b = t.blend(v[0], v[1], v[2]);
                let w = t.mul(b, v[3]);
                t.sum(w)
            });
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let edges = [(1usize, 0usize), (2, 0), (3, 0), (0, 1), (3, 2)];
        let inputs = [
            random_matrix(&mut rng, 4, 4),
            random_matrix(&mut rng, 4, 4),
            random_matrix(&mut rng, 4, 4),
            random_matrix(&mut rng, 4, 4),
        ];
        check_inputs(&inputs, &|t, v| {
            let a = t.edge_attention(v[0], v[1], v[2], &edges, 2);
            let w = t.mul(a, v[3]);
            t.sum(w)
        });
    }

    #[test]
    fn gru_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let hidden = 3;
        let inputs = [
            random_matrix(&mut rng, 5, 3 * hidden),
            random_matrix(&mut rng, hidden, 3 * hidden),
            random_matrix(&mut rng, 1, 3 * hidden),
            random_matrix(&mut rng, 2, hidden),
        ];
        check_inputs(&inputs, &|t, v| {
            let h = t.gru(v[0], v[1], v[2], vec![vec![4, 0, 2], vec![1, 3, 0]]);
            let w = t.mul(h, v[3]);
            t.sum(w)
        });
    }

    #[test]
    fn column_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut case = || {
            let mut c = [0.0; 8];
            for x in c.iter_mut() {
                *x = rng.random_range(0.0..1.0);
            }
            c
        };
        let input = ColumnPoolInput {
            embed_dim: 2,
            columns_per_table: vec![2, 1],
            rows: vec![
                vec![
                    PooledColumn {
                        table: 0,
                        column: 0,
                        cases: case(),
                    },
                    PooledColumn {
                        table: 0,
                        column: 1,
                        cases: case(),
                    },
                ],
                vec![PooledColumn {
                    table: 1,
                    column: 2,
                    cases: case(),
                }],
                vec![],
            ],
        };
        let inputs = [
            random_matrix(&mut rng, 24, 2),
            random_matrix(&mut rng, 3, 4),
        ];
        check_inputs(&inputs, &|t, v| {
            let p = t.column_pool(v[0], input.clone());
            let w = t.mul(p, v[1]);
            t.sum(w)
        });
    }

    #[test]
    fn loss_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mu = random_matrix(&mut rng, 4, 1);
        let var = random_matrix(&mut rng, 4, 1).map(|x| x.abs() + 0.2);
        let targets: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let t2 = targets.clone();
        check_inputs(&[mu, var], &move |t, v| {
            t.gaussian_nll(v[0], v[1], t2.clone(), 1e-6)
        });

        let cost = Matrix::column_vector(vec![0.1, 0.5, 0.45, 0.9]);
        let pairs = vec![
            RankPair {
                i: 0,
                j: 1,
                sign: 1.0,
            },
            RankPair {
                i: 1,
                j: 2,
                sign: -1.0,
            },
            RankPair {
                i: 0,
                j: 3,
                sign: -1.0,
            },
            RankPair {
                i: 2,
                j: 3,
                sign: 1.0,
            },
        ];
        check_inputs(&[cost], &move |t, v| t.pair_rank(v[0], pairs.clone(), 0.1));

        let est = Matrix::column_vector(vec![0.2, 0.9, 0.4, 0.7, 0.1]);
        check_inputs(&[est], &|t, v| {
            t.contribution_mse(v[0], vec![0.3, 1.0, 0.5, 1.0, 0.05], vec![(0, 2), (2, 5)])
        });
    }

    #[test]
    fn attention_without_edges_is_zero_and_single_source_gets_full_weight() {
        let mut t = Tape::new();
        let q = t.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let v = t.constant(Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let none = t.edge_attention(q, q, v, &[], 1);
        assert!(t.value(none).data().iter().all(|&x| x == 0.0));
        let one = t.edge_attention(q, q, v, &[(1, 0)], 2);
        assert_eq!(t.value(one).row(0), &[7.0, 8.0]);
        assert_eq!(t.value(one).row(1), &[0.0, 0.0]);
    }
}
