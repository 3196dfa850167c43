//! Bidirectional graph-attention tree encoder with GRU aggregation.
//!
//! Each layer runs two independent attention convolutions, one over the
//! parent-to-child edge view and one over the child-to-parent view, and mixes
//! their outputs with a learned gate. After the last layer the node states are
//! read in postorder by a GRU whose final state is the plan embedding.

use alloc::format;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Tape, Var};
use crate::encoder::NodeFeature;
use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::plan::PlanTree;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiggConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// Apply `x + tanh(blend)` after each layer instead of the bare blend.
    pub residual_tanh: bool,
    /// One gate per channel instead of one scalar gate per layer.
    pub per_channel_gate: bool,
}

impl Default for BiggConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_heads: 4,
            num_layers: 4,
            residual_tanh: true,
            per_channel_gate: false,
        }
    }
}

impl BiggConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        if self.hidden_dim == 0
            || self.num_heads == 0
            || !self.hidden_dim.is_multiple_of(self.num_heads)
        {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Weights of one attention convolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub root: ParamId,
}

impl AttentionParams {
    fn new<R: Rng + ?Sized>(prefix: &str, h: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            query: store.add_glorot(format!("{prefix}.query"), h, h, rng),
            key: store.add_glorot(format!("{prefix}.key"), h, h, rng),
            value: store.add_glorot(format!("{prefix}.value"), h, h, rng),
            root: store.add_glorot(format!("{prefix}.root"), h, h, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub down: AttentionParams,
    pub up: AttentionParams,
    /// Unconstrained gate; the mixing weight is its logistic.
    pub gate: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiggParams {
    pub config: BiggConfig,
    pub input_dim: usize,
    pub input_weight: ParamId,
    pub input_bias: ParamId,
    pub layers: Vec<LayerParams>,
    pub gru_input_weight: ParamId,
    pub gru_input_bias: ParamId,
    pub gru_hidden_weight: ParamId,
    pub gru_hidden_bias: ParamId,
}

impl BiggParams {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        config: BiggConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let input_weight = store.add_glorot("bigg.input.weight", input_dim, h, rng);
        let input_bias = store.add_zeros("bigg.input.bias", 1, h);
        let layers = (0..config.num_layers)
            .map(|l| LayerParams {
                down: AttentionParams::new(&format!("bigg.layer{l}.down"), h, store, rng),
                up: AttentionParams::new(&format!("bigg.layer{l}.up"), h, store, rng),
                gate: store.add_zeros(
                    format!("bigg.layer{l}.gate"),
                    1,
                    if config.per_channel_gate { h } else { 1 },
                ),
            })
            .collect();
        Ok(Self {
            config,
            input_dim,
            input_weight,
            input_bias,
            layers,
            gru_input_weight: store.add_glorot("bigg.gru.input.weight", h, 3 * h, rng),
            gru_input_bias: store.add_zeros("bigg.gru.input.bias", 1, 3 * h),
            gru_hidden_weight: store.add_glorot("bigg.gru.hidden.weight", h, 3 * h, rng),
            gru_hidden_bias: store.add_zeros("bigg.gru.hidden.bias", 1, 3 * h),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }
}

/// Several trees laid out as one disjoint graph over consecutive rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphBatch {
    pub num_rows: usize,
    /// `(parent, child)` in batch rows.
    pub down_edges: Vec<(usize, usize)>,
    /// `(child, parent)` in batch rows.
    pub up_edges: Vec<(usize, usize)>,
    /// Postorder rows of each graph.
    pub sequences: Vec<Vec<usize>>,
}

impl GraphBatch {
    /// Appends the subgraph of `tree` induced by `members` (a closed subtree
    /// rooted at `root`, or the whole tree). `row_of` maps each member node id
    /// to the row of its input features. Returns the graph index.
    pub fn push_tree(
        &mut self,
        tree: &PlanTree,
        root: usize,
        mut row_of: impl FnMut(usize) -> usize,
        gather: &mut Vec<usize>,
    ) -> usize {
        let order = tree.postorder_from(root);
        let base = self.num_rows;
        // local position of each node in `order`
        let mut local = alloc::vec![usize::MAX; tree.len()];
        for (pos, &id) in order.iter().enumerate() {
            local[id] = pos;
            gather.push(row_of(id));
        }
        for &id in &order {
            for &c in tree.children(id) {
                self.down_edges.push((base + local[id], base + local[c]));
                self.up_edges.push((base + local[c], base + local[id]));
            }
        }
        self.sequences
            .push((0..order.len()).map(|p| base + p).collect());
        self.num_rows += order.len();
        self.sequences.len() - 1
    }
}

/// `x·W_root + attention(x·W_query, x·W_key, x·W_value)` over `edges`.
pub fn attention_conv(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    edges: &[(usize, usize)],
    p: &AttentionParams,
    heads: usize,
) -> Var {
    let wq = tape.param(store, p.query);
    let wk = tape.param(store, p.key);
    let wv = tape.param(store, p.value);
    let wr = tape.param(store, p.root);
    let root = tape.matmul(x, wr);
    if edges.is_empty() {
        return root;
    }
    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let v = tape.matmul(x, wv);
    let msg = tape.edge_attention(q, k, v, edges, heads);
    tape.add(root, msg)
}

/// `lambda * h_down + (1 - lambda) * h_up`.
pub fn blend(h_down: &Matrix, h_up: &Matrix, lambda: f64) -> Matrix {
    assert_eq!(h_down.shape(), h_up.shape());
    let data = h_down
        .data()
        .iter()
        .zip(h_up.data())
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Matrix::from_vec(h_down.rows(), h_down.cols(), data)
}

/// One bidirectional layer.
pub fn bigg_layer(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    batch: &GraphBatch,
    layer: &LayerParams,
    config: &BiggConfig,
) -> Var {
    let down = attention_conv(
        tape,
        store,
        x,
        &batch.down_edges,
        &layer.down,
        config.num_heads,
    );
    let up = attention_conv(tape, store, x, &batch.up_edges, &layer.up, config.num_heads);
    let gate = tape.param(store, layer.gate);
    let mixed = tape.blend(down, up, gate);
    if config.residual_tanh {
        let act = tape.activation(mixed, Activation::Tanh);
        tape.add(x, act)
    } else {
        mixed
    }
}

/// Final GRU state for each sequence of rows of `states`.
pub fn aggregate_gru(
    tape: &mut Tape,
    store: &ParamStore,
    states: Var,
    sequences: Vec<Vec<usize>>,
    params: &BiggParams,
) -> Var {
    let wi = tape.param(store, params.gru_input_weight);
    let bi = tape.param(store, params.gru_input_bias);
    let wh = tape.param(store, params.gru_hidden_weight);
    let bh = tape.param(store, params.gru_hidden_bias);
    let xi = tape.matmul(states, wi);
    let xi = tape.add_row_bias(xi, bi);
    tape.gru(xi, wh, bh, sequences)
}

/// Embeds every graph of `batch`; `features` has one row per batch row.
pub fn embed_batch(
    tape: &mut Tape,
    store: &ParamStore,
    features: Var,
    batch: &GraphBatch,
    params: &BiggParams,
) -> Var {
    let x = project_inputs(tape, store, features, params);
    embed_projected(tape, store, x, batch, params)
}

/// Row-wise input projection to the hidden width.
pub fn project_inputs(
    tape: &mut Tape,
    store: &ParamStore,
    features: Var,
    params: &BiggParams,
) -> Var {
    let w = tape.param(store, params.input_weight);
    let b = tape.param(store, params.input_bias);
    let x = tape.matmul(features, w);
    tape.add_row_bias(x, b)
}

/// [`embed_batch`] on rows already passed through [`project_inputs`].
pub fn embed_projected(
    tape: &mut Tape,
    store: &ParamStore,
    mut x: Var,
    batch: &GraphBatch,
    params: &BiggParams,
) -> Var {
    for layer in &params.layers {
        x = bigg_layer(tape, store, x, batch, layer, &params.config);
    }
    aggregate_gru(tape, store, x, batch.sequences.clone(), params)
}

/// Fixed-size representation of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEmbedding(pub Vec<f64>);

impl PlanEmbedding {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Embeds one plan given one feature vector per node (indexed by node id).
pub fn embed_plan(
    tree: &PlanTree,
    features: &[NodeFeature],
    params: &BiggParams,
    store: &ParamStore,
) -> Result<PlanEmbedding> {
    if features.len() != tree.len() {
        return Err(Error::Config(format!(
            "{} features for {} nodes",
            features.len(),
            tree.len()
        )));
    }
    if let Some(f) = features.iter().find(|f| f.0.len() != params.input_dim) {
        return Err(Error::Config(format!(
            "feature length {} does not match input dim {}",
            f.0.len(),
            params.input_dim
        )));
    }
    let mut batch = GraphBatch::default();
    let mut gather = Vec::new();
    batch.push_tree(tree, tree.root(), |id| id, &mut gather);
    let data: Vec<f64> = gather
        .iter()
        .flat_map(|&i| features[i].0.iter().copied())
        .collect();
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::from_vec(gather.len(), params.input_dim, data));
    let e = embed_batch(&mut tape, store, x, &batch, params);
    Ok(PlanEmbedding(tape.value(e).row(0).to_vec()))
}

/// Logistic of a layer's gate (its mean for per-channel gates).
pub fn gate_weight(store: &ParamStore, layer: &LayerParams) -> f64 {
    let g = store.get(layer.gate);
    g.data().iter().map(|&x| math::sigmoid(x)).sum::<f64>() / g.len() as f64
}
