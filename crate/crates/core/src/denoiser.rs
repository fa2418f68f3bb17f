//! The graph-transformer denoiser: maps a noisy graph, timestep, and
//! condition embeddings to per-node and per-edge clean-category
//! distributions.
//!
//! Each layer runs multi-head self-attention over nodes where the logits
//! between nodes i and j are additively biased by a projection of the edge
//! feature (i, j); edge features are then updated from the stacked
//! pre-softmax attention logits, so the network can emit edge predictions.
//! A single global vector (timestep embedding plus condition embeddings)
//! is added to every node and edge feature.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::CellGraph;
use crate::conditioning::ConditionVector;
use crate::error::CoreError;
use crate::noise::NoisyGraph;
use crate::tape::{NodeId, Tape};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    /// Positional-encoding width; equals the node feature width.
    pub pe_dim: usize,
    pub dropout: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            n_layers: 5,
            hidden_dim: 64,
            n_heads: 4,
            pe_dim: 64,
            dropout: 0.0,
        }
    }
}

impl DenoiserConfig {
    pub fn tiny() -> Self {
        DenoiserConfig {
            n_layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            pe_dim: 16,
            dropout: 0.0,
        }
    }

    pub fn check(&self) -> Result<(), CoreError> {
        if self.n_layers < 1 {
            return Err(CoreError::InvalidConfig {
                field: "n_layers".into(),
                reason: "must be >= 1".into(),
            });
        }
        if self.hidden_dim == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(CoreError::InvalidConfig {
                field: "hidden_dim".into(),
                reason: "must be positive and divisible by n_heads".into(),
            });
        }
        if self.pe_dim != self.hidden_dim {
            return Err(CoreError::InvalidConfig {
                field: "pe_dim".into(),
                reason: "must equal hidden_dim".into(),
            });
        }
        if self.pe_dim % 2 != 0 {
            return Err(CoreError::InvalidConfig {
                field: "pe_dim".into(),
                reason: "must be even".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::InvalidConfig {
                field: "dropout".into(),
                reason: "must be in [0, 1)".into(),
            });
        }
        Ok(())
    }
}

/// Static shape information the parameters depend on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserDims {
    pub n_nodes: usize,
    pub n_ops: usize,
    pub n_edge_cats: usize,
    /// Class count per condition (null row is added internally).
    pub cond_card: Vec<usize>,
}

/// Named parameter matrices in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub entries: Vec<(String, Matrix)>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> &Matrix {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .1
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.is_finite())
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, m)| (n.clone(), Matrix::zeros(m.rows, m.cols)))
                .collect(),
        }
    }
}

fn fan_in_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (1.0 / rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

fn small_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    // Box-Muller; sigma = 0.02
    Matrix::from_fn(rows, cols, |_, _| {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen::<f64>();
        0.02 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub fn init_params(cfg: &DenoiserConfig, dims: &DenoiserDims, rng: &mut ChaCha8Rng) -> ParamSet {
    let h = cfg.hidden_dim;
    let dh = h / cfg.n_heads;
    let f = 2 * h;
    let mut entries: Vec<(String, Matrix)> = Vec::new();
    let lin = |name: String, rows: usize, cols: usize, entries: &mut Vec<(String, Matrix)>, rng: &mut ChaCha8Rng| {
        entries.push((name.clone(), fan_in_uniform(rows, cols, rng)));
        entries.push((format!("{name}.bias"), Matrix::zeros(1, cols)));
    };
    lin("node_in".into(), dims.n_ops, h, &mut entries, rng);
    lin("edge_in".into(), dims.n_edge_cats, h, &mut entries, rng);
    lin("time_proj".into(), h, h, &mut entries, rng);
    for (i, &d) in dims.cond_card.iter().enumerate() {
        entries.push((format!("cond_emb.{i}"), small_normal(d + 1, h, rng)));
    }
    lin("glob_node".into(), h, h, &mut entries, rng);
    lin("glob_edge".into(), h, h, &mut entries, rng);
    for l in 0..cfg.n_layers {
        for a in 0..cfg.n_heads {
            for part in ["q", "k", "v"] {
                entries.push((format!("layer.{l}.head.{a}.{part}"), fan_in_uniform(h, dh, rng)));
            }
            entries.push((format!("layer.{l}.head.{a}.out"), fan_in_uniform(dh, h, rng)));
            entries.push((format!("layer.{l}.head.{a}.ebias"), fan_in_uniform(h, 1, rng)));
        }
        for (g, b) in [("ln1", "ln1.bias"), ("ln2", "ln2.bias"), ("eln1", "eln1.bias"), ("eln2", "eln2.bias")] {
            entries.push((format!("layer.{l}.{g}"), Matrix::from_vec(1, h, vec![1.0; h])));
            entries.push((format!("layer.{l}.{b}"), Matrix::zeros(1, h)));
        }
        lin(format!("layer.{l}.ffn1"), h, f, &mut entries, rng);
        lin(format!("layer.{l}.ffn2"), f, h, &mut entries, rng);
        lin(format!("layer.{l}.edge_update"), cfg.n_heads, h, &mut entries, rng);
        lin(format!("layer.{l}.effn1"), h, f, &mut entries, rng);
        lin(format!("layer.{l}.effn2"), f, h, &mut entries, rng);
    }
    lin("node_out".into(), h, dims.n_ops, &mut entries, rng);
    lin("edge_out".into(), h, dims.n_edge_cats, &mut entries, rng);
    ParamSet { entries }
}

/// Sinusoidal positional encoding: row p, column 2i holds
/// sin(p / 10000^(2i/dim)), column 2i+1 the matching cosine.
pub fn positional_encoding(n: usize, dim: usize) -> Result<Matrix, CoreError> {
    if dim % 2 != 0 {
        return Err(CoreError::InvalidConfig {
            field: "pe_dim".into(),
            reason: "must be even".into(),
        });
    }
    Ok(Matrix::from_fn(n, dim, |p, c| pe_value(p as f64, c, dim)))
}

fn pe_value(p: f64, col: usize, dim: usize) -> f64 {
    let i2 = (col / 2 * 2) as f64;
    let angle = p / 10000f64.powf(i2 / dim as f64);
    if col % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Sinusoidal embedding of the normalized timestep t/T.
fn timestep_embedding(t: usize, t_max: usize, dim: usize) -> Matrix {
    let p = t as f64 / t_max as f64;
    Matrix::from_fn(1, dim, |_, c| pe_value(p, c, dim))
}

#[derive(Clone, Debug)]
pub struct PredictedProbs {
    /// n x |op_vocab|, row-stochastic.
    pub p_x: Matrix,
    /// (n*n) x |edge_vocab| row-major over (i, j), fiber-stochastic.
    pub p_e: Matrix,
}

struct Leaves {
    ids: Vec<NodeId>,
}

impl Leaves {
    fn of(&self, params: &ParamSet, name: &str) -> NodeId {
        let idx = params
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        self.ids[idx]
    }
}

fn push_leaves(tape: &mut Tape, params: &ParamSet) -> Leaves {
    Leaves {
        ids: params
            .entries
            .iter()
            .map(|(_, m)| tape.leaf(m.clone()))
            .collect(),
    }
}

fn onehot_row(len: usize, at: usize) -> Matrix {
    let mut m = Matrix::zeros(1, len);
    m.set(0, at, 1.0);
    m
}

#[allow(clippy::too_many_arguments)]
fn linear(tape: &mut Tape, params: &ParamSet, leaves: &Leaves, x: NodeId, name: &str) -> NodeId {
    let w = leaves.of(params, name);
    let b = leaves.of(params, &format!("{name}.bias"));
    let wx = tape.matmul(x, w);
    tape.add_row(wx, b)
}

struct DropoutCtx<'a> {
    p: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl DropoutCtx<'_> {
    fn apply(&mut self, tape: &mut Tape, x: NodeId) -> NodeId {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.p == 0.0 {
            return x;
        }
        let m = tape.value(x);
        let keep = 1.0 - self.p;
        let mask = Matrix::from_fn(m.rows, m.cols, |_, _| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.mul_const(x, mask)
    }
}

/// Builds the whole network on the tape; returns (node logits, edge logits).
#[allow(clippy::too_many_arguments)]
fn build_graph(
    tape: &mut Tape,
    params: &ParamSet,
    leaves: &Leaves,
    cfg: &DenoiserConfig,
    dims: &DenoiserDims,
    noisy: &NoisyGraph,
    t: usize,
    t_max: usize,
    cond: &ConditionVector,
    dropout: &mut DropoutCtx,
) -> (NodeId, NodeId) {
    let n = dims.n_nodes;
    let h = cfg.hidden_dim;
    let dh = h / cfg.n_heads;
    assert_eq!(cond.classes.len(), dims.cond_card.len(), "condition arity");

    let node_oh = {
        let mut m = Matrix::zeros(n, dims.n_ops);
        for (i, &op) in noisy.x.iter().enumerate() {
            m.set(i, op, 1.0);
        }
        tape.leaf(m)
    };
    let edge_oh = {
        let mut m = Matrix::zeros(n * n, dims.n_edge_cats);
        for i in 0..n {
            for j in 0..n {
                m.set(i * n + j, noisy.e[i][j], 1.0);
            }
        }
        tape.leaf(m)
    };

    let mut x = linear(tape, params, leaves, node_oh, "node_in");
    let pe = tape.leaf(positional_encoding(n, cfg.pe_dim).expect("even pe_dim"));
    x = tape.add(x, pe);
    let mut e = linear(tape, params, leaves, edge_oh, "edge_in");

    // Global conditioning vector: projected timestep embedding plus one
    // embedding row per condition (last row of each table is the null token).
    let temb = tape.leaf(timestep_embedding(t, t_max, h));
    let mut g = linear(tape, params, leaves, temb, "time_proj");
    for (i, (&class, &card)) in cond.classes.iter().zip(&dims.cond_card).enumerate() {
        let row = class.unwrap_or(card); // null token is the extra row
        assert!(row <= card, "condition class out of range");
        let sel = tape.leaf(onehot_row(card + 1, row));
        let table = leaves.of(params, &format!("cond_emb.{i}"));
        let emb = tape.matmul(sel, table);
        g = tape.add(g, emb);
    }
    let gx = linear(tape, params, leaves, g, "glob_node");
    x = tape.add_row(x, gx);
    let ge = linear(tape, params, leaves, g, "glob_edge");
    e = tape.add_row(e, ge);

    for l in 0..cfg.n_layers {
        let mut head_logits = Vec::with_capacity(cfg.n_heads);
        let mut attn_sum: Option<NodeId> = None;
        for a in 0..cfg.n_heads {
            let q = tape.matmul(x, leaves.of(params, &format!("layer.{l}.head.{a}.q")));
            let k = tape.matmul(x, leaves.of(params, &format!("layer.{l}.head.{a}.k")));
            let v = tape.matmul(x, leaves.of(params, &format!("layer.{l}.head.{a}.v")));
            let qk = tape.matmul_transposed_rhs(q, k);
            let scores = tape.scale(qk, 1.0 / (dh as f64).sqrt());
            let ebias_col = tape.matmul(e, leaves.of(params, &format!("layer.{l}.head.{a}.ebias")));
            let ebias = tape.reshape(ebias_col, n, n);
            let logits = tape.add(scores, ebias);
            head_logits.push(logits);
            let attn = tape.softmax_rows(logits);
            let head = tape.matmul(attn, v);
            let proj = tape.matmul(head, leaves.of(params, &format!("layer.{l}.head.{a}.out")));
            attn_sum = Some(match attn_sum {
                Some(acc) => tape.add(acc, proj),
                None => proj,
            });
        }
        let attn_out = dropout.apply(tape, attn_sum.expect("n_heads >= 1"));
        let res1 = tape.add(x, attn_out);
        x = tape.layernorm_rows(
            res1,
            leaves.of(params, &format!("layer.{l}.ln1")),
            leaves.of(params, &format!("layer.{l}.ln1.bias")),
        );
        let ffn_mid = linear(tape, params, leaves, x, &format!("layer.{l}.ffn1"));
        let ffn_act = tape.relu(ffn_mid);
        let ffn_out = linear(tape, params, leaves, ffn_act, &format!("layer.{l}.ffn2"));
        let ffn_out = dropout.apply(tape, ffn_out);
        let res2 = tape.add(x, ffn_out);
        x = tape.layernorm_rows(
            res2,
            leaves.of(params, &format!("layer.{l}.ln2")),
            leaves.of(params, &format!("layer.{l}.ln2.bias")),
        );

        // Edge stream update from the pre-softmax attention logits.
        let stacked: Vec<NodeId> = head_logits
            .iter()
            .map(|&lg| tape.reshape(lg, n * n, 1))
            .collect();
        let l_stack = tape.concat_cols(&stacked);
        let e_upd = linear(tape, params, leaves, l_stack, &format!("layer.{l}.edge_update"));
        let e_upd = dropout.apply(tape, e_upd);
        let eres1 = tape.add(e, e_upd);
        e = tape.layernorm_rows(
            eres1,
            leaves.of(params, &format!("layer.{l}.eln1")),
            leaves.of(params, &format!("layer.{l}.eln1.bias")),
        );
        let effn_mid = linear(tape, params, leaves, e, &format!("layer.{l}.effn1"));
        let effn_act = tape.relu(effn_mid);
        let effn_out = linear(tape, params, leaves, effn_act, &format!("layer.{l}.effn2"));
        let effn_out = dropout.apply(tape, effn_out);
        let eres2 = tape.add(e, effn_out);
        e = tape.layernorm_rows(
            eres2,
            leaves.of(params, &format!("layer.{l}.eln2")),
            leaves.of(params, &format!("layer.{l}.eln2.bias")),
        );
    }

    let x_logits = linear(tape, params, leaves, x, "node_out");
    let e_logits = linear(tape, params, leaves, e, "edge_out");
    (x_logits, e_logits)
}

/// Deterministic forward pass; output rows/fibers are softmax-normalized.
pub fn forward(
    params: &ParamSet,
    cfg: &DenoiserConfig,
    dims: &DenoiserDims,
    noisy: &NoisyGraph,
    t: usize,
    t_max: usize,
    cond: &ConditionVector,
) -> PredictedProbs {
    let mut tape = Tape::new();
    let leaves = push_leaves(&mut tape, params);
    let mut no_dropout = DropoutCtx { p: 0.0, rng: None };
    let (x_logits, e_logits) = build_graph(
        &mut tape, params, &leaves, cfg, dims, noisy, t, t_max, cond, &mut no_dropout,
    );
    PredictedProbs {
        p_x: tape.value(x_logits).softmax_rows(),
        p_e: tape.value(e_logits).softmax_rows(),
    }
}

/// Eq.-7-style loss on probabilities: node cross-entropy plus lambda times
/// the strict-upper-triangle edge cross-entropy. Zero predicted mass at a
/// true category is clamped at 1e-12; the clamp count is returned alongside.
pub fn loss(probs: &PredictedProbs, clean: &CellGraph, lambda: f64) -> (f64, u64) {
    let n = clean.n_nodes();
    let mut total = 0.0;
    let mut clamped = 0u64;
    let mut take = |p: f64, weight: f64| {
        let mut p = p;
        if p < crate::conditioning::LOG_FLOOR {
            p = crate::conditioning::LOG_FLOOR;
            clamped += 1;
        }
        total += -weight * p.ln();
    };
    for (i, &op) in clean.x.iter().enumerate() {
        take(probs.p_x.get(i, op), 1.0);
    }
    if lambda > 0.0 {
        for i in 0..n {
            for j in i + 1..n {
                take(probs.p_e.get(i * n + j, clean.e[i][j]), lambda);
            }
        }
    }
    (total, clamped)
}

/// One training example: a noised graph with its timestep, (possibly
/// dropped) conditions, and the clean target.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub noisy: NoisyGraph,
    pub t: usize,
    pub cond: ConditionVector,
    pub clean: CellGraph,
}

/// Exact reverse-mode gradients of the mean per-sample loss.
#[allow(clippy::too_many_arguments)]
pub fn grad(
    params: &ParamSet,
    cfg: &DenoiserConfig,
    dims: &DenoiserDims,
    batch: &[TrainSample],
    lambda: f64,
    t_max: usize,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ParamSet), CoreError> {
    assert!(!batch.is_empty(), "empty batch");
    let n = dims.n_nodes;
    let inv_b = 1.0 / batch.len() as f64;
    let mut tape = Tape::new();
    let leaves = push_leaves(&mut tape, params);
    let mut dropout = DropoutCtx {
        p: cfg.dropout,
        rng: dropout_rng,
    };
    let mut terms = Vec::with_capacity(batch.len());
    for (s, sample) in batch.iter().enumerate() {
        let (x_logits, e_logits) = build_graph(
            &mut tape,
            params,
            &leaves,
            cfg,
            dims,
            &sample.noisy,
            sample.t,
            t_max,
            &sample.cond,
            &mut dropout,
        );
        let x_target = {
            let mut m = Matrix::zeros(n, dims.n_ops);
            for (i, &op) in sample.clean.x.iter().enumerate() {
                m.set(i, op, 1.0);
            }
            m
        };
        let x_ce = tape.ce_logits(x_logits, x_target, vec![inv_b; n]);
        let e_target = {
            let mut m = Matrix::zeros(n * n, dims.n_edge_cats);
            for i in 0..n {
                for j in 0..n {
                    m.set(i * n + j, sample.clean.e[i][j], 1.0);
                }
            }
            m
        };
        let mut e_weights = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                e_weights[i * n + j] = lambda * inv_b;
            }
        }
        let e_ce = tape.ce_logits(e_logits, e_target, e_weights);
        let sample_loss = tape.value(x_ce).get(0, 0) + tape.value(e_ce).get(0, 0);
        if !sample_loss.is_finite() {
            return Err(CoreError::NonFiniteLoss { sample: s });
        }
        terms.push((x_ce, 1.0));
        terms.push((e_ce, 1.0));
    }
    let total = tape.add_scaled(&terms);
    let mean_loss = tape.value(total).get(0, 0);
    let grads = tape.backward(total);
    let grad_set = ParamSet {
        entries: params
            .entries
            .iter()
            .zip(&leaves.ids)
            .map(|((name, m), &id)| {
                let g = grads[id]
                    .clone()
                    .unwrap_or_else(|| Matrix::zeros(m.rows, m.cols));
                (name.clone(), g)
            })
            .collect(),
    };
    Ok((mean_loss, grad_set))
}
