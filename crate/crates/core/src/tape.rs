//! Minimal reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! The denoiser builds a fresh tape per forward/backward pass. Ops are the
//! small set the graph-transformer needs; each records its inputs so the
//! backward sweep can accumulate exact gradients in one reverse pass.

use crate::tensor::{logsumexp, softmax_in_place, Matrix};

pub type NodeId = usize;

const LAYERNORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// A * B^T (attention scores) without materializing the transpose.
    MatMulBT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast a 1 x cols row vector onto every row of the left operand.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    /// Elementwise product with a constant mask (dropout).
    MulConst(NodeId, Matrix),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Reshape(NodeId),
    ConcatCols(Vec<NodeId>),
    /// Per-row weighted cross-entropy of softmax(logits) against one-hot
    /// targets; emits a 1x1 scalar.
    CeLogits {
        logits: NodeId,
        target: Matrix,
        weights: Vec<f64>,
    },
    /// Weighted sum of same-shaped nodes.
    AddScaled(Vec<(NodeId, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_transposed_rhs(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a]
            .value
            .matmul(&self.nodes[b].value.transpose());
        self.push(v, Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.add(&self.nodes[b].value);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let r = &self.nodes[row].value;
        assert_eq!(r.rows, 1);
        assert_eq!(r.cols, m.cols);
        let v = Matrix::from_fn(m.rows, m.cols, |i, j| m.get(i, j) + r.get(0, j));
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a].value.scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let v = Matrix::from_vec(m.rows, m.cols, m.data.iter().map(|x| x.max(0.0)).collect());
        self.push(v, Op::Relu(a))
    }

    pub fn mul_const(&mut self, a: NodeId, mask: Matrix) -> NodeId {
        let m = &self.nodes[a].value;
        assert_eq!((m.rows, m.cols), (mask.rows, mask.cols));
        let v = Matrix::from_vec(
            m.rows,
            m.cols,
            m.data.iter().zip(&mask.data).map(|(x, w)| x * w).collect(),
        );
        self.push(v, Op::MulConst(a, mask))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.softmax_rows();
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layernorm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let m = &self.nodes[x].value;
        let g = &self.nodes[gain].value;
        let b = &self.nodes[bias].value;
        assert_eq!(g.rows, 1);
        assert_eq!(b.rows, 1);
        assert_eq!(g.cols, m.cols);
        assert_eq!(b.cols, m.cols);
        let mut v = Matrix::zeros(m.rows, m.cols);
        for r in 0..m.rows {
            let row = m.row(r);
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for c in 0..m.cols {
                v.set(r, c, g.get(0, c) * (row[c] - mean) * inv + b.get(0, c));
            }
        }
        self.push(v, Op::LayerNormRows { x, gain, bias })
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let m = &self.nodes[a].value;
        assert_eq!(m.rows * m.cols, rows * cols);
        let v = Matrix::from_vec(rows, cols, m.data.clone());
        self.push(v, Op::Reshape(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.rows;
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut v = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let m = &self.nodes[p].value;
            assert_eq!(m.rows, rows);
            for r in 0..rows {
                for c in 0..m.cols {
                    v.set(r, off + c, m.get(r, c));
                }
            }
            off += m.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// `weights[r]` scales row r's cross-entropy; rows with weight 0 are
    /// skipped entirely (masked positions).
    pub fn ce_logits(&mut self, logits: NodeId, target: Matrix, weights: Vec<f64>) -> NodeId {
        let m = &self.nodes[logits].value;
        assert_eq!((m.rows, m.cols), (target.rows, target.cols));
        assert_eq!(weights.len(), m.rows);
        let mut total = 0.0;
        for r in 0..m.rows {
            let w = weights[r];
            if w == 0.0 {
                continue;
            }
            let row = m.row(r);
            let lse = logsumexp(row);
            let mut dot = 0.0;
            for c in 0..m.cols {
                dot += target.get(r, c) * row[c];
            }
            total += w * (lse - dot);
        }
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::CeLogits {
                logits,
                target,
                weights,
            },
        )
    }

    pub fn add_scaled(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty());
        let shape = {
            let m = &self.nodes[terms[0].0].value;
            (m.rows, m.cols)
        };
        let mut v = Matrix::zeros(shape.0, shape.1);
        for &(id, w) in terms {
            let m = &self.nodes[id].value;
            assert_eq!((m.rows, m.cols), shape);
            for (o, x) in v.data.iter_mut().zip(&m.data) {
                *o += w * x;
            }
        }
        self.push(v, Op::AddScaled(terms.to_vec()))
    }

    /// Backpropagate from a 1x1 scalar node; returns one gradient per tape
    /// node (None where no gradient flowed).
    pub fn backward(&self, root: NodeId) -> Vec<Option<Matrix>> {
        let rm = &self.nodes[root].value;
        assert_eq!((rm.rows, rm.cols), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[*b].value.transpose());
                    let db = self.nodes[*a].value.transpose().matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulBT(a, b) => {
                    let da = g.matmul(&self.nodes[*b].value);
                    let db = g.transpose().matmul(&self.nodes[*a].value);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            dr.data[c] += g.get(r, c);
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, dr);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let dx = Matrix::from_vec(
                        x.rows,
                        x.cols,
                        x.data
                            .iter()
                            .zip(&g.data)
                            .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                            .collect(),
                    );
                    accumulate(&mut grads, *a, dx);
                }
                Op::MulConst(a, mask) => {
                    let dx = Matrix::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&mask.data).map(|(gi, w)| gi * w).collect(),
                    );
                    accumulate(&mut grads, *a, dx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut dx = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dot: f64 = (0..y.cols).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..y.cols {
                            dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNormRows { x, gain, bias } => {
                    let xm = &self.nodes[*x].value;
                    let gm = &self.nodes[*gain].value;
                    let cols = xm.cols as f64;
                    let mut dx = Matrix::zeros(xm.rows, xm.cols);
                    let mut dg = Matrix::zeros(1, xm.cols);
                    let mut db = Matrix::zeros(1, xm.cols);
                    for r in 0..xm.rows {
                        let row = xm.row(r);
                        let (mean, var) = mean_var(row);
                        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let gd: Vec<f64> =
                            (0..xm.cols).map(|c| gm.get(0, c) * g.get(r, c)).collect();
                        let mean_gd: f64 = gd.iter().sum::<f64>() / cols;
                        let mean_gd_xhat: f64 = gd
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / cols;
                        for c in 0..xm.cols {
                            dx.set(r, c, inv * (gd[c] - mean_gd - xhat[c] * mean_gd_xhat));
                            dg.data[c] += g.get(r, c) * xhat[c];
                            db.data[c] += g.get(r, c);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dg);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Reshape(a) => {
                    let m = &self.nodes[*a].value;
                    let dx = Matrix::from_vec(m.rows, m.cols, g.data.clone());
                    accumulate(&mut grads, *a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let m = &self.nodes[p].value;
                        let dp = Matrix::from_fn(m.rows, m.cols, |r, c| g.get(r, off + c));
                        accumulate(&mut grads, p, dp);
                        off += m.cols;
                    }
                }
                Op::CeLogits {
                    logits,
                    target,
                    weights,
                } => {
                    let gs = g.get(0, 0);
                    let lm = &self.nodes[*logits].value;
                    let mut dx = Matrix::zeros(lm.rows, lm.cols);
                    for r in 0..lm.rows {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        let mut sm: Vec<f64> = lm.row(r).to_vec();
                        softmax_in_place(&mut sm);
                        for c in 0..lm.cols {
                            dx.set(r, c, gs * w * (sm[c] - target.get(r, c)));
                        }
                    }
                    accumulate(&mut grads, *logits, dx);
                }
                Op::AddScaled(terms) => {
                    for &(a, w) in terms {
                        accumulate(&mut grads, a, g.scale(w));
                    }
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_matmul_bt() {
        let build = |p: &[f64]| -> (Tape, NodeId, Vec<NodeId>) {
            let mut tape = Tape::new();
            let a = tape.leaf(Matrix::from_vec(2, 3, p[0..6].to_vec()));
            let b = tape.leaf(Matrix::from_vec(4, 3, p[6..18].to_vec()));
            let bt = tape.matmul_transposed_rhs(a, b); // 2 x 4
            let target = Matrix::from_fn(2, 4, |r, c| if c == r { 1.0 } else { 0.0 });
            let loss = tape.ce_logits(bt, target, vec![1.0, 0.5]);
            (tape, loss, vec![a, b])
        };
        let p: Vec<f64> = (0..18).map(|i| 0.15 * (i as f64) - 1.2).collect();
        let (tape, root, leaves) = build(&p);
        let grads = tape.backward(root);
        let mut flat = Vec::new();
        for &l in &leaves {
            flat.extend(grads[l].as_ref().unwrap().data.clone());
        }
        let h = 1e-6;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += h;
            let (t1, r1, _) = build(&pp);
            pp[i] -= 2.0 * h;
            let (t2, r2, _) = build(&pp);
            let fd = (t1.value(r1).get(0, 0) - t2.value(r2).get(0, 0)) / (2.0 * h);
            assert!(
                (fd - flat[i]).abs() <= 1e-6 * (1.0 + fd.abs().max(flat[i].abs())),
                "param {i}: fd={fd} ad={}",
                flat[i]
            );
        }
    }

    /// Central finite differences against the tape gradient for a composite
    /// expression exercising every op.
    #[test]
    fn finite_difference_all_ops() {
        let build = |p: &[f64]| -> (Tape, NodeId, Vec<NodeId>) {
            let mut tape = Tape::new();
            let a = tape.leaf(Matrix::from_vec(2, 3, p[0..6].to_vec()));
            let b = tape.leaf(Matrix::from_vec(3, 3, p[6..15].to_vec()));
            let gain = tape.leaf(Matrix::from_vec(1, 3, p[15..18].to_vec()));
            let bias = tape.leaf(Matrix::from_vec(1, 3, p[18..21].to_vec()));
            let mm = tape.matmul(a, b);
            let sm = tape.softmax_rows(mm);
            let ln = tape.layernorm_rows(sm, gain, bias);
            let rl = tape.relu(ln);
            let ar = tape.add_row(rl, gain);
            let sc = tape.scale(ar, 0.7);
            let cc = tape.concat_cols(&[sc, rl]);
            let rs = tape.reshape(cc, 4, 3);
            let masked = tape.mul_const(
                rs,
                Matrix::from_vec(4, 3, vec![1.0, 0.5, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.5, 1.0, 1.0]),
            );
            let target = Matrix::from_fn(4, 3, |r, c| if c == r % 3 { 1.0 } else { 0.0 });
            let loss = tape.ce_logits(masked, target, vec![1.0, 0.5, 0.0, 2.0]);
            let doubled = tape.add_scaled(&[(loss, 1.5), (loss, 0.5)]);
            (tape, doubled, vec![a, b, gain, bias])
        };
        let mut p: Vec<f64> = (0..21).map(|i| 0.1 * (i as f64) - 0.9).collect();
        p[15] = 1.1;
        p[16] = 0.9;
        p[17] = 1.0;

        let (tape, root, leaves) = build(&p);
        let grads = tape.backward(root);
        let mut flat_grad = Vec::new();
        for &l in &leaves {
            flat_grad.extend(grads[l].as_ref().unwrap().data.clone());
        }

        let h = 1e-6;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += h;
            let (t1, r1, _) = build(&pp);
            pp[i] -= 2.0 * h;
            let (t2, r2, _) = build(&pp);
            let fd = (t1.value(r1).get(0, 0) - t2.value(r2).get(0, 0)) / (2.0 * h);
            let ad = flat_grad[i];
            assert!(
                (fd - ad).abs() <= 1e-6 * (1.0 + fd.abs().max(ad.abs())),
                "param {i}: fd={fd} ad={ad}"
            );
        }
    }
}
