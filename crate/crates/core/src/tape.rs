//! A small reverse-mode automatic differentiation tape over dense row-major
//! `f64` matrices.
//!
//! Operations are recorded eagerly: every call computes its value and pushes
//! a node. [`Tape::backward`] walks the nodes in reverse and accumulates
//! gradients only along paths that reach a parameter. The attention kernels
//! are fused ops with hand-written adjoints; they operate on "groups" of
//! `m` consecutive rows, one group per problem instance.

use ndarray::{Array2, Axis};

pub type Matrix = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddGroupRows {
        x: Var,
        y: Var,
        group: usize,
    },
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Relu(Var),
    Tanh(Var),
    SumAll(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SelfAttention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        weights: Vec<f64>,
    },
    QueryAttention {
        q: Var,
        k: Var,
        v: Var,
        map: Vec<usize>,
        group: usize,
        heads: usize,
        weights: Vec<f64>,
    },
    PointerLogits {
        q: Var,
        k: Var,
        map: Vec<usize>,
        group: usize,
    },
    MaskedLogSoftmax {
        x: Var,
        mask: Vec<bool>,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    RowEntropy {
        logp: Var,
        mask: Vec<bool>,
    },
    GroupWeightedSum {
        x: Var,
        weights: Vec<f64>,
        group: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Per-column statistics of a batch-normalized input.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Normalization source for [`Tape::batch_norm`].
pub enum Norm<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(usize, Var)>,
    recording: bool,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn contiguous(m: Matrix) -> Matrix {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

impl Tape {
    /// A tape that records adjoint information for [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            recording: true,
        }
    }

    /// A tape for forward evaluation only; parameters are treated as
    /// constants.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(contiguous(value), Op::Leaf, false)
    }

    /// Registers a trainable parameter; `id` is returned with its gradient.
    pub fn param(&mut self, id: usize, value: &Matrix) -> Var {
        let rec = self.recording;
        let v = self.push(contiguous(value.clone()), Op::Param, rec);
        if rec {
            self.params.push((id, v));
        }
        v
    }

    /// Parameter vars registered on this tape.
    pub fn params(&self) -> &[(usize, Var)] {
        &self.params
    }

    /// Copy of a value cut off from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(contiguous(value), Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `x + bias` with a `1 × c` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        assert_eq!(self.shape(bias).0, 1);
        let value = self.value(x) + self.value(bias);
        let ng = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddRow(x, bias), ng)
    }

    /// Adds row `g` of `y` to each of the `group` rows of block `g` of `x`.
    pub fn add_group_rows(&mut self, x: Var, y: Var, group: usize) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(self.shape(y), (rows / group, cols));
        let mut value = self.value(x).clone();
        let yv = self.value(y);
        for (r, mut row) in value.axis_iter_mut(Axis(0)).enumerate() {
            row += &yv.row(r / group);
        }
        let ng = self.needs(x) || self.needs(y);
        self.push(value, Op::AddGroupRows { x, y, group }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x) * s;
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, x: Var, c: Matrix) -> Var {
        assert_eq!(self.shape(x), c.dim());
        let value = self.value(x) * &c;
        let ng = self.needs(x);
        self.push(value, Op::MulConst(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let ng = self.needs(x);
        self.push(value, Op::Tanh(x), ng)
    }

    /// Sum of all entries as a `1 × 1` matrix.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Batch normalization over rows with affine `1 × c` parameters. Returns
    /// the batch statistics when normalizing with them.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, norm: Norm<'_>) -> (Var, Option<BatchStats>) {
        let xv = self.value(x);
        let (n, c) = xv.dim();
        let (mean, var, batch_stats) = match norm {
            Norm::Batch => {
                let mean: Vec<f64> = xv.mean_axis(Axis(0)).unwrap().to_vec();
                let var: Vec<f64> = (0..c)
                    .map(|j| xv.column(j).iter().map(|&v| (v - mean[j]).powi(2)).sum::<f64>() / n as f64)
                    .collect();
                (mean, var, true)
            }
            Norm::Running { mean, var } => (mean.to_vec(), var.to_vec(), false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = xv.clone();
        for mut row in xhat.axis_iter_mut(Axis(0)) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = batch_stats.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count: n,
        });
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        );
        (out, stats)
    }

    /// Multi-head self-attention within each block of `group` rows.
    /// `q`, `k`, `v` are `(blocks·group) × d`; heads split the columns.
    pub fn self_attention(&mut self, q: Var, k: Var, v: Var, group: usize, heads: usize) -> Var {
        let (rows, d) = self.shape(q);
        assert_eq!(self.shape(k), (rows, d));
        assert_eq!(self.shape(v), (rows, d));
        assert!(rows % group == 0 && d % heads == 0);
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let blocks = rows / group;
        let (qs, ks, vs) = (
            self.value(q).as_slice().unwrap(),
            self.value(k).as_slice().unwrap(),
            self.value(v).as_slice().unwrap(),
        );
        let mut out = vec![0.0; rows * d];
        let mut weights = vec![0.0; blocks * heads * group * group];
        let mut scores = vec![0.0; group];
        for b in 0..blocks {
            for h in 0..heads {
                let w_base = (b * heads + h) * group * group;
                for i in 0..group {
                    let qi = &qs[(b * group + i) * d + h * dk..][..dk];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..group {
                        let kj = &ks[(b * group + j) * d + h * dk..][..dk];
                        let s = scale * dot(qi, kj);
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let oi = &mut out[(b * group + i) * d + h * dk..][..dk];
                    for j in 0..group {
                        let a = scores[j] / z;
                        weights[w_base + i * group + j] = a;
                        let vj = &vs[(b * group + j) * d + h * dk..][..dk];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += a * x;
                        }
                    }
                }
            }
        }
        let value = Array2::from_shape_vec((rows, d), out).unwrap();
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        if !ng {
            weights = Vec::new();
        }
        self.push(
            value,
            Op::SelfAttention {
                q,
                k,
                v,
                group,
                heads,
                weights,
            },
            ng,
        )
    }

    /// Multi-head attention of one query row per context onto the `group`
    /// key/value rows of block `map[g]`, restricted to `mask` (`G × group`,
    /// row-major). Every query row must have at least one unmasked key.
    #[allow(clippy::too_many_arguments)]
    pub fn query_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        map: Vec<usize>,
        group: usize,
        heads: usize,
        mask: &[bool],
    ) -> Var {
        let (g_rows, d) = self.shape(q);
        assert_eq!(map.len(), g_rows);
        assert_eq!(mask.len(), g_rows * group);
        assert_eq!(self.shape(k).1, d);
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).as_slice().unwrap(),
            self.value(k).as_slice().unwrap(),
            self.value(v).as_slice().unwrap(),
        );
        let mut out = vec![0.0; g_rows * d];
        let mut weights = vec![0.0; g_rows * heads * group];
        for g in 0..g_rows {
            let blk = map[g];
            let mrow = &mask[g * group..][..group];
            assert!(mrow.iter().any(|&m| m), "query_attention: row {g} fully masked");
            for h in 0..heads {
                let qg = &qs[g * d + h * dk..][..dk];
                let w = &mut weights[(g * heads + h) * group..][..group];
                let mut max = f64::NEG_INFINITY;
                for j in 0..group {
                    if mrow[j] {
                        let kj = &ks[(blk * group + j) * d + h * dk..][..dk];
                        w[j] = scale * dot(qg, kj);
                        max = max.max(w[j]);
                    }
                }
                let mut z = 0.0;
                for j in 0..group {
                    if mrow[j] {
                        w[j] = (w[j] - max).exp();
                        z += w[j];
                    } else {
                        w[j] = 0.0;
                    }
                }
                let og = &mut out[g * d + h * dk..][..dk];
                for j in 0..group {
                    if mrow[j] {
                        w[j] /= z;
                        let vj = &vs[(blk * group + j) * d + h * dk..][..dk];
                        for (o, &x) in og.iter_mut().zip(vj) {
                            *o += w[j] * x;
                        }
                    }
                }
            }
        }
        let value = Array2::from_shape_vec((g_rows, d), out).unwrap();
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        if !ng {
            weights = Vec::new();
        }
        self.push(
            value,
            Op::QueryAttention {
                q,
                k,
                v,
                map,
                group,
                heads,
                weights,
            },
            ng,
        )
    }

    /// Scaled compatibilities `q_g · k_j / √d` of each query row with the
    /// `group` key rows of block `map[g]`; returns `G × group`.
    pub fn pointer_logits(&mut self, q: Var, k: Var, map: Vec<usize>, group: usize) -> Var {
        let (g_rows, d) = self.shape(q);
        assert_eq!(map.len(), g_rows);
        let scale = 1.0 / (d as f64).sqrt();
        let (qs, ks) = (self.value(q).as_slice().unwrap(), self.value(k).as_slice().unwrap());
        let mut out = vec![0.0; g_rows * group];
        for g in 0..g_rows {
            let qg = &qs[g * d..][..d];
            for j in 0..group {
                out[g * group + j] = scale * dot(qg, &ks[(map[g] * group + j) * d..][..d]);
            }
        }
        let value = Array2::from_shape_vec((g_rows, group), out).unwrap();
        let ng = self.needs(q) || self.needs(k);
        self.push(value, Op::PointerLogits { q, k, map, group }, ng)
    }

    /// Row-wise log-softmax over unmasked entries; masked entries are −∞.
    pub fn masked_log_softmax(&mut self, x: Var, mask: Vec<bool>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert_eq!(mask.len(), rows * cols);
        let mut value = Array2::from_elem((rows, cols), f64::NEG_INFINITY);
        for r in 0..rows {
            let mrow = &mask[r * cols..][..cols];
            let max = (0..cols)
                .filter(|&j| mrow[j])
                .map(|j| xv[[r, j]])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "masked_log_softmax: row {r} fully masked or non-finite");
            let lse = max
                + (0..cols)
                    .filter(|&j| mrow[j])
                    .map(|j| (xv[[r, j]] - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..cols {
                if mrow[j] {
                    value[[r, j]] = xv[[r, j]] - lse;
                }
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::MaskedLogSoftmax { x, mask }, ng)
    }

    /// Picks `x[g, idx[g]]` for each row; returns `G × 1`.
    pub fn gather_cols(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        assert_eq!(idx.len(), xv.nrows());
        let value = Array2::from_shape_fn((idx.len(), 1), |(g, _)| xv[[g, idx[g]]]);
        let ng = self.needs(x);
        self.push(value, Op::GatherCols { x, idx }, ng)
    }

    /// Shannon entropy of each row's distribution given its log-probs.
    pub fn row_entropy(&mut self, logp: Var, mask: Vec<bool>) -> Var {
        let lp = self.value(logp);
        let (rows, cols) = lp.dim();
        let value = Array2::from_shape_fn((rows, 1), |(r, _)| {
            -(0..cols)
                .filter(|&j| mask[r * cols + j])
                .map(|j| lp[[r, j]].exp() * lp[[r, j]])
                .sum::<f64>()
        });
        let ng = self.needs(logp);
        self.push(value, Op::RowEntropy { logp, mask }, ng)
    }

    /// `out[b] = Σ_j weights[b·group + j] · x[b·group + j]`.
    pub fn group_weighted_sum(&mut self, x: Var, weights: Vec<f64>, group: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert_eq!(weights.len(), rows);
        let mut value = Array2::zeros((rows / group, cols));
        for (r, row) in xv.axis_iter(Axis(0)).enumerate() {
            value.row_mut(r / group).scaled_add(weights[r], &row);
        }
        let ng = self.needs(x);
        self.push(value, Op::GroupWeightedSum { x, weights, group }, ng)
    }

    /// Mean over each block of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let rows = self.shape(x).0;
        self.group_weighted_sum(x, vec![1.0 / group as f64; rows], group)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let value = xv.select(Axis(0), &idx);
        let ng = self.needs(x);
        self.push(contiguous(value), Op::GatherRows { x, idx }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(contiguous(value), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(contiguous(value), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(x).clone().into_shape_with_order((rows, cols)).unwrap();
        let ng = self.needs(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Reverse sweep from the `1 × 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    accumulate(grads, *a, contiguous(g.dot(&val(*b).t())));
                }
                if need(*b) {
                    accumulate(grads, *b, contiguous(val(*a).t().dot(g)));
                }
            }
            Op::Add(a, b) => {
                if need(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if need(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if need(*b) {
                    accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    accumulate(grads, *a, g * val(*b));
                }
                if need(*b) {
                    accumulate(grads, *b, g * val(*a));
                }
            }
            Op::AddRow(x, bias) => {
                if need(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if need(*bias) {
                    accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddGroupRows { x, y, group } => {
                if need(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if need(*y) {
                    let mut gy = Array2::zeros(val(*y).dim());
                    for (r, row) in g.axis_iter(Axis(0)).enumerate() {
                        let mut t = gy.row_mut(r / group);
                        t += &row;
                    }
                    accumulate(grads, *y, gy);
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g * *s),
            Op::MulConst(x, c) => accumulate(grads, *x, g * c),
            Op::Relu(x) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*x), |dv, &xv| {
                    if xv <= 0.0 {
                        *dv = 0.0
                    }
                });
                accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |dv, &y| *dv *= 1.0 - y * y);
                accumulate(grads, *x, d);
            }
            Op::SumAll(x) => {
                let s = g[[0, 0]];
                accumulate(grads, *x, Array2::from_elem(val(*x).dim(), s));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                if need(*gamma) {
                    accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if need(*beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if need(*x) {
                    let dxhat = g * val(*gamma);
                    let (n, c) = dxhat.dim();
                    let mut dx = Array2::zeros((n, c));
                    if *batch_stats {
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                        let nf = n as f64;
                        for r in 0..n {
                            for j in 0..c {
                                dx[[r, j]] = inv_std[j] / nf
                                    * (nf * dxhat[[r, j]] - sum_d[j] - xhat[[r, j]] * sum_dx[j]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..c {
                                dx[[r, j]] = dxhat[[r, j]] * inv_std[j];
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SelfAttention {
                q,
                k,
                v,
                group,
                heads,
                weights,
            } => {
                let (group, heads) = (*group, *heads);
                let (rows, d) = val(*q).dim();
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let (qs, ks, vs) = (
                    val(*q).as_slice().unwrap(),
                    val(*k).as_slice().unwrap(),
                    val(*v).as_slice().unwrap(),
                );
                let gs = g.as_slice().unwrap();
                let mut dq = vec![0.0; rows * d];
                let mut dkm = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut da = vec![0.0; group];
                for b in 0..rows / group {
                    for h in 0..heads {
                        let w_base = (b * heads + h) * group * group;
                        for i in 0..group {
                            let ri = (b * group + i) * d + h * dk;
                            let goi = &gs[ri..][..dk];
                            let a = &weights[w_base + i * group..][..group];
                            let mut inner = 0.0;
                            for j in 0..group {
                                let rj = (b * group + j) * d + h * dk;
                                da[j] = dot(goi, &vs[rj..][..dk]);
                                inner += a[j] * da[j];
                                for (t, &x) in dv[rj..][..dk].iter_mut().zip(goi) {
                                    *t += a[j] * x;
                                }
                            }
                            for j in 0..group {
                                let ds = a[j] * (da[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let rj = (b * group + j) * d + h * dk;
                                for t in 0..dk {
                                    dq[ri + t] += ds * ks[rj + t];
                                    dkm[rj + t] += ds * qs[ri + t];
                                }
                            }
                        }
                    }
                }
                for (var, data) in [(*q, dq), (*k, dkm), (*v, dv)] {
                    if need(var) {
                        accumulate(grads, var, Array2::from_shape_vec((rows, d), data).unwrap());
                    }
                }
            }
            Op::QueryAttention {
                q,
                k,
                v,
                map,
                group,
                heads,
                weights,
            } => {
                let (group, heads) = (*group, *heads);
                let (g_rows, d) = val(*q).dim();
                let kv_rows = val(*k).nrows();
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let (qs, ks, vs) = (
                    val(*q).as_slice().unwrap(),
                    val(*k).as_slice().unwrap(),
                    val(*v).as_slice().unwrap(),
                );
                let gs = g.as_slice().unwrap();
                let mut dq = vec![0.0; g_rows * d];
                let mut dkm = vec![0.0; kv_rows * d];
                let mut dv = vec![0.0; kv_rows * d];
                let mut da = vec![0.0; group];
                for gi in 0..g_rows {
                    let blk = map[gi];
                    for h in 0..heads {
                        let a = &weights[(gi * heads + h) * group..][..group];
                        let go = &gs[gi * d + h * dk..][..dk];
                        let mut inner = 0.0;
                        for j in 0..group {
                            if a[j] == 0.0 {
                                da[j] = 0.0;
                                continue;
                            }
                            let rj = (blk * group + j) * d + h * dk;
                            da[j] = dot(go, &vs[rj..][..dk]);
                            inner += a[j] * da[j];
                            for (t, &x) in dv[rj..][..dk].iter_mut().zip(go) {
                                *t += a[j] * x;
                            }
                        }
                        let rq = gi * d + h * dk;
                        for j in 0..group {
                            if a[j] == 0.0 {
                                continue;
                            }
                            let ds = a[j] * (da[j] - inner) * scale;
                            let rj = (blk * group + j) * d + h * dk;
                            for t in 0..dk {
                                dq[rq + t] += ds * ks[rj + t];
                                dkm[rj + t] += ds * qs[rq + t];
                            }
                        }
                    }
                }
                if need(*q) {
                    accumulate(grads, *q, Array2::from_shape_vec((g_rows, d), dq).unwrap());
                }
                if need(*k) {
                    accumulate(grads, *k, Array2::from_shape_vec((kv_rows, d), dkm).unwrap());
                }
                if need(*v) {
                    accumulate(grads, *v, Array2::from_shape_vec((kv_rows, d), dv).unwrap());
                }
            }
            Op::PointerLogits { q, k, map, group } => {
                let group = *group;
                let (g_rows, d) = val(*q).dim();
                let kv_rows = val(*k).nrows();
                let scale = 1.0 / (d as f64).sqrt();
                let (qs, ks) = (val(*q).as_slice().unwrap(), val(*k).as_slice().unwrap());
                let gs = g.as_slice().unwrap();
                let mut dq = vec![0.0; g_rows * d];
                let mut dkm = vec![0.0; kv_rows * d];
                for gi in 0..g_rows {
                    for j in 0..group {
                        let s = gs[gi * group + j] * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let rk = (map[gi] * group + j) * d;
                        for t in 0..d {
                            dq[gi * d + t] += s * ks[rk + t];
                            dkm[rk + t] += s * qs[gi * d + t];
                        }
                    }
                }
                if need(*q) {
                    accumulate(grads, *q, Array2::from_shape_vec((g_rows, d), dq).unwrap());
                }
                if need(*k) {
                    accumulate(grads, *k, Array2::from_shape_vec((kv_rows, d), dkm).unwrap());
                }
            }
            Op::MaskedLogSoftmax { x, mask } => {
                let (rows, cols) = node.value.dim();
                let mut dx = Array2::zeros((rows, cols));
                for r in 0..rows {
                    let mrow = &mask[r * cols..][..cols];
                    let total: f64 = (0..cols).filter(|&j| mrow[j]).map(|j| g[[r, j]]).sum();
                    for j in 0..cols {
                        if mrow[j] {
                            dx[[r, j]] = g[[r, j]] - node.value[[r, j]].exp() * total;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GatherCols { x, idx } => {
                let mut dx = Array2::zeros(val(*x).dim());
                for (r, &j) in idx.iter().enumerate() {
                    dx[[r, j]] += g[[r, 0]];
                }
                accumulate(grads, *x, dx);
            }
            Op::RowEntropy { logp, mask } => {
                let lp = val(*logp);
                let (rows, cols) = lp.dim();
                let mut dx = Array2::zeros((rows, cols));
                for r in 0..rows {
                    for j in 0..cols {
                        if mask[r * cols + j] {
                            let l = lp[[r, j]];
                            dx[[r, j]] = -g[[r, 0]] * l.exp() * (l + 1.0);
                        }
                    }
                }
                accumulate(grads, *logp, dx);
            }
            Op::GroupWeightedSum { x, weights, group } => {
                let mut dx = Array2::zeros(val(*x).dim());
                for (r, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                    row.scaled_add(weights[r], &g.row(r / group));
                }
                accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let mut dx = Array2::zeros(val(*x).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut t = dx.row_mut(src);
                    t += &g.row(r);
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let c = val(p).ncols();
                    if need(p) {
                        let slice = g.slice(ndarray::s![.., col..col + c]).to_owned();
                        accumulate(grads, p, slice);
                    }
                    col += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let r = val(p).nrows();
                    if need(p) {
                        let slice = g.slice(ndarray::s![row..row + r, ..]).to_owned();
                        accumulate(grads, p, slice);
                    }
                    row += r;
                }
            }
            Op::Reshape(x) => {
                let shape = val(*x).dim();
                accumulate(grads, *x, g.clone().into_shape_with_order(shape).unwrap());
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
