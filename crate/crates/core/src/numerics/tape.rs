use std::collections::HashMap;

use super::params::{ParamId, ParamSet};
use super::tensor::{ensure_finite, NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    /// Elementwise product of a tensor with a 1-element tensor.
    MulScalar(ValueId, ValueId),
    MatMul(ValueId, ValueId),
    Transpose(ValueId),
    Relu(ValueId),
    Sigmoid(ValueId),
    SoftmaxRows(ValueId),
    /// Replace entries where `keep` is false by a constant; gradient flows
    /// only through kept entries.
    MaskedFill { input: ValueId, keep: Vec<bool> },
    LayerNormRows {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    },
    /// Add a 1xC bias row to every row of an RxC input.
    AddBiasRows { input: ValueId, bias: ValueId },
    ConcatCols(Vec<ValueId>),
    /// Stack 1xC rows into an NxC matrix.
    StackRows(Vec<ValueId>),
    GatherRows {
        input: ValueId,
        indices: Vec<usize>,
    },
    /// out[targets[e]] += weights[e] * input[e] over rows.
    ScatterAddRows {
        input: ValueId,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    SumAll(ValueId),
    /// Sum over rows of -log softmax(row)[target].
    CrossEntropySumRows {
        logits: ValueId,
        targets: Vec<usize>,
    },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Reverse-mode autodiff tape.
///
/// Ops append nodes; `backward` walks the tape in reverse, accumulating
/// gradients. Gradients persist across repeated `backward` calls, matching
/// accumulate-until-zeroed semantics. All reductions run in a fixed
/// sequential order, so identical inputs give bit-identical outputs.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: Op,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        requires_grad: bool,
        name: &'static str,
    ) -> super::Result<ValueId> {
        debug_assert_eq!(values.len(), rows * cols);
        ensure_finite(name, &values)?;
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            op,
            rows,
            cols,
            values,
            requires_grad,
            grad: None,
        });
        Ok(id)
    }

    fn node(&self, id: ValueId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn dims(&self, id: ValueId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn values(&self, id: ValueId) -> &[f64] {
        &self.node(id).values
    }

    /// Gradient of the last backward pass(es) w.r.t. this value, if reached.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    /// Materialize a recorded value as a tensor (always rank 2).
    pub fn to_tensor(&self, id: ValueId) -> Tensor {
        let n = self.node(id);
        Tensor::matrix(n.rows, n.cols, n.values.clone()).expect("tape values are valid")
    }

    /// Record an input value. Gradients flow into it iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> super::Result<ValueId> {
        let (rows, cols) = tensor.dims();
        self.push(
            Op::Leaf,
            rows,
            cols,
            tensor.values().to_vec(),
            tensor.requires_grad,
            "leaf",
        )
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, tensor: &Tensor) -> super::Result<ValueId> {
        let (rows, cols) = tensor.dims();
        self.push(Op::Leaf, rows, cols, tensor.values().to_vec(), false, "constant")
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> super::Result<ValueId> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if (ar, ac) != (br, bc) {
            return Err(NumericsError::ShapeMismatch {
                op: name,
                left: vec![ar, ac],
                right: vec![br, bc],
            });
        }
        let values: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push(op, ar, ac, values, rg, name)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> super::Result<ValueId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> super::Result<ValueId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> super::Result<ValueId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> super::Result<ValueId> {
        let (r, c) = self.dims(a);
        let values: Vec<f64> = self.node(a).values.iter().map(|&x| x * factor).collect();
        let rg = self.node(a).requires_grad;
        self.push(Op::Scale(a, factor), r, c, values, rg, "scale")
    }

    /// Multiply every entry of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: ValueId, s: ValueId) -> super::Result<ValueId> {
        let (sr, sc) = self.dims(s);
        if sr * sc != 1 {
            return Err(NumericsError::BadShape {
                op: "mul_scalar",
                expected: "1x1 scalar".into(),
                got: vec![sr, sc],
            });
        }
        let (r, c) = self.dims(a);
        let sv = self.node(s).values[0];
        let values: Vec<f64> = self.node(a).values.iter().map(|&x| x * sv).collect();
        let rg = self.node(a).requires_grad || self.node(s).requires_grad;
        self.push(Op::MulScalar(a, s), r, c, values, rg, "mul_scalar")
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> super::Result<ValueId> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: vec![m, ka],
                right: vec![kb, n],
            });
        }
        let av = &self.node(a).values;
        let bv = &self.node(b).values;
        let values = matmul_raw(av, bv, m, ka, n);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push(Op::MatMul(a, b), m, n, values, rg, "matmul")
    }

    pub fn transpose(&mut self, a: ValueId) -> super::Result<ValueId> {
        let (r, c) = self.dims(a);
        let av = &self.node(a).values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.node(a).requires_grad;
        self.push(Op::Transpose(a), c, r, values, rg, "transpose")
    }

    pub fn relu(&mut self, a: ValueId) -> super::Result<ValueId> {
        let (r, c) = self.dims(a);
        let values: Vec<f64> = self.node(a).values.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.node(a).requires_grad;
        self.push(Op::Relu(a), r, c, values, rg, "relu")
    }

    pub fn sigmoid(&mut self, a: ValueId) -> super::Result<ValueId> {
        let (r, c) = self.dims(a);
        let values: Vec<f64> = self.node(a).values.iter().map(|&x| sigmoid_scalar(x)).collect();
        let rg = self.node(a).requires_grad;
        self.push(Op::Sigmoid(a), r, c, values, rg, "sigmoid")
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: ValueId) -> super::Result<ValueId> {
        let (r, c) = self.dims(a);
        let av = &self.node(a).values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&av[i * c..(i + 1) * c], &mut values[i * c..(i + 1) * c]);
        }
        let rg = self.node(a).requires_grad;
        self.push(Op::SoftmaxRows(a), r, c, values, rg, "softmax")
    }

    /// Entries with `keep == false` are replaced by `fill`.
    pub fn masked_fill(&mut self, a: ValueId, keep: Vec<bool>, fill: f64) -> super::Result<ValueId> {
        let (r, c) = self.dims(a);
        if keep.len() != r * c {
            return Err(NumericsError::BadShape {
                op: "masked_fill",
                expected: format!("mask of {} entries", r * c),
                got: vec![keep.len()],
            });
        }
        let values: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x } else { fill })
            .collect();
        let rg = self.node(a).requires_grad;
        self.push(Op::MaskedFill { input: a, keep }, r, c, values, rg, "masked_fill")
    }

    /// Per-row layer normalization with learned scale and shift (both 1xC).
    pub fn layer_norm_rows(
        &mut self,
        a: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> super::Result<ValueId> {
        let (r, c) = self.dims(a);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let (gr, gc) = self.dims(id);
            if (gr, gc) != (1, c) {
                return Err(NumericsError::BadShape {
                    op: "layer_norm",
                    expected: format!("{name} of shape 1x{c}"),
                    got: vec![gr, gc],
                });
            }
        }
        let av = &self.node(a).values;
        let gv = &self.node(gamma).values;
        let bv = &self.node(beta).values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let (mean, inv_std) = row_norm_stats(row, eps);
            for j in 0..c {
                values[i * c + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let rg = self.node(a).requires_grad
            || self.node(gamma).requires_grad
            || self.node(beta).requires_grad;
        self.push(
            Op::LayerNormRows { input: a, gamma, beta, eps },
            r,
            c,
            values,
            rg,
            "layer_norm",
        )
    }

    pub fn add_bias_rows(&mut self, a: ValueId, bias: ValueId) -> super::Result<ValueId> {
        let (r, c) = self.dims(a);
        let (br, bc) = self.dims(bias);
        if (br, bc) != (1, c) {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias_rows",
                left: vec![r, c],
                right: vec![br, bc],
            });
        }
        let av = &self.node(a).values;
        let bv = &self.node(bias).values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] = av[i * c + j] + bv[j];
            }
        }
        let rg = self.node(a).requires_grad || self.node(bias).requires_grad;
        self.push(Op::AddBiasRows { input: a, bias }, r, c, values, rg, "add_bias_rows")
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> super::Result<ValueId> {
        if parts.is_empty() {
            return Err(NumericsError::EmptyInput { op: "concat_cols" });
        }
        let (r, _) = self.dims(parts[0]);
        let mut total_cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![r, self.dims(parts[0]).1],
                    right: vec![pr, pc],
                });
            }
            total_cols += pc;
        }
        let mut values = vec![0.0; r * total_cols];
        let mut col_off = 0;
        for &p in parts {
            let (_, pc) = self.dims(p);
            let pv = &self.node(p).values;
            for i in 0..r {
                values[i * total_cols + col_off..i * total_cols + col_off + pc]
                    .copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            col_off += pc;
        }
        let rg = parts.iter().any(|&p| self.node(p).requires_grad);
        self.push(Op::ConcatCols(parts.to_vec()), r, total_cols, values, rg, "concat_cols")
    }

    /// Stack single-row values into a matrix, one input per output row.
    pub fn stack_rows(&mut self, rows: &[ValueId]) -> super::Result<ValueId> {
        if rows.is_empty() {
            return Err(NumericsError::EmptyInput { op: "stack_rows" });
        }
        let (_, c) = self.dims(rows[0]);
        let mut values = Vec::with_capacity(rows.len() * c);
        for &rid in rows {
            let (rr, rc) = self.dims(rid);
            if rr != 1 || rc != c {
                return Err(NumericsError::BadShape {
                    op: "stack_rows",
                    expected: format!("rows of shape 1x{c}"),
                    got: vec![rr, rc],
                });
            }
            values.extend_from_slice(&self.node(rid).values);
        }
        let rg = rows.iter().any(|&p| self.node(p).requires_grad);
        self.push(Op::StackRows(rows.to_vec()), rows.len(), c, values, rg, "stack_rows")
    }

    /// Select rows by index (duplicates allowed).
    pub fn gather_rows(&mut self, a: ValueId, indices: &[usize]) -> super::Result<ValueId> {
        if indices.is_empty() {
            return Err(NumericsError::EmptyInput { op: "gather_rows" });
        }
        let (r, c) = self.dims(a);
        let av = &self.node(a).values;
        let mut values = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(NumericsError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            values.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let rg = self.node(a).requires_grad;
        self.push(
            Op::GatherRows { input: a, indices: indices.to_vec() },
            indices.len(),
            c,
            values,
            rg,
            "gather_rows",
        )
    }

    /// Weighted scatter-add of rows: `out[targets[e]] += weights[e] * a[e]`.
    pub fn scatter_add_rows(
        &mut self,
        a: ValueId,
        targets: &[usize],
        weights: &[f64],
        out_rows: usize,
    ) -> super::Result<ValueId> {
        let (r, c) = self.dims(a);
        if targets.len() != r || weights.len() != r {
            return Err(NumericsError::BadShape {
                op: "scatter_add_rows",
                expected: format!("{r} targets and weights"),
                got: vec![targets.len(), weights.len()],
            });
        }
        if out_rows == 0 {
            return Err(NumericsError::EmptyInput { op: "scatter_add_rows" });
        }
        let av = &self.node(a).values;
        let mut values = vec![0.0; out_rows * c];
        for (e, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= out_rows {
                return Err(NumericsError::IndexOutOfBounds {
                    op: "scatter_add_rows",
                    index: t,
                    bound: out_rows,
                });
            }
            for j in 0..c {
                values[t * c + j] += w * av[e * c + j];
            }
        }
        let rg = self.node(a).requires_grad;
        self.push(
            Op::ScatterAddRows {
                input: a,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            out_rows,
            c,
            values,
            rg,
            "scatter_add_rows",
        )
    }

    pub fn sum_all(&mut self, a: ValueId) -> super::Result<ValueId> {
        let total: f64 = self.node(a).values.iter().sum();
        let rg = self.node(a).requires_grad;
        self.push(Op::SumAll(a), 1, 1, vec![total], rg, "sum_all")
    }

    /// Sum over rows of the cross-entropy between softmax(logits row) and the
    /// one-hot target of that row.
    pub fn cross_entropy_sum_rows(
        &mut self,
        logits: ValueId,
        targets: &[usize],
    ) -> super::Result<ValueId> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(NumericsError::BadShape {
                op: "cross_entropy",
                expected: format!("{r} targets"),
                got: vec![targets.len()],
            });
        }
        let lv = &self.node(logits).values;
        let mut total = 0.0;
        let mut probs = vec![0.0; c];
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(NumericsError::IndexOutOfBounds {
                    op: "cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            softmax_row(&lv[i * c..(i + 1) * c], &mut probs);
            total -= probs[t].ln();
        }
        let rg = self.node(logits).requires_grad;
        self.push(
            Op::CrossEntropySumRows { logits, targets: targets.to_vec() },
            1,
            1,
            vec![total],
            rg,
            "cross_entropy",
        )
    }

    /// Propagate gradients from a scalar loss back through the tape.
    ///
    /// Each call propagates a fresh unit seed and adds the result into the
    /// persistent per-node gradients, so repeated calls without zeroing
    /// accumulate.
    pub fn backward(&mut self, loss: ValueId) -> super::Result<()> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(NumericsError::NonScalarLoss { rows: r, cols: c });
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || local[i].is_none() {
                continue;
            }
            self.propagate(i, &mut local)?;
        }
        for (node, lg) in self.nodes.iter_mut().zip(local) {
            if let Some(lg) = lg {
                let grad = node
                    .grad
                    .get_or_insert_with(|| vec![0.0; node.rows * node.cols]);
                for (g, d) in grad.iter_mut().zip(&lg) {
                    *g += d;
                }
            }
        }
        Ok(())
    }

    fn add_grad(local: &mut [Option<Vec<f64>>], nodes: &[Node], id: ValueId, delta: &[f64]) {
        let node = &nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let grad = local[id.0].get_or_insert_with(|| vec![0.0; node.rows * node.cols]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn propagate(&mut self, idx: usize, local: &mut [Option<Vec<f64>>]) -> super::Result<()> {
        let g = local[idx].clone().expect("checked by caller");
        let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
        // Ops are matched by value to avoid borrowing self.nodes[idx] across
        // the add_grad calls below.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                Self::add_grad(local, &self.nodes, a, &g);
                Self::add_grad(local, &self.nodes, b, &g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                Self::add_grad(local, &self.nodes, a, &g);
                let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                Self::add_grad(local, &self.nodes, b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[b.0].values)
                    .map(|(&gi, &bi)| gi * bi)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].values)
                    .map(|(&gi, &ai)| gi * ai)
                    .collect();
                Self::add_grad(local, &self.nodes, a, &da);
                Self::add_grad(local, &self.nodes, b, &db);
            }
            Op::Scale(a, f) => {
                let (a, f) = (*a, *f);
                let da: Vec<f64> = g.iter().map(|&x| x * f).collect();
                Self::add_grad(local, &self.nodes, a, &da);
            }
            Op::MulScalar(a, s) => {
                let (a, s) = (*a, *s);
                let sv = self.nodes[s.0].values[0];
                let da: Vec<f64> = g.iter().map(|&x| x * sv).collect();
                let ds: f64 = g
                    .iter()
                    .zip(&self.nodes[a.0].values)
                    .map(|(&gi, &ai)| gi * ai)
                    .sum();
                Self::add_grad(local, &self.nodes, a, &da);
                Self::add_grad(local, &self.nodes, s, &[ds]);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let n = self.nodes[b.0].cols;
                // dA = G * B^T ; dB = A^T * G
                let bt = transpose_raw(&self.nodes[b.0].values, k, n);
                let da = matmul_raw(&g, &bt, m, n, k);
                let at = transpose_raw(&self.nodes[a.0].values, m, k);
                let db = matmul_raw(&at, &g, k, m, n);
                Self::add_grad(local, &self.nodes, a, &da);
                Self::add_grad(local, &self.nodes, b, &db);
            }
            Op::Transpose(a) => {
                let a = *a;
                let da = transpose_raw(&g, rows, cols);
                Self::add_grad(local, &self.nodes, a, &da);
            }
            Op::Relu(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].values)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                Self::add_grad(local, &self.nodes, a, &da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[idx].values)
                    .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                    .collect();
                Self::add_grad(local, &self.nodes, a, &da);
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                let y = &self.nodes[idx].values;
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yj, &gj)| yj * gj).sum();
                    for j in 0..cols {
                        da[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Self::add_grad(local, &self.nodes, a, &da);
            }
            Op::MaskedFill { input, keep, .. } => {
                let input = *input;
                let da: Vec<f64> = g
                    .iter()
                    .zip(keep.clone())
                    .map(|(&gi, k)| if k { gi } else { 0.0 })
                    .collect();
                Self::add_grad(local, &self.nodes, input, &da);
            }
            Op::LayerNormRows { input, gamma, beta, eps } => {
                let (input, gamma, beta, eps) = (*input, *gamma, *beta, *eps);
                let x = &self.nodes[input.0].values;
                let gv = &self.nodes[gamma.0].values;
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let cf = cols as f64;
                for i in 0..rows {
                    let xr = &x[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let (mean, inv_std) = row_norm_stats(xr, eps);
                    let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut sum_gg = 0.0;
                    let mut sum_ggx = 0.0;
                    for j in 0..cols {
                        let ggj = gr[j] * gv[j];
                        sum_gg += ggj;
                        sum_ggx += ggj * xhat[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    for j in 0..cols {
                        let ggj = gr[j] * gv[j];
                        dx[i * cols + j] =
                            inv_std * (ggj - sum_gg / cf - xhat[j] * sum_ggx / cf);
                    }
                }
                Self::add_grad(local, &self.nodes, input, &dx);
                Self::add_grad(local, &self.nodes, gamma, &dgamma);
                Self::add_grad(local, &self.nodes, beta, &dbeta);
            }
            Op::AddBiasRows { input, bias } => {
                let (input, bias) = (*input, *bias);
                let mut db = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        db[j] += g[i * cols + j];
                    }
                }
                Self::add_grad(local, &self.nodes, input, &g);
                Self::add_grad(local, &self.nodes, bias, &db);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut col_off = 0;
                for p in parts {
                    let pc = self.nodes[p.0].cols;
                    let mut dp = vec![0.0; rows * pc];
                    for i in 0..rows {
                        dp[i * pc..(i + 1) * pc]
                            .copy_from_slice(&g[i * cols + col_off..i * cols + col_off + pc]);
                    }
                    Self::add_grad(local, &self.nodes, p, &dp);
                    col_off += pc;
                }
            }
            Op::StackRows(parts) => {
                let parts = parts.clone();
                for (i, p) in parts.into_iter().enumerate() {
                    Self::add_grad(local, &self.nodes, p, &g[i * cols..(i + 1) * cols]);
                }
            }
            Op::GatherRows { input, indices } => {
                let input = *input;
                let indices = indices.clone();
                let in_rows = self.nodes[input.0].rows;
                let mut da = vec![0.0; in_rows * cols];
                for (out_i, &src) in indices.iter().enumerate() {
                    for j in 0..cols {
                        da[src * cols + j] += g[out_i * cols + j];
                    }
                }
                Self::add_grad(local, &self.nodes, input, &da);
            }
            Op::ScatterAddRows { input, targets, weights } => {
                let input = *input;
                let targets = targets.clone();
                let weights = weights.clone();
                let in_rows = self.nodes[input.0].rows;
                let mut da = vec![0.0; in_rows * cols];
                for (e, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                    for j in 0..cols {
                        da[e * cols + j] = w * g[t * cols + j];
                    }
                }
                Self::add_grad(local, &self.nodes, input, &da);
            }
            Op::SumAll(a) => {
                let a = *a;
                let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let da = vec![g[0]; ar * ac];
                Self::add_grad(local, &self.nodes, a, &da);
            }
            Op::CrossEntropySumRows { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let (lr, lc) = (self.nodes[logits.0].rows, self.nodes[logits.0].cols);
                let lv = &self.nodes[logits.0].values;
                let mut da = vec![0.0; lr * lc];
                let mut probs = vec![0.0; lc];
                for (i, &t) in targets.iter().enumerate() {
                    softmax_row(&lv[i * lc..(i + 1) * lc], &mut probs);
                    for j in 0..lc {
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        da[i * lc + j] = g[0] * (probs[j] - indicator);
                    }
                }
                Self::add_grad(local, &self.nodes, logits, &da);
            }
        }
        Ok(())
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// (mean, 1/sqrt(var + eps)) over one row, population variance.
fn row_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// A forward pass over one parameter set: a tape plus the binding between
/// parameters and their leaf values.
///
/// Binding the same parameter twice returns the same leaf, so shared tables
/// (entity embeddings used by several subgraphs, tied weights) accumulate
/// gradients correctly.
pub struct Session {
    pub tape: Tape,
    bound: Vec<(ParamId, ValueId)>,
    lookup: HashMap<usize, ValueId>,
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Session {
    pub fn new() -> Self {
        Session {
            tape: Tape::new(),
            bound: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Bind a parameter onto the tape (memoized per parameter).
    pub fn param(&mut self, ps: &ParamSet, id: ParamId) -> super::Result<ValueId> {
        if let Some(&v) = self.lookup.get(&id.0) {
            return Ok(v);
        }
        let v = self.tape.leaf(&ps.get(id).tensor)?;
        self.bound.push((id, v));
        self.lookup.insert(id.0, v);
        Ok(v)
    }

    pub fn constant(&mut self, t: &Tensor) -> super::Result<ValueId> {
        self.tape.constant(t)
    }

    pub fn backward(&mut self, loss: ValueId) -> super::Result<()> {
        self.tape.backward(loss)
    }

    /// Add tape gradients into the parameters' grad buffers.
    ///
    /// Bound parameters never reached by `backward` get a zero-filled buffer,
    /// so a subsequent optimizer step sees every bound parameter as having a
    /// gradient.
    pub fn accumulate_grads(&self, ps: &mut ParamSet) {
        for &(pid, vid) in &self.bound {
            let param = ps.get_mut(pid);
            match self.tape.grad(vid) {
                Some(g) => param.tensor.accumulate_grad(g),
                None => param.tensor.ensure_grad(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(&mat(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]))
            .unwrap();
        let eye = tape
            .leaf(&mat(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]))
            .unwrap();
        let prod = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.values(prod), tape.values(a));

        let zero = tape.leaf(&Tensor::zeros(3, 3)).unwrap();
        let prod0 = tape.matmul(a, zero).unwrap();
        assert!(tape.values(prod0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect();

        // Independent oracle: plain i/j/p triple loop accumulating in scalar.
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                expect[i * n + j] = s;
            }
        }

        let mut tape = Tape::new();
        let av = tape.leaf(&mat(m, k, &a)).unwrap();
        let bv = tape.leaf(&mat(k, n, &b)).unwrap();
        let prod = tape.matmul(av, bv).unwrap();
        for (got, want) in tape.values(prod).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(2, 3)).unwrap();
        let b = tape.leaf(&Tensor::zeros(4, 2)).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_trivial_cases() {
        let mut tape = Tape::new();
        let v = tape.leaf(&mat(1, 2, &[0.0, 0.0])).unwrap();
        let s = tape.softmax_rows(v).unwrap();
        assert_eq!(tape.values(s), &[0.5, 0.5]);

        let v = tape.leaf(&mat(1, 2, &[0.0, 3.0_f64.ln()])).unwrap();
        let s = tape.softmax_rows(v).unwrap();
        let got = tape.values(s);
        assert!((got[0] - 0.25).abs() < 1e-15);
        assert!((got[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_trivial_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(1, 3, &[0.0, 3.0_f64.ln(), -3.0_f64.ln()])).unwrap();
        let y = tape.sigmoid(x).unwrap();
        let got = tape.values(y);
        assert_eq!(got[0], 0.5);
        assert!((got[1] - 0.75).abs() < 1e-15);
        // sigmoid(-x) == 1 - sigmoid(x)
        assert!((got[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_square() {
        // loss = x^2 at x = 3 -> grad 6
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0).unwrap().with_grad()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_sigmoid_chain() {
        // loss = sigmoid(2x) at x = 0 -> grad = 2 * sigma'(0) = 0.5
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(0.0).unwrap().with_grad()).unwrap();
        let two_x = tape.scale(x, 2.0).unwrap();
        let y = tape.sigmoid(two_x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(1, 2, &[1.0, 2.0]).with_grad()).unwrap();
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, NumericsError::NonScalarLoss { .. }));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0).unwrap().with_grad()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(1, 1, &[1e308])).unwrap();
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { .. }));
    }

    #[test]
    fn session_shares_param_leaves() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::scalar(2.0).unwrap()).unwrap();
        let mut sess = Session::new();
        let a = sess.param(&ps, w).unwrap();
        let b = sess.param(&ps, w).unwrap();
        assert_eq!(a, b);
        // loss = w * w through the shared leaf -> dw = 2w = 4
        let loss = sess.tape.mul(a, b).unwrap();
        sess.backward(loss).unwrap();
        sess.accumulate_grads(&mut ps);
        assert_eq!(ps.get(w).tensor.grad.as_deref(), Some(&[4.0][..]));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape
                .leaf(&mat(2, 3, &[0.1, -0.2, 0.3, 1.5, -2.5, 0.7]))
                .unwrap();
            let b = tape
                .leaf(&mat(3, 2, &[0.9, 0.8, -0.7, 0.6, 0.5, -0.4]))
                .unwrap();
            let p = tape.matmul(a, b).unwrap();
            let s = tape.sigmoid(p).unwrap();
            let sm = tape.softmax_rows(s).unwrap();
            tape.values(sm).to_vec()
        };
        let x = run();
        let y = run();
        assert_eq!(
            x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
