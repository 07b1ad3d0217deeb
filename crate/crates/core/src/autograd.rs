//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`] holding its forward value
//! and, when any input requires a gradient, a backward rule. [`Tape::backward`]
//! walks the nodes once in reverse recording order, so each node's gradient is
//! complete (summed over all consumers) before its rule runs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule: given the output gradient, the input values and the output
/// value, produce one gradient per input (in input order).
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    requires_grad: bool,
    leaf: bool,
    backward: Option<BackwardFn>,
}

/// Ordered record of operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
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

    /// Records a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            requires_grad,
            leaf: true,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            leaf: false,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + 'static,
    ) -> Var {
        self.custom(inputs, value, Box::new(backward))
    }

    /// Propagates gradients from a scalar `loss`, seeded with 1.
    ///
    /// Every leaf that requires a gradient gets one, zero if the loss does not
    /// depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = rule(&grad_out, &inputs, &node.value);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Interior gradients are not needed after their rule has run,
            // except for the loss itself.
            if id == loss.0 {
                grads[id] = Some(grad_out);
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.leaf && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
            if !node.leaf && id != loss.0 {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product `[m x k] . [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.record(&[a, b], out, |g, x, _| {
            let da = g.matmul(&x[1].transpose().unwrap()).unwrap();
            let db = x[0].transpose().unwrap().matmul(g).unwrap();
            vec![da, db]
        }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.record(&[a], out, |g, _, _| vec![g.transpose().unwrap()]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.value(a).shape().to_vec();
        let out = self.value(a).reshape(shape).map_err(|_| {
            Error::dim(
                "reshape",
                format!("cannot view {src_shape:?} as {shape:?}"),
            )
        })?;
        Ok(self.record(&[a], out, move |g, _, _| {
            vec![g.reshape(&src_shape).unwrap()]
        }))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("add", a, b, |x, y| x + y)?;
        Ok(self.record(&[a, b], out, |g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("sub", a, b, |x, y| x - y)?;
        Ok(self.record(&[a, b], out, |g, _, _| vec![g.clone(), g.map(|v| -v)]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same("mul", a, b, |x, y| x * y)?;
        Ok(self.record(&[a, b], out, |g, x, _| {
            vec![
                g.zip_map(x[1], |g, y| g * y).unwrap(),
                g.zip_map(x[0], |g, y| g * y).unwrap(),
            ]
        }))
    }

    fn binary_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        x.zip_map(y, f)
    }

    /// `c * x`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| c * v);
        self.record(&[a], out, move |g, _, _| vec![g.map(|v| c * v)])
    }

    /// `x + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.record(&[a], out, |g, _, _| vec![g.clone()])
    }

    /// Adds a `[d]` (or `[1 x d]`) bias to every row of an `[n x d]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != d || b.rank() > 2 || (b.rank() == 2 && b.shape()[0] != 1) {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} for rows of {:?}", b.shape(), [n, d]),
            ));
        }
        let mut out = self.value(x).clone();
        for i in 0..n {
            for (o, bj) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(b.data()) {
                *o += bj;
            }
        }
        Ok(self.record(&[x, bias], out, move |g, inp, _| {
            let mut db = vec![0.0; d];
            for i in 0..n {
                for (acc, gv) in db.iter_mut().zip(g.row(i)) {
                    *acc += gv;
                }
            }
            vec![g.clone(), Tensor::new(inp[1].shape(), db).unwrap()]
        }))
    }

    /// Scales every row `i` of an `[n x d]` matrix by `col[i]` (`col` is `[n x 1]`).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let c = self.value(col);
        if c.shape() != [n, 1] {
            return Err(Error::dim(
                "mul_col",
                format!("column {:?} for rows of {:?}", c.shape(), [n, d]),
            ));
        }
        let mut out = self.value(x).clone();
        for i in 0..n {
            let ci = c.data()[i];
            for o in &mut out.data_mut()[i * d..(i + 1) * d] {
                *o *= ci;
            }
        }
        Ok(self.record(&[x, col], out, move |g, inp, _| {
            let (xv, cv) = (inp[0], inp[1]);
            let mut dx = g.clone();
            let mut dc = vec![0.0; n];
            for i in 0..n {
                let ci = cv.data()[i];
                for j in 0..d {
                    dx.data_mut()[i * d + j] *= ci;
                    dc[i] += g.data()[i * d + j] * xv.data()[i * d + j];
                }
            }
            vec![dx, Tensor::new(&[n, 1], dc).unwrap()]
        }))
    }

    /// Exact GELU, `x * Phi(x)` with the erf-based normal CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.record(&[a], out, |g, x, _| {
            vec![g.zip_map(x[0], |g, v| g * gelu_grad(v)).unwrap()]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.record(&[a], out, |g, x, _| {
            vec![g
                .zip_map(x[0], |g, v| if v > 0.0 { g } else { 0.0 })
                .unwrap()]
        })
    }

    /// Logistic sigmoid.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.record(&[a], out, |g, _, y| {
            vec![g.zip_map(y, |g, s| g * s * (1.0 - s)).unwrap()]
        })
    }

    // ---- reductions -----------------------------------------------------

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.record(&[a], out, |g, x, _| vec![Tensor::full(x[0].shape(), g.data()[0])])
    }

    /// Column means of an `[n x d]` matrix, as `[1 x d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        let x = self.value(a);
        let mut m = vec![0.0; d];
        for i in 0..n {
            for (acc, v) in m.iter_mut().zip(x.row(i)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n as f64);
        let out = Tensor::new(&[1, d], m)?;
        Ok(self.record(&[a], out, move |g, _, _| {
            let mut dx = Tensor::zeros(&[n, d]);
            for i in 0..n {
                for j in 0..d {
                    dx.data_mut()[i * d + j] = g.data()[j] / n as f64;
                }
            }
            vec![dx]
        }))
    }

    // ---- structural -----------------------------------------------------

    /// Stacks matrices with a common column count along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no inputs"));
        }
        let cols = self.value(parts[0]).dims2()?.1;
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column counts {cols} and {c} differ"),
                ));
            }
            rows.push(r);
            data.extend_from_slice(self.value(p).data());
        }
        let total: usize = rows.iter().sum();
        let out = Tensor::new(&[total, cols], data)?;
        Ok(self.record(parts, out, move |g, _, _| {
            let mut offset = 0;
            rows.iter()
                .map(|&r| {
                    let part = g.data()[offset * cols..(offset + r) * cols].to_vec();
                    offset += r;
                    Tensor::new(&[r, cols], part).unwrap()
                })
                .collect()
        }))
    }

    /// Column `j` of an `[n x c]` matrix as `[n x 1]`.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (n, c) = self.value(a).dims2()?;
        if j >= c {
            return Err(Error::Index(format!("column {j} of a {n}x{c} matrix")));
        }
        let data = (0..n).map(|i| self.value(a).at(i, j)).collect();
        let out = Tensor::new(&[n, 1], data)?;
        Ok(self.record(&[a], out, move |g, _, _| {
            let mut dx = Tensor::zeros(&[n, c]);
            for i in 0..n {
                dx.data_mut()[i * c + j] = g.data()[i];
            }
            vec![dx]
        }))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("row {bad} of a table with {v} rows")));
        }
        if ids.is_empty() {
            return Err(Error::dim("gather_rows", "no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(self.value(table).row(i));
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        let ids = ids.to_vec();
        Ok(self.record(&[table], out, move |g, _, _| {
            let mut dt = Tensor::zeros(&[v, d]);
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    dt.data_mut()[i * d + j] += g.data()[r * d + j];
                }
            }
            vec![dt]
        }))
    }

    // ---- normalisation and losses --------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} of a rank-{} tensor", x.rank()),
            ));
        }
        let layout = AxisLayout::new(x.shape(), axis);
        let out = softmax_along(x, layout);
        Ok(self.record(&[a], out, move |g, _, y| {
            let mut dx = Tensor::zeros(y.shape());
            for (o, i) in layout.lanes() {
                let dot: f64 = (0..layout.len)
                    .map(|t| {
                        let idx = layout.index(o, i, t);
                        g.data()[idx] * y.data()[idx]
                    })
                    .sum();
                for t in 0..layout.len {
                    let idx = layout.index(o, i, t);
                    dx.data_mut()[idx] = y.data()[idx] * (g.data()[idx] - dot);
                }
            }
            vec![dx]
        }))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (n, d) = self.value(x).dims2()?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).len() != d || self.value(p).rank() != 1 {
                return Err(Error::dim(
                    "layer_norm",
                    format!(
                        "{name} {:?} for rows of {:?}",
                        self.value(p).shape(),
                        [n, d]
                    ),
                ));
            }
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let (xhat, _) = normalize_row(xv.row(i), eps);
            for j in 0..d {
                out.data_mut()[i * d + j] = gv.data()[j] * xhat[j] + bv.data()[j];
            }
        }
        Ok(self.record(&[x, gamma, beta], out, move |g, inp, _| {
            let (xv, gv) = (inp[0], inp[1]);
            let mut dx = Tensor::zeros(&[n, d]);
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for i in 0..n {
                let (xhat, rstd) = normalize_row(xv.row(i), eps);
                let gr = g.row(i);
                let mut dxhat = vec![0.0; d];
                for j in 0..d {
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                    dxhat[j] = gr[j] * gv.data()[j];
                }
                let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    dx.data_mut()[i * d + j] =
                        rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
            }
            vec![dx, Tensor::vector(dgamma), Tensor::vector(dbeta)]
        }))
    }

    /// Mean cross-entropy of `[batch x classes]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for {b} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target class {bad} with {c} classes")));
        }
        let probs = softmax_along(self.value(logits), AxisLayout::new(&[b, c], 1));
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = self.value(logits).row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum::<f64>()
            / b as f64;
        let targets = targets.to_vec();
        Ok(self.record(&[logits], Tensor::scalar(loss), move |g, _, _| {
            let scale = g.data()[0] / b as f64;
            let mut d = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                d.data_mut()[i * c + t] -= 1.0;
            }
            vec![d.map(|v| v * scale)]
        }))
    }

    // ---- attention ------------------------------------------------------

    /// Scaled dot-product attention `softmax(q k^T / sqrt(d)) v` over rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (_, d) = self.value(q).dims2()?;
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = self.softmax(scores, 1)?;
        self.matmul(weights, v)
    }

    /// Single-head self-attention with `[d x d]` projections.
    pub fn self_attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        for (name, w) in [("wq", wq), ("wk", wk), ("wv", wv)] {
            if self.value(w).shape() != [d, d] {
                return Err(Error::dim(
                    "self_attention",
                    format!("{name} {:?} for input width {d}", self.value(w).shape()),
                ));
            }
        }
        let q = self.matmul(x, wq)?;
        let k = self.matmul(x, wk)?;
        let v = self.matmul(x, wv)?;
        self.attention(q, k, v)
    }
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn normalize_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let rstd = 1.0 / (var + eps).sqrt();
    (row.iter().map(|v| (v - mean) * rstd).collect(), rstd)
}

/// Decomposes a shape into (outer, axis, inner) extents for reductions.
#[derive(Clone, Copy)]
struct AxisLayout {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisLayout {
    fn new(shape: &[usize], axis: usize) -> Self {
        AxisLayout {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    fn lanes(self) -> impl Iterator<Item = (usize, usize)> {
        (0..self.outer).flat_map(move |o| (0..self.inner).map(move |i| (o, i)))
    }

    fn index(self, o: usize, i: usize, t: usize) -> usize {
        (o * self.len + t) * self.inner + i
    }
}

fn softmax_along(x: &Tensor, layout: AxisLayout) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for (o, i) in layout.lanes() {
        let max = (0..layout.len)
            .map(|t| x.data()[layout.index(o, i, t)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for t in 0..layout.len {
            let idx = layout.index(o, i, t);
            let e = (x.data()[idx] - max).exp();
            out.data_mut()[idx] = e;
            total += e;
        }
        for t in 0..layout.len {
            out.data_mut()[layout.index(o, i, t)] /= total;
        }
    }
    out
}
