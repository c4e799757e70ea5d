//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it executes. Nodes are appended in
//! execution order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep that visits each op once.
//!
//! Gradients are kept for two kinds of nodes: parameters (leaves created with
//! [`Graph::param`]) and nodes explicitly marked with [`Graph::retain`]. The
//! latter is how attention maps expose `d logit / d A` to attribution code.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Target index that [`Graph::cross_entropy`] skips.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    Gather { table: Var, idx: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    Log { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, denom: f64 },
    SquaredError { pred: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retained: bool,
    param: bool,
}

/// The tape: an append-only list of recorded nodes.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, keyed by node.
///
/// Holds an entry for every parameter and every retained node, zero-filled
/// when the node is not reachable from the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(&v, t)| (v, t))
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn is_suffix(shape: &[usize], of: &[usize]) -> bool {
    shape.len() <= of.len() && of[of.len() - shape.len()..] == *shape
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.shape().iter().product::<usize>() == value.numel());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retained: false,
            param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; its gradient is always reported.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = true;
        v
    }

    /// A differentiable leaf whose gradient is retained.
    pub fn input(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].retained = true;
        v
    }

    /// Marks a node so backward reports its gradient, even when nothing
    /// upstream of it is differentiable. Call before building on `v`.
    /// Forward values are untouched.
    pub fn retain(&mut self, v: Var) {
        let node = &mut self.nodes[v.0];
        node.retained = true;
        node.requires_grad = true;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a plain `[k, n]` matrix shared by every leading index of
    /// `a`, or has exactly `a`'s leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared = sb.len() == 2;
        if k != k2 || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; out_shape.iter().product()];
        if shared {
            let rows = ta.numel() / k.max(1);
            gemm(ta.data(), tb.data(), &mut out, rows, k, n);
        } else {
            let batches = ta.numel() / (m * k).max(1);
            for bi in 0..batches {
                gemm(
                    &ta.data()[bi * m * k..(bi + 1) * m * k],
                    &tb.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul { a, b }, rg))
    }

    /// Element-wise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Element-wise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_suffix(tb.shape(), ta.shape()) {
            return Err(shape_err(op, ta, tb));
        }
        let bn = tb.numel().max(1);
        let data = ta
            .data()
            .chunks(bn)
            .flat_map(|chunk| chunk.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.needs(a);
        self.push(out, Op::Scale { a, factor }, rg)
    }

    /// Reorders axes; `perm[i]` names the input axis that becomes output axis `i`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let mut seen = vec![false; ta.ndim()];
        if perm.len() != ta.ndim() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: ta.shape().to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let out = permute_tensor(ta, perm);
        let rg = self.needs(a);
        Ok(self.push(out, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.value(a).ndim();
        if nd < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.needs(a);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// Softmax along the last axis of `a + additive_mask`, stabilized by
    /// subtracting each row's maximum. The mask is a constant and may
    /// broadcast over leading axes.
    pub fn softmax_rows(&mut self, a: Var, additive_mask: Option<&Tensor>) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() == 0 || ta.last_dim() == 0 {
            return Err(Error::contract("softmax over an empty axis"));
        }
        let mut data = ta.data().to_vec();
        if let Some(mask) = additive_mask {
            if !is_suffix(mask.shape(), ta.shape()) {
                return Err(shape_err("softmax_rows", ta, mask));
            }
            let mn = mask.numel().max(1);
            for chunk in data.chunks_mut(mn) {
                for (x, m) in chunk.iter_mut().zip(mask.data()) {
                    *x += m;
                }
            }
        }
        for row in data.chunks_mut(ta.last_dim()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            let inv = 1.0 / total;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.needs(a);
        Ok(self.push(out, Op::Softmax { a }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let d = ta.last_dim();
        let mut xhat = Vec::with_capacity(ta.numel());
        let mut rstd = Vec::with_capacity(ta.numel() / d.max(1));
        for row in ta.rows() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|x| (x - mean) * r));
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), xhat.clone());
        let rg = self.needs(a);
        let xhat = if rg { xhat } else { Vec::new() };
        self.push(out, Op::LayerNorm { a, xhat, rstd }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.needs(a);
        self.push(out, Op::Gelu { a }, rg)
    }

    /// Gathers rows of a 2-D table; output is `[idx.len(), cols]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(Error::contract("gather_rows expects a 2-D table"));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::contract(format!("gather index {i} out of range {rows}")));
            }
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::from_parts(vec![idx.len(), cols], data);
        let rg = self.needs(table);
        Ok(self.push(out, Op::Gather { table, idx: idx.to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(out, Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel().max(1) as f64);
        let rg = self.needs(a);
        self.push(out, Op::Mean { a }, rg)
    }

    /// Natural log, with inputs clamped to the smallest positive normal.
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(f64::MIN_POSITIVE).ln());
        let rg = self.needs(a);
        self.push(out, Op::Log { a }, rg)
    }

    /// Fused log-softmax + negative log-likelihood over rows of `[N, C]`
    /// logits. Rows whose target is [`IGNORE_INDEX`] contribute nothing;
    /// `Mean` divides by the number of counted rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let c = t.shape()[1];
        let mut probs = Vec::with_capacity(t.numel());
        let mut total = 0.0;
        let mut counted = 0usize;
        for (row, &target) in t.rows().zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = z.ln() + max;
            probs.extend(row.iter().map(|x| (x - log_z).exp()));
            if target == IGNORE_INDEX {
                continue;
            }
            if target >= c {
                return Err(Error::data(format!("label {target} outside [0, {c})")));
            }
            total += log_z - row[target];
            counted += 1;
        }
        let denom = match reduction {
            Reduction::Mean => counted.max(1) as f64,
            Reduction::Sum => 1.0,
        };
        let out = Tensor::scalar(total / denom);
        let rg = self.needs(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                denom,
            },
            rg,
        ))
    }

    /// Mean squared error between a prediction of `N` values and `target`.
    pub fn squared_error(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if t.numel() != target.len() {
            return Err(Error::Shape {
                op: "squared_error",
                lhs: t.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = target.len().max(1) as f64;
        let loss = t.data().iter().zip(target).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n;
        let rg = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SquaredError {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar seed, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(out.value.shape()));
        let mut kept = BTreeMap::new();

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            let Some(g) = grads[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if node.retained || node.param {
                kept.insert(Var(id), g);
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.retained || node.param {
                kept.entry(Var(id)).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: kept })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let shared = sb.len() == 2;
                if self.needs(*a) {
                    let mut ga = vec![0.0; ta.numel()];
                    if shared {
                        let rows = ta.numel() / k.max(1);
                        gemm_nt(g.data(), tb.data(), &mut ga, rows, n, k);
                    } else {
                        for bi in 0..ta.numel() / (m * k).max(1) {
                            gemm_nt(
                                &g.data()[bi * m * n..(bi + 1) * m * n],
                                &tb.data()[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    accumulate(grads, *a, Tensor::from_parts(sa.to_vec(), ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; tb.numel()];
                    if shared {
                        let rows = ta.numel() / k.max(1);
                        gemm_tn(ta.data(), g.data(), &mut gb, rows, k, n);
                    } else {
                        for bi in 0..ta.numel() / (m * k).max(1) {
                            gemm_tn(
                                &ta.data()[bi * m * k..(bi + 1) * m * k],
                                &g.data()[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    accumulate(grads, *b, Tensor::from_parts(sb.to_vec(), gb));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let tb = self.value(*b);
                    accumulate(grads, *b, reduce_to_suffix(g.data(), tb.shape()));
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let bn = tb.numel().max(1);
                    let data = g
                        .data()
                        .chunks(bn)
                        .flat_map(|c| c.iter().zip(tb.data()).map(|(x, y)| x * y))
                        .collect();
                    accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), data));
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, reduce_to_suffix(&prod, tb.shape()));
                }
            }
            Op::Scale { a, factor } => {
                accumulate(grads, *a, g.map(|x| x * factor));
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(grads, *a, permute_tensor(g, &inv));
            }
            Op::Reshape { a } => {
                let shape = self.shape(*a).to_vec();
                accumulate(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Softmax { a } => {
                let y = &node.value;
                let d = y.last_dim();
                let mut out = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    out.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::LayerNorm { a, xhat, rstd } => {
                let d = node.value.last_dim();
                let df = d as f64;
                let mut out = Vec::with_capacity(xhat.len());
                for ((xr, gr), r) in xhat.chunks(d).zip(g.data().chunks(d)).zip(rstd) {
                    let sg: f64 = gr.iter().sum();
                    let sgx: f64 = gr.iter().zip(xr).map(|(p, q)| p * q).sum();
                    out.extend(
                        xr.iter()
                            .zip(gr)
                            .map(|(x, gi)| r / df * (df * gi - sg - x * sgx)),
                    );
                }
                accumulate(grads, *a, Tensor::from_parts(node.value.shape().to_vec(), out));
            }
            Op::Gelu { a } => {
                let x = self.value(*a);
                let data = x.data().iter().zip(g.data()).map(|(&x, &gi)| gi * gelu_grad(x)).collect();
                accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), data));
            }
            Op::Gather { table, idx } => {
                let t = self.value(*table);
                let cols = t.shape()[1];
                let mut out = vec![0.0; t.numel()];
                for (row, &i) in g.data().chunks(cols).zip(idx) {
                    for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, Tensor::from_parts(t.shape().to_vec(), out));
            }
            Op::Sum { a } => {
                let s = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Mean { a } => {
                let t = self.value(*a);
                let s = g.data()[0] / t.numel().max(1) as f64;
                accumulate(grads, *a, Tensor::full(t.shape(), s));
            }
            Op::Log { a } => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gi)| gi / x.max(f64::MIN_POSITIVE))
                    .collect();
                accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), data));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                denom,
            } => {
                let shape = self.shape(*logits).to_vec();
                let c = shape[1];
                let s = g.data()[0] / denom;
                let mut out = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == IGNORE_INDEX {
                        continue;
                    }
                    let row = &mut out[r * c..(r + 1) * c];
                    for (o, p) in row.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                        *o = p * s;
                    }
                    row[t] -= s;
                }
                accumulate(grads, *logits, Tensor::from_parts(shape, out));
            }
            Op::SquaredError { pred, target } => {
                let p = self.value(*pred);
                let s = 2.0 * g.data()[0] / target.len().max(1) as f64;
                let data = p.data().iter().zip(target).map(|(x, y)| s * (x - y)).collect();
                accumulate(grads, *pred, Tensor::from_parts(p.shape().to_vec(), data));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums `data` over the leading axes that broadcasting added to `shape`.
fn reduce_to_suffix(data: &[f64], shape: &[usize]) -> Tensor {
    let n = shape.iter().product::<usize>().max(1);
    let mut out = vec![0.0; n];
    for chunk in data.chunks(n) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; nd];
    let src = t.data();
    if t.numel() > 0 {
        'outer: loop {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out.push(src[off]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    continue 'outer;
                }
                idx[ax] = 0;
            }
            break;
        }
    }
    Tensor::from_parts(out_shape, out)
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        axpy_rows(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], n);
    }
}

/// `out += sum_p coef[p] * rows[p]` over the `n`-wide rows of `rows`,
/// four rows per pass over `out`.
fn axpy_rows(coef: &[f64], rows: &[f64], out: &mut [f64], n: usize) {
    let mut p = 0;
    while p + 4 <= coef.len() {
        let (c0, c1, c2, c3) = (coef[p], coef[p + 1], coef[p + 2], coef[p + 3]);
        let r0 = &rows[p * n..(p + 1) * n];
        let r1 = &rows[(p + 1) * n..(p + 2) * n];
        let r2 = &rows[(p + 2) * n..(p + 3) * n];
        let r3 = &rows[(p + 3) * n..(p + 4) * n];
        for j in 0..n {
            out[j] += c0 * r0[j] + c1 * r1[j] + c2 * r2[j] + c3 * r3[j];
        }
        p += 4;
    }
    for (q, &c) in coef.iter().enumerate().skip(p) {
        if c == 0.0 {
            continue;
        }
        for (o, r) in out.iter_mut().zip(&rows[q * n..(q + 1) * n]) {
            *o += c * r;
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let orow = &mut out[p * n..(p + 1) * n];
        let mut i = 0;
        while i + 4 <= m {
            let (c0, c1, c2, c3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let g0 = &g[i * n..(i + 1) * n];
            let g1 = &g[(i + 1) * n..(i + 2) * n];
            let g2 = &g[(i + 2) * n..(i + 3) * n];
            let g3 = &g[(i + 3) * n..(i + 4) * n];
            for j in 0..n {
                orow[j] += c0 * g0[j] + c1 * g1[j] + c2 * g2[j] + c3 * g3[j];
            }
            i += 4;
        }
        for r in i..m {
            let c = a[r * k + p];
            for (o, gv) in orow.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                *o += c * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{fd_gradient, rel_err, uniform_tensor};
    use proptest::prelude::*;

    /// Analytic gradient of `f` at `x` via the tape.
    fn tape_gradient(x: &Tensor, f: &dyn Fn(&mut Graph, Var) -> Var) -> Tensor {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = f(&mut g, v);
        g.backward(out).unwrap().get(v).unwrap().clone()
    }

    fn scalar_fn(x: &Tensor, f: &dyn Fn(&mut Graph, Var) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = f(&mut g, v);
        g.value(out).item().unwrap()
    }

    fn check(x: &Tensor, h: f64, tol: f64, f: &dyn Fn(&mut Graph, Var) -> Var) {
        let analytic = tape_gradient(x, f);
        let numeric = fd_gradient(x, h, |t| scalar_fn(t, f));
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            if a.abs().max(n.abs()) > 1e-8 {
                assert!(rel_err(*a, *n) < tol, "analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = g.constant(Tensor::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap());
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 3.0, 4.0, 5.0]);

        let r = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let c = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = uniform_tensor(&[3, 4], 11);
        let b = uniform_tensor(&[4, 5], 12);
        let f = move |g: &mut Graph, v: Var| {
            let bv = g.constant(b.clone());
            let p = g.matmul(v, bv).unwrap();
            g.sum(p)
        };
        check(&a, 1e-5, 1e-6, &f);
    }

    #[test]
    fn softmax_rows_basic_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let s = g.softmax_rows(x, None).unwrap();
        for p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let mask = Tensor::new(vec![1, 2], vec![0.0, crate::tensor::NEG_LARGE]).unwrap();
        let s = g.softmax_rows(x, Some(&mask)).unwrap();
        assert!((g.value(s).data()[0] - 1.0).abs() < 1e-15);
        assert!(g.value(s).data()[1] < 1e-30);
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let x = uniform_tensor(&[1, 5], 3);
        // Probe every Jacobian row with a one-hot readout.
        for row in 0..5 {
            let f = move |g: &mut Graph, v: Var| {
                let s = g.softmax_rows(v, None).unwrap();
                let mut pick = Tensor::zeros(&[1, 5]);
                pick.data_mut()[row] = 1.0;
                let c = g.constant(pick);
                let p = g.mul(s, c).unwrap();
                g.sum(p)
            };
            check(&x, 1e-5, 1e-6, &f);
        }
    }

    #[test]
    fn sum_gives_all_ones() {
        let x = uniform_tensor(&[2, 3], 5);
        let grad = tape_gradient(&x, &|g, v| g.sum(v));
        assert!(grad.data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut g = Graph::new();
        let v = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[3, 2]));
        let loss = g.cross_entropy(l, &[0, 1, IGNORE_INDEX], Reduction::Mean).unwrap();
        assert!((g.value(loss).item().unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(l, &[0, 2, 0], Reduction::Mean).is_err());
    }

    #[test]
    fn retention_does_not_change_forward_values() {
        let x = uniform_tensor(&[2, 4], 9);
        let run = |retain: bool| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let s = g.softmax_rows(v, None).unwrap();
            if retain {
                g.retain(s);
            }
            let l = g.log(s);
            let out = g.mean(l);
            (g.value(out).clone(), g.backward(out).unwrap().get(v).unwrap().clone())
        };
        let (a, ga) = run(true);
        let (b, gb) = run(false);
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ga.checksum(), gb.checksum());
    }

    fn composite(op: u8) -> impl Fn(&mut Graph, Var) -> Var {
        move |g: &mut Graph, v: Var| {
            let w = g.constant(uniform_tensor(&[2, 3, 4], 100 + op as u64));
            let y = match op {
                0 => {
                    let b = g.constant(uniform_tensor(&[4, 3], 7));
                    g.matmul(v, b).unwrap()
                }
                1 => {
                    let b = g.constant(uniform_tensor(&[4], 8));
                    g.add(v, b).unwrap()
                }
                2 => g.mul(v, w).unwrap(),
                3 => g.scale(v, -1.7),
                4 => g.permute(v, &[2, 0, 1]).unwrap(),
                5 => g.reshape(v, &[6, 4]).unwrap(),
                6 => g.softmax_rows(v, None).unwrap(),
                7 => g.layer_norm(v, 1e-5),
                8 => g.gelu(v),
                9 => {
                    let s = g.softmax_rows(v, None).unwrap();
                    g.log(s)
                }
                10 => {
                    let r = g.reshape(v, &[6, 4]).unwrap();
                    return g.cross_entropy(r, &[0, 3, IGNORE_INDEX, 2, 1, 1], Reduction::Mean).unwrap();
                }
                11 => {
                    let r = g.reshape(v, &[24]).unwrap();
                    let target: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
                    return g.squared_error(r, &target).unwrap();
                }
                12 => {
                    let r = g.reshape(v, &[6, 4]).unwrap();
                    g.gather_rows(r, &[5, 0, 5, 2]).unwrap()
                }
                _ => {
                    let t = g.transpose(v).unwrap();
                    g.matmul(v, t).unwrap()
                }
            };
            // Random readout so every output element matters.
            let n = g.value(y).numel();
            let shape = g.shape(y).to_vec();
            let r = g.constant(Tensor::new(shape, uniform_tensor(&[n], 77).into_data()).unwrap());
            let p = g.mul(y, r).unwrap();
            g.sum(p)
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn primitives_agree_with_central_differences(op in 0u8..14, seed in 0u64..1000) {
            let x = uniform_tensor(&[2, 3, 4], seed);
            let f = composite(op);
            let analytic = tape_gradient(&x, &f);
            let numeric = fd_gradient(&x, 1e-5, |t| scalar_fn(t, &f));
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                if a.abs().max(n.abs()) > 1e-8 {
                    prop_assert!(rel_err(*a, *n) < 1e-4, "op {} analytic {} numeric {}", op, a, n);
                }
            }
        }

        #[test]
        fn backward_is_deterministic(op in 0u8..14, seed in 0u64..1000) {
            let x = uniform_tensor(&[2, 3, 4], seed);
            let f = composite(op);
            let a = tape_gradient(&x, &f);
            let b = tape_gradient(&x, &f);
            prop_assert_eq!(a.checksum(), b.checksum());
        }
    }
}
