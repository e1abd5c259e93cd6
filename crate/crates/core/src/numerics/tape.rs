//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in execution order, so node inputs
//! always precede the node itself. [`Tape::backward`] walks the record once
//! in reverse and only materializes gradients for nodes that depend on a
//! tracked leaf; constants (frozen weights, inputs) never receive one.

use std::collections::BTreeMap;

use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, softmax_in_place, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sequence layout shared by the attention primitive: `batch` sequences of
/// `seq_len` rows each, of which the first `lengths[b]` are real tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
}

impl SeqLayout {
    pub fn new(batch: usize, seq_len: usize, lengths: Vec<usize>) -> Result<Self> {
        if lengths.len() != batch {
            return Err(Error::Dimension(format!(
                "{} lengths for a batch of {batch}",
                lengths.len()
            )));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > seq_len) {
            return Err(Error::Dimension(format!(
                "sequence length {bad} outside 1..={seq_len}"
            )));
        }
        Ok(Self {
            batch,
            seq_len,
            lengths,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    /// Number of keys query `i` of sequence `b` may attend to: causal, and
    /// never past the last real token.
    fn visible(&self, b: usize, i: usize) -> usize {
        (i + 1).min(self.lengths[b])
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: SeqLayout,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        denom: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    names: BTreeMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    names: BTreeMap<String, Var>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_node.get(var.0).and_then(Option::as_ref)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|&v| self.get(v))
    }

    /// Named gradients in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .filter_map(|(n, &v)| self.get(v).map(|g| (n.as_str(), g)))
    }

    pub fn into_named(mut self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, var) in std::mem::take(&mut self.names) {
            if let Some(g) = self.by_node[var.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Gradient-tracked leaf, optionally addressable by name in the result of
    /// [`Tape::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.names.insert(name.into(), v);
        v
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, what: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(what)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.record("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`, the layout used for `[out, in]` weight matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        self.record("matmul_nt", out, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.record("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.record("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.record("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).scale(factor);
        self.record("scale", out, Op::Scale(a, factor), &[a])
    }

    /// Adds a `[n]` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != n || b.rank() != 1 {
            return Err(Error::Dimension(format!(
                "bias {:?} does not broadcast over rows of width {n}",
                b.shape()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
        let out = Tensor::new([m, n], data)?;
        self.record("add_row", out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.record("gelu", out, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` of width `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        for (what, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).len() != n {
                return Err(Error::Dimension(format!(
                    "layer_norm {what} has {} elements, rows have {n}",
                    self.value(p).len()
                )));
            }
        }
        let eps = T::from_f64_lossy(eps);
        let nt = T::from_usize(n).unwrap_or_else(T::one);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); m * n];
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + bt[c];
            }
        }
        let out = Tensor::new([m, n], out)?;
        self.record(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index(format!("embedding id {bad} >= {vocab}")));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let out = Tensor::new([ids.len(), d], data)?;
        self.record(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index(format!("row {bad} >= {m}")));
        }
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&xs[r * d..(r + 1) * d]);
        }
        let out = Tensor::new([rows.len(), d], data)?;
        self.record(
            "gather_rows",
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Multi-head causal self-attention over `[batch * seq_len, d]` query,
    /// key and value projections. Keys past a sequence's length (padding)
    /// are masked out.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &SeqLayout,
    ) -> Result<Var> {
        let (rows, d) = self.value(q).dims2()?;
        for other in [k, v] {
            if self.value(other).shape() != [rows, d] {
                return Err(Error::Dimension(format!(
                    "attention operands {:?} and {:?} differ",
                    self.value(q).shape(),
                    self.value(other).shape()
                )));
            }
        }
        if rows != layout.rows() {
            return Err(Error::Dimension(format!(
                "attention over {rows} rows, layout expects {}",
                layout.rows()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("{d} not divisible into {heads} heads")));
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            heads,
            layout,
        );
        let out = Tensor::new([rows, d], out)?;
        self.record(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout: layout.clone(),
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean cross-entropy of softmax(logits) against `targets`.
    ///
    /// With `weights`, each row's loss is scaled by the weight of its target
    /// class and the total is divided by the summed weights.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[T]>,
    ) -> Result<Var> {
        let (batch, classes) = self.value(logits).dims2()?;
        if batch == 0 || targets.len() != batch {
            return Err(Error::Dimension(format!(
                "{} targets for {batch} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index(format!("target {bad} outside [0, {classes})")));
        }
        if let Some(w) = class_weights {
            if w.len() != classes {
                return Err(Error::Dimension(format!(
                    "{} class weights for {classes} classes",
                    w.len()
                )));
            }
        }
        let weights: Vec<T> = targets
            .iter()
            .map(|&t| class_weights.map_or(T::one(), |w| w[t]))
            .collect();
        let denom: T = weights.iter().copied().sum();
        let xs = self.value(logits).data();
        let mut probs = xs.to_vec();
        let mut total = T::zero();
        for r in 0..batch {
            let row = &xs[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            let nll = lse - row[targets[r]];
            total = total + weights[r] * nll;
            softmax_in_place(&mut probs[r * classes..(r + 1) * classes]);
        }
        let loss = Tensor::scalar(total / denom);
        self.record(
            "cross_entropy",
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
                denom,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            g.ensure_finite("gradient")?;
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        // only keep gradients for leaves and intermediate nodes that track
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            by_node: grads,
            names: self.names.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if self.tracks(*a) {
                    // dA = dC · Bᵀ
                    let da = gemm_nt(g.data(), self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new([m, k], da)?)?;
                }
                if self.tracks(*b) {
                    // dB = Aᵀ · dC
                    let db = gemm_tn(self.value(*a).data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::new([k, n], db)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.0;
                if self.tracks(*a) {
                    // dA = dC · B
                    let da = gemm_nn(g.data(), self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new([m, k], da)?)?;
                }
                if self.tracks(*b) {
                    // dB = dCᵀ · A
                    let db = gemm_tn(g.data(), self.value(*a).data(), m, n, k);
                    self.accumulate(grads, *b, Tensor::new([n, k], db)?)?;
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose()?)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.tracks(*a) {
                    let d = g.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
                    self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?)?;
                }
                if self.tracks(*b) {
                    let d = g.data().iter().zip(x.data()).map(|(&p, &q)| p * q).collect();
                    self.accumulate(grads, *b, Tensor::new(y.shape().to_vec(), d)?)?;
                }
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.scale(*f))?;
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.tracks(*bias) {
                    let (m, n) = g.dims2()?;
                    let mut db = vec![T::zero(); n];
                    for r in 0..m {
                        for (d, &gv) in db.iter_mut().zip(g.row(r)) {
                            *d = *d + gv;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, db)?)?;
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g.data()[0]))?;
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * gelu_grad(xv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = out.dims2()?;
                let gm = self.value(*gamma).data();
                let gd = g.data();
                if self.tracks(*gamma) || self.tracks(*beta) {
                    let mut dg = vec![T::zero(); n];
                    let mut dbeta = vec![T::zero(); n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] = dg[c] + gd[r * n + c] * xhat[r * n + c];
                            dbeta[c] = dbeta[c] + gd[r * n + c];
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(gshape, dg)?)?;
                    self.accumulate(grads, *beta, Tensor::new(bshape, dbeta)?)?;
                }
                if self.tracks(*x) {
                    let nt = T::from_usize(n).unwrap_or_else(T::one);
                    let mut dx = vec![T::zero(); m * n];
                    for r in 0..m {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..n {
                            let dh = gd[r * n + c] * gm[c];
                            mean_d = mean_d + dh;
                            mean_dx = mean_dx + dh * xhat[r * n + c];
                        }
                        mean_d = mean_d / nt;
                        mean_dx = mean_dx / nt;
                        for c in 0..n {
                            let dh = gd[r * n + c] * gm[c];
                            dx[r * n + c] = rstd[r] * (dh - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new([m, n], dx)?)?;
                }
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = self.value(*table).dims2()?;
                let mut dt = vec![T::zero(); vocab * d];
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &gv) in dt[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                        *o = *o + gv;
                    }
                }
                self.accumulate(grads, *table, Tensor::new([vocab, d], dt)?)?;
            }
            Op::GatherRows { x, rows } => {
                let (m, d) = self.value(*x).dims2()?;
                let mut dx = vec![T::zero(); m * d];
                for (r, &src) in rows.iter().enumerate() {
                    for (o, &gv) in dx[src * d..(src + 1) * d].iter_mut().zip(g.row(r)) {
                        *o = *o + gv;
                    }
                }
                self.accumulate(grads, *x, Tensor::new([m, d], dx)?)?;
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let (rows, d) = out.dims2()?;
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g.data(),
                    d,
                    *heads,
                    layout,
                );
                self.accumulate(grads, *q, Tensor::new([rows, d], dq)?)?;
                self.accumulate(grads, *k, Tensor::new([rows, d], dk)?)?;
                self.accumulate(grads, *v, Tensor::new([rows, d], dv)?)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                denom,
            } => {
                let (batch, classes) = self.value(*logits).dims2()?;
                let upstream = g.data()[0];
                let mut dl = probs.clone();
                for r in 0..batch {
                    dl[r * classes + targets[r]] = dl[r * classes + targets[r]] - T::one();
                    let w = weights[r] * upstream / *denom;
                    for c in 0..classes {
                        dl[r * classes + c] = dl[r * classes + c] * w;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new([batch, classes], dl)?)?;
            }
        }
        Ok(())
    }
}

fn gelu_consts<T: Element>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

pub(crate) fn gelu<T: Element>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Attention probabilities for one head of one sequence are stored as a
/// dense `seq_len × seq_len` block; masked entries stay zero.
fn prob_offset(layout: &SeqLayout, heads: usize, b: usize, h: usize) -> usize {
    (b * heads + h) * layout.seq_len * layout.seq_len
}

pub(crate) fn attention_forward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    heads: usize,
    layout: &SeqLayout,
) -> (Vec<T>, Vec<T>) {
    let t_len = layout.seq_len;
    let hd = d / heads;
    let scale = T::one() / T::from_usize(hd).unwrap_or_else(T::one).sqrt();
    let mut out = vec![T::zero(); layout.rows() * d];
    let mut probs = vec![T::zero(); layout.batch * heads * t_len * t_len];
    for b in 0..layout.batch {
        let base = b * t_len;
        for h in 0..heads {
            let off = prob_offset(layout, heads, b, h);
            let col = h * hd;
            for i in 0..t_len {
                let visible = layout.visible(b, i);
                let qi = &q[(base + i) * d + col..(base + i) * d + col + hd];
                let p = &mut probs[off + i * t_len..off + i * t_len + visible];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &k[(base + j) * d + col..(base + j) * d + col + hd];
                    *pj = dot(qi, kj) * scale;
                }
                softmax_in_place(p);
                let o = &mut out[(base + i) * d + col..(base + i) * d + col + hd];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &v[(base + j) * d + col..(base + j) * d + col + hd];
                    for (ov, &vv) in o.iter_mut().zip(vj) {
                        *ov = *ov + pj * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    d: usize,
    heads: usize,
    layout: &SeqLayout,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let t_len = layout.seq_len;
    let hd = d / heads;
    let scale = T::one() / T::from_usize(hd).unwrap_or_else(T::one).sqrt();
    let n = layout.rows() * d;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let mut dp = vec![T::zero(); t_len];
    for b in 0..layout.batch {
        let base = b * t_len;
        for h in 0..heads {
            let off = prob_offset(layout, heads, b, h);
            let col = h * hd;
            for i in 0..t_len {
                let visible = layout.visible(b, i);
                let p = &probs[off + i * t_len..off + i * t_len + visible];
                let gi = &g[(base + i) * d + col..(base + i) * d + col + hd];
                let mut weighted = T::zero();
                for j in 0..visible {
                    let vj = &v[(base + j) * d + col..(base + j) * d + col + hd];
                    dp[j] = dot(gi, vj);
                    weighted = weighted + p[j] * dp[j];
                    let dvj = &mut dv[(base + j) * d + col..(base + j) * d + col + hd];
                    for (o, &gv) in dvj.iter_mut().zip(gi) {
                        *o = *o + p[j] * gv;
                    }
                }
                for j in 0..visible {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..hd {
                        let qi = q[(base + i) * d + col + c];
                        let kj = k[(base + j) * d + col + c];
                        dq[(base + i) * d + col + c] = dq[(base + i) * d + col + c] + ds * kj;
                        dk[(base + j) * d + col + c] = dk[(base + j) * d + col + c] + ds * qi;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Attention probabilities for inspection: `[batch, heads, seq_len, seq_len]`
/// flattened, with masked entries zero.
pub fn attention_probabilities<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    layout: &SeqLayout,
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = tape.causal_attention(qv, kv, vv, heads, layout)?;
    match &tape.nodes[out.0].op {
        Op::Attention { probs, .. } => Ok(probs.clone()),
        _ => unreachable!("causal_attention records an attention node"),
    }
}
