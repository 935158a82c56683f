//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. [`Tape::backward`] walks the nodes in reverse
//! recording order, which is a valid reverse topological order because a node
//! can only reference nodes recorded before it.

use super::kernels::{gemm, gemm_nt, gemm_tn, inverse_perm, permute4, transpose_batched};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchedMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: S },
    Relu { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    MeanPool { x: Var, batch: usize, seq: usize, width: usize },
    Embedding { table: Var, ids: Vec<usize>, width: usize },
    Reshape { x: Var },
    Transpose { x: Var, batch: usize, rows: usize, cols: usize },
    Permute { x: Var, in_shape: [usize; 4], perm: [usize; 4] },
    Sum { x: Var },
    SliceRows { x: Var, start: usize, width: usize },
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    requires_grad: bool,
    op: Op<S>,
}

#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, requires_grad: bool, op: Op<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves -------------------------------------------------------

    /// Copies a tensor onto the tape, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        self.checked_leaf(shape, data, false)
    }

    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        self.checked_leaf(shape, data, true)
    }

    fn checked_leaf(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("leaf", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// Stop-gradient: same values, no path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf)
    }

    // ---- accessors ----------------------------------------------------

    pub fn value(&self, v: Var) -> &[S] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are shape-consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> S {
        self.node(v).value[0]
    }

    /// Gradient of the last `backward` target with respect to `v`. `None`
    /// for nodes that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- linear algebra -----------------------------------------------

    /// `[m×k] · [k×n] -> [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// `[g×m×k] · [g×k×n] -> [g×m×n]`
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batched_matmul", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for g in 0..batch {
            gemm(
                &va[g * m * k..(g + 1) * m * k],
                &vb[g * k * n..(g + 1) * k * n],
                &mut out[g * m * n..(g + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![batch, m, n], out, rg, Op::BatchedMatMul { a, b, batch, m, k, n }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", &shape, &[]));
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch: usize = shape[..r - 2].iter().product();
        let out = transpose_batched(self.value(x), batch, rows, cols);
        let mut new_shape = shape;
        new_shape.swap(r - 2, r - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(new_shape, out, rg, Op::Transpose { x, batch, rows, cols }))
    }

    /// Rank-4 axis permutation, `out.shape[i] = x.shape[perm[i]]`.
    pub fn permute(&mut self, x: Var, perm: [usize; 4]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = [false; 4];
        let valid = s.len() == 4 && perm.iter().all(|&p| p < 4 && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", s, &perm));
        }
        let in_shape = [s[0], s[1], s[2], s[3]];
        let out = permute4(self.value(x), in_shape, perm);
        let out_shape = perm.iter().map(|&p| in_shape[p]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, out, rg, Op::Permute { x, in_shape, perm }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x);
        if old.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::shape("reshape", old, shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape { x }))
    }

    /// Rows `start..start + len` of `x` viewed as `[shape[0], rest]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::shape("slice_rows", &shape, &[start, len]));
        }
        let width: usize = shape[1..].iter().product();
        let value = self.value(x)[start * width..(start + len) * width].to_vec();
        let mut new_shape = shape;
        new_shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(new_shape, value, rg, Op::SliceRows { x, start, width }))
    }

    // ---- elementwise --------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul { a, b }))
    }

    /// Adds a `[n]` vector to every row of a `[…×n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = sb.iter().product::<usize>();
        if sb.len() != 1 || sx.last() != Some(&n) {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let vb = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(vb).map(|(&a, &b)| a + b))
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(S::zero())).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Relu { x })
    }

    // ---- reductions and normalisation ---------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let vx = self.value(x);
        if vx.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![S::zero(); vx.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = S::neg_infinity();
                for j in 0..len {
                    max = max.max(vx[at(j)]);
                }
                let mut total = S::zero();
                for j in 0..len {
                    let e = (vx[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::Softmax { x, outer, len, inner }))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// the `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&0);
        if width == 0 {
            return Err(Error::shape("layer_norm", &shape, &[0]));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [width] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        if eps <= S::zero() {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let rows = self.value(x).len() / width;
        let mut xhat = Vec::with_capacity(rows * width);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * width);
        let inv_w = S::one() / S::lit(width as f64);
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        for row in vx.chunks(width) {
            let mean = row.iter().copied().sum::<S>() * inv_w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_w;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * vg[j] + vb[j]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[1] == 0 {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange { index, label, classes });
        }
        let vx = self.value(logits);
        let mut probs = Vec::with_capacity(vx.len());
        let mut loss = S::zero();
        for (row, &label) in vx.chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let total: S = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[label];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        loss /= S::lit(batch as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `[batch×seq×width] -> [batch×width]`, averaging over the sequence.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] == 0 {
            return Err(Error::shape("mean_pool", &shape, &[]));
        }
        let (batch, seq, width) = (shape[0], shape[1], shape[2]);
        let inv = S::one() / S::lit(seq as f64);
        let vx = self.value(x);
        let mut out = vec![S::zero(); batch * width];
        for b in 0..batch {
            let dst = &mut out[b * width..(b + 1) * width];
            for s in 0..seq {
                let src = &vx[(b * seq + s) * width..(b * seq + s + 1) * width];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![batch, width], out, rg, Op::MeanPool { x, batch, seq, width }))
    }

    /// Row gather from a `[vocab×width]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("embedding", &shape, &[]));
        }
        let (vocab, width) = (shape[0], shape[1]);
        if let Some((row, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= vocab) {
            return Err(Error::TokenOutOfRange {
                row,
                col: 0,
                token: id as u32,
                vocab,
            });
        }
        let vt = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&id| vt[id * width..(id + 1) * width].iter().copied())
            .collect();
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), width],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                width,
            },
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![total], rg, Op::Sum { x })
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a one-element `target`. Gradients from any earlier
    /// sweep are discarded first, so repeated calls give identical results.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        let target_shape = self.shape(target);
        if target_shape.iter().product::<usize>() != 1 {
            return Err(Error::shape("backward", target_shape, &[1]));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(target).requires_grad {
            return Ok(());
        }
        self.grads[target.0] = Some(vec![S::one()]);

        for i in (0..=target.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[S]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];

        // Gradient buffer for input `v`, or `None` if it does not need one.
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = slot!(a) {
                    gemm_nt(g, &nodes[b.0].value, ga, m, n, k);
                }
                if let Some(gb) = slot!(b) {
                    gemm_tn(&nodes[a.0].value, g, gb, k, m, n);
                }
            }
            &Op::BatchedMatMul { a, b, batch, m, k, n } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot!(a) {
                    for t in 0..batch {
                        gemm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &vb[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = slot!(b) {
                    for t in 0..batch {
                        gemm_tn(
                            &va[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(ga) = slot!(a) {
                    axpy(ga, g, S::one());
                }
                if let Some(gb) = slot!(b) {
                    axpy(gb, g, S::one());
                }
            }
            &Op::Sub { a, b } => {
                if let Some(ga) = slot!(a) {
                    axpy(ga, g, S::one());
                }
                if let Some(gb) = slot!(b) {
                    axpy(gb, g, -S::one());
                }
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot!(a) {
                    for ((d, &up), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += up * y;
                    }
                }
                if let Some(gb) = slot!(b) {
                    for ((d, &up), &x) in gb.iter_mut().zip(g).zip(va) {
                        *d += up * x;
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(gx) = slot!(x) {
                    axpy(gx, g, S::one());
                }
                if let Some(gb) = slot!(bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        axpy(gb, row, S::one());
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(gx) = slot!(x) {
                    axpy(gx, g, factor);
                }
            }
            &Op::Relu { x } => {
                if let Some(gx) = slot!(x) {
                    for ((d, &up), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        if y > S::zero() {
                            *d += up;
                        }
                    }
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                if let Some(gx) = slot!(x) {
                    let y = &node.value;
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: S = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let width = nodes[gamma.0].value.len();
                if let Some(gg) = slot!(*gamma) {
                    for (grow, hrow) in g.chunks(width).zip(xhat.chunks(width)) {
                        for ((d, &up), &h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *d += up * h;
                        }
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    for grow in g.chunks(width) {
                        axpy(gb, grow, S::one());
                    }
                }
                let vg = &nodes[gamma.0].value;
                if let Some(gx) = slot!(*x) {
                    let inv_w = S::one() / S::lit(width as f64);
                    for (r, ((grow, hrow), dst)) in g
                        .chunks(width)
                        .zip(xhat.chunks(width))
                        .zip(gx.chunks_mut(width))
                        .enumerate()
                    {
                        let mut mean_dh = S::zero();
                        let mut mean_dh_h = S::zero();
                        for j in 0..width {
                            let dh = grow[j] * vg[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh *= inv_w;
                        mean_dh_h *= inv_w;
                        for j in 0..width {
                            let dh = grow[j] * vg[j];
                            dst[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(gl) = slot!(*logits) {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let s = g[0] / S::lit(batch as f64);
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { S::one() } else { S::zero() };
                            gl[r * classes + c] += s * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            &Op::MeanPool { x, batch, seq, width } => {
                if let Some(gx) = slot!(x) {
                    let inv = S::one() / S::lit(seq as f64);
                    for b in 0..batch {
                        let src = &g[b * width..(b + 1) * width];
                        for s in 0..seq {
                            let dst = &mut gx[(b * seq + s) * width..(b * seq + s + 1) * width];
                            axpy(dst, src, inv);
                        }
                    }
                }
            }
            Op::Embedding { table, ids, width } => {
                let width = *width;
                if let Some(gt) = slot!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * width..(id + 1) * width], &g[r * width..(r + 1) * width], S::one());
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(gx) = slot!(x) {
                    axpy(gx, g, S::one());
                }
            }
            &Op::Transpose { x, batch, rows, cols } => {
                if let Some(gx) = slot!(x) {
                    // g has the transposed layout [batch, cols, rows]
                    let back = transpose_batched(g, batch, cols, rows);
                    axpy(gx, &back, S::one());
                }
            }
            &Op::Permute { x, in_shape, perm } => {
                if let Some(gx) = slot!(x) {
                    let out_shape = [in_shape[perm[0]], in_shape[perm[1]], in_shape[perm[2]], in_shape[perm[3]]];
                    let back = permute4(g, out_shape, inverse_perm(perm));
                    axpy(gx, &back, S::one());
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = slot!(x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::SliceRows { x, start, width } => {
                if let Some(gx) = slot!(x) {
                    axpy(&mut gx[start * width..start * width + g.len()], g, S::one());
                }
            }
        }
    }
}

fn grad_slot<'a, S: Scalar>(nodes: &[Node<S>], grads: &'a mut [Option<Vec<S>>], v: Var) -> Option<&'a mut Vec<S>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n.value.len()]))
}

#[inline]
fn axpy<S: Scalar>(dst: &mut [S], src: &[S], alpha: S) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
