//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is an arena of nodes; each op validates shapes, computes its
//! value eagerly, and records parents plus whatever it needs for the adjoint.
//! Nodes are appended in execution order, so walking the arena backwards
//! visits every node after all of its consumers. The graph is rebuilt from
//! scratch for every training step.
//!
//! Reductions over the key axis inside [`Graph::attn_apply`] accumulate in a
//! canonical order (sorted by score, ties broken by value-row content), which
//! makes attention bitwise invariant under joint permutation of key/value
//! rows.

use crate::tensor::{
    matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, matmul_raw, Real, Result, Tensor, TensorError,
};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Raw node id, the key used by gradient maps.
    pub fn id(self) -> usize {
        self.0
    }
}

/// Boolean attention mask; `true` means the query row may attend to the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    nq: usize,
    nk: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    pub fn new(nq: usize, nk: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != nq * nk {
            return Err(TensorError::LengthMismatch {
                shape: vec![nq, nk],
                len: allow.len(),
            });
        }
        Ok(AttnMask { nq, nk, allow })
    }

    /// Causal mask over a square score matrix: position j attends to <= j.
    pub fn causal(n: usize) -> Self {
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allow[i * n + j] = true;
            }
        }
        AttnMask { nq: n, nk: n, allow }
    }

    pub fn nq(&self) -> usize {
        self.nq
    }

    pub fn nk(&self) -> usize {
        self.nk
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.nk + k]
    }
}

enum Op<R: Real> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: R,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SumAll {
        x: Var,
    },
    /// Fused masked softmax over scores followed by the weighted value sum.
    AttnApply {
        scores: Var,
        values: Var,
        probs: Tensor<R>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<R>,
        inv_std: Vec<R>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<R>,
        /// Row mask: true where the target is not padding.
        active: Vec<bool>,
        n_eff: usize,
    },
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
}

/// Gradients produced by [`Graph::backward`], keyed by node id.
pub struct Gradients<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss w.r.t. `v`; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of the loss w.r.t. `v`, zeros when the node is unreachable.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<R> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Like `get_or_zeros` but moves the stored tensor out.
    pub fn take_or_zeros(&mut self, v: Var) -> Tensor<R> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

/// Arena of executed ops plus their values; one per forward/backward pass.
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn require_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(TensorError::BadShape {
                op,
                expected: "a 2-D tensor",
                got: t.shape().to_vec(),
            });
        }
        Ok((t.rows(), t.cols()))
    }

    /// Matrix product of 2-D nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.require_matrix("matmul", a)?;
        let (kb, n) = self.require_matrix("matmul", b)?;
        if ka != kb {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, ka, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.require_matrix("transpose", x)?;
        let src = self.value(x).data();
        let mut data = vec![R::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::from_vec(vec![n, m], data)?;
        Ok(self.push(value, Op::Transpose { x }))
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::DimMismatch {
                op: op_name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Multiply every element by a scalar constant.
    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { x, c })
    }

    /// Rectified linear unit; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > R::ZERO { v } else { R::ZERO })
            .collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu { x })
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu_val(v)).collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { x })
    }

    /// Row-wise softmax of a 2-D tensor, stabilized by per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.require_matrix("softmax_rows", x)?;
        let src = self.value(x).data();
        let mut data = vec![R::ZERO; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let out = &mut data[i * n..(i + 1) * n];
            let mx = row.iter().fold(row[0], |a, &b| a.max(b));
            let mut denom = R::ZERO;
            for (o, &v) in out.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *o = e;
                denom += e;
            }
            for o in out.iter_mut() {
                *o = *o / denom;
            }
        }
        let value = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(value, Op::SoftmaxRows { x }))
    }

    /// Concatenate along `axis`; parts must agree on every other extent.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "concat",
                msg: "no parts given".into(),
            });
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "concat",
                index: axis,
                bound: first.len(),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::DimMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![R::ZERO; outer * axis_total * inner];
        let row_len = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            let block = s[axis] * inner;
            let src = self.value(p).data();
            for o in 0..outer {
                data[o * row_len + offset..o * row_len + offset + block]
                    .copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Add a length-C bias vector to every row of an N-by-C tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.require_matrix("add_bias", x)?;
        let bs = self.value(bias).shape();
        if bs != [n] {
            return Err(TensorError::DimMismatch {
                op: "add_bias",
                lhs: vec![m, n],
                rhs: bs.to_vec(),
            });
        }
        let src = self.value(x).data();
        let b = self.value(bias).data();
        let mut data = vec![R::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = src[i * n + j] + b[j];
            }
        }
        let value = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(value, Op::AddBias { x, bias }))
    }

    /// Select rows of a 2-D table by index; the adjoint scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.require_matrix("gather_rows", table)?;
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::from_vec(vec![ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = R::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll { x })
    }

    /// Masked softmax over score rows followed by the weighted sum of values.
    ///
    /// `scores` is Nq-by-Nk, `values` is Nk-by-Dv. Masked entries never enter
    /// the reduction and their attention weight is exactly zero. Both the
    /// denominator and the weighted sum accumulate in a canonical order, so
    /// the output does not depend on how key/value rows are ordered.
    pub fn attn_apply(&mut self, scores: Var, values: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let (nq, nk) = self.require_matrix("attn_apply", scores)?;
        let (vn, dv) = self.require_matrix("attn_apply", values)?;
        if vn != nk {
            return Err(TensorError::DimMismatch {
                op: "attn_apply",
                lhs: vec![nq, nk],
                rhs: vec![vn, dv],
            });
        }
        if let Some(m) = mask {
            if m.nq() != nq || m.nk() != nk {
                return Err(TensorError::DimMismatch {
                    op: "attn_apply mask",
                    lhs: vec![nq, nk],
                    rhs: vec![m.nq(), m.nk()],
                });
            }
        }
        let s = self.value(scores).data();
        let v = self.value(values).data();
        let mut probs = vec![R::ZERO; nq * nk];
        let mut out = vec![R::ZERO; nq * dv];
        let mut order: Vec<usize> = Vec::with_capacity(nk);
        for q in 0..nq {
            let srow = &s[q * nk..(q + 1) * nk];
            order.clear();
            order.extend((0..nk).filter(|&k| mask.map_or(true, |m| m.allows(q, k))));
            if order.is_empty() {
                return Err(TensorError::FullyMaskedRow { row: q });
            }
            // Canonical accumulation order: by score, ties by value-row content.
            order.sort_unstable_by(|&a, &b| {
                srow[b].total_cmp(&srow[a]).then_with(|| {
                    let va = &v[a * dv..(a + 1) * dv];
                    let vb = &v[b * dv..(b + 1) * dv];
                    va.iter()
                        .zip(vb)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
            });
            let mx = order
                .iter()
                .map(|&k| srow[k])
                .fold(srow[order[0]], |a, b| a.max(b));
            let mut denom = R::ZERO;
            for &k in &order {
                let e = (srow[k] - mx).exp();
                probs[q * nk + k] = e;
                denom += e;
            }
            for &k in &order {
                probs[q * nk + k] = probs[q * nk + k] / denom;
            }
            let orow = &mut out[q * dv..(q + 1) * dv];
            for &k in &order {
                let p = probs[q * nk + k];
                let vrow = &v[k * dv..(k + 1) * dv];
                for (o, &x) in orow.iter_mut().zip(vrow) {
                    *o = *o + p * x;
                }
            }
        }
        let probs = Tensor::from_vec(vec![nq, nk], probs)?;
        let value = Tensor::from_vec(vec![nq, dv], out)?;
        Ok(self.push(
            value,
            Op::AttnApply {
                scores,
                values,
                probs,
            },
        ))
    }

    /// Attention weights computed by [`Graph::attn_apply`] for these inputs,
    /// without recording a node. Forward-only introspection for tests.
    pub fn attn_probs(&self, scores: Var, mask: Option<&AttnMask>) -> Result<Tensor<R>> {
        let (nq, nk) = self.require_matrix("attn_probs", scores)?;
        let s = self.value(scores).data();
        let mut probs = vec![R::ZERO; nq * nk];
        for q in 0..nq {
            let srow = &s[q * nk..(q + 1) * nk];
            let allowed: Vec<usize> = (0..nk)
                .filter(|&k| mask.map_or(true, |m| m.allows(q, k)))
                .collect();
            if allowed.is_empty() {
                return Err(TensorError::FullyMaskedRow { row: q });
            }
            let mx = allowed
                .iter()
                .map(|&k| srow[k])
                .fold(srow[allowed[0]], |a, b| a.max(b));
            let mut denom = R::ZERO;
            for &k in &allowed {
                let e = (srow[k] - mx).exp();
                probs[q * nk + k] = e;
                denom += e;
            }
            for &k in &allowed {
                probs[q * nk + k] = probs[q * nk + k] / denom;
            }
        }
        Tensor::from_vec(vec![nq, nk], probs)
    }

    /// Per-row (token) normalization to zero mean and unit population
    /// variance, then an affine map by `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.require_matrix("layer_norm", x)?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(TensorError::DimMismatch {
                op: "layer_norm",
                lhs: vec![m, n],
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = R::from_f64(eps);
        let inv_n = R::ONE / R::from_f64(n as f64);
        let mut xhat = vec![R::ZERO; m * n];
        let mut inv_std = vec![R::ZERO; m];
        let mut data = vec![R::ZERO; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mut mean = R::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_n;
            let mut var = R::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_n;
            let is = R::ONE / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[i * n + j] = xh;
                data[i * n + j] = g[j] * xh + b[j];
            }
        }
        let xhat = Tensor::from_vec(vec![m, n], xhat)?;
        let value = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean over non-padding positions of the negative log softmax
    /// probability of each target id. Padding rows contribute nothing to the
    /// value or the gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let (rows, vocab) = self.require_matrix("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(TensorError::Contract {
                op: "cross_entropy",
                msg: format!("{} targets for {} logit rows", targets.len(), rows),
            });
        }
        for (pos, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(TensorError::TargetOutOfRange {
                    id: t,
                    pos,
                    vocab,
                });
            }
        }
        let active: Vec<bool> = targets.iter().map(|&t| t != pad_id).collect();
        let n_eff = active.iter().filter(|&&a| a).count();
        if n_eff == 0 {
            return Err(TensorError::AllPadTargets);
        }
        let src = self.value(logits).data();
        let mut probs = vec![R::ZERO; rows * vocab];
        let mut loss = R::ZERO;
        let inv_eff = R::ONE / R::from_f64(n_eff as f64);
        for i in 0..rows {
            let row = &src[i * vocab..(i + 1) * vocab];
            let prow = &mut probs[i * vocab..(i + 1) * vocab];
            let mx = row.iter().fold(row[0], |a, &b| a.max(b));
            let mut denom = R::ZERO;
            for (p, &v) in prow.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *p = e;
                denom += e;
            }
            for p in prow.iter_mut() {
                *p = *p / denom;
            }
            if active[i] {
                // -log softmax[target] = log(denom) - (x_t - mx)
                let t = targets[i];
                loss += (denom.ln() - (row[t] - mx)) * inv_eff;
            }
        }
        let probs = Tensor::from_vec(vec![rows, vocab], probs)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                active,
                n_eff,
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Every node reachable from the loss
    /// gets a gradient; unreachable nodes report zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let loss_val = self.value(loss);
        if !loss_val.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(R::ONE));
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.accumulate_parents(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate_parents(&self, idx: usize, grad: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        let node = &self.nodes[idx];
        let mut add_to = |v: Var, f: &mut dyn FnMut(&mut [R])| {
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
            }
            f(slot.as_mut().expect("just filled").data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                add_to(*a, &mut |da| {
                    matmul_a_bt_acc(grad.data(), bv, m, n, k, da);
                });
                add_to(*b, &mut |db| {
                    matmul_at_b_acc(av, grad.data(), m, k, n, db);
                });
            }
            Op::Transpose { x } => {
                let (n, m) = (node.value.rows(), node.value.cols());
                add_to(*x, &mut |dx| {
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] += grad.data()[i * m + j];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                add_to(*a, &mut |da| {
                    for (d, &g) in da.iter_mut().zip(grad.data()) {
                        *d += g;
                    }
                });
                add_to(*b, &mut |db| {
                    for (d, &g) in db.iter_mut().zip(grad.data()) {
                        *d += g;
                    }
                });
            }
            Op::Sub { a, b } => {
                add_to(*a, &mut |da| {
                    for (d, &g) in da.iter_mut().zip(grad.data()) {
                        *d += g;
                    }
                });
                add_to(*b, &mut |db| {
                    for (d, &g) in db.iter_mut().zip(grad.data()) {
                        *d += -g;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                add_to(*a, &mut |da| {
                    for ((d, &g), &y) in da.iter_mut().zip(grad.data()).zip(bv) {
                        *d += g * y;
                    }
                });
                add_to(*b, &mut |db| {
                    for ((d, &g), &x) in db.iter_mut().zip(grad.data()).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                add_to(*x, &mut |dx| {
                    for (d, &g) in dx.iter_mut().zip(grad.data()) {
                        *d += g * c;
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.nodes[x.0].value.data();
                add_to(*x, &mut |dx| {
                    for ((d, &g), &v) in dx.iter_mut().zip(grad.data()).zip(xv) {
                        if v > R::ZERO {
                            *d += g;
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = self.nodes[x.0].value.data();
                add_to(*x, &mut |dx| {
                    for ((d, &g), &v) in dx.iter_mut().zip(grad.data()).zip(xv) {
                        *d += g * gelu_grad(v);
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let p = node.value.data();
                let (m, n) = (node.value.rows(), node.value.cols());
                add_to(*x, &mut |dx| {
                    softmax_backward_rows(p, grad.data(), m, n, dx);
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let row_len = shape[*axis] * inner;
                let mut offset = 0usize;
                for &p in parts {
                    let block = self.nodes[p.0].value.shape()[*axis] * inner;
                    add_to(p, &mut |dp| {
                        for o in 0..outer {
                            let src = &grad.data()[o * row_len + offset..o * row_len + offset + block];
                            for (d, &g) in dp[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    });
                    offset += block;
                }
            }
            Op::AddBias { x, bias } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                add_to(*x, &mut |dx| {
                    for (d, &g) in dx.iter_mut().zip(grad.data()) {
                        *d += g;
                    }
                });
                add_to(*bias, &mut |db| {
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += grad.data()[i * n + j];
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let cols = node.value.cols();
                add_to(*table, &mut |dt| {
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &grad.data()[i * cols..(i + 1) * cols];
                        for (d, &g) in dt[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let g = grad.item();
                add_to(*x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                });
            }
            Op::AttnApply {
                scores,
                values,
                probs,
            } => {
                let (nq, nk) = (probs.rows(), probs.cols());
                let dv = node.value.cols();
                let vv = self.nodes[values.0].value.data();
                // dP = dOut * V^T, then softmax backward through each row.
                let mut dprobs = vec![R::ZERO; nq * nk];
                matmul_a_bt_acc(grad.data(), vv, nq, dv, nk, &mut dprobs);
                add_to(*scores, &mut |ds| {
                    softmax_backward_rows(probs.data(), &dprobs, nq, nk, ds);
                });
                add_to(*values, &mut |dval| {
                    matmul_at_b_acc(probs.data(), grad.data(), nq, nk, dv, dval);
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let gv = self.nodes[gamma.0].value.data();
                let inv_n = R::ONE / R::from_f64(n as f64);
                add_to(*beta, &mut |db| {
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += grad.data()[i * n + j];
                        }
                    }
                });
                add_to(*gamma, &mut |dg| {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += grad.data()[i * n + j] * xhat.data()[i * n + j];
                        }
                    }
                });
                add_to(*x, &mut |dx| {
                    for i in 0..m {
                        let grow = &grad.data()[i * n..(i + 1) * n];
                        let xrow = &xhat.data()[i * n..(i + 1) * n];
                        let mut mean_dy = R::ZERO;
                        let mut mean_dy_xhat = R::ZERO;
                        for j in 0..n {
                            let dy = grow[j] * gv[j];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xrow[j];
                        }
                        mean_dy = mean_dy * inv_n;
                        mean_dy_xhat = mean_dy_xhat * inv_n;
                        for j in 0..n {
                            let dy = grow[j] * gv[j];
                            dx[i * n + j] += inv_std[i] * (dy - mean_dy - xrow[j] * mean_dy_xhat);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                active,
                n_eff,
            } => {
                let (rows, vocab) = (probs.rows(), probs.cols());
                let g = grad.item();
                let inv_eff = R::ONE / R::from_f64(*n_eff as f64);
                add_to(*logits, &mut |dl| {
                    for i in 0..rows {
                        if !active[i] {
                            continue;
                        }
                        let prow = &probs.data()[i * vocab..(i + 1) * vocab];
                        let drow = &mut dl[i * vocab..(i + 1) * vocab];
                        for (d, &p) in drow.iter_mut().zip(prow) {
                            *d += g * p * inv_eff;
                        }
                        drow[targets[i]] += -g * inv_eff;
                    }
                });
            }
        }
    }
}

/// dL/dx for y = softmax(x) row-wise given dL/dy, accumulated into `dx`.
fn softmax_backward_rows<R: Real>(p: &[R], dy: &[R], m: usize, n: usize, dx: &mut [R]) {
    for i in 0..m {
        let prow = &p[i * n..(i + 1) * n];
        let dyrow = &dy[i * n..(i + 1) * n];
        let mut dot = R::ZERO;
        for (&pv, &gv) in prow.iter().zip(dyrow) {
            dot += pv * gv;
        }
        for j in 0..n {
            dx[i * n + j] += prow[j] * (dyrow[j] - dot);
        }
    }
}

// Tanh-approximation gelu: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (R::ONE + u.tanh())
}

fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let three = R::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = R::ONE - t * t;
    half * (R::ONE + t) + half * x * sech2 * c * (R::ONE + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_preserves_any_matrix() {
        let mut g = Graph::new();
        let eye = g.leaf(tensor2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let a = g.leaf(tensor2(&[vec![3.0, -1.5], vec![2.25, 9.0]]));
        let c = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.leaf(tensor2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.leaf(tensor2(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got {msg}");
    }

    #[test]
    fn grad_of_sum_matmul_is_ones_times_b_transposed() {
        let mut g = Graph::new();
        let a = g.leaf(tensor2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.leaf(tensor2(&[vec![5.0, -6.0], vec![0.5, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum_all(c);
        let grads = g.backward(loss).unwrap();
        // d sum(AB) / dA = ones * B^T: row i is the column sums of B^T rows,
        // i.e. each row equals (sum of b row j over columns) per k.
        let da = grads.get(a).unwrap();
        let expect = [5.0 - 6.0, 0.5 + 8.0, 5.0 - 6.0, 0.5 + 8.0];
        for (x, e) in da.data().iter().zip(expect) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1, 4], vec![0.0f64; 4]).unwrap());
        let p = g.softmax_rows(x).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form_ln2() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1, 2], vec![0.0f64, 2.0f64.ln()]).unwrap());
        let p = g.softmax_rows(x).unwrap();
        assert!((g.value(p).data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.value(p).data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance_bitwise_on_grid() {
        // Inputs on a 2^-10 grid with integer shifts stay exactly representable,
        // so stabilization makes the shifted softmax bitwise identical.
        let mut g = Graph::new();
        let base: Vec<f64> = vec![-3.0, 0.0078125, 1.5, -0.25, 4.0, 2.125];
        let shifted: Vec<f64> = base.iter().map(|v| v + 17.0).collect();
        let a = g.leaf(Tensor::from_vec(vec![2, 3], base).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![2, 3], shifted).unwrap());
        let pa = g.softmax_rows(a).unwrap();
        let pb = g.softmax_rows(b).unwrap();
        assert_eq!(g.value(pa).data(), g.value(pb).data());
    }

    #[test]
    fn concat_single_part_identity() {
        let mut g = Graph::new();
        let a = g.leaf(tensor2(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let c = g.concat(&[a], 0).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }

    #[test]
    fn concat_axis0_stacks_rows_in_order() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::<f64>::filled(&[2, 3], 1.0));
        let b = g.leaf(Tensor::<f64>::filled(&[4, 3], 2.0));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).shape(), &[6, 3]);
        assert_eq!(g.value(c).data()[..6], [1.0; 6]);
        assert_eq!(g.value(c).data()[6..], [2.0; 12]);
    }

    #[test]
    fn concat_axis1_blocks_columns() {
        let mut g = Graph::new();
        let a = g.leaf(tensor2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.leaf(tensor2(&[vec![9.0], vec![8.0]]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn concat_incompatible_extents_error() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 4]));
        assert!(g.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn add_zeros_is_identity_and_relu_definition() {
        let mut g = Graph::new();
        let a = g.leaf(tensor2(&[vec![1.0, -2.0], vec![0.0, 4.5]]));
        let z = g.leaf(Tensor::zeros(&[2, 2]));
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s), g.value(a));
        let x = g.leaf(Tensor::from_vec(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_quadratic_gives_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let xx = g.mul(x, x).unwrap();
        let loss = g.sum_all(xx);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_unreachable_param_is_exactly_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let p = g.leaf(Tensor::from_vec(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let xx = g.mul(x, x).unwrap();
        let loss = g.sum_all(xx);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p).is_none());
        assert_eq!(grads.get_or_zeros(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(&[2, 2]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn attention_apply_masked_entries_are_exactly_zero() {
        let mut g = Graph::new();
        let scores = g.leaf(tensor2(&[vec![0.3, 1.0, -0.5], vec![2.0, 0.0, 0.1]]));
        let values = g.leaf(tensor2(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]));
        let mask = AttnMask::new(2, 3, vec![true, true, false, true, true, true]).unwrap();
        let out = g.attn_apply(scores, values, Some(&mask)).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 2]);
        let probs = g.attn_probs(scores, Some(&mask)).unwrap();
        assert_eq!(probs.at(0, 2), 0.0);
        for i in 0..2 {
            let s: f64 = probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_apply_fully_masked_row_is_an_error() {
        let mut g = Graph::new();
        let scores = g.leaf(Tensor::<f64>::zeros(&[1, 2]));
        let values = g.leaf(Tensor::<f64>::zeros(&[2, 2]));
        let mask = AttnMask::new(1, 2, vec![false, false]).unwrap();
        let err = g.attn_apply(scores, values, Some(&mask)).unwrap_err();
        assert!(matches!(err, TensorError::FullyMaskedRow { row: 0 }));
    }

    #[test]
    fn attention_apply_key_permutation_is_bitwise_invariant() {
        let mut g = Graph::new();
        let s_rows = vec![vec![0.37, -1.2, 0.9, 0.02], vec![1.5, 1.5, -0.3, 0.8]];
        let v_rows = vec![
            vec![0.2, -0.7, 1.1],
            vec![0.9, 0.4, -0.25],
            vec![-1.3, 0.6, 0.05],
            vec![0.33, 0.21, 0.77],
        ];
        let perm = [2usize, 0, 3, 1];
        let sp: Vec<Vec<f64>> = s_rows
            .iter()
            .map(|r| perm.iter().map(|&j| r[j]).collect())
            .collect();
        let vp: Vec<Vec<f64>> = perm.iter().map(|&j| v_rows[j].clone()).collect();
        let s1 = g.leaf(tensor2(&s_rows));
        let v1 = g.leaf(tensor2(&v_rows));
        let o1 = g.attn_apply(s1, v1, None).unwrap();
        let s2 = g.leaf(tensor2(&sp));
        let v2 = g.leaf(tensor2(&vp));
        let o2 = g.attn_apply(s2, v2, None).unwrap();
        assert_eq!(g.value(o1).data(), g.value(o2).data());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::<f64>::zeros(&[3, 7]));
        let loss = g.cross_entropy(logits, &[1, 4, 6], 0).unwrap();
        assert!((g.value(loss).item() - 7.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct_class() {
        let mut g = Graph::new();
        let mut data = vec![0.0f64; 5];
        data[2] = 1e4;
        let logits = g.leaf(Tensor::from_vec(vec![1, 5], data).unwrap());
        let loss = g.cross_entropy(logits, &[2], 0).unwrap();
        assert!(g.value(loss).item() < 1e-6);
    }

    #[test]
    fn cross_entropy_all_pad_is_an_error() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::<f64>::zeros(&[2, 4]));
        let err = g.cross_entropy(logits, &[0, 0], 0).unwrap_err();
        assert!(matches!(err, TensorError::AllPadTargets));
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_matches_closed_form() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::<f64>::zeros(&[2, 4]));
        let loss = g.cross_entropy(logits, &[1, 3], 0).unwrap();
        let grads = g.backward(loss).unwrap();
        let dl = grads.get(logits).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let one_hot = if (i == 0 && j == 1) || (i == 1 && j == 3) {
                    1.0
                } else {
                    0.0
                };
                let expect = (0.25 - one_hot) / 2.0;
                assert!((dl.at(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pad_positions_contribute_no_gradient() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::<f64>::from_vec(vec![2, 4], vec![0.3; 8]).unwrap());
        let loss = g.cross_entropy(logits, &[2, 0], 0).unwrap();
        let grads = g.backward(loss).unwrap();
        let dl = grads.get(logits).unwrap();
        assert!(dl.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_matches_reference_values() {
        // Reference values from the published tanh approximation.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1, 3], vec![-1.0, 0.0, 1.0]).unwrap());
        let y = g.gelu(x);
        let got = g.value(y).data();
        assert!((got[0] - (-0.158_808)).abs() < 1e-5);
        assert_eq!(got[1], 0.0);
        assert!((got[2] - 0.841_192).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::filled(&[1, 4], 3.7));
        let gamma = g.leaf(Tensor::<f64>::ones(&[4]));
        let beta = g.leaf(Tensor::<f64>::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn gather_rows_and_scatter_gradient() {
        let mut g = Graph::new();
        let table = g.leaf(tensor2(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let picked = g.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(picked).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = g.sum_all(picked);
        let grads = g.backward(loss).unwrap();
        // Row 2 picked twice, row 0 once, row 1 never.
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
