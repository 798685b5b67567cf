//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends one node holding the op
//! kind, its input ids, and the forward value. Construction is eager, so
//! building the graph *is* the forward pass. [`Graph::backward`] walks the
//! tape once in reverse, which visits each node exactly once because inputs
//! always precede their consumers.
//!
//! The op set is exactly what a transformer needs: matmul (plain and
//! B-transposed), embedding gather, head split/merge, attention score and
//! mix kernels with an optional causal restriction, softmax, layer norm,
//! GELU, cross-entropy, and a few elementwise glue ops.
//!
//! Causality is structural, not masked: with `causal = true` the score and
//! mix kernels never read entries at source positions later than the query
//! position, so logits at position `t` are bitwise independent of tokens
//! after `t`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Matmul(Var, Var),
    /// a[m,k] * b[n,k]^T -> [m,n]
    MatmulTransB(Var, Var),
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    AttnScores {
        q: Var,
        k: Var,
        scale: T,
        causal: bool,
    },
    AttnMix {
        p: Var,
        v: Var,
        causal: bool,
    },
    Softmax {
        x: Var,
        causal: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<i64>,
        ignore_index: i64,
        probs: Vec<T>,
        counted: usize,
    },
    Sum(Var),
}

struct Node<T: Real> {
    op: Op<T>,
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

/// Tape of recorded operations plus their forward values and gradients.
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, data: Vec<T>, requires: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            requires_grad: requires,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a tensor in as a leaf. Gradient tracking follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
        )
    }

    /// Leaf from raw parts, never tracked.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Var {
        let shape = shape.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Leaf, shape, data, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(Error::contract(format!(
                "expected scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    // ── Elementwise and shape ops ───────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        check_finite("add", &data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), self.shape(a).to_vec(), data, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        check_finite("mul", &data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a, b), self.shape(a).to_vec(), data, req))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let data: Vec<T> = self.value(x).iter().map(|v| *v * c).collect();
        check_finite("scale", &data)?;
        let req = self.requires(x);
        Ok(self.push(Op::Scale(x, c), self.shape(x).to_vec(), data, req))
    }

    /// Broadcasts `bias` over every trailing row of `x`; the last axis of `x`
    /// must equal the bias length.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let h = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [h] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bias_data = self.value(bias);
        let mut data = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks_exact(h) {
            data.extend(row.iter().zip(bias_data).map(|(a, b)| *a + *b));
        }
        check_finite("add_bias", &data)?;
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(Op::AddBias(x, bias), self.shape(x).to_vec(), data, req))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).iter().copied().sum();
        check_finite("sum", std::slice::from_ref(&total))?;
        let req = self.requires(x);
        Ok(self.push(Op::Sum(x), vec![1], vec![total], req))
    }

    // ── Matrix products ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        mm_acc(&mut out, self.value(a), self.value(b), m, k, n);
        check_finite("matmul", &out)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul(a, b), vec![m, n], out, req))
    }

    /// `a[m,k] * b[n,k]^T -> [m,n]`. Used by the tied LM head, where the
    /// projection is the token embedding table itself.
    pub fn matmul_trans_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_trans_b",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        mm_nt_acc(&mut out, self.value(a), self.value(b), m, k, n);
        check_finite("matmul_trans_b", &out)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatmulTransB(a, b), vec![m, n], out, req))
    }

    // ── Embedding ───────────────────────────────────────────────────────

    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: st.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, h) = (st[0], st[1]);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(&self.value(table)[id * h..(id + 1) * h]);
        }
        let req = self.requires(table);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), h],
            data,
            req,
        ))
    }

    // ── Attention plumbing ──────────────────────────────────────────────

    /// `[batch*seq, heads*dh] -> [batch*heads, seq, dh]`
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != batch * seq || s[1] % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "split_heads",
                lhs: s.to_vec(),
                rhs: vec![batch * seq, heads],
            });
        }
        let dh = s[1] / heads;
        let xv = self.value(x);
        let mut data = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let src = (b * seq + t) * heads * dh + h * dh;
                    let dst = ((b * heads + h) * seq + t) * dh;
                    data[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(
            Op::SplitHeads { x, batch, seq, heads },
            vec![batch * heads, seq, dh],
            data,
            req,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(Error::ShapeMismatch {
                op: "merge_heads",
                lhs: s.to_vec(),
                rhs: vec![batch * heads, seq],
            });
        }
        let dh = s[2];
        let xv = self.value(x);
        let mut data = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let src = ((b * heads + h) * seq + t) * dh;
                    let dst = (b * seq + t) * heads * dh + h * dh;
                    data[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(
            Op::MergeHeads { x, batch, seq, heads },
            vec![batch * seq, heads * dh],
            data,
            req,
        ))
    }

    /// Scaled dot-product scores `scale * q k^T` per group. With `causal`,
    /// entries at key position j > query position i are never computed and
    /// stay exactly zero.
    pub fn attn_scores(&mut self, q: Var, k: Var, scale: T, causal: bool) -> Result<Var> {
        let (sq, sk) = (self.shape(q), self.shape(k));
        if sq.len() != 3 || sq != sk {
            return Err(Error::ShapeMismatch {
                op: "attn_scores",
                lhs: sq.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let (g, s, d) = (sq[0], sq[1], sq[2]);
        let (qv, kv) = (self.value(q), self.value(k));
        let mut out = vec![T::zero(); g * s * s];
        for gi in 0..g {
            let base = gi * s * d;
            for i in 0..s {
                let qrow = &qv[base + i * d..base + (i + 1) * d];
                let jmax = if causal { i + 1 } else { s };
                let orow = &mut out[(gi * s + i) * s..(gi * s + i) * s + jmax];
                for (j, o) in orow.iter_mut().enumerate() {
                    let krow = &kv[base + j * d..base + (j + 1) * d];
                    *o = scale * dot(qrow, krow);
                }
            }
        }
        check_finite("attn_scores", &out)?;
        let req = self.requires(q) || self.requires(k);
        Ok(self.push(
            Op::AttnScores { q, k, scale, causal },
            vec![g, s, s],
            out,
            req,
        ))
    }

    /// Weighted value mix `p v` per group; with `causal`, values at
    /// positions j > i never enter the sum for output position i.
    pub fn attn_mix(&mut self, p: Var, v: Var, causal: bool) -> Result<Var> {
        let (sp, sv) = (self.shape(p), self.shape(v));
        if sp.len() != 3 || sv.len() != 3 || sp[0] != sv[0] || sp[1] != sp[2] || sp[2] != sv[1] {
            return Err(Error::ShapeMismatch {
                op: "attn_mix",
                lhs: sp.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let (g, s, d) = (sv[0], sv[1], sv[2]);
        let (pv, vv) = (self.value(p), self.value(v));
        let mut out = vec![T::zero(); g * s * d];
        for gi in 0..g {
            for i in 0..s {
                let orow = &mut out[(gi * s + i) * d..(gi * s + i + 1) * d];
                let jmax = if causal { i + 1 } else { s };
                for j in 0..jmax {
                    let w = pv[(gi * s + i) * s + j];
                    let vrow = &vv[(gi * s + j) * d..(gi * s + j + 1) * d];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o = *o + w * *x;
                    }
                }
            }
        }
        check_finite("attn_mix", &out)?;
        let req = self.requires(p) || self.requires(v);
        Ok(self.push(Op::AttnMix { p, v, causal }, vec![g, s, d], out, req))
    }

    // ── Nonlinear ops ───────────────────────────────────────────────────

    /// Softmax over the last axis, computed with max subtraction. With
    /// `causal` (shape must be `[g,s,s]`), row i normalizes over j <= i only
    /// and later entries are exactly zero.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "softmax",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if causal && (shape.len() != 3 || shape[1] != shape[2]) {
            return Err(Error::ShapeMismatch {
                op: "softmax(causal)",
                lhs: shape.clone(),
                rhs: vec![],
            });
        }
        let xv = self.value(x);
        let mut data = vec![T::zero(); xv.len()];
        let rows = xv.len() / n;
        for r in 0..rows {
            let width = if causal { (r % n) + 1 } else { n };
            let row = &xv[r * n..r * n + width];
            let out = &mut data[r * n..r * n + width];
            softmax_row(row, out);
        }
        check_finite("softmax", &data)?;
        let req = self.requires(x);
        Ok(self.push(Op::Softmax { x, causal }, shape, data, req))
    }

    /// Per-position normalization over the last axis with learned gain and
    /// shift: `gamma * (x - mean) / sqrt(var + eps) + beta`, biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let h = *shape.last().unwrap_or(&0);
        if h == 0 || self.shape(gamma) != [h] || self.shape(beta) != [h] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape.clone(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x);
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let rows = xv.len() / h;
        let mut data = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        let hn = T::from_f64(h as f64);
        for r in 0..rows {
            let row = &xv[r * h..(r + 1) * h];
            let mean = row.iter().copied().sum::<T>() / hn;
            let var = row
                .iter()
                .map(|v| (*v - mean) * (*v - mean))
                .sum::<T>()
                / hn;
            let inv_std = (var + eps).sqrt().recip();
            let out = &mut data[r * h..(r + 1) * h];
            for ((o, v), (g, b)) in out.iter_mut().zip(row).zip(gv.iter().zip(&bv)) {
                *o = *g * (*v - mean) * inv_std + *b;
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        check_finite("layer_norm", &data)?;
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv_stds,
            },
            shape,
            data,
            req,
        ))
    }

    /// tanh-approximation GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<T> = self.value(x).iter().map(|v| gelu_scalar(*v)).collect();
        check_finite("gelu", &data)?;
        let req = self.requires(x);
        Ok(self.push(Op::Gelu(x), self.shape(x).to_vec(), data, req))
    }

    /// Mean of `-log softmax(logits)[target]` over positions whose target is
    /// not `ignore_index`. Ignored positions contribute neither to the mean
    /// nor to the gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = shape[1];
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        let mut counted = 0usize;
        for (t, &target) in targets.iter().enumerate() {
            let row = &lv[t * v..(t + 1) * v];
            let prow = &mut probs[t * v..(t + 1) * v];
            softmax_row(row, prow);
            if target == ignore_index {
                continue;
            }
            if target < 0 || target as usize >= v {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target.max(0) as usize,
                    bound: v,
                });
            }
            // -log p = logsumexp(row) - row[target], computed from the
            // already max-subtracted softmax for stability.
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max
                + row
                    .iter()
                    .map(|z| (*z - max).exp())
                    .sum::<T>()
                    .ln();
            total = total + (lse - row[target as usize]);
            counted += 1;
        }
        if counted == 0 {
            return Err(Error::UndefinedMean);
        }
        let loss = total / T::from_f64(counted as f64);
        check_finite("cross_entropy", std::slice::from_ref(&loss))?;
        let req = self.requires(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                counted,
            },
            vec![1],
            vec![loss],
            req,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Node gradients accumulate, so calling
    /// twice without clearing doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_impl(loss, false)
    }

    /// Reverse pass that frees interior activations and gradients as soon as
    /// they are consumed. Leaf gradients survive; interior node values do
    /// not. Used by the training hot path.
    pub fn backward_and_release(&mut self, loss: Var) -> Result<()> {
        self.backward_impl(loss, true)
    }

    fn backward_impl(&mut self, loss: Var, release: bool) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        add_grad(&mut self.nodes[loss.0], &[T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                // Leaf gradients accumulate across backward passes.
                continue;
            }
            // Interior gradients are per-pass scratch; dropping them here is
            // what makes a second backward add exactly one more gradient
            // contribution to every leaf.
            let grad = self.nodes[i].grad.take().expect("grad present");
            self.step_backward(i, &grad)?;
            if release {
                self.nodes[i].data = Vec::new();
            }
        }
        Ok(())
    }

    fn step_backward(&mut self, idx: usize, g: &[T]) -> Result<()> {
        // Ops are moved out and back to appease the borrow checker while
        // gradients are scattered to input nodes.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad_to(*a, g);
                self.add_grad_to(*b, g);
            }
            Op::Mul(a, b) => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.nodes[b.0].data.iter())
                    .map(|(gi, bi)| *gi * *bi)
                    .collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(self.nodes[a.0].data.iter())
                    .map(|(gi, ai)| *gi * *ai)
                    .collect();
                self.add_grad_to(*a, &da);
                self.add_grad_to(*b, &db);
            }
            Op::Scale(x, c) => {
                let dx: Vec<T> = g.iter().map(|gi| *gi * *c).collect();
                self.add_grad_to(*x, &dx);
            }
            Op::AddBias(x, bias) => {
                self.add_grad_to(*x, g);
                let h = self.nodes[bias.0].data.len();
                let mut db = vec![T::zero(); h];
                for row in g.chunks_exact(h) {
                    for (d, gi) in db.iter_mut().zip(row) {
                        *d = *d + *gi;
                    }
                }
                self.add_grad_to(*bias, &db);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.nodes[x.0].data.len()];
                self.add_grad_to(*x, &dx);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::zero(); m * k];
                    // dA = g * B^T
                    mm_nt_acc(&mut da, g, &self.nodes[b.0].data, m, n, k);
                    self.add_grad_to(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); k * n];
                    // dB = A^T * g
                    mm_tn_acc(&mut db, &self.nodes[a.0].data, g, m, k, n);
                    self.add_grad_to(*b, &db);
                }
            }
            Op::MatmulTransB(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::zero(); m * k];
                    // dA = g * B
                    mm_acc(&mut da, g, &self.nodes[b.0].data, m, n, k);
                    self.add_grad_to(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); n * k];
                    // dB = g^T * A
                    mm_tn_acc(&mut db, g, &self.nodes[a.0].data, m, n, k);
                    self.add_grad_to(*b, &db);
                }
            }
            Op::Gather { table, ids } => {
                let h = self.nodes[table.0].shape[1];
                let mut dt = vec![T::zero(); self.nodes[table.0].data.len()];
                for (t, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * h..(id as usize + 1) * h];
                    for (d, gi) in dst.iter_mut().zip(&g[t * h..(t + 1) * h]) {
                        *d = *d + *gi;
                    }
                }
                self.add_grad_to(*table, &dt);
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                let dh = self.nodes[idx].shape[2];
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..*batch {
                    for h in 0..*heads {
                        for t in 0..*seq {
                            let src = ((b * heads + h) * seq + t) * dh;
                            let dst = (b * seq + t) * heads * dh + h * dh;
                            dx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                        }
                    }
                }
                self.add_grad_to(*x, &dx);
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                let dh = self.nodes[x.0].shape[2];
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..*batch {
                    for h in 0..*heads {
                        for t in 0..*seq {
                            let src = (b * seq + t) * heads * dh + h * dh;
                            let dst = ((b * heads + h) * seq + t) * dh;
                            dx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                        }
                    }
                }
                self.add_grad_to(*x, &dx);
            }
            Op::AttnScores { q, k, scale, causal } => {
                let (gq, s, d) = (
                    self.nodes[q.0].shape[0],
                    self.nodes[q.0].shape[1],
                    self.nodes[q.0].shape[2],
                );
                let qv = &self.nodes[q.0].data;
                let kv = &self.nodes[k.0].data;
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                for gi in 0..gq {
                    let base = gi * s * d;
                    for i in 0..s {
                        let jmax = if *causal { i + 1 } else { s };
                        let grow = &g[(gi * s + i) * s..(gi * s + i) * s + jmax];
                        let qrow = &qv[base + i * d..base + (i + 1) * d];
                        let dqrow = base + i * d;
                        for (j, &gij) in grow.iter().enumerate() {
                            let w = *scale * gij;
                            let krow = &kv[base + j * d..base + (j + 1) * d];
                            for (dqv, kvv) in dq[dqrow..dqrow + d].iter_mut().zip(krow) {
                                *dqv = *dqv + w * *kvv;
                            }
                            let dkrow = &mut dk[base + j * d..base + (j + 1) * d];
                            for (dkv, qvv) in dkrow.iter_mut().zip(qrow) {
                                *dkv = *dkv + w * *qvv;
                            }
                        }
                    }
                }
                self.add_grad_to(*q, &dq);
                self.add_grad_to(*k, &dk);
            }
            Op::AttnMix { p, v, causal } => {
                let (gq, s, d) = (
                    self.nodes[v.0].shape[0],
                    self.nodes[v.0].shape[1],
                    self.nodes[v.0].shape[2],
                );
                let pv = &self.nodes[p.0].data;
                let vv = &self.nodes[v.0].data;
                let mut dp = vec![T::zero(); pv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                for gi in 0..gq {
                    for i in 0..s {
                        let grow = &g[(gi * s + i) * d..(gi * s + i + 1) * d];
                        let jmax = if *causal { i + 1 } else { s };
                        for j in 0..jmax {
                            let vrow = &vv[(gi * s + j) * d..(gi * s + j + 1) * d];
                            dp[(gi * s + i) * s + j] = dp[(gi * s + i) * s + j] + dot(grow, vrow);
                            let w = pv[(gi * s + i) * s + j];
                            let dvrow = &mut dv[(gi * s + j) * d..(gi * s + j + 1) * d];
                            for (dvv, gv) in dvrow.iter_mut().zip(grow) {
                                *dvv = *dvv + w * *gv;
                            }
                        }
                    }
                }
                self.add_grad_to(*p, &dp);
                self.add_grad_to(*v, &dv);
            }
            Op::Softmax { x, causal } => {
                let shape = &self.nodes[idx].shape;
                let n = *shape.last().unwrap();
                let y = &self.nodes[idx].data;
                let rows = y.len() / n;
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let width = if *causal { (r % n) + 1 } else { n };
                    let yr = &y[r * n..r * n + width];
                    let gr = &g[r * n..r * n + width];
                    let dot_gy: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for ((d, yv), gv) in dx[r * n..r * n + width].iter_mut().zip(yr).zip(gr) {
                        *d = *yv * (*gv - dot_gy);
                    }
                }
                self.add_grad_to(*x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let h = *self.nodes[idx].shape.last().unwrap();
                let hn = T::from_f64(h as f64);
                let xv = &self.nodes[x.0].data;
                let gv = &self.nodes[gamma.0].data;
                let rows = xv.len() / h;
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); h];
                let mut dbeta = vec![T::zero(); h];
                for r in 0..rows {
                    let xr = &xv[r * h..(r + 1) * h];
                    let gr = &g[r * h..(r + 1) * h];
                    let (mu, is) = (mean[r], inv_std[r]);
                    let mut mean_a = T::zero();
                    let mut mean_axh = T::zero();
                    for j in 0..h {
                        let xh = (xr[j] - mu) * is;
                        let a = gr[j] * gv[j];
                        dgamma[j] = dgamma[j] + gr[j] * xh;
                        dbeta[j] = dbeta[j] + gr[j];
                        mean_a = mean_a + a;
                        mean_axh = mean_axh + a * xh;
                    }
                    mean_a = mean_a / hn;
                    mean_axh = mean_axh / hn;
                    let dxr = &mut dx[r * h..(r + 1) * h];
                    for j in 0..h {
                        let xh = (xr[j] - mu) * is;
                        let a = gr[j] * gv[j];
                        dxr[j] = (a - mean_a - xh * mean_axh) * is;
                    }
                }
                self.add_grad_to(*x, &dx);
                self.add_grad_to(*gamma, &dgamma);
                self.add_grad_to(*beta, &dbeta);
            }
            Op::Gelu(x) => {
                let dx: Vec<T> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(xi, gi)| *gi * gelu_grad_scalar(*xi))
                    .collect();
                self.add_grad_to(*x, &dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                counted,
            } => {
                let v = self.nodes[logits.0].shape[1];
                let scale = g[0] / T::from_f64(*counted as f64);
                let mut dl = vec![T::zero(); probs.len()];
                for (t, &target) in targets.iter().enumerate() {
                    if target == *ignore_index {
                        continue;
                    }
                    let prow = &probs[t * v..(t + 1) * v];
                    let drow = &mut dl[t * v..(t + 1) * v];
                    for (d, p) in drow.iter_mut().zip(prow) {
                        *d = scale * *p;
                    }
                    drow[target as usize] = drow[target as usize] - scale;
                }
                self.add_grad_to(*logits, &dl);
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }

    fn add_grad_to(&mut self, v: Var, delta: &[T]) {
        if self.nodes[v.0].requires_grad {
            add_grad(&mut self.nodes[v.0], delta);
        }
    }
}

fn add_grad<T: Real>(node: &mut Node<T>, delta: &[T]) {
    match node.grad.as_mut() {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi = *gi + *di;
            }
        }
        None => node.grad = Some(delta.to_vec()),
    }
}

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, z) in out.iter_mut().zip(row) {
        let e = (*z - max).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

/// out[m,n] += a[m,k] * b[k,n]
fn mm_acc<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bpj;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
fn mm_nt_acc<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = *o + dot(arow, brow);
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn mm_tn_acc<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bij) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bij;
            }
        }
    }
}
