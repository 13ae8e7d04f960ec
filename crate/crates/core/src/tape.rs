//! Reverse-mode autodiff over a Wengert list. A tape owns one forward
//! recording (single writer); ops only reference earlier nodes, so a reverse
//! index walk is a valid topological replay. Gradients are accumulated only
//! into nodes that (transitively) reach a gradient-requiring leaf, which is
//! what lets head-scale tuning skip every frozen-weight gradient.

use crate::error::{Error, Result};
use crate::tensor::{self, check_finite, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Where an attention row's temperature comes from: a fixed scalar, or one
/// component of a tunable scale-vector leaf.
#[derive(Debug, Clone, Copy)]
pub enum ScaleRef {
    Const(f64),
    Param { node: NodeId, index: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// a[m×k] · b[k×n]
    Matmul { a: NodeId, b: NodeId },
    /// a[m×k] · b[n×k]ᵀ
    MatmulBT { a: NodeId, b: NodeId },
    /// elementwise a + b
    Add { a: NodeId, b: NodeId },
    /// elementwise a ⊙ b
    Mul { a: NodeId, b: NodeId },
    /// x · sigmoid(x)
    Silu { x: NodeId },
    /// rowwise x · gain / sqrt(mean(x²) + eps); inv_rms cached per row
    RmsNorm { x: NodeId, gain: NodeId, inv_rms: Vec<f64> },
    /// rotary rotation of adjacent column pairs; row r is position offset + r
    Rope { x: NodeId, base: f64, offset: usize },
    /// out[r,:] = table[ids[r],:]
    Embed { table: NodeId, ids: Vec<u16> },
    /// column range copy
    SliceCols { x: NodeId, start: usize, len: usize },
    /// horizontal concat of same-height parts
    ConcatCols { parts: Vec<NodeId> },
    /// out[i,j] = q_i·k_j for j ≤ i, 0 above the diagonal
    ScoresLower { q: NodeId, k: NodeId },
    /// row-causal softmax of λ·scores; row i normalizes over j ≤ i
    CausalSoftmaxScaled { scores: NodeId, scale: ScaleRef },
    /// out[i,:] = Σ_{j≤i} p[i,j] · v[j,:]
    AttnWeightedSum { p: NodeId, v: NodeId },
    /// mean over rows 0..targets.len() of −log softmax(row t)[targets[t]];
    /// softmax rows cached for backward
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<u16>,
        probs: Vec<f64>,
    },
    /// scalar mean of scalar nodes
    MeanOf { parts: Vec<NodeId> },
    /// Σ w_i · x_i, flattened
    WeightedSum { x: NodeId, weights: Vec<f64> },
}

pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    needs: Vec<bool>,
    check_finite: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_checks(true)
    }

    /// `check_finite=false` drops the per-op NaN/Inf scan in long runs.
    pub fn with_checks(check_finite: bool) -> Self {
        Tape {
            ops: Vec::new(),
            vals: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Copies a tensor in as a leaf; gradient participation follows the
    /// tensor's requires_grad flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let mut v = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("leaf shape");
        v.set_requires_grad(false);
        self.push_raw(Op::Leaf, v, t.requires_grad())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.vals[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.needs[id.0]
    }

    fn push_raw(&mut self, op: Op, val: Tensor, needs: bool) -> NodeId {
        self.ops.push(op);
        self.vals.push(val);
        self.grads.push(None);
        self.needs.push(needs);
        NodeId(self.ops.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, val: Tensor, needs: bool) -> Result<NodeId> {
        if self.check_finite {
            check_finite(name, val.data())?;
        }
        Ok(self.push_raw(op, val, needs))
    }

    fn shape2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.vals[id.0].shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape2(a, "matmul")?;
        let (k2, n) = self.shape2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: self.vals[b.0].shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        tensor::mm_into(
            out.data_mut(),
            self.vals[a.0].data(),
            self.vals[b.0].data(),
            m,
            k,
            n,
        );
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push("matmul", Op::Matmul { a, b }, out, needs)
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape2(a, "matmul_bt")?;
        let (n, k2) = self.shape2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_bt",
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: self.vals[b.0].shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        tensor::mm_bt_into(
            out.data_mut(),
            self.vals[a.0].data(),
            self.vals[b.0].data(),
            m,
            k,
            n,
        );
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push("matmul_bt", Op::MatmulBT { a, b }, out, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let val = Tensor::new(self.vals[a.0].shape().to_vec(), out)?;
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push("add", Op::Add { a, b }, val, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let val = Tensor::new(self.vals[a.0].shape().to_vec(), out)?;
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push("mul", Op::Mul { a, b }, val, needs)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::Shape {
                op,
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: self.vals[b.0].shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.vals[x.0]
            .data()
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let val = Tensor::new(self.vals[x.0].shape().to_vec(), out)?;
        let needs = self.needs[x.0];
        self.push("silu", Op::Silu { x }, val, needs)
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> Result<NodeId> {
        let (t, d) = self.shape2(x, "rms_norm")?;
        if self.vals[gain.0].len() != d {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: self.vals[x.0].shape().to_vec(),
                rhs: self.vals[gain.0].shape().to_vec(),
            });
        }
        let mut inv_rms = vec![0.0; t];
        let mut out = vec![0.0; t * d];
        {
            let xd = self.vals[x.0].data();
            let g = self.vals[gain.0].data();
            for r in 0..t {
                let row = &xd[r * d..(r + 1) * d];
                let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let ir = 1.0 / (ms + eps).sqrt();
                inv_rms[r] = ir;
                for (j, (&xv, &gv)) in row.iter().zip(g).enumerate() {
                    out[r * d + j] = xv * ir * gv;
                }
            }
        }
        let val = Tensor::new(vec![t, d], out)?;
        let needs = self.needs[x.0] || self.needs[gain.0];
        self.push("rms_norm", Op::RmsNorm { x, gain, inv_rms }, val, needs)
    }

    pub fn rope(&mut self, x: NodeId, base: f64, offset: usize) -> Result<NodeId> {
        let (t, d) = self.shape2(x, "rope")?;
        if d % 2 != 0 {
            return Err(Error::Config(format!("rope requires even width, got {d}")));
        }
        let mut out = self.vals[x.0].data().to_vec();
        rope_rotate(&mut out, t, d, base, offset, false);
        let val = Tensor::new(vec![t, d], out)?;
        let needs = self.needs[x.0];
        self.push("rope", Op::Rope { x, base, offset }, val, needs)
    }

    pub fn embed(&mut self, table: NodeId, ids: &[u16]) -> Result<NodeId> {
        let (v, d) = self.shape2(table, "embed")?;
        let mut out = vec![0.0; ids.len() * d];
        {
            let tab = self.vals[table.0].data();
            for (r, &id) in ids.iter().enumerate() {
                if id as usize >= v {
                    return Err(Error::Index {
                        what: "token id",
                        got: id as usize,
                        limit: v,
                    });
                }
                out[r * d..(r + 1) * d].copy_from_slice(&tab[id as usize * d..(id as usize + 1) * d]);
            }
        }
        let val = Tensor::new(vec![ids.len(), d], out)?;
        let needs = self.needs[table.0];
        self.push(
            "embed",
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            val,
            needs,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (t, d) = self.shape2(x, "slice_cols")?;
        if start + len > d {
            return Err(Error::Index {
                what: "column slice end",
                got: start + len,
                limit: d,
            });
        }
        let mut out = vec![0.0; t * len];
        let xd = self.vals[x.0].data();
        for r in 0..t {
            out[r * len..(r + 1) * len].copy_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let val = Tensor::new(vec![t, len], out)?;
        let needs = self.needs[x.0];
        self.push("slice_cols", Op::SliceCols { x, start, len }, val, needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Param {
                name: "parts",
                why: "concat of zero tensors".into(),
            });
        }
        let (t, _) = self.shape2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (tp, dp) = self.shape2(p, "concat_cols")?;
            if tp != t {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![t],
                    rhs: vec![tp],
                });
            }
            widths.push(dp);
            total += dp;
        }
        let mut out = vec![0.0; t * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.vals[p.0].data();
            for r in 0..t {
                out[r * total + col..r * total + col + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let val = Tensor::new(vec![t, total], out)?;
        let needs = parts.iter().any(|&p| self.needs[p.0]);
        self.push(
            "concat_cols",
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            val,
            needs,
        )
    }

    pub fn scores_lower(&mut self, q: NodeId, k: NodeId) -> Result<NodeId> {
        let (t, d) = self.shape2(q, "scores_lower")?;
        let (t2, d2) = self.shape2(k, "scores_lower")?;
        if t != t2 || d != d2 {
            return Err(Error::Shape {
                op: "scores_lower",
                lhs: self.vals[q.0].shape().to_vec(),
                rhs: self.vals[k.0].shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![t, t]);
        tensor::scores_lower_into(out.data_mut(), self.vals[q.0].data(), self.vals[k.0].data(), t, d);
        let needs = self.needs[q.0] || self.needs[k.0];
        self.push("scores_lower", Op::ScoresLower { q, k }, out, needs)
    }

    pub fn causal_softmax_scaled(&mut self, scores: NodeId, scale: ScaleRef) -> Result<NodeId> {
        let (t, t2) = self.shape2(scores, "causal_softmax_scaled")?;
        if t != t2 {
            return Err(Error::Shape {
                op: "causal_softmax_scaled",
                lhs: self.vals[scores.0].shape().to_vec(),
                rhs: vec![t, t],
            });
        }
        let lambda = self.scale_value(scale)?;
        if !(lambda > 0.0) {
            return Err(Error::Param {
                name: "lambda",
                why: format!("must be > 0, got {lambda}"),
            });
        }
        let mut out = vec![0.0; t * t];
        {
            let s = self.vals[scores.0].data();
            for i in 0..t {
                let (src, dst) = (&s[i * t..i * t + i + 1], &mut out[i * t..i * t + i + 1]);
                tensor::softmax_temp_into(dst, src, lambda);
            }
        }
        let val = Tensor::new(vec![t, t], out)?;
        let needs = self.needs[scores.0]
            || matches!(scale, ScaleRef::Param { node, .. } if self.needs[node.0]);
        self.push(
            "causal_softmax_scaled",
            Op::CausalSoftmaxScaled { scores, scale },
            val,
            needs,
        )
    }

    fn scale_value(&self, scale: ScaleRef) -> Result<f64> {
        match scale {
            ScaleRef::Const(v) => Ok(v),
            ScaleRef::Param { node, index } => {
                let t = &self.vals[node.0];
                if index >= t.len() {
                    return Err(Error::Index {
                        what: "scale index",
                        got: index,
                        limit: t.len(),
                    });
                }
                Ok(t.data()[index])
            }
        }
    }

    pub fn attn_weighted_sum(&mut self, p: NodeId, v: NodeId) -> Result<NodeId> {
        let (t, t2) = self.shape2(p, "attn_weighted_sum")?;
        let (tv, d) = self.shape2(v, "attn_weighted_sum")?;
        if t != t2 || t != tv {
            return Err(Error::Shape {
                op: "attn_weighted_sum",
                lhs: self.vals[p.0].shape().to_vec(),
                rhs: self.vals[v.0].shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![t, d]);
        tensor::weighted_sum_lower_into(
            out.data_mut(),
            self.vals[p.0].data(),
            self.vals[v.0].data(),
            t,
            d,
        );
        let needs = self.needs[p.0] || self.needs[v.0];
        self.push("attn_weighted_sum", Op::AttnWeightedSum { p, v }, out, needs)
    }

    /// Scores logits row t against targets[t] for t < targets.len(); mean NLL.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[u16]) -> Result<NodeId> {
        let (t, v) = self.shape2(logits, "cross_entropy_rows")?;
        if targets.is_empty() || targets.len() > t {
            return Err(Error::Shape {
                op: "cross_entropy_rows",
                lhs: vec![t, v],
                rhs: vec![targets.len()],
            });
        }
        let n = targets.len();
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        {
            let ld = self.vals[logits.0].data();
            for (r, &tgt) in targets.iter().enumerate() {
                if tgt as usize >= v {
                    return Err(Error::Index {
                        what: "target id",
                        got: tgt as usize,
                        limit: v,
                    });
                }
                let row = &ld[r * v..(r + 1) * v];
                let p_row = &mut probs[r * v..(r + 1) * v];
                tensor::softmax_temp_into(p_row, row, 1.0);
                total += -p_row[tgt as usize].max(f64::MIN_POSITIVE).ln();
            }
        }
        let val = Tensor::scalar(total / n as f64);
        let needs = self.needs[logits.0];
        self.push(
            "cross_entropy_rows",
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            val,
            needs,
        )
    }

    pub fn mean_of(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Param {
                name: "parts",
                why: "mean of zero scalars".into(),
            });
        }
        let mut total = 0.0;
        for &p in parts {
            if self.vals[p.0].len() != 1 {
                return Err(Error::Shape {
                    op: "mean_of",
                    lhs: self.vals[p.0].shape().to_vec(),
                    rhs: vec![1],
                });
            }
            total += self.vals[p.0].data()[0];
        }
        let val = Tensor::scalar(total / parts.len() as f64);
        let needs = parts.iter().any(|&p| self.needs[p.0]);
        self.push(
            "mean_of",
            Op::MeanOf {
                parts: parts.to_vec(),
            },
            val,
            needs,
        )
    }

    pub fn weighted_sum(&mut self, x: NodeId, weights: &[f64]) -> Result<NodeId> {
        if weights.len() != self.vals[x.0].len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: self.vals[x.0].shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let total: f64 = self.vals[x.0]
            .data()
            .iter()
            .zip(weights)
            .map(|(a, w)| a * w)
            .sum();
        let val = Tensor::scalar(total);
        let needs = self.needs[x.0];
        self.push(
            "weighted_sum",
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            val,
            needs,
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse replay from a scalar loss; fills gradients of every node on a
    /// path from a requires_grad leaf to the loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.vals[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            if !self.needs[i] || self.grads[i].is_none() {
                continue;
            }
            let gout = self.grads[i].take().expect("grad present");
            self.dispatch_backward(i, &gout)?;
            self.grads[i] = Some(gout);
        }
        if self.check_finite {
            for (i, g) in self.grads.iter().enumerate() {
                if let Some(g) = g {
                    check_finite(&format!("grad of node {i}"), g)?;
                }
            }
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: NodeId) -> &mut [f64] {
        let n = self.vals[id.0].len();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn dispatch_backward(&mut self, i: usize, gout: &[f64]) -> Result<()> {
        // Ops reference strictly earlier nodes, so splitting at i lets the op
        // stay immutably borrowed while input grads are written.
        let (head, tail) = self.ops.split_at(i);
        let _ = head;
        let op = &tail[0];
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.vals[a.0].shape()[0], self.vals[a.0].shape()[1]);
                let n = self.vals[b.0].shape()[1];
                if self.needs[a.0] {
                    let bdat = std::mem::take(&mut self.vals[b.0]);
                    // da += gout · bᵀ
                    let ga = self.grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    tensor::mm_bt_into(ga, gout, bdat.data(), m, n, k);
                    self.vals[b.0] = bdat;
                }
                if self.needs[b.0] {
                    let adat = std::mem::take(&mut self.vals[a.0]);
                    // db += aᵀ · gout
                    let gb = self.grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    tensor::mm_at_into(gb, adat.data(), gout, m, k, n);
                    self.vals[a.0] = adat;
                }
            }
            Op::MatmulBT { a, b } => {
                let (m, k) = (self.vals[a.0].shape()[0], self.vals[a.0].shape()[1]);
                let n = self.vals[b.0].shape()[0];
                if self.needs[a.0] {
                    let bdat = std::mem::take(&mut self.vals[b.0]);
                    // da += gout · b
                    let ga = self.grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    tensor::mm_into(ga, gout, bdat.data(), m, n, k);
                    self.vals[b.0] = bdat;
                }
                if self.needs[b.0] {
                    let adat = std::mem::take(&mut self.vals[a.0]);
                    // db += goutᵀ · a
                    let gb = self.grads[b.0].get_or_insert_with(|| vec![0.0; n * k]);
                    tensor::mm_at_into(gb, gout, adat.data(), m, n, k);
                    self.vals[a.0] = adat;
                }
            }
            Op::Add { a, b } => {
                if self.needs[a.0] {
                    for (g, &d) in self.ensure_grad(a).iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if self.needs[b.0] {
                    for (g, &d) in self.ensure_grad(b).iter_mut().zip(gout) {
                        *g += d;
                    }
                }
            }
            Op::Mul { a, b } => {
                let n = self.vals[a.0].len();
                if self.needs[a.0] {
                    let bv = std::mem::take(&mut self.vals[b.0]);
                    let ga = self.grads[a.0].get_or_insert_with(|| vec![0.0; n]);
                    for ((g, &d), &other) in ga.iter_mut().zip(gout).zip(bv.data()) {
                        *g += d * other;
                    }
                    self.vals[b.0] = bv;
                }
                if self.needs[b.0] {
                    let av = std::mem::take(&mut self.vals[a.0]);
                    let gb = self.grads[b.0].get_or_insert_with(|| vec![0.0; n]);
                    for ((g, &d), &other) in gb.iter_mut().zip(gout).zip(av.data()) {
                        *g += d * other;
                    }
                    self.vals[a.0] = av;
                }
            }
            Op::Silu { x } => {
                if self.needs[x.0] {
                    let n = self.vals[x.0].len();
                    let xv = std::mem::take(&mut self.vals[x.0]);
                    let gx = self.grads[x.0].get_or_insert_with(|| vec![0.0; n]);
                    for ((g, &d), &v) in gx.iter_mut().zip(gout).zip(xv.data()) {
                        let s = sigmoid(v);
                        *g += d * (s * (1.0 + v * (1.0 - s)));
                    }
                    self.vals[x.0] = xv;
                }
            }
            Op::RmsNorm { x, gain, ref inv_rms } => {
                let inv_rms = inv_rms.clone();
                let d = self.vals[x.0].shape()[1];
                let t = self.vals[x.0].shape()[0];
                let xv = std::mem::take(&mut self.vals[x.0]);
                let gv = std::mem::take(&mut self.vals[gain.0]);
                if self.needs[x.0] {
                    let gx = self.grads[x.0].get_or_insert_with(|| vec![0.0; t * d]);
                    for r in 0..t {
                        let row = &xv.data()[r * d..(r + 1) * d];
                        let go = &gout[r * d..(r + 1) * d];
                        let ir = inv_rms[r];
                        // Σ_j gout_j · g_j · x_j, shared by every dx_i of the row
                        let mut corr = 0.0;
                        for j in 0..d {
                            corr += go[j] * gv.data()[j] * row[j];
                        }
                        corr *= ir * ir * ir / d as f64;
                        let grow = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            grow[j] += go[j] * gv.data()[j] * ir - row[j] * corr;
                        }
                    }
                }
                if self.needs[gain.0] {
                    let gg = self.grads[gain.0].get_or_insert_with(|| vec![0.0; d]);
                    for r in 0..t {
                        let row = &xv.data()[r * d..(r + 1) * d];
                        let go = &gout[r * d..(r + 1) * d];
                        let ir = inv_rms[r];
                        for j in 0..d {
                            gg[j] += go[j] * row[j] * ir;
                        }
                    }
                }
                self.vals[x.0] = xv;
                self.vals[gain.0] = gv;
            }
            Op::Rope { x, base, offset } => {
                if self.needs[x.0] {
                    let (t, d) = (self.vals[x.0].shape()[0], self.vals[x.0].shape()[1]);
                    let mut g = gout.to_vec();
                    // inverse rotation: transpose of an orthogonal map
                    rope_rotate(&mut g, t, d, base, offset, true);
                    for (dst, s) in self.ensure_grad(x).iter_mut().zip(&g) {
                        *dst += s;
                    }
                }
            }
            Op::Embed { table, ref ids } => {
                if self.needs[table.0] {
                    let ids = ids.clone();
                    let d = self.vals[table.0].shape()[1];
                    let gt = self.ensure_grad(table);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        let src = &gout[r * d..(r + 1) * d];
                        for (x, y) in dst.iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs[x.0] {
                    let (t, d) = (self.vals[x.0].shape()[0], self.vals[x.0].shape()[1]);
                    let gx = self.grads[x.0].get_or_insert_with(|| vec![0.0; t * d]);
                    for r in 0..t {
                        let dst = &mut gx[r * d + start..r * d + start + len];
                        let src = &gout[r * len..(r + 1) * len];
                        for (x, y) in dst.iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
            }
            Op::ConcatCols { ref parts } => {
                let parts = parts.clone();
                let total: usize = parts.iter().map(|p| self.vals[p.0].shape()[1]).sum();
                let t = self.vals[parts[0].0].shape()[0];
                let mut col = 0;
                for p in parts {
                    let w = self.vals[p.0].shape()[1];
                    if self.needs[p.0] {
                        let gp = self.grads[p.0].get_or_insert_with(|| vec![0.0; t * w]);
                        for r in 0..t {
                            let src = &gout[r * total + col..r * total + col + w];
                            let dst = &mut gp[r * w..(r + 1) * w];
                            for (x, y) in dst.iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::ScoresLower { q, k } => {
                let (t, d) = (self.vals[q.0].shape()[0], self.vals[q.0].shape()[1]);
                if self.needs[q.0] {
                    let kv = std::mem::take(&mut self.vals[k.0]);
                    let gq = self.grads[q.0].get_or_insert_with(|| vec![0.0; t * d]);
                    // dq[i,:] += Σ_{j≤i} gout[i,j] · k_j
                    tensor::weighted_sum_lower_into(gq, gout, kv.data(), t, d);
                    self.vals[k.0] = kv;
                }
                if self.needs[k.0] {
                    let qv = std::mem::take(&mut self.vals[q.0]);
                    let gk = self.grads[k.0].get_or_insert_with(|| vec![0.0; t * d]);
                    // dk[j,:] += Σ_{i≥j} gout[i,j] · q_i
                    tensor::weighted_sum_lower_t_into(gk, gout, qv.data(), t, d);
                    self.vals[q.0] = qv;
                }
            }
            Op::CausalSoftmaxScaled { scores, scale } => {
                let t = self.vals[scores.0].shape()[0];
                let lambda = self.scale_value(scale)?;
                let needs_scores = self.needs[scores.0];
                let (scale_node, needs_scale) = match scale {
                    ScaleRef::Const(_) => (None, false),
                    ScaleRef::Param { node, index } => (Some((node, index)), self.needs[node.0]),
                };
                let probs = std::mem::take(&mut self.vals[i]);
                let scores_val = std::mem::take(&mut self.vals[scores.0]);
                let mut dlambda = 0.0;
                // Per row: d_scaled_j = p_j (g_j − Σ_k g_k p_k);
                // dscore = λ · d_scaled; dλ += Σ_j score_j · d_scaled_j.
                let mut gscores: Option<&mut Vec<f64>> = if needs_scores {
                    Some(
                        self.grads[scores.0].get_or_insert_with(|| vec![0.0; t * t]),
                    )
                } else {
                    None
                };
                for r in 0..t {
                    let w = r + 1;
                    let p = &probs.data()[r * t..r * t + w];
                    let g = &gout[r * t..r * t + w];
                    let mut inner = 0.0;
                    for (pk, gk) in p.iter().zip(g) {
                        inner += pk * gk;
                    }
                    if needs_scale {
                        let s = &scores_val.data()[r * t..r * t + w];
                        for j in 0..w {
                            dlambda += s[j] * p[j] * (g[j] - inner);
                        }
                    }
                    if let Some(gs) = gscores.as_deref_mut() {
                        let dst = &mut gs[r * t..r * t + w];
                        for j in 0..w {
                            dst[j] += lambda * p[j] * (g[j] - inner);
                        }
                    }
                }
                self.vals[i] = probs;
                self.vals[scores.0] = scores_val;
                if needs_scale {
                    if let Some((node, index)) = scale_node {
                        self.ensure_grad(node)[index] += dlambda;
                    }
                }
            }
            Op::AttnWeightedSum { p, v } => {
                let (t, d) = (self.vals[v.0].shape()[0], self.vals[v.0].shape()[1]);
                if self.needs[p.0] {
                    let vv = std::mem::take(&mut self.vals[v.0]);
                    let gp = self.grads[p.0].get_or_insert_with(|| vec![0.0; t * t]);
                    // dp[i,j] += dot(gout_i, v_j), j ≤ i
                    tensor::bt_lower_into(gp, gout, vv.data(), t, d);
                    self.vals[v.0] = vv;
                }
                if self.needs[v.0] {
                    let pv = std::mem::take(&mut self.vals[p.0]);
                    let gv = self.grads[v.0].get_or_insert_with(|| vec![0.0; t * d]);
                    // dv[j,:] += Σ_{i≥j} p[i,j] · gout_i
                    tensor::weighted_sum_lower_t_into(gv, pv.data(), gout, t, d);
                    self.vals[p.0] = pv;
                }
            }
            Op::CrossEntropyRows {
                logits,
                ref targets,
                ref probs,
            } => {
                if self.needs[logits.0] {
                    let n = targets.len();
                    let v = self.vals[logits.0].shape()[1];
                    let t = self.vals[logits.0].shape()[0];
                    let scale = gout[0] / n as f64;
                    let targets = targets.clone();
                    let probs_ptr: &Vec<f64> = probs;
                    // (softmax − onehot) · gout / n on scored rows; rows past
                    // targets.len() receive zero gradient.
                    let probs_copy = probs_ptr.clone();
                    let gl = self.grads[logits.0].get_or_insert_with(|| vec![0.0; t * v]);
                    for (r, &tgt) in targets.iter().enumerate() {
                        let p = &probs_copy[r * v..(r + 1) * v];
                        let dst = &mut gl[r * v..(r + 1) * v];
                        for (x, &pk) in dst.iter_mut().zip(p) {
                            *x += scale * pk;
                        }
                        dst[tgt as usize] -= scale;
                    }
                }
            }
            Op::MeanOf { ref parts } => {
                let parts = parts.clone();
                let scale = gout[0] / parts.len() as f64;
                for p in parts {
                    if self.needs[p.0] {
                        self.ensure_grad(p)[0] += scale;
                    }
                }
            }
            Op::WeightedSum { x, ref weights } => {
                if self.needs[x.0] {
                    let weights = weights.clone();
                    let d = gout[0];
                    for (g, w) in self.ensure_grad(x).iter_mut().zip(&weights) {
                        *g += d * w;
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Rotates adjacent column pairs (2j, 2j+1) of row r by angle
/// (offset+r)·base^(−2j/d); `inverse` applies the opposite rotation.
pub(crate) fn rope_rotate(
    data: &mut [f64],
    t: usize,
    d: usize,
    base: f64,
    offset: usize,
    inverse: bool,
) {
    debug_assert_eq!(data.len(), t * d);
    debug_assert_eq!(d % 2, 0);
    let half = d / 2;
    let mut freqs = Vec::with_capacity(half);
    for j in 0..half {
        freqs.push(base.powf(-2.0 * j as f64 / d as f64));
    }
    for r in 0..t {
        let pos = (offset + r) as f64;
        let row = &mut data[r * d..(r + 1) * d];
        for (j, &f) in freqs.iter().enumerate() {
            let ang = if inverse { -pos * f } else { pos * f };
            let (sin, cos) = ang.sin_cos();
            let (x0, x1) = (row[2 * j], row[2 * j + 1]);
            row[2 * j] = x0 * cos - x1 * sin;
            row[2 * j + 1] = x0 * sin + x1 * cos;
        }
    }
}
