//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape index is already a topological order and
//! [`Graph::backward`] only has to walk it in reverse.
//!
//! Model parameters are referenced, not copied: the graph borrows the
//! parameter slice for its lifetime and [`Gradients::accumulate_into`] writes
//! the results back into each tensor's gradient slot once the graph is gone.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// Pointwise maximum; ties go to the first operand.
    Max,
}

/// Per-feature statistics of one batch-norm application in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Value {
    Owned(Tensor),
    Param(usize),
}

enum Op {
    Leaf,
    Constant,
    MatMul {
        a: Var,
        b: Var,
    },
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
    Embed {
        table: Var,
        tokens: Vec<usize>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: Var,
        alpha: f64,
    },
    MaxOverTime {
        x: Var,
        argmax: Vec<usize>,
    },
    Mask {
        x: Var,
        mask: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Borrows the model parameters it reads.
pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.params[*id],
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf referring to parameter `id` of the borrowed slice.
    pub fn param(&mut self, id: usize) -> Var {
        assert!(id < self.params.len(), "parameter {id} out of range");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b },
            &[a, b],
        ))
    }

    /// Pointwise binary op. Shapes must match exactly, except that either
    /// operand may be a one-element tensor.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.is_scalar() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else {
            return Err(Error::Shape {
                op: "elementwise",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let n = ta.numel().max(tb.numel());
        let (ad, bd) = (ta.data(), tb.data());
        let out = (0..n)
            .map(|i| {
                let (x, y) = (bcast(ad, i), bcast(bd, i));
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Max => {
                        if x >= y {
                            x
                        } else {
                            y
                        }
                    }
                }
            })
            .collect();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Binary { op, a, b },
            &[a, b],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Max, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x }, &[x])
    }

    /// Row lookup: `tokens` is a row-major `[batch, len]` index matrix.
    pub fn embed(&mut self, table: Var, tokens: &[usize], batch: usize, len: usize) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape {
                op: "embed",
                lhs: t.shape().to_vec(),
                rhs: vec![batch, len],
            });
        }
        if tokens.len() != batch * len || batch == 0 || len == 0 {
            return Err(Error::Shape {
                op: "embed",
                lhs: vec![tokens.len()],
                rhs: vec![batch, len],
            });
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        if let Some(&index) = tokens.iter().find(|&&i| i >= vocab) {
            return Err(Error::OutOfVocab { index, vocab });
        }
        let data = t.data();
        let mut out = Vec::with_capacity(tokens.len() * dim);
        for &tok in tokens {
            out.extend_from_slice(&data[tok * dim..(tok + 1) * dim]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, len, dim], out),
            Op::Embed {
                table,
                tokens: tokens.to_vec(),
            },
            &[table],
        ))
    }

    /// Valid 1-D convolution over the sequence axis with full feature span.
    ///
    /// `x: [B, L, F]`, `w: [h, F, O]`, `b: [O]`; output `[B, L - eh + 1, O]`
    /// where `eh = (h - 1) * dilation + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (sx, sw, sb) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [sw[2]] {
            return Err(Error::Shape {
                op: "conv1d bias",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        if dilation == 0 {
            return Err(Error::contract("dilation must be positive"));
        }
        let (bsz, len, feat) = (sx[0], sx[1], sx[2]);
        let (h, out_ch) = (sw[0], sw[2]);
        let eh = (h - 1) * dilation + 1;
        if len < eh {
            return Err(Error::EmptyFeatureMap { len, height: eh });
        }
        let lout = len - eh + 1;
        let (xd, wd, bd) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![0.0; bsz * lout * out_ch];
        for bi in 0..bsz {
            for t in 0..lout {
                let y = &mut out[(bi * lout + t) * out_ch..(bi * lout + t + 1) * out_ch];
                y.copy_from_slice(bd);
                for k in 0..h {
                    let pos = t + k * dilation;
                    let xrow = &xd[(bi * len + pos) * feat..(bi * len + pos + 1) * feat];
                    let wk = &wd[k * feat * out_ch..(k + 1) * feat * out_ch];
                    for (f, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (yo, &wv) in y.iter_mut().zip(&wk[f * out_ch..(f + 1) * out_ch]) {
                            *yo += xv * wv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![bsz, lout, out_ch], out),
            Op::Conv { x, w, b, dilation },
            &[x, w, b],
        ))
    }

    /// Per-channel valid convolution.
    ///
    /// `x: [B, L, width * C]` with feature index `j * C + c`, `w: [h, width, C]`,
    /// `b: [C]`; output `[B, L - eh + 1, C]`. Each output channel only sees the
    /// `width` features belonging to its own input channel.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (sx, sw, sb) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] * sw[2] {
            return Err(Error::Shape {
                op: "depthwise_conv1d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [sw[2]] {
            return Err(Error::Shape {
                op: "depthwise_conv1d bias",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        if dilation == 0 {
            return Err(Error::contract("dilation must be positive"));
        }
        let (bsz, len, feat) = (sx[0], sx[1], sx[2]);
        let (h, width, ch) = (sw[0], sw[1], sw[2]);
        let eh = (h - 1) * dilation + 1;
        if len < eh {
            return Err(Error::EmptyFeatureMap { len, height: eh });
        }
        let lout = len - eh + 1;
        let (xd, wd, bd) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![0.0; bsz * lout * ch];
        for bi in 0..bsz {
            for t in 0..lout {
                let y = &mut out[(bi * lout + t) * ch..(bi * lout + t + 1) * ch];
                y.copy_from_slice(bd);
                for k in 0..h {
                    let pos = t + k * dilation;
                    let xrow = &xd[(bi * len + pos) * feat..(bi * len + pos + 1) * feat];
                    for j in 0..width {
                        let wkj = &wd[(k * width + j) * ch..(k * width + j + 1) * ch];
                        let xs = &xrow[j * ch..(j + 1) * ch];
                        for ((yo, &wv), &xv) in y.iter_mut().zip(wkj).zip(xs) {
                            *yo += wv * xv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![bsz, lout, ch], out),
            Op::Depthwise { x, w, b, dilation },
            &[x, w, b],
        ))
    }

    /// Batch normalization over the last axis using the statistics of `x`
    /// itself (every leading position counts as one sample). The leading
    /// (batch) extent must be at least 2.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        epsilon: f64,
    ) -> Result<(Var, BatchStats)> {
        let feat = self.check_norm_shapes(x, gamma, beta)?;
        let tx = self.value(x);
        if tx.shape()[0] < 2 {
            return Err(Error::contract(format!(
                "batch norm in train mode needs batch size >= 2, got {}",
                tx.shape()[0]
            )));
        }
        let rows = tx.numel() / feat;
        let xd = tx.data();
        let mut mean = vec![0.0; feat];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(&xd[r * feat..(r + 1) * feat]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; feat];
        for r in 0..rows {
            for ((s, &v), &m) in var.iter_mut().zip(&xd[r * feat..(r + 1) * feat]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let (var_out, stats) = self.normalize(x, gamma, beta, &mean, inv_std, true);
        Ok((
            var_out,
            BatchStats {
                mean: stats,
                var,
            },
        ))
    }

    /// Batch normalization with fixed statistics (inference). An affine map of `x`.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        epsilon: f64,
    ) -> Result<Var> {
        let feat = self.check_norm_shapes(x, gamma, beta)?;
        if mean.len() != feat || var.len() != feat {
            return Err(Error::Shape {
                op: "batch_norm running stats",
                lhs: vec![feat],
                rhs: vec![mean.len(), var.len()],
            });
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        Ok(self.normalize(x, gamma, beta, mean, inv_std, false).0)
    }

    fn check_norm_shapes(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let sx = self.value(x).shape();
        let feat = *sx.last().unwrap_or(&1);
        for p in [gamma, beta] {
            let sp = self.value(p).shape();
            if sx.is_empty() || sp != [feat] {
                return Err(Error::Shape {
                    op: "batch_norm",
                    lhs: sx.to_vec(),
                    rhs: sp.to_vec(),
                });
            }
        }
        Ok(feat)
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> (Var, Vec<f64>) {
        let tx = self.value(x);
        let feat = inv_std.len();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut out = Vec::with_capacity(tx.numel());
        for (i, &v) in tx.data().iter().enumerate() {
            let f = i % feat;
            let n = (v - mean[f]) * inv_std[f];
            xhat.push(n);
            out.push(gd[f] * n + bd[f]);
        }
        let shape = tx.shape().to_vec();
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        (v, mean.to_vec())
    }

    /// `x` where positive, `alpha * x` elsewhere. The derivative at 0 is `alpha`.
    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let t = self.value(x);
        let out = t
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { alpha * v })
            .collect();
        let shape = t.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LeakyRelu { x, alpha },
            &[x],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// `[B, L, C] -> [B, C]`, maximum over L. Ties resolve to the lowest position.
    pub fn max_over_time(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Shape {
                op: "max_over_time",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (bsz, len, ch) = (s[0], s[1], s[2]);
        let d = t.data();
        let mut out = vec![f64::NEG_INFINITY; bsz * ch];
        let mut argmax = vec![0; bsz * ch];
        for b in 0..bsz {
            for p in 0..len {
                for c in 0..ch {
                    let v = d[(b * len + p) * ch + c];
                    if v > out[b * ch + c] || p == 0 {
                        out[b * ch + c] = v;
                        argmax[b * ch + c] = p;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![bsz, ch], out),
            Op::MaxOverTime { x, argmax },
            &[x],
        ))
    }

    /// Multiplies by a constant mask of the same length.
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(Error::Shape {
                op: "mask",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mask { x, mask }, &[x]))
    }

    /// Concatenates `[B, F_i]` matrices along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let bsz = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != bsz {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(bsz * total);
        for b in 0..bsz {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[b * w..(b + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![bsz, total], out),
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// `x · w + b` with `x: [B, F]`, `w: [F, K]`, `b: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (bsz, feat, k) = (sx[0], sx[1], sw[1]);
        let (xd, wd, bd) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = Vec::with_capacity(bsz * k);
        for bi in 0..bsz {
            let mut row = bd.to_vec();
            for f in 0..feat {
                let xv = xd[bi * feat + f];
                for (o, &wv) in row.iter_mut().zip(&wd[f * k..(f + 1) * k]) {
                    *o += xv * wv;
                }
            }
            out.extend(row);
        }
        Ok(self.push(
            Tensor::from_parts(vec![bsz, k], out),
            Op::Linear { x, w, b },
            &[x, w, b],
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (bsz, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let (probs, losses) = softmax_rows(t.data(), k, labels);
        let loss = losses.iter().sum::<f64>() / bsz as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Row probabilities cached by a [`Graph::softmax_cross_entropy`] node.
    pub fn probabilities(&self, loss: Var) -> Option<Tensor> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxXent { probs, labels, .. } => {
                let k = probs.len() / labels.len();
                Some(Tensor::from_parts(vec![labels.len(), k], probs.clone()))
            }
            _ => None,
        }
    }

    /// Propagates d(loss)/d(node) to every leaf reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &g, &mut grads);
        }
        let param_of = self
            .nodes
            .iter()
            .map(|n| match (&n.value, &n.op) {
                (Value::Param(id), Op::Leaf) => Some(*id),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, param_of })
    }

    fn propagate(&self, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (ad, bd) = (ta.data(), tb.data());
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] += (0..n).map(|j| g[i * n + j] * bd[p * n + j]).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Binary { op, a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let route = |i: usize, to_a: bool| -> f64 {
                    let (x, y) = (bcast(ad, i), bcast(bd, i));
                    match (op, to_a) {
                        (BinaryOp::Add, _) => g[i],
                        (BinaryOp::Sub, true) => g[i],
                        (BinaryOp::Sub, false) => -g[i],
                        (BinaryOp::Mul, true) => g[i] * y,
                        (BinaryOp::Mul, false) => g[i] * x,
                        (BinaryOp::Max, true) => {
                            if x >= y {
                                g[i]
                            } else {
                                0.0
                            }
                        }
                        (BinaryOp::Max, false) => {
                            if x >= y {
                                0.0
                            } else {
                                g[i]
                            }
                        }
                    }
                };
                for (side, to_a) in [(*a, true), (*b, false)] {
                    self.acc(grads, side, |d| {
                        let broadcast = d.len() == 1 && g.len() > 1;
                        for i in 0..g.len() {
                            let v = route(i, to_a);
                            if broadcast {
                                d[0] += v;
                            } else {
                                d[i] += v;
                            }
                        }
                    });
                }
            }
            Op::Scale { x, factor } => {
                self.acc(grads, *x, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * factor)
                });
            }
            Op::Sum { x } => {
                self.acc(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::SumSquares { x } => {
                let xd = self.value(*x).data();
                self.acc(grads, *x, |dx| {
                    dx.iter_mut()
                        .zip(xd)
                        .for_each(|(d, v)| *d += 2.0 * v * g[0])
                });
            }
            Op::Embed { table, tokens } => {
                let dim = self.value(*table).shape()[1];
                self.acc(grads, *table, |dt| {
                    for (p, &tok) in tokens.iter().enumerate() {
                        let row = &mut dt[tok * dim..(tok + 1) * dim];
                        row.iter_mut()
                            .zip(&g[p * dim..(p + 1) * dim])
                            .for_each(|(d, gv)| *d += gv);
                    }
                });
            }
            Op::Conv { x, w, b, dilation } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (bsz, len, feat) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (h, out_ch) = (tw.shape()[0], tw.shape()[2]);
                let lout = len - (h - 1) * dilation;
                let (xd, wd) = (tx.data(), tw.data());
                self.acc(grads, *x, |dx| {
                    for bi in 0..bsz {
                        for t in 0..lout {
                            let gy = &g[(bi * lout + t) * out_ch..(bi * lout + t + 1) * out_ch];
                            for k in 0..h {
                                let pos = t + k * dilation;
                                let dxr = &mut dx[(bi * len + pos) * feat..(bi * len + pos + 1) * feat];
                                let wk = &wd[k * feat * out_ch..(k + 1) * feat * out_ch];
                                for (f, d) in dxr.iter_mut().enumerate() {
                                    *d += wk[f * out_ch..(f + 1) * out_ch]
                                        .iter()
                                        .zip(gy)
                                        .map(|(wv, gv)| wv * gv)
                                        .sum::<f64>();
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *w, |dw| {
                    for bi in 0..bsz {
                        for t in 0..lout {
                            let gy = &g[(bi * lout + t) * out_ch..(bi * lout + t + 1) * out_ch];
                            for k in 0..h {
                                let pos = t + k * dilation;
                                let xr = &xd[(bi * len + pos) * feat..(bi * len + pos + 1) * feat];
                                for (f, &xv) in xr.iter().enumerate() {
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let dwr = &mut dw[(k * feat + f) * out_ch..(k * feat + f + 1) * out_ch];
                                    dwr.iter_mut().zip(gy).for_each(|(d, gv)| *d += xv * gv);
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for row in g.chunks(out_ch) {
                        db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                });
            }
            Op::Depthwise { x, w, b, dilation } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (bsz, len, feat) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (h, width, ch) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                let lout = len - (h - 1) * dilation;
                let (xd, wd) = (tx.data(), tw.data());
                let windows = |mut visit: Box<dyn FnMut(usize, usize, usize, usize) + '_>| {
                    for bi in 0..bsz {
                        for t in 0..lout {
                            for k in 0..h {
                                let pos = t + k * dilation;
                                for j in 0..width {
                                    for c in 0..ch {
                                        visit(
                                            (bi * lout + t) * ch + c,
                                            (bi * len + pos) * feat + j * ch + c,
                                            (k * width + j) * ch + c,
                                            c,
                                        );
                                    }
                                }
                            }
                        }
                    }
                };
                self.acc(grads, *x, |dx| {
                    windows(Box::new(|gi, xi, wi, _| dx[xi] += g[gi] * wd[wi]))
                });
                self.acc(grads, *w, |dw| {
                    windows(Box::new(|gi, xi, wi, _| dw[wi] += g[gi] * xd[xi]))
                });
                self.acc(grads, *b, |db| {
                    for row in g.chunks(ch) {
                        db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let feat = inv_std.len();
                let rows = g.len() / feat;
                let gd = self.value(*gamma).data();
                self.acc(grads, *x, |dx| {
                    if *batch_stats {
                        let mut sum_dxhat = vec![0.0; feat];
                        let mut sum_dxhat_xhat = vec![0.0; feat];
                        for i in 0..g.len() {
                            let f = i % feat;
                            let dxhat = g[i] * gd[f];
                            sum_dxhat[f] += dxhat;
                            sum_dxhat_xhat[f] += dxhat * xhat[i];
                        }
                        let n = rows as f64;
                        for i in 0..g.len() {
                            let f = i % feat;
                            let dxhat = g[i] * gd[f];
                            dx[i] += inv_std[f] / n
                                * (n * dxhat - sum_dxhat[f] - xhat[i] * sum_dxhat_xhat[f]);
                        }
                    } else {
                        for i in 0..g.len() {
                            let f = i % feat;
                            dx[i] += g[i] * gd[f] * inv_std[f];
                        }
                    }
                });
                self.acc(grads, *gamma, |dg| {
                    for i in 0..g.len() {
                        dg[i % feat] += g[i] * xhat[i];
                    }
                });
                self.acc(grads, *beta, |db| {
                    for i in 0..g.len() {
                        db[i % feat] += g[i];
                    }
                });
            }
            Op::LeakyRelu { x, alpha } => {
                let xd = self.value(*x).data();
                self.acc(grads, *x, |dx| {
                    for i in 0..g.len() {
                        dx[i] += if xd[i] > 0.0 { g[i] } else { alpha * g[i] };
                    }
                });
            }
            Op::MaxOverTime { x, argmax } => {
                let s = self.value(*x).shape();
                let (len, ch) = (s[1], s[2]);
                self.acc(grads, *x, |dx| {
                    for (i, &p) in argmax.iter().enumerate() {
                        let (b, c) = (i / ch, i % ch);
                        dx[(b * len + p) * ch + c] += g[i];
                    }
                });
            }
            Op::Mask { x, mask } => {
                self.acc(grads, *x, |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Concat { parts } => {
                let total = self.value(parts[0]).shape()[0];
                let width: usize = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    self.acc(grads, p, |dp| {
                        for b in 0..total {
                            for j in 0..w {
                                dp[b * w + j] += g[b * width + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (bsz, feat, k) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
                let (xd, wd) = (tx.data(), tw.data());
                self.acc(grads, *x, |dx| {
                    for bi in 0..bsz {
                        let gr = &g[bi * k..(bi + 1) * k];
                        for f in 0..feat {
                            dx[bi * feat + f] += wd[f * k..(f + 1) * k]
                                .iter()
                                .zip(gr)
                                .map(|(wv, gv)| wv * gv)
                                .sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *w, |dw| {
                    for bi in 0..bsz {
                        let gr = &g[bi * k..(bi + 1) * k];
                        for f in 0..feat {
                            let xv = xd[bi * feat + f];
                            dw[f * k..(f + 1) * k]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(d, gv)| *d += xv * gv);
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let bsz = labels.len();
                let k = probs.len() / bsz;
                let scale = g[0] / bsz as f64;
                self.acc(grads, *logits, |dl| {
                    for (b, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            dl[b * k + c] += scale * (probs[b * k + c] - onehot);
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

fn bcast(d: &[f64], i: usize) -> f64 {
    if d.len() == 1 {
        d[0]
    } else {
        d[i]
    }
}

/// Numerically stable row softmax; returns probabilities and per-row
/// negative log-likelihood of `labels`.
pub(crate) fn softmax_rows(logits: &[f64], k: usize, labels: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut probs = Vec::with_capacity(logits.len());
    let mut losses = Vec::with_capacity(labels.len());
    for (row, &label) in logits.chunks(k).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        probs.extend(row.iter().map(|z| (z - lse).exp()));
        losses.push(lse - row[label]);
    }
    (probs, losses)
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_of: Vec<Option<usize>>,
}

impl Gradients {
    /// Gradient of an owned leaf or parameter leaf; `None` if unreachable.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of parameter `id`, summed over every leaf that references it.
    pub fn param(&self, id: usize) -> Option<Vec<f64>> {
        let mut out: Option<Vec<f64>> = None;
        for (node, pid) in self.param_of.iter().enumerate() {
            if *pid != Some(id) {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut out {
                    Some(o) => o.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }

    /// Adds every reached parameter gradient into the matching tensor's
    /// gradient slot. Unreached parameters are left untouched.
    pub fn accumulate_into(&self, params: &mut [Tensor]) {
        for (node, pid) in self.param_of.iter().enumerate() {
            if let (Some(id), Some(g)) = (pid, &self.grads[node]) {
                params[*id].accumulate_grad(g);
            }
        }
    }
}
