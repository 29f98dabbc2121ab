//! Define-by-run operation tape.
//!
//! Every operation appends one node holding the output value, the parent
//! ids, and enough context to compute vector-Jacobian products. Node ids
//! grow monotonically, so insertion order is already a topological order
//! and a single reverse sweep visits each node exactly once.

use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Values below or equal to this threshold are treated as masked by
/// [`Tape::softmax_rows`]; covers both `-inf` and the finite sentinel
/// written by [`Tape::mask_fill`]. Masked entries get probability exactly 0.
pub const MASK_SENTINEL: f64 = f64::MIN;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Matmul(Var, Var),
    Transpose2(Var),
    SoftmaxRows(Var),
    MaskFill(Var, Vec<bool>),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    ConcatLast(Vec<Var>),
    PermuteLast {
        input: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    MeanRows(Var),
    MeanAll(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` required one
    /// and the loss depends on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Only leaves with `requires_grad` (and the
    /// values computed from them) participate in backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a constant; shorthand for `leaf(value, false)`.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_from(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = broadcast_zip("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push_from(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = broadcast_zip("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push_from(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = broadcast_zip("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push_from(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let out = map(self.value(a), |x| x * factor);
        Ok(self.push_from(out, Op::Scale(a, factor), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = map(self.value(a), f64::tanh);
        Ok(self.push_from(out, Op::Tanh(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = map(self.value(a), sigmoid);
        Ok(self.push_from(out, Op::Sigmoid(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = map(self.value(a), |x| x.max(0.0));
        Ok(self.push_from(out, Op::Relu(a), &[a]))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = map(self.value(a), f64::abs);
        Ok(self.push_from(out, Op::Abs(a), &[a]))
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// `a` is `[..., m, k]`, `b` is `[k, n]`; leading dimensions of `a`
    /// are treated as a batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if av.rank() < 2 || bv.rank() != 2 {
            return Err(mismatch());
        }
        let m = av.shape()[av.rank() - 2];
        let k = av.shape()[av.rank() - 1];
        let (bk, n) = (bv.shape()[0], bv.shape()[1]);
        if k != bk {
            return Err(mismatch());
        }
        let batch = av.numel() / (m * k);
        let mut out_shape = av.shape().to_vec();
        out_shape[av.rank() - 2] = m;
        out_shape[av.rank() - 1] = n;
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (av.data(), bv.data());
        for bi in 0..batch {
            let a_block = &ad[bi * m * k..(bi + 1) * m * k];
            let out_block = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let out_row = &mut out_block[i * n..(i + 1) * n];
                for (kk, &a_ik) in a_block[i * k..(i + 1) * k].iter().enumerate() {
                    let b_row = &bd[kk * n..(kk + 1) * n];
                    for (o, &bv_) in out_row.iter_mut().zip(b_row) {
                        *o += a_ik * bv_;
                    }
                }
            }
        }
        let out = Tensor::new(out_shape, out).expect("matmul shape");
        Ok(self.push_from(out, Op::Matmul(a, b), &[a, b]))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose2(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose2",
                msg: format!("expected rank 2, got {:?}", av.shape()),
            });
        }
        let out = transpose2(av);
        Ok(self.push_from(out, Op::Transpose2(a), &[a]))
    }

    // ── softmax and masking ──────────────────────────────────────────

    /// Softmax over the last axis, computed with max-subtraction.
    /// Entries at or below [`MASK_SENTINEL`] map to exactly 0; a row with
    /// every entry masked is an error.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.rank() == 0 {
            return Err(TensorError::Invalid {
                op: "softmax_rows",
                msg: "scalar input has no row axis".into(),
            });
        }
        let n = av.shape()[av.rank() - 1];
        let rows = av.numel() / n;
        let mut out = vec![0.0; av.numel()];
        for r in 0..rows {
            let row = &av.data()[r * n..(r + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            let mut any = false;
            for &x in row {
                if x > MASK_SENTINEL {
                    any = true;
                    if x > mx {
                        mx = x;
                    }
                }
            }
            if !any {
                return Err(TensorError::DegenerateMask { row: r });
            }
            let out_row = &mut out[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for (o, &x) in out_row.iter_mut().zip(row) {
                *o = if x > MASK_SENTINEL {
                    (x - mx).exp()
                } else {
                    0.0
                };
                sum += *o;
            }
            for o in out_row.iter_mut() {
                *o /= sum;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out).expect("softmax shape");
        Ok(self.push_from(out, Op::SoftmaxRows(a), &[a]))
    }

    /// Writes [`MASK_SENTINEL`] wherever `mask` is false. `mask` is
    /// row-major over the same shape as the input; gradients do not flow
    /// through masked positions.
    pub fn mask_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let av = self.value(a);
        if mask.len() != av.numel() {
            return Err(TensorError::Invalid {
                op: "mask_fill",
                msg: format!(
                    "mask has {} entries, tensor {:?} has {}",
                    mask.len(),
                    av.shape(),
                    av.numel()
                ),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &keep)| if keep { x } else { MASK_SENTINEL })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("mask shape");
        Ok(self.push_from(out, Op::MaskFill(a, mask.to_vec()), &[a]))
    }

    // ── convolution ──────────────────────────────────────────────────

    /// Dilated causal 1-D convolution over the time axis.
    ///
    /// `input` is `[N, P, Din]`, `weight` is `[Dout, Din, K]`, `bias` is
    /// `[Dout]`. Tap `k` reads `dilation * k` steps into the past; indices
    /// before the start of the series read as zero, so the output keeps
    /// length `P` and position `t` depends only on inputs at times `<= t`.
    pub fn dilated_causal_conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var, TensorError> {
        let iv = self.value(input);
        let wv = self.value(weight);
        let mismatch = || TensorError::ShapeMismatch {
            op: "dilated_causal_conv1d",
            lhs: iv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        };
        if iv.rank() != 3 || wv.rank() != 3 {
            return Err(mismatch());
        }
        let (n, p, d_in) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
        let (d_out, w_in, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if d_in != w_in {
            return Err(mismatch());
        }
        if k == 0 || dilation == 0 {
            return Err(TensorError::Invalid {
                op: "dilated_causal_conv1d",
                msg: format!("kernel size {} and dilation {} must be >= 1", k, dilation),
            });
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [d_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "dilated_causal_conv1d",
                    lhs: vec![d_out],
                    rhs: bv.shape().to_vec(),
                });
            }
        }
        let mut out = match bias {
            Some(b) => {
                let bd = self.value(b).data().to_vec();
                let mut buf = vec![0.0; n * p * d_out];
                for row in buf.chunks_mut(d_out) {
                    row.copy_from_slice(&bd);
                }
                buf
            }
            None => vec![0.0; n * p * d_out],
        };
        let id = self.value(input).data();
        let wd = self.value(weight).data();
        for nn in 0..n {
            for t in 0..p {
                let out_row = &mut out[(nn * p + t) * d_out..(nn * p + t + 1) * d_out];
                for tap in 0..k {
                    let lag = dilation * tap;
                    if lag > t {
                        break;
                    }
                    let src = &id[(nn * p + t - lag) * d_in..(nn * p + t - lag + 1) * d_in];
                    for (o, out_v) in out_row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (c, &x) in src.iter().enumerate() {
                            acc += x * wd[(o * d_in + c) * k + tap];
                        }
                        *out_v += acc;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, p, d_out], out).expect("conv shape");
        let mut parents = vec![input, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push_from(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                dilation,
            },
            &parents,
        ))
    }

    // ── shape ops ────────────────────────────────────────────────────

    /// Slice of `len` indices starting at `start` along `axis`.
    pub fn narrow(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let av = self.value(a);
        if axis >= av.rank() || start + len > av.shape()[axis] || len == 0 {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!(
                    "slice [{start}, {}) on axis {axis} of {:?}",
                    start + len,
                    av.shape()
                ),
            });
        }
        let dim = av.shape()[axis];
        let outer: usize = av.shape()[..axis].iter().product();
        let inner: usize = av.shape()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for ou in 0..outer {
            let base = (ou * dim + start) * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out).expect("narrow shape");
        Ok(self.push_from(
            out,
            Op::Narrow {
                input: a,
                axis,
                start,
                len,
            },
            &[a],
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_last",
                msg: "no inputs".into(),
            });
        }
        let first = self.value(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut lasts = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            lasts.push(s[s.len() - 1]);
        }
        let total: usize = lasts.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &last) in parts.iter().zip(&lasts) {
                out.extend_from_slice(&self.value(p).data()[r * last..(r + 1) * last]);
            }
        }
        let mut shape = first;
        *shape.last_mut().unwrap() = total;
        let out = Tensor::new(shape, out).expect("concat shape");
        Ok(self.push_from(out, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Gathers channels along the last axis: `out[..., j] = in[..., perm[j]]`.
    pub fn permute_last(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let av = self.value(a);
        let d = *av.shape().last().unwrap_or(&0);
        if perm.len() != d || !is_permutation(perm) {
            return Err(TensorError::Invalid {
                op: "permute_last",
                msg: format!("{:?} is not a permutation of 0..{}", perm, d),
            });
        }
        let rows = av.numel() / d;
        let mut out = Vec::with_capacity(av.numel());
        for r in 0..rows {
            let row = &av.data()[r * d..(r + 1) * d];
            out.extend(perm.iter().map(|&j| row[j]));
        }
        let out = Tensor::new(av.shape().to_vec(), out).expect("permute shape");
        Ok(self.push_from(
            out,
            Op::PermuteLast {
                input: a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push_from(out, Op::Reshape(a), &[a]))
    }

    // ── reductions ───────────────────────────────────────────────────

    /// Column means of a 2-D tensor: `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "mean_rows",
                msg: format!("expected rank 2, got {:?}", av.shape()),
            });
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; d];
        for row in av.data().chunks(d) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        let out = Tensor::new(vec![d], out).expect("mean_rows shape");
        Ok(self.push_from(out, Op::MeanRows(a), &[a]))
    }

    /// Mean over every element, producing a scalar.
    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let n = av.numel() as f64;
        let out = Tensor::scalar(av.data().iter().sum::<f64>() / n);
        Ok(self.push_from(out, Op::MeanAll(a), &[a]))
    }

    // ── normalization ────────────────────────────────────────────────

    /// Layer normalization over the last axis with learnable scale and
    /// shift, both of shape `[d]`.
    pub fn layer_norm(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let av = self.value(a);
        let d = *av.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "empty last axis".into(),
            });
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [d] {
                return Err(TensorError::Invalid {
                    op: "layer_norm",
                    msg: format!(
                        "{name} shape {:?} does not match last axis {d}",
                        self.value(v).shape()
                    ),
                });
            }
        }
        let rows = av.numel() / d;
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let ad = self.value(a).data();
        let mut out = vec![0.0; ad.len()];
        for r in 0..rows {
            let row = &ad[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let out_row = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                out_row[j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out).expect("layer_norm shape");
        Ok(self.push_from(
            out,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                eps,
            },
            &[a, gamma, beta],
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns a gradient for every
    /// reachable node with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::OffTape {
                id: loss.0,
                len: self.nodes.len(),
            });
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(TensorError::LossNotScalar {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Gradients are only reported for leaves and intermediates that
        // asked for them; drop the rest to keep the result small.
        for (id, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[id].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_broadcast(*a, g, grads, |gi, _| gi);
                self.accum_broadcast(*b, g, grads, |gi, _| gi);
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(*a, g, grads, |gi, _| gi);
                self.accum_broadcast(*b, g, grads, |gi, _| -gi);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // d a = g * b, d b = g * a, with the smaller operand's
                // values cycled over the suffix block.
                let bn = bv.numel();
                let an = av.numel();
                self.accum_broadcast(*a, g, grads, |gi, i| gi * bv.data()[i % bn]);
                self.accum_broadcast(*b, g, grads, |gi, i| gi * av.data()[i % an]);
            }
            Op::Scale(a, f) => self.accum_map(*a, g, grads, |gi, _| gi * f),
            Op::Tanh(a) => {
                self.accum_map(*a, g, grads, |gi, i| {
                    let y = out.data()[i];
                    gi * (1.0 - y * y)
                });
            }
            Op::Sigmoid(a) => {
                self.accum_map(*a, g, grads, |gi, i| {
                    let y = out.data()[i];
                    gi * y * (1.0 - y)
                });
            }
            Op::Relu(a) => {
                let xv = self.value(*a);
                self.accum_map(*a, g, grads, |gi, i| {
                    if xv.data()[i] > 0.0 {
                        gi
                    } else {
                        0.0
                    }
                });
            }
            Op::Abs(a) => {
                let xv = self.value(*a);
                // Subgradient 0 at exact ties.
                self.accum_map(*a, g, grads, |gi, i| gi * sign(xv.data()[i]));
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let rank = av.rank();
                let m = av.shape()[rank - 2];
                let k = av.shape()[rank - 1];
                let n = bv.shape()[1];
                let batch = av.numel() / (m * k);
                if self.wants_grad(*a) {
                    // dA = g . B^T per batch block
                    let mut da = vec![0.0; av.numel()];
                    for bi in 0..batch {
                        let g_block = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let da_block = &mut da[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            let g_row = &g_block[i * n..(i + 1) * n];
                            let da_row = &mut da_block[i * k..(i + 1) * k];
                            for (kk, dv) in da_row.iter_mut().enumerate() {
                                let b_row = &bv.data()[kk * n..(kk + 1) * n];
                                let mut acc = 0.0;
                                for (gv, bv_) in g_row.iter().zip(b_row) {
                                    acc += gv * bv_;
                                }
                                *dv += acc;
                            }
                        }
                    }
                    let da = Tensor::new(av.shape().to_vec(), da).expect("matmul da");
                    add_grad(grads, *a, &da, av.shape());
                }
                if self.wants_grad(*b) {
                    // dB = sum over batch of A^T . g
                    let mut db = vec![0.0; bv.numel()];
                    for bi in 0..batch {
                        let a_block = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let g_block = &g.data()[bi * m * n..(bi + 1) * m * n];
                        for i in 0..m {
                            let g_row = &g_block[i * n..(i + 1) * n];
                            for (kk, &a_ik) in a_block[i * k..(i + 1) * k].iter().enumerate() {
                                let db_row = &mut db[kk * n..(kk + 1) * n];
                                for (dv, gv) in db_row.iter_mut().zip(g_row) {
                                    *dv += a_ik * gv;
                                }
                            }
                        }
                    }
                    let db = Tensor::new(bv.shape().to_vec(), db).expect("matmul db");
                    add_grad(grads, *b, &db, bv.shape());
                }
            }
            Op::Transpose2(a) => {
                if self.wants_grad(*a) {
                    let gt = transpose2(g);
                    add_grad(grads, *a, &gt, self.value(*a).shape());
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants_grad(*a) {
                    let y = out;
                    let n = *y.shape().last().unwrap();
                    let rows = y.numel() / n;
                    let mut dx = vec![0.0; y.numel()];
                    for r in 0..rows {
                        let y_row = &y.data()[r * n..(r + 1) * n];
                        let g_row = &g.data()[r * n..(r + 1) * n];
                        let dot: f64 = y_row.iter().zip(g_row).map(|(y, g)| y * g).sum();
                        let dx_row = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dx_row[j] = y_row[j] * (g_row[j] - dot);
                        }
                    }
                    let dx = Tensor::new(y.shape().to_vec(), dx).expect("softmax dx");
                    add_grad(grads, *a, &dx, self.value(*a).shape());
                }
            }
            Op::MaskFill(a, mask) => {
                self.accum_map(*a, g, grads, |gi, i| if mask[i] { gi } else { 0.0 });
            }
            Op::Conv {
                input,
                weight,
                bias,
                dilation,
            } => {
                let iv = self.value(*input);
                let wv = self.value(*weight);
                let (n, p, d_in) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
                let (d_out, _, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                if self.wants_grad(*input) {
                    let mut di = vec![0.0; iv.numel()];
                    for nn in 0..n {
                        for t in 0..p {
                            let g_row = &g.data()[(nn * p + t) * d_out..(nn * p + t + 1) * d_out];
                            for tap in 0..k {
                                let lag = dilation * tap;
                                if lag > t {
                                    break;
                                }
                                let di_row = &mut di
                                    [(nn * p + t - lag) * d_in..(nn * p + t - lag + 1) * d_in];
                                for (o, &gv) in g_row.iter().enumerate() {
                                    for (c, dv) in di_row.iter_mut().enumerate() {
                                        *dv += gv * wv.data()[(o * d_in + c) * k + tap];
                                    }
                                }
                            }
                        }
                    }
                    let di = Tensor::new(iv.shape().to_vec(), di).expect("conv di");
                    add_grad(grads, *input, &di, iv.shape());
                }
                if self.wants_grad(*weight) {
                    let mut dw = vec![0.0; wv.numel()];
                    for nn in 0..n {
                        for t in 0..p {
                            let g_row = &g.data()[(nn * p + t) * d_out..(nn * p + t + 1) * d_out];
                            for tap in 0..k {
                                let lag = dilation * tap;
                                if lag > t {
                                    break;
                                }
                                let src = &iv.data()
                                    [(nn * p + t - lag) * d_in..(nn * p + t - lag + 1) * d_in];
                                for (o, &gv) in g_row.iter().enumerate() {
                                    for (c, &x) in src.iter().enumerate() {
                                        dw[(o * d_in + c) * k + tap] += gv * x;
                                    }
                                }
                            }
                        }
                    }
                    let dw = Tensor::new(wv.shape().to_vec(), dw).expect("conv dw");
                    add_grad(grads, *weight, &dw, wv.shape());
                }
                if let Some(b) = bias {
                    if self.wants_grad(*b) {
                        let mut db = vec![0.0; d_out];
                        for row in g.data().chunks(d_out) {
                            for (dv, &gv) in db.iter_mut().zip(row) {
                                *dv += gv;
                            }
                        }
                        let db = Tensor::new(vec![d_out], db).expect("conv db");
                        add_grad(grads, *b, &db, &[d_out]);
                    }
                }
            }
            Op::Narrow {
                input,
                axis,
                start,
                len,
            } => {
                if self.wants_grad(*input) {
                    let iv = self.value(*input);
                    let dim = iv.shape()[*axis];
                    let outer: usize = iv.shape()[..*axis].iter().product();
                    let inner: usize = iv.shape()[*axis + 1..].iter().product();
                    let mut di = vec![0.0; iv.numel()];
                    for ou in 0..outer {
                        let src = &g.data()[ou * len * inner..(ou + 1) * len * inner];
                        let base = (ou * dim + start) * inner;
                        di[base..base + len * inner].copy_from_slice(src);
                    }
                    let di = Tensor::new(iv.shape().to_vec(), di).expect("narrow di");
                    add_grad(grads, *input, &di, iv.shape());
                }
            }
            Op::ConcatLast(parts) => {
                let total = *out.shape().last().unwrap();
                let rows = out.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let last = *self.value(p).shape().last().unwrap();
                    if self.wants_grad(p) {
                        let mut dp = Vec::with_capacity(rows * last);
                        for r in 0..rows {
                            let row = &g.data()[r * total + offset..r * total + offset + last];
                            dp.extend_from_slice(row);
                        }
                        let dp =
                            Tensor::new(self.value(p).shape().to_vec(), dp).expect("concat dp");
                        add_grad(grads, p, &dp, self.value(p).shape());
                    }
                    offset += last;
                }
            }
            Op::PermuteLast { input, perm } => {
                if self.wants_grad(*input) {
                    let d = perm.len();
                    let rows = out.numel() / d;
                    let mut di = vec![0.0; out.numel()];
                    for r in 0..rows {
                        let g_row = &g.data()[r * d..(r + 1) * d];
                        let di_row = &mut di[r * d..(r + 1) * d];
                        for (j, &src) in perm.iter().enumerate() {
                            di_row[src] += g_row[j];
                        }
                    }
                    let di = Tensor::new(self.value(*input).shape().to_vec(), di)
                        .expect("permute di");
                    add_grad(grads, *input, &di, self.value(*input).shape());
                }
            }
            Op::Reshape(a) => {
                if self.wants_grad(*a) {
                    let src_shape = self.value(*a).shape().to_vec();
                    let gr = g.clone().reshaped(&src_shape).expect("reshape grad");
                    add_grad(grads, *a, &gr, &src_shape);
                }
            }
            Op::MeanRows(a) => {
                if self.wants_grad(*a) {
                    let av = self.value(*a);
                    let (n, d) = (av.shape()[0], av.shape()[1]);
                    let mut di = vec![0.0; n * d];
                    for row in di.chunks_mut(d) {
                        for (dv, &gv) in row.iter_mut().zip(g.data()) {
                            *dv = gv / n as f64;
                        }
                    }
                    let di = Tensor::new(vec![n, d], di).expect("mean_rows di");
                    add_grad(grads, *a, &di, av.shape());
                }
            }
            Op::MeanAll(a) => {
                if self.wants_grad(*a) {
                    let av = self.value(*a);
                    let gv = g.item() / av.numel() as f64;
                    let di = Tensor::full(av.shape(), gv);
                    add_grad(grads, *a, &di, av.shape());
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let iv = self.value(*input);
                let gv = self.value(*gamma);
                let d = *iv.shape().last().unwrap();
                let rows = iv.numel() / d;
                let mut di = vec![0.0; iv.numel()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let x = &iv.data()[r * d..(r + 1) * d];
                    let go = &g.data()[r * d..(r + 1) * d];
                    let mean = x.iter().sum::<f64>() / d as f64;
                    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * inv
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (x[j] - mean) * inv;
                        let dxhat = go[j] * gv.data()[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[j] += go[j] * xhat;
                        dbeta[j] += go[j];
                    }
                    let di_row = &mut di[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xhat = (x[j] - mean) * inv;
                        let dxhat = go[j] * gv.data()[j];
                        di_row[j] = inv
                            * (dxhat - sum_dxhat / d as f64 - xhat * sum_dxhat_xhat / d as f64);
                    }
                }
                if self.wants_grad(*input) {
                    let di = Tensor::new(iv.shape().to_vec(), di).expect("ln di");
                    add_grad(grads, *input, &di, iv.shape());
                }
                if self.wants_grad(*gamma) {
                    let dg = Tensor::new(vec![d], dgamma).expect("ln dgamma");
                    add_grad(grads, *gamma, &dg, &[d]);
                }
                if self.wants_grad(*beta) {
                    let db = Tensor::new(vec![d], dbeta).expect("ln dbeta");
                    add_grad(grads, *beta, &db, &[d]);
                }
            }
        }
    }

    fn wants_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulates `f(g_i, i)` into the gradient of `target`, reducing
    /// over leading dimensions when `target` was broadcast.
    fn accum_broadcast(
        &self,
        target: Var,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        f: impl Fn(f64, usize) -> f64,
    ) {
        if !self.wants_grad(target) {
            return;
        }
        let tv = self.value(target);
        let tn = tv.numel();
        let mut dt = vec![0.0; tn];
        for (i, &gv) in g.data().iter().enumerate() {
            dt[i % tn] += f(gv, i);
        }
        let dt = Tensor::new(tv.shape().to_vec(), dt).expect("broadcast grad");
        add_grad(grads, target, &dt, tv.shape());
    }

    /// Accumulates an elementwise-transformed copy of `g` (same shape).
    fn accum_map(
        &self,
        target: Var,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        f: impl Fn(f64, usize) -> f64,
    ) {
        if !self.wants_grad(target) {
            return;
        }
        let tv = self.value(target);
        let data = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gv)| f(gv, i))
            .collect();
        let dt = Tensor::new(tv.shape().to_vec(), data).expect("map grad");
        add_grad(grads, target, &dt, tv.shape());
    }
}

fn add_grad(grads: &mut [Option<Tensor>], target: Var, delta: &Tensor, shape: &[usize]) {
    match &mut grads[target.0] {
        Some(acc) => {
            for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        slot => {
            debug_assert_eq!(delta.shape(), shape);
            *slot = Some(delta.clone());
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("map shape")
}

fn transpose2(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose shape")
}

fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Elementwise combine with trailing-suffix broadcasting: the shapes must
/// be equal, or the smaller operand's shape must equal a trailing suffix
/// of the larger's, in which case it is cycled over the leading block.
fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TensorError> {
    let (big, small, small_is_b) = if a.numel() >= b.numel() {
        (a, b, true)
    } else {
        (b, a, false)
    };
    let ok = big.shape().len() >= small.shape().len()
        && big.shape()[big.shape().len() - small.shape().len()..] == *small.shape();
    if !ok {
        return Err(TensorError::NotBroadcastable {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let sn = small.numel().max(1);
    let data = big
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = small.data()[i % sn];
            if small_is_b {
                f(x, y)
            } else {
                f(y, x)
            }
        })
        .collect();
    Tensor::new(big.shape().to_vec(), data)
}
