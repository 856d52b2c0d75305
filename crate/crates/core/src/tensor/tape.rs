//! Wengert tape: primitive ops recorded in execution order, replayed in
//! reverse for gradients.
//!
//! A [`Tape`] is confined to one thread and owns every intermediate of one
//! forward pass. [`Var`] is an index into the tape arena. Ops validate shapes
//! up front and reject non-finite outputs; `backward` accumulates gradients
//! into each requires-grad node (repeated calls without `reset_grads`
//! accumulate further).

use super::shape::{broadcast_shapes, reduce_to_shape, strides_for, BroadcastIter};
use super::{Result, Tensor, TensorError};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Sqrt(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Matmul(Var, Var),
    /// Valid sliding-window cross-correlation along the last axis.
    CrossCorr(Var, Var),
    SumAll(Var),
    SumAxis(Var, usize),
    /// L2 norm along `axis`, keepdim; subgradient 0 where the norm is 0.
    L2NormAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice { input: Var, axis: usize, start: usize },
    Concat(Vec<Var>, usize),
    Expand(Var),
    OverlapAdd { input: Var, hop: usize, window: Vec<f64>, envelope: Vec<f64>, out_len: usize },
    SegmentChunks { input: Var, hop: usize },
    MergeChunks { input: Var, hop: usize, counts: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recording tape for reverse-mode AD over f64 tensors.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, op: &'static str, node: Node) -> Result<Var> {
        if !node.value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.nodes.push(node);
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::DetachedVar)
        }
    }

    /// Record an input tensor that does not need gradients.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t.clone(), requires_grad: false });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf that participates in gradient computation.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t.clone(), requires_grad: true });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(&Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ── Elementwise binary (broadcasting) ────────────────────────────

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shapes(op_name, ta.shape(), tb.shape())?;
        let mut data = Vec::with_capacity(out_shape.iter().product());
        if ta.shape() == tb.shape() {
            data.extend(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
        } else {
            let (da, db) = (ta.data(), tb.data());
            data.extend(BroadcastIter::new(&out_shape, ta.shape(), tb.shape()).map(|(ia, ib)| f(da[ia], db[ib])));
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(op_name, Node { op, value: Tensor::new(out_shape, data)?, requires_grad: rg })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, op_name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(op_name, Node { op, value, requires_grad: rg })
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    /// `max(x, c)` with zero gradient in the clamped region.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("clamp_min", a, |x| x.max(c), Op::ClampMin(a, c))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// 2-D matrix product: `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push("matmul", Node { op: Op::Matmul(a, b), value: Tensor::new(vec![m, n], out)?, requires_grad: rg })
    }

    /// Valid cross-correlation along the last axis: for each leading index,
    /// `out[j] = sum_k a[j + k] * b[k]` with `j = 0 .. len(a) - len(b)`.
    /// Leading dims of `a` and `b` must match.
    pub fn cross_corr(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.is_empty() || sb.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] || sa.len() != sb.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_corr",
                detail: format!("leading dims must match: {:?} vs {:?}", sa, sb),
            });
        }
        let ls = sa[sa.len() - 1];
        let lk = sb[sb.len() - 1];
        if lk > ls {
            return Err(TensorError::ShapeMismatch {
                op: "cross_corr",
                detail: format!("kernel length {} exceeds signal length {}", lk, ls),
            });
        }
        let lo = ls - lk + 1;
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut out = vec![0.0; rows * lo];
        let (da, db) = (ta.data(), tb.data());
        for r in 0..rows {
            let arow = &da[r * ls..(r + 1) * ls];
            let brow = &db[r * lk..(r + 1) * lk];
            let orow = &mut out[r * lo..(r + 1) * lo];
            for (j, o) in orow.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &bk) in brow.iter().enumerate() {
                    acc += arow[j + k] * bk;
                }
                *o = acc;
            }
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(lo);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push("cross_corr", Node { op: Op::CrossCorr(a, b), value: Tensor::new(out_shape, out)?, requires_grad: rg })
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push("sum_all", Node { op: Op::SumAll(a), value: Tensor::scalar(s), requires_grad: rg })
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "sum_axis",
                detail: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let data = ta.data();
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                let orow = &mut out[o * inner..(o + 1) * inner];
                for (i, v) in orow.iter_mut().enumerate() {
                    *v += data[base + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            "sum_axis",
            Node { op: Op::SumAxis(a, axis), value: Tensor::new(out_shape, out)?, requires_grad: rg },
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let dim = self.nodes[a.0].value.shape()[axis];
        let s = self.sum_axis(a, axis, keepdim)?;
        self.scale(s, 1.0 / dim as f64)
    }

    /// L2 norm along `axis` (keepdim). Gradient is `x / norm`, defined as 0
    /// where the norm is exactly 0 (subgradient choice for silence frames).
    pub fn l2_norm_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "l2_norm_axis",
                detail: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let data = ta.data();
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                let orow = &mut out[o * inner..(o + 1) * inner];
                for (i, v) in orow.iter_mut().enumerate() {
                    let x = data[base + i];
                    *v += x * x;
                }
            }
        }
        for v in &mut out {
            *v = v.sqrt();
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            "l2_norm_axis",
            Node { op: Op::L2NormAxis(a, axis), value: Tensor::new(out_shape, out)?, requires_grad: rg },
        )
    }

    // ── Shape movement ───────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push("reshape", Node { op: Op::Reshape(a), value, requires_grad: rg })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                detail: format!("axes {:?} is not a permutation of 0..{}", axes, rank),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let data = permute_data(ta.data(), shape, axes);
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            "permute",
            Node { op: Op::Permute(a, axes.to_vec()), value: Tensor::new(out_shape, data)?, requires_grad: rg },
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                detail: format!("slice [{start}, {}) on axis {axis} of shape {:?}", start + len, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = ta.data();
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            "slice",
            Node { op: Op::Slice { input: a, axis, start }, value: Tensor::new(out_shape, data)?, requires_grad: rg },
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument { op: "concat", detail: "no inputs".into() });
        }
        for &p in parts {
            self.check(p)?;
        }
        let first_shape = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first_shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                detail: format!("axis {} out of range for shape {:?}", axis, first_shape),
            });
        }
        let mut cat_dim = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first_shape.len()
                || s.iter().zip(&first_shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} incompatible with {:?} on axis {}", s, first_shape, axis),
                });
            }
            cat_dim += s[axis];
        }
        let outer: usize = first_shape[..axis].iter().product();
        let inner: usize = first_shape[axis + 1..].iter().product();
        let mut out_shape = first_shape.clone();
        out_shape[axis] = cat_dim;
        let mut data = vec![0.0; outer * cat_dim * inner];
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let d = t.shape()[axis];
            let src = t.data();
            for o in 0..outer {
                let dst = (o * cat_dim + offset) * inner;
                let sb = o * d * inner;
                data[dst..dst + d * inner].copy_from_slice(&src[sb..sb + d * inner]);
            }
            offset += d;
        }
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        self.push(
            "concat",
            Node { op: Op::Concat(parts.to_vec(), axis), value: Tensor::new(out_shape, data)?, requires_grad: rg },
        )
    }

    /// Broadcast size-1 axes of `a` up to `shape` (ranks must match).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let own = ta.shape();
        if own.len() != shape.len() || own.iter().zip(shape).any(|(&o, &t)| o != t && o != 1) {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                detail: format!("cannot expand {:?} to {:?}", own, shape),
            });
        }
        let data: Vec<f64> = {
            let d = ta.data();
            BroadcastIter::new(shape, own, own).map(|(ia, _)| d[ia]).collect()
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push("expand", Node { op: Op::Expand(a), value: Tensor::new(shape.to_vec(), data)?, requires_grad: rg })
    }

    // ── Framing scatter ops ──────────────────────────────────────────

    /// Windowed overlap-add of frames `[T, L]` at the given hop, divided by
    /// the summed window envelope and truncated to `out_len`. Errors when the
    /// envelope falls below 1e-8 inside the output extent (COLA failure).
    pub fn overlap_add(&mut self, frames: Var, hop: usize, window: &[f64], out_len: usize) -> Result<Var> {
        self.check(frames)?;
        let tf = &self.nodes[frames.0].value;
        let shape = tf.shape();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "overlap_add",
                detail: format!("expected [frames, frame_len], got {:?}", shape),
            });
        }
        let (t_frames, frame_len) = (shape[0], shape[1]);
        if window.len() != frame_len {
            return Err(TensorError::ShapeMismatch {
                op: "overlap_add",
                detail: format!("window length {} != frame length {}", window.len(), frame_len),
            });
        }
        if hop == 0 {
            return Err(TensorError::InvalidArgument { op: "overlap_add", detail: "hop must be positive".into() });
        }
        let full = (t_frames - 1) * hop + frame_len;
        if out_len > full {
            return Err(TensorError::InvalidArgument {
                op: "overlap_add",
                detail: format!("out_len {} exceeds frame coverage {}", out_len, full),
            });
        }
        let mut envelope = vec![0.0; full];
        for t in 0..t_frames {
            for (i, &w) in window.iter().enumerate() {
                envelope[t * hop + i] += w;
            }
        }
        if envelope[..out_len].iter().any(|&e| e < 1e-8) {
            return Err(TensorError::InvalidArgument {
                op: "overlap_add",
                detail: "window envelope below 1e-8 inside the output extent (COLA failure)".into(),
            });
        }
        let mut acc = vec![0.0; full];
        let data = tf.data();
        for t in 0..t_frames {
            let frame = &data[t * frame_len..(t + 1) * frame_len];
            for (i, (&x, &w)) in frame.iter().zip(window).enumerate() {
                acc[t * hop + i] += x * w;
            }
        }
        let out: Vec<f64> = (0..out_len).map(|n| acc[n] / envelope[n]).collect();
        let rg = self.nodes[frames.0].requires_grad;
        self.push(
            "overlap_add",
            Node {
                op: Op::OverlapAdd { input: frames, hop, window: window.to_vec(), envelope, out_len },
                value: Tensor::new(vec![out_len], out)?,
                requires_grad: rg,
            },
        )
    }

    /// Split `[B, T, D]` into 50%-style overlapped chunks `[B, K, S, D]`
    /// (`S` = chunk_len, stride `hop`), zero-padding the tail.
    pub fn segment_chunks(&mut self, a: Var, chunk_len: usize, hop: usize) -> Result<Var> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "segment_chunks",
                detail: format!("expected [batch, time, dim], got {:?}", shape),
            });
        }
        if chunk_len < 2 || hop == 0 || hop > chunk_len {
            return Err(TensorError::InvalidArgument {
                op: "segment_chunks",
                detail: format!("chunk_len {} / hop {}", chunk_len, hop),
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        // Enough chunks that every time step is covered and the tail is padded.
        let k = if t <= chunk_len { 2 } else { (t - chunk_len + hop - 1) / hop + 1 };
        let mut out = vec![0.0; b * k * chunk_len * d];
        let src = ta.data();
        for bi in 0..b {
            for ki in 0..k {
                for s in 0..chunk_len {
                    let ti = ki * hop + s;
                    if ti < t {
                        let dst = ((bi * k + ki) * chunk_len + s) * d;
                        let sb = (bi * t + ti) * d;
                        out[dst..dst + d].copy_from_slice(&src[sb..sb + d]);
                    }
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            "segment_chunks",
            Node {
                op: Op::SegmentChunks { input: a, hop },
                value: Tensor::new(vec![b, k, chunk_len, d], out)?,
                requires_grad: rg,
            },
        )
    }

    /// Inverse of [`segment_chunks`]: average overlapping positions back to
    /// `[B, out_t, D]`.
    pub fn merge_chunks(&mut self, a: Var, hop: usize, out_t: usize) -> Result<Var> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "merge_chunks",
                detail: format!("expected [batch, chunks, chunk_len, dim], got {:?}", shape),
            });
        }
        let (b, k, s, d) = (shape[0], shape[1], shape[2], shape[3]);
        let full = (k - 1) * hop + s;
        if out_t > full {
            return Err(TensorError::InvalidArgument {
                op: "merge_chunks",
                detail: format!("out_t {} exceeds chunk coverage {}", out_t, full),
            });
        }
        let mut counts = vec![0.0; full];
        for ki in 0..k {
            for si in 0..s {
                counts[ki * hop + si] += 1.0;
            }
        }
        let mut out = vec![0.0; b * out_t * d];
        let src = ta.data();
        for bi in 0..b {
            for ki in 0..k {
                for si in 0..s {
                    let ti = ki * hop + si;
                    if ti < out_t {
                        let sb = ((bi * k + ki) * s + si) * d;
                        let dst = (bi * out_t + ti) * d;
                        let c = counts[ti];
                        for x in 0..d {
                            out[dst + x] += src[sb + x] / c;
                        }
                    }
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            "merge_chunks",
            Node {
                op: Op::MergeChunks { input: a, hop, counts },
                value: Tensor::new(vec![b, out_t, d], out)?,
                requires_grad: rg,
            },
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every requires-grad node reachable
    /// from `loss` receives its gradient contribution exactly once per
    /// consuming op; repeated calls accumulate on top of existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        // Local downstream gradients for this sweep; merged into self.grads at
        // the end so repeated backward calls accumulate.
        let mut down: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        down[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = down[id].take() else { continue };
            self.backward_op(id, &g, &mut down);
            match &mut self.grads[id] {
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        *a += gi;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backward_op(&self, id: usize, g: &[f64], down: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape_of = |v: Var| self.nodes[v.0].value.shape();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut down[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let os = node.value.shape();
                if needs(*a) {
                    send(*a, reduce_to_shape(g, os, shape_of(*a)));
                }
                if needs(*b) {
                    send(*b, reduce_to_shape(g, os, shape_of(*b)));
                }
            }
            Op::Sub(a, b) => {
                let os = node.value.shape();
                if needs(*a) {
                    send(*a, reduce_to_shape(g, os, shape_of(*a)));
                }
                if needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    send(*b, reduce_to_shape(&neg, os, shape_of(*b)));
                }
            }
            Op::Mul(a, b) => {
                let os = node.value.shape();
                let (da, db) = (val(*a), val(*b));
                let (sa, sb) = (shape_of(*a), shape_of(*b));
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for (i, (ia, ib)) in BroadcastIter::new(os, sa, sb).enumerate() {
                    ga[ia] += g[i] * db[ib];
                    gb[ib] += g[i] * da[ia];
                }
                if needs(*a) {
                    send(*a, ga);
                }
                if needs(*b) {
                    send(*b, gb);
                }
            }
            Op::Div(a, b) => {
                let os = node.value.shape();
                let (da, db) = (val(*a), val(*b));
                let (sa, sb) = (shape_of(*a), shape_of(*b));
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for (i, (ia, ib)) in BroadcastIter::new(os, sa, sb).enumerate() {
                    let inv = 1.0 / db[ib];
                    ga[ia] += g[i] * inv;
                    gb[ib] -= g[i] * da[ia] * inv * inv;
                }
                if needs(*a) {
                    send(*a, ga);
                }
                if needs(*b) {
                    send(*b, gb);
                }
            }
            Op::Neg(a) => send(*a, g.iter().map(|x| -x).collect()),
            Op::Tanh(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect());
            }
            Op::Ln(a) => {
                let x = val(*a);
                send(*a, g.iter().zip(x).map(|(gi, xi)| gi / xi).collect());
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                // Subgradient 0 at x = 0, matching the L2-norm convention.
                send(*a, g.iter().zip(y).map(|(gi, yi)| if *yi > 0.0 { gi / (2.0 * yi) } else { 0.0 }).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| c * x).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::ClampMin(a, c) => {
                let x = val(*a);
                send(*a, g.iter().zip(x).map(|(gi, xi)| if xi > c { *gi } else { 0.0 }).collect());
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (shape_of(*a), shape_of(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt(g, val(*b), &mut ga, m, n, k);
                    send(*a, ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn(val(*a), g, &mut gb, m, k, n);
                    send(*b, gb);
                }
            }
            Op::CrossCorr(a, b) => {
                let (sa, sb) = (shape_of(*a), shape_of(*b));
                let ls = sa[sa.len() - 1];
                let lk = sb[sb.len() - 1];
                let lo = ls - lk + 1;
                let rows: usize = sa[..sa.len() - 1].iter().product();
                let (da, db) = (val(*a), val(*b));
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for r in 0..rows {
                    let arow = &da[r * ls..(r + 1) * ls];
                    let brow = &db[r * lk..(r + 1) * lk];
                    let grow = &g[r * lo..(r + 1) * lo];
                    let garow = &mut ga[r * ls..(r + 1) * ls];
                    for (j, &gj) in grow.iter().enumerate() {
                        for (k, &bk) in brow.iter().enumerate() {
                            garow[j + k] += gj * bk;
                        }
                    }
                    let gbrow = &mut gb[r * lk..(r + 1) * lk];
                    for (k, gk) in gbrow.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (j, &gj) in grow.iter().enumerate() {
                            acc += gj * arow[j + k];
                        }
                        *gk += acc;
                    }
                }
                if needs(*a) {
                    send(*a, ga);
                }
                if needs(*b) {
                    send(*b, gb);
                }
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].value.numel();
                send(*a, vec![g[0]; n]);
            }
            Op::SumAxis(a, axis) => {
                let sa = shape_of(*a);
                let outer: usize = sa[..*axis].iter().product();
                let dim = sa[*axis];
                let inner: usize = sa[*axis + 1..].iter().product();
                let mut ga = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        let base = (o * dim + d) * inner;
                        for i in 0..inner {
                            ga[base + i] = g[o * inner + i];
                        }
                    }
                }
                send(*a, ga);
            }
            Op::L2NormAxis(a, axis) => {
                let sa = shape_of(*a);
                let outer: usize = sa[..*axis].iter().product();
                let dim = sa[*axis];
                let inner: usize = sa[*axis + 1..].iter().product();
                let x = val(*a);
                let y = node.value.data();
                let mut ga = vec![0.0; x.len()];
                for o in 0..outer {
                    for d in 0..dim {
                        let base = (o * dim + d) * inner;
                        for i in 0..inner {
                            let norm = y[o * inner + i];
                            if norm > 0.0 {
                                ga[base + i] = g[o * inner + i] * x[base + i] / norm;
                            }
                        }
                    }
                }
                send(*a, ga);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Permute(a, axes) => {
                // Gradient of permute is the inverse permutation.
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                send(*a, permute_data(g, node.value.shape(), &inv));
            }
            Op::Slice { input, axis, start } => {
                let sa = shape_of(*input);
                let os = node.value.shape();
                let outer: usize = sa[..*axis].iter().product();
                let dim = sa[*axis];
                let len = os[*axis];
                let inner: usize = sa[*axis + 1..].iter().product();
                let mut ga = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                send(*input, ga);
            }
            Op::Concat(parts, axis) => {
                let os = node.value.shape();
                let outer: usize = os[..*axis].iter().product();
                let cat_dim = os[*axis];
                let inner: usize = os[*axis + 1..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let d = shape_of(p)[*axis];
                    if needs(p) {
                        let mut gp = vec![0.0; outer * d * inner];
                        for o in 0..outer {
                            let src = (o * cat_dim + offset) * inner;
                            let dst = o * d * inner;
                            gp[dst..dst + d * inner].copy_from_slice(&g[src..src + d * inner]);
                        }
                        send(p, gp);
                    }
                    offset += d;
                }
            }
            Op::Expand(a) => {
                send(*a, reduce_to_shape(g, node.value.shape(), shape_of(*a)));
            }
            Op::OverlapAdd { input, hop, window, envelope, out_len } => {
                let sa = shape_of(*input);
                let (t_frames, frame_len) = (sa[0], sa[1]);
                let mut ga = vec![0.0; t_frames * frame_len];
                for t in 0..t_frames {
                    for i in 0..frame_len {
                        let n = t * hop + i;
                        if n < *out_len {
                            ga[t * frame_len + i] = g[n] * window[i] / envelope[n];
                        }
                    }
                }
                send(*input, ga);
            }
            Op::SegmentChunks { input, hop } => {
                let sa = shape_of(*input);
                let (b, t, d) = (sa[0], sa[1], sa[2]);
                let os = node.value.shape();
                let (k, s) = (os[1], os[2]);
                let mut ga = vec![0.0; b * t * d];
                for bi in 0..b {
                    for ki in 0..k {
                        for si in 0..s {
                            let ti = ki * hop + si;
                            if ti < t {
                                let src = ((bi * k + ki) * s + si) * d;
                                let dst = (bi * t + ti) * d;
                                for x in 0..d {
                                    ga[dst + x] += g[src + x];
                                }
                            }
                        }
                    }
                }
                send(*input, ga);
            }
            Op::MergeChunks { input, hop, counts } => {
                let sa = shape_of(*input);
                let (b, k, s, d) = (sa[0], sa[1], sa[2], sa[3]);
                let out_t = node.value.shape()[1];
                let mut ga = vec![0.0; b * k * s * d];
                for bi in 0..b {
                    for ki in 0..k {
                        for si in 0..s {
                            let ti = ki * hop + si;
                            if ti < out_t {
                                let dst = ((bi * k + ki) * s + si) * d;
                                let src = (bi * out_t + ti) * d;
                                let c = counts[ti];
                                for x in 0..d {
                                    ga[dst + x] = g[src + x] / c;
                                }
                            }
                        }
                    }
                }
                send(*input, ga);
            }
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

/// out += a @ b, a: [m,k], b: [k,n]
fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out += a @ b^T, a: [m,n], b: [k,n] -> out [m,k]
fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out += a^T @ b, a: [m,k], b: [m,n] -> out [k,n]
fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let in_strides = strides_for(shape);
    let moved: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0; numel];
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for o in out.iter_mut() {
        *o = src[src_off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src_off += moved[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src_off -= moved[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_mul_matches_definition() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let b = tape.leaf(&Tensor::from_vec(vec![4.0, 5.0, 6.0]));
        let c = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, 5);
        let i = tape.leaf(&eye);
        let m = tape.leaf(&a);
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), a.data());
    }

    #[test]
    fn cross_corr_valid_length_law() {
        // (L + 2W) - (2W + 1) + 1 = L for the beamforming shapes.
        let mut tape = Tape::new();
        let sig = tape.leaf(&Tensor::rand_uniform(&[1, 513], -1.0, 1.0, 1));
        let ker = tape.leaf(&Tensor::rand_uniform(&[1, 513], -1.0, 1.0, 2));
        let out = tape.cross_corr(sig, ker).unwrap();
        assert_eq!(tape.shape(out), &[1, 1]);

        let mut tape = Tape::new();
        let sig = tape.leaf(&Tensor::rand_uniform(&[2, 768], -1.0, 1.0, 1));
        let ker = tape.leaf(&Tensor::rand_uniform(&[2, 513], -1.0, 1.0, 2));
        let out = tape.cross_corr(sig, ker).unwrap();
        assert_eq!(tape.shape(out), &[2, 256]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::rand_uniform(&[5], -1.0, 1.0, 3));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let mut tape = Tape::new();
        let xt = Tensor::from_vec(vec![1.5, -2.0, 0.25]);
        let x = tape.param(&xt);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        for (gi, xi) in g.data().iter().zip(xt.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![2.0]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
        tape.reset_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_output_is_rejected_with_op_name() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![-1.0]));
        let err = tape.ln(x).unwrap_err();
        match err {
            TensorError::NonFinite { op } => assert_eq!(op, "ln"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "got: {msg}");
    }

    #[test]
    fn broadcasting_add_bias() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2, 3]));
        let b = tape.param(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut tape = Tape::new();
        let t = Tensor::rand_uniform(&[2, 6], -1.0, 1.0, 11);
        let x = tape.leaf(&t);
        let a = tape.slice(x, 1, 0, 2).unwrap();
        let b = tape.slice(x, 1, 2, 4).unwrap();
        let back = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(back).data(), t.data());
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let t = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, 13);
        let x = tape.leaf(&t);
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), t.data());
    }

    #[test]
    fn segment_merge_round_trip() {
        let mut tape = Tape::new();
        let t = Tensor::rand_uniform(&[2, 10, 3], -1.0, 1.0, 17);
        let x = tape.leaf(&t);
        let seg = tape.segment_chunks(x, 4, 2).unwrap();
        let back = tape.merge_chunks(seg, 2, 10).unwrap();
        let out = tape.value(back).data();
        for (o, e) in out.iter().zip(t.data()) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_norm_zero_vector_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[1, 4]));
        let n = tape.l2_norm_axis(x, 1).unwrap();
        assert_eq!(tape.value(n).data(), &[0.0]);
        let s = tape.sum_all(n).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0; 4]);
    }
}
