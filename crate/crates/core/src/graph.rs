//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every recording method validates shapes, runs the forward kernel
//! immediately, and appends a node. `backward` walks the tape in reverse and
//! accumulates gradients, routing parameter gradients into the originating
//! [`ParamStore`]. Repeated backward calls add into the store, matching
//! gradient accumulation across micro-batches.

use crate::error::{CoreError, Result};
use crate::kernels::{self, Axis};
use crate::params::{Init, ParamStore};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Handle to a value recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Exp,
    Ln,
    Neg,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Variable,
    Param(String),
    Unary(Unary, ValueId),
    Binary(Binary, ValueId, ValueId),
    /// a * x + b recorded with only the slope; the offset has no gradient.
    Affine(f64, ValueId),
    /// x * w where w is (n, 1, h, w), broadcast over channels.
    MulBroadcastChannel(ValueId, ValueId),
    /// x + b where b is (1, c, 1, 1), broadcast over batch and space.
    AddBias(ValueId, ValueId),
    /// x * s where s is a (1,1,1,1) graph value.
    ScaleByScalar(ValueId, ValueId),
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
        dilation: usize,
    },
    DepthwiseConv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    TransposeConv2d {
        x: ValueId,
        w: ValueId,
        stride: usize,
    },
    AvgPool2d {
        x: ValueId,
        factor: usize,
    },
    UpsampleNearest2x(ValueId),
    Shift2d {
        x: ValueId,
        dy: isize,
        dx: isize,
    },
    ConcatChannels(Vec<ValueId>),
    SliceChannels {
        x: ValueId,
        start: usize,
        len: usize,
    },
    SumChannels(ValueId),
    SumAll(ValueId),
    /// Masked entries produce zero output, which the backward formula reuses,
    /// so the mask itself is not retained.
    MaskedSoftmaxChannels(ValueId),
    SoftmaxLastDim(ValueId),
    AxialScores {
        q: ValueId,
        k: ValueId,
        axis: Axis,
    },
    AxialApply {
        weights: ValueId,
        v: ValueId,
        axis: Axis,
    },
}

struct Node<T: Scalar> {
    op: Op,
    value: Tensor4<T>,
    requires_grad: bool,
}

/// Recording tape. Build values through the methods below, then call
/// [`Graph::backward`] on a scalar loss.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor4<T>>>,
    /// When set, every recorded value is scanned for non-finite entries.
    pub validate: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            validate: cfg!(debug_assertions),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Finiteness checking of recorded values; on by default in debug
    /// builds. Training loops switch it off and watch the loss instead.
    pub fn set_validate(&mut self, on: bool) {
        self.validate = on;
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor4<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> Shape4 {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `id`, if any.
    pub fn grad(&self, id: ValueId) -> Option<&Tensor4<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, value: Tensor4<T>, requires_grad: bool) -> Result<ValueId> {
        if self.validate {
            value.check_finite("graph op output")?;
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(ValueId(self.nodes.len() - 1))
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── leaves ────────────────────────────────────────────────────────

    /// Untracked input; receives no gradient.
    pub fn constant(&mut self, value: Tensor4<T>) -> Result<ValueId> {
        self.push(Op::Constant, value, false)
    }

    /// Tracked input; its gradient is readable after `backward`.
    pub fn variable(&mut self, value: Tensor4<T>) -> Result<ValueId> {
        self.push(Op::Variable, value, true)
    }

    /// Fetches (or lazily initializes) a named parameter from the store.
    pub fn param(
        &mut self,
        store: &mut ParamStore<T>,
        name: &str,
        shape: Shape4,
        init: Init,
    ) -> Result<ValueId> {
        let value = store.get_or_init(name, shape, init)?.clone();
        self.push(Op::Param(name.to_string()), value, true)
    }

    // ── elementwise ───────────────────────────────────────────────────

    fn binary(&mut self, kind: Binary, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(CoreError::Dimension(format!(
                "elementwise operands differ: {sa} vs {sb}"
            )));
        }
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data: Vec<T> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x.add(y),
                Binary::Sub => x.sub(y),
                Binary::Mul => x.mul(y),
                Binary::Div => x.div(y),
                Binary::Min => x.minimum(y),
            })
            .collect();
        let value = Tensor4::from_parts(sa, data);
        let rg = self.needs(a) || self.needs(b);
        self.push(Op::Binary(kind, a, b), value, rg)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise minimum; gradient follows the smaller operand (ties to the
    /// first).
    pub fn min(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Binary::Min, a, b)
    }

    fn unary(&mut self, kind: Unary, x: ValueId) -> Result<ValueId> {
        let t = &self.nodes[x.0].value;
        let value = t.map(|v| match kind {
            Unary::Relu => {
                if v.to_f64() > 0.0 {
                    v
                } else {
                    T::zero()
                }
            }
            Unary::Gelu => kernels::gelu_scalar(v),
            Unary::Sigmoid => kernels::sigmoid_scalar(v),
            Unary::Exp => v.exp(),
            Unary::Ln => v.ln(),
            Unary::Neg => v.neg(),
            Unary::Softplus => kernels::softplus_scalar(v),
        });
        let rg = self.needs(x);
        self.push(Op::Unary(kind, x), value, rg)
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(Unary::Relu, x)
    }

    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(Unary::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(Unary::Ln, x)
    }

    pub fn neg(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(Unary::Neg, x)
    }

    pub fn softplus(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(Unary::Softplus, x)
    }

    /// a * x + b with plain-number coefficients.
    pub fn affine(&mut self, a: f64, b: f64, x: ValueId) -> Result<ValueId> {
        let (ca, cb) = (T::from_f64(a), T::from_f64(b));
        let value = self.nodes[x.0].value.map(|v| ca.mul(v).add(cb));
        let rg = self.needs(x);
        self.push(Op::Affine(a, x), value, rg)
    }

    /// x * w with w shaped (n, 1, h, w), broadcast across channels of x.
    pub fn mul_broadcast_channel(&mut self, x: ValueId, w: ValueId) -> Result<ValueId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.c != 1 || sw.n != sx.n || sw.h != sx.h || sw.w != sx.w {
            return Err(CoreError::Dimension(format!(
                "broadcast multiplier must be (n,1,h,w) matching {sx}, got {sw}"
            )));
        }
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let mut value = Tensor4::zeros(sx);
        for n in 0..sx.n {
            for c in 0..sx.c {
                for y in 0..sx.h {
                    for xx in 0..sx.w {
                        value.set(n, c, y, xx, tx.at(n, c, y, xx).mul(tw.at(n, 0, y, xx)));
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(w);
        self.push(Op::MulBroadcastChannel(x, w), value, rg)
    }

    /// x + b with b shaped (1, c, 1, 1), broadcast over batch and space.
    pub fn add_bias(&mut self, x: ValueId, b: ValueId) -> Result<ValueId> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.n != 1 || sb.h != 1 || sb.w != 1 || sb.c != sx.c {
            return Err(CoreError::Dimension(format!(
                "bias must be (1,{},1,1), got {sb}",
                sx.c
            )));
        }
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let mut value = Tensor4::zeros(sx);
        for n in 0..sx.n {
            for c in 0..sx.c {
                let bias = tb.at(0, c, 0, 0);
                for y in 0..sx.h {
                    for xx in 0..sx.w {
                        value.set(n, c, y, xx, tx.at(n, c, y, xx).add(bias));
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(b);
        self.push(Op::AddBias(x, b), value, rg)
    }

    /// x scaled by a scalar graph value s of shape (1,1,1,1).
    pub fn scale_by(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        let ss = self.shape(s);
        if ss.len() != 1 {
            return Err(CoreError::Dimension(format!(
                "scale factor must be a scalar value, got {ss}"
            )));
        }
        let factor = self.nodes[s.0].value.at(0, 0, 0, 0);
        let value = self.nodes[x.0].value.map(|v| v.mul(factor));
        let rg = self.needs(x) || self.needs(s);
        self.push(Op::ScaleByScalar(x, s), value, rg)
    }

    // ── convolutions / resampling ─────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<ValueId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.c != sx.c {
            return Err(CoreError::Dimension(format!(
                "conv2d weight expects {} input channels, input has {}",
                sw.c, sx.c
            )));
        }
        if sb.n != 1 || sb.h != 1 || sb.w != 1 || sb.c != sw.n {
            return Err(CoreError::Dimension(format!(
                "conv2d bias must be (1,{},1,1), got {sb}",
                sw.n
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(CoreError::InvalidArgument(
                "conv2d stride and dilation must be positive".into(),
            ));
        }
        let span_h = dilation * (sw.h - 1) + 1;
        let span_w = dilation * (sw.w - 1) + 1;
        if sx.h + 2 * pad < span_h || sx.w + 2 * pad < span_w {
            return Err(CoreError::Dimension(format!(
                "conv2d kernel span {span_h}x{span_w} exceeds padded input {sx}"
            )));
        }
        let value = kernels::conv2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
            dilation,
        );
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                dilation,
            },
            value,
            rg,
        )
    }

    pub fn depthwise_conv2d(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.n != sx.c || sw.c != 1 || sw.h != sw.w || sw.h % 2 == 0 {
            return Err(CoreError::Dimension(format!(
                "depthwise weight must be ({},1,k,k) with odd k, got {sw}",
                sx.c
            )));
        }
        if sb.n != 1 || sb.h != 1 || sb.w != 1 || sb.c != sx.c {
            return Err(CoreError::Dimension(format!(
                "depthwise bias must be (1,{},1,1), got {sb}",
                sx.c
            )));
        }
        let value = kernels::depthwise_conv2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::DepthwiseConv2d { x, w, b }, value, rg)
    }

    pub fn transpose_conv2d(&mut self, x: ValueId, w: ValueId, stride: usize) -> Result<ValueId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.n != sx.c {
            return Err(CoreError::Dimension(format!(
                "transpose conv weight expects {} input channels, input has {}",
                sw.n, sx.c
            )));
        }
        if stride == 0 {
            return Err(CoreError::InvalidArgument(
                "transpose conv stride must be positive".into(),
            ));
        }
        let value =
            kernels::transpose_conv2d_fwd(&self.nodes[x.0].value, &self.nodes[w.0].value, stride);
        let rg = self.needs(x) || self.needs(w);
        self.push(Op::TransposeConv2d { x, w, stride }, value, rg)
    }

    pub fn avg_pool2d(&mut self, x: ValueId, factor: usize) -> Result<ValueId> {
        let sx = self.shape(x);
        if factor == 0 || sx.h % factor != 0 || sx.w % factor != 0 {
            return Err(CoreError::Dimension(format!(
                "avg pool factor {factor} must divide spatial dims of {sx}"
            )));
        }
        let value = kernels::avg_pool2d_fwd(&self.nodes[x.0].value, factor);
        let rg = self.needs(x);
        self.push(Op::AvgPool2d { x, factor }, value, rg)
    }

    pub fn upsample_nearest2x(&mut self, x: ValueId) -> Result<ValueId> {
        let value = kernels::upsample_nearest2x_fwd(&self.nodes[x.0].value);
        let rg = self.needs(x);
        self.push(Op::UpsampleNearest2x(x), value, rg)
    }

    /// out[p] = x[p + (dy, dx)], zero outside bounds.
    pub fn shift2d(&mut self, x: ValueId, dy: isize, dx: isize) -> Result<ValueId> {
        let value = kernels::shift2d_fwd(&self.nodes[x.0].value, dy, dx);
        let rg = self.needs(x);
        self.push(Op::Shift2d { x, dy, dx }, value, rg)
    }

    // ── shape plumbing ────────────────────────────────────────────────

    pub fn concat_channels(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(CoreError::InvalidArgument(
                "concat requires at least one input".into(),
            ));
        }
        let first = self.shape(parts[0]);
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(CoreError::Dimension(format!(
                    "concat operands disagree on (n,h,w): {first} vs {s}"
                )));
            }
            total_c += s.c;
        }
        let out_shape = Shape4::new(first.n, total_c, first.h, first.w);
        let mut value = Tensor4::zeros(out_shape);
        let mut base = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let s = t.shape();
            for n in 0..s.n {
                for c in 0..s.c {
                    for y in 0..s.h {
                        for xx in 0..s.w {
                            value.set(n, base + c, y, xx, t.at(n, c, y, xx));
                        }
                    }
                }
            }
            base += s.c;
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatChannels(parts.to_vec()), value, rg)
    }

    pub fn slice_channels(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let sx = self.shape(x);
        if len == 0 || start + len > sx.c {
            return Err(CoreError::Dimension(format!(
                "slice [{start}, {start}+{len}) out of range for {sx}"
            )));
        }
        let t = &self.nodes[x.0].value;
        let mut value = Tensor4::zeros(Shape4::new(sx.n, len, sx.h, sx.w));
        for n in 0..sx.n {
            for c in 0..len {
                for y in 0..sx.h {
                    for xx in 0..sx.w {
                        value.set(n, c, y, xx, t.at(n, start + c, y, xx));
                    }
                }
            }
        }
        let rg = self.needs(x);
        self.push(Op::SliceChannels { x, start, len }, value, rg)
    }

    // ── reductions ────────────────────────────────────────────────────

    pub fn sum_channels(&mut self, x: ValueId) -> Result<ValueId> {
        let sx = self.shape(x);
        let t = &self.nodes[x.0].value;
        let mut value = Tensor4::zeros(Shape4::new(sx.n, 1, sx.h, sx.w));
        for n in 0..sx.n {
            for y in 0..sx.h {
                for xx in 0..sx.w {
                    let mut acc = T::zero();
                    for c in 0..sx.c {
                        acc = acc.add(t.at(n, c, y, xx));
                    }
                    value.set(n, 0, y, xx, acc);
                }
            }
        }
        let rg = self.needs(x);
        self.push(Op::SumChannels(x), value, rg)
    }

    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        let t = &self.nodes[x.0].value;
        let mut acc = T::zero();
        for &v in t.data() {
            acc = acc.add(v);
        }
        let value = Tensor4::scalar(acc);
        let rg = self.needs(x);
        self.push(Op::SumAll(x), value, rg)
    }

    // ── attention ─────────────────────────────────────────────────────

    /// Channel softmax restricted to positions where `mask` is nonzero.
    /// Masked outputs are exactly zero; the mask itself is a constant.
    pub fn masked_softmax_channels(&mut self, x: ValueId, mask: &Tensor4<f64>) -> Result<ValueId> {
        if self.shape(x) != mask.shape() {
            return Err(CoreError::Dimension(format!(
                "softmax mask shape {} differs from input {}",
                mask.shape(),
                self.shape(x)
            )));
        }
        let mask_t: Tensor4<T> = mask.cast();
        let value = kernels::masked_softmax_channels_fwd(&self.nodes[x.0].value, &mask_t);
        let rg = self.needs(x);
        self.push(Op::MaskedSoftmaxChannels(x), value, rg)
    }

    pub fn softmax_lastdim(&mut self, x: ValueId) -> Result<ValueId> {
        let value = kernels::softmax_lastdim_fwd(&self.nodes[x.0].value);
        let rg = self.needs(x);
        self.push(Op::SoftmaxLastDim(x), value, rg)
    }

    /// Scaled dot-product logits between every query/key pair along one axis.
    pub fn axial_scores(&mut self, q: ValueId, k: ValueId, axis: Axis) -> Result<ValueId> {
        if self.shape(q) != self.shape(k) {
            return Err(CoreError::Dimension(format!(
                "axial q/k shapes differ: {} vs {}",
                self.shape(q),
                self.shape(k)
            )));
        }
        let value = kernels::axial_scores_fwd(&self.nodes[q.0].value, &self.nodes[k.0].value, axis);
        let rg = self.needs(q) || self.needs(k);
        self.push(Op::AxialScores { q, k, axis }, value, rg)
    }

    /// Weighted sum of values using per-query weights along one axis.
    pub fn axial_apply(&mut self, weights: ValueId, v: ValueId, axis: Axis) -> Result<ValueId> {
        let (swt, sv) = (self.shape(weights), self.shape(v));
        let expect_l = match axis {
            Axis::Vertical => sv.h,
            Axis::Horizontal => sv.w,
        };
        if swt.c != expect_l || swt.n != sv.n || swt.h != sv.h || swt.w != sv.w {
            return Err(CoreError::Dimension(format!(
                "axial weights {swt} incompatible with values {sv}"
            )));
        }
        let value =
            kernels::axial_apply_fwd(&self.nodes[weights.0].value, &self.nodes[v.0].value, axis);
        let rg = self.needs(weights) || self.needs(v);
        self.push(Op::AxialApply { weights, v, axis }, value, rg)
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Parameter gradients accumulate into
    /// `store`; gradients for `variable` leaves stay readable via
    /// [`Graph::grad`].
    pub fn backward(&mut self, loss: ValueId, store: &mut ParamStore<T>) -> Result<()> {
        let ls = self.shape(loss);
        if ls.len() != 1 {
            return Err(CoreError::InvalidArgument(format!(
                "backward expects a scalar loss, got {ls}"
            )));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::filled(ls, T::one()));

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g_out = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_backward(idx, &g_out, &mut grads, store)?;
            grads[idx] = Some(g_out);
        }
        if self.validate {
            for (idx, g) in grads.iter().enumerate() {
                if let Some(g) = g {
                    g.check_finite(&format!("gradient of node {idx}"))?;
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor4<T>>],
        id: ValueId,
        delta: Tensor4<T>,
    ) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                let data: Vec<T> = existing
                    .data()
                    .iter()
                    .zip(delta.data())
                    .map(|(&a, &b)| a.add(b))
                    .collect();
                *existing = Tensor4::from_parts(existing.shape(), data);
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_backward(
        &self,
        idx: usize,
        g_out: &Tensor4<T>,
        grads: &mut [Option<Tensor4<T>>],
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Constant | Op::Variable => {}
            Op::Param(name) => {
                store.accumulate_grad(&name, g_out)?;
            }
            Op::Unary(kind, x) => {
                let tx = &self.nodes[x.0].value;
                let out = &self.nodes[idx].value;
                let data: Vec<T> = tx
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g_out.data())
                    .map(|((&xv, &ov), &g)| {
                        let d = match kind {
                            Unary::Relu => {
                                if xv.to_f64() > 0.0 {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Gelu => kernels::gelu_grad_scalar(xv),
                            Unary::Sigmoid => ov.mul(T::one().sub(ov)),
                            Unary::Exp => ov,
                            Unary::Ln => T::one().div(xv),
                            Unary::Neg => T::one().neg(),
                            Unary::Softplus => kernels::sigmoid_scalar(xv),
                        };
                        g.mul(d)
                    })
                    .collect();
                self.accumulate(grads, x, Tensor4::from_parts(tx.shape(), data));
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.needs(a) {
                    let data: Vec<T> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .zip(g_out.data())
                        .map(|((&av, &bv), &g)| match kind {
                            Binary::Add | Binary::Sub => g,
                            Binary::Mul => g.mul(bv),
                            Binary::Div => g.div(bv),
                            Binary::Min => {
                                if av.to_f64() <= bv.to_f64() {
                                    g
                                } else {
                                    T::zero()
                                }
                            }
                        })
                        .collect();
                    self.accumulate(grads, a, Tensor4::from_parts(ta.shape(), data));
                }
                if self.needs(b) {
                    let data: Vec<T> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .zip(g_out.data())
                        .map(|((&av, &bv), &g)| match kind {
                            Binary::Add => g,
                            Binary::Sub => g.neg(),
                            Binary::Mul => g.mul(av),
                            Binary::Div => g.neg().mul(av).div(bv.mul(bv)),
                            Binary::Min => {
                                if av.to_f64() <= bv.to_f64() {
                                    T::zero()
                                } else {
                                    g
                                }
                            }
                        })
                        .collect();
                    self.accumulate(grads, b, Tensor4::from_parts(tb.shape(), data));
                }
            }
            Op::Affine(a, x) => {
                let ca = T::from_f64(a);
                let data: Vec<T> = g_out.data().iter().map(|&g| g.mul(ca)).collect();
                self.accumulate(grads, x, Tensor4::from_parts(g_out.shape(), data));
            }
            Op::MulBroadcastChannel(x, w) => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let s = tx.shape();
                if self.needs(x) {
                    let mut gx = Tensor4::zeros(s);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            for y in 0..s.h {
                                for xx in 0..s.w {
                                    gx.set(
                                        n,
                                        c,
                                        y,
                                        xx,
                                        g_out.at(n, c, y, xx).mul(tw.at(n, 0, y, xx)),
                                    );
                                }
                            }
                        }
                    }
                    self.accumulate(grads, x, gx);
                }
                if self.needs(w) {
                    let mut gw = Tensor4::zeros(tw.shape());
                    for n in 0..s.n {
                        for y in 0..s.h {
                            for xx in 0..s.w {
                                let mut acc = T::zero();
                                for c in 0..s.c {
                                    acc = acc.add(g_out.at(n, c, y, xx).mul(tx.at(n, c, y, xx)));
                                }
                                gw.set(n, 0, y, xx, acc);
                            }
                        }
                    }
                    self.accumulate(grads, w, gw);
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(x) {
                    self.accumulate(grads, x, g_out.clone());
                }
                if self.needs(b) {
                    let s = g_out.shape();
                    let mut gb: Tensor4<T> = Tensor4::zeros(self.nodes[b.0].value.shape());
                    for n in 0..s.n {
                        for c in 0..s.c {
                            for y in 0..s.h {
                                for xx in 0..s.w {
                                    let v = gb.at(0, c, 0, 0).add(g_out.at(n, c, y, xx));
                                    gb.set(0, c, 0, 0, v);
                                }
                            }
                        }
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            Op::ScaleByScalar(x, s) => {
                let (tx, ts) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
                let factor = ts.at(0, 0, 0, 0);
                if self.needs(x) {
                    let data: Vec<T> = g_out.data().iter().map(|&g| g.mul(factor)).collect();
                    self.accumulate(grads, x, Tensor4::from_parts(tx.shape(), data));
                }
                if self.needs(s) {
                    let mut acc = T::zero();
                    for (&g, &xv) in g_out.data().iter().zip(tx.data()) {
                        acc = acc.add(g.mul(xv));
                    }
                    self.accumulate(grads, s, Tensor4::scalar(acc));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                dilation,
            } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let mut gx = Tensor4::zeros(tx.shape());
                let mut gw = Tensor4::zeros(tw.shape());
                let mut gb = Tensor4::zeros(self.nodes[b.0].value.shape());
                kernels::conv2d_bwd(tx, tw, g_out, stride, pad, dilation, &mut gx, &mut gw, &mut gb);
                self.accumulate(grads, x, gx);
                self.accumulate(grads, w, gw);
                self.accumulate(grads, b, gb);
            }
            Op::DepthwiseConv2d { x, w, b } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let mut gx = Tensor4::zeros(tx.shape());
                let mut gw = Tensor4::zeros(tw.shape());
                let mut gb = Tensor4::zeros(self.nodes[b.0].value.shape());
                kernels::depthwise_conv2d_bwd(tx, tw, g_out, &mut gx, &mut gw, &mut gb);
                self.accumulate(grads, x, gx);
                self.accumulate(grads, w, gw);
                self.accumulate(grads, b, gb);
            }
            Op::TransposeConv2d { x, w, stride } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let mut gx = Tensor4::zeros(tx.shape());
                let mut gw = Tensor4::zeros(tw.shape());
                kernels::transpose_conv2d_bwd(tx, tw, g_out, stride, &mut gx, &mut gw);
                self.accumulate(grads, x, gx);
                self.accumulate(grads, w, gw);
            }
            Op::AvgPool2d { x, factor } => {
                let mut gx = Tensor4::zeros(self.nodes[x.0].value.shape());
                kernels::avg_pool2d_bwd(g_out, factor, &mut gx);
                self.accumulate(grads, x, gx);
            }
            Op::UpsampleNearest2x(x) => {
                let mut gx = Tensor4::zeros(self.nodes[x.0].value.shape());
                kernels::upsample_nearest2x_bwd(g_out, &mut gx);
                self.accumulate(grads, x, gx);
            }
            Op::Shift2d { x, dy, dx } => {
                // adjoint of a shift is the opposite shift
                let gx = kernels::shift2d_fwd(g_out, -dy, -dx);
                self.accumulate(grads, x, gx);
            }
            Op::ConcatChannels(parts) => {
                let mut base = 0;
                for p in parts {
                    let sp = self.nodes[p.0].value.shape();
                    if self.needs(p) {
                        let mut gp = Tensor4::zeros(sp);
                        for n in 0..sp.n {
                            for c in 0..sp.c {
                                for y in 0..sp.h {
                                    for xx in 0..sp.w {
                                        gp.set(n, c, y, xx, g_out.at(n, base + c, y, xx));
                                    }
                                }
                            }
                        }
                        self.accumulate(grads, p, gp);
                    }
                    base += sp.c;
                }
            }
            Op::SliceChannels { x, start, len } => {
                let sx = self.nodes[x.0].value.shape();
                let mut gx = Tensor4::zeros(sx);
                for n in 0..sx.n {
                    for c in 0..len {
                        for y in 0..sx.h {
                            for xx in 0..sx.w {
                                gx.set(n, start + c, y, xx, g_out.at(n, c, y, xx));
                            }
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::SumChannels(x) => {
                let sx = self.nodes[x.0].value.shape();
                let mut gx = Tensor4::zeros(sx);
                for n in 0..sx.n {
                    for c in 0..sx.c {
                        for y in 0..sx.h {
                            for xx in 0..sx.w {
                                gx.set(n, c, y, xx, g_out.at(n, 0, y, xx));
                            }
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::SumAll(x) => {
                let sx = self.nodes[x.0].value.shape();
                let g = g_out.at(0, 0, 0, 0);
                self.accumulate(grads, x, Tensor4::filled(sx, g));
            }
            Op::MaskedSoftmaxChannels(x) => {
                let out = &self.nodes[idx].value;
                let mut gx = Tensor4::zeros(out.shape());
                kernels::masked_softmax_channels_bwd(out, g_out, &mut gx);
                self.accumulate(grads, x, gx);
            }
            Op::SoftmaxLastDim(x) => {
                let out = &self.nodes[idx].value;
                let mut gx = Tensor4::zeros(out.shape());
                kernels::softmax_lastdim_bwd(out, g_out, &mut gx);
                self.accumulate(grads, x, gx);
            }
            Op::AxialScores { q, k, axis } => {
                let (tq, tk) = (&self.nodes[q.0].value, &self.nodes[k.0].value);
                let mut gq = Tensor4::zeros(tq.shape());
                let mut gk = Tensor4::zeros(tk.shape());
                kernels::axial_scores_bwd(tq, tk, g_out, axis, &mut gq, &mut gk);
                self.accumulate(grads, q, gq);
                self.accumulate(grads, k, gk);
            }
            Op::AxialApply { weights, v, axis } => {
                let (twt, tv) = (&self.nodes[weights.0].value, &self.nodes[v.0].value);
                let mut gw = Tensor4::zeros(twt.shape());
                let mut gv = Tensor4::zeros(tv.shape());
                kernels::axial_apply_bwd(twt, tv, g_out, axis, &mut gw, &mut gv);
                self.accumulate(grads, weights, gw);
                self.accumulate(grads, v, gv);
            }
        }
        Ok(())
    }
}
