//! Wengert-list reverse-mode autodiff.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes, each
//! holding its value and the op that produced it. [`Tape::backward`] seeds a
//! scalar loss with 1 and walks the list in reverse, accumulating cotangents
//! into every node that (transitively) depends on a gradient-requiring leaf.
//! Tapes are single-use: build, run backward, drop.

use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use super::DiffError;
use crate::math::Csr;
use crate::Real;

/// Handle to a node on a tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ValId(u32);

impl ValId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Sparse matrix captured by value, with its transpose for the backward pass.
#[derive(Clone)]
pub struct CsrPair {
    pub fwd: Csr,
    pub bwd: Csr,
}

impl CsrPair {
    pub fn new(m: Csr) -> Arc<CsrPair> {
        let bwd = m.transpose();
        Arc::new(CsrPair { fwd: m, bwd })
    }
}

/// Differentiable ops. Payloads captured by value are constants of the graph.
pub enum Op {
    Leaf,
    StopGrad(ValId),
    Reshape(ValId),
    Add(ValId, ValId),
    Sub(ValId, ValId),
    Mul(ValId, ValId),
    Scale(ValId, Real),
    AddScalar(ValId, Real),
    /// Broadcast multiply by a `[1]` tensor.
    MulScalarT(ValId, ValId),
    /// `x` with last axis C, bias `[C]` broadcast over leading axes.
    AddChannelBias(ValId, ValId),
    Exp(ValId),
    Abs(ValId),
    LeakyRelu(ValId, Real),
    /// sin(omega * x), elementwise.
    SinScaled(ValId, Real),
    Sum(ValId),
    /// x `[N,I]`, w `[O,I]`, optional bias `[O]`.
    Linear { x: ValId, w: ValId, b: Option<ValId> },
    /// x `[C,H,W]`, w `[O,C,K,K]`, optional bias `[O]`.
    Conv2d { x: ValId, w: ValId, b: Option<ValId>, stride: usize, pad: usize },
    /// x `[C,H,W]`, w `[C,O,K,K]` (input-major).
    ConvT2d { x: ValId, w: ValId, stride: usize, pad: usize },
    /// map `[H,W,C]`, coords `[N,2]` in [0,1]^2.
    BilinearSample { map: ValId, coords: ValId },
    /// Rows gathered from `attr [N,C]` with fixed indices and weights:
    /// `out[m] = sum_k w[m][k] * attr[idx[m][k]]`.
    GatherWeighted { attr: ValId, idx: Arc<Vec<[u32; 3]>>, w: Arc<Vec<[Real; 3]>> },
    /// Scatter `x [M]` into a `[H,W,1]` map at unique linear pixel indices;
    /// unset pixels take `fill`.
    ScatterToMap { x: ValId, pix: Arc<Vec<u32>>, h: usize, w: usize, fill: Real },
    /// Forward difference along width: out(y,x) = in(y,x+1) - in(y,x), 0 at x=W-1.
    FwdDiffX(ValId),
    /// Forward difference along height.
    FwdDiffY(ValId),
    /// Rowwise cross product of `[R,3]` tensors.
    Cross3(ValId, ValId),
    /// Rowwise v / sqrt(|v|^2 + eps) on `[R,3]`.
    Normalize3(ValId, Real),
    /// x `[R,C]` scaled per-row by s `[R]`.
    MulRows(ValId, ValId),
    /// Sparse matrix times dense `[N,C]`.
    SpMv { m: Arc<CsrPair>, x: ValId },
    Concat { parts: Vec<ValId>, axis: usize },
    /// `[C,H,W]` -> `[H,W,C]`.
    ChwToHwc(ValId),
    /// `[H,W,C]` -> `[C,H,W]`.
    HwcToChw(ValId),
    /// Rowwise affine map of `[N,3]` to `[N]`: out = dot(row, v) + off.
    DotRowsConst { x: ValId, v: [Real; 3], off: Real },
}

struct Node {
    value: Tensor,
    op: Op,
    requires: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: ValId) -> Option<&Tensor> {
        self.grads[id.index()].as_ref()
    }

    pub fn take(&mut self, id: ValId) -> Option<Tensor> {
        self.grads[id.index()].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.nodes[id.index()].value
    }

    pub fn shape(&self, id: ValId) -> &[usize] {
        &self.nodes[id.index()].value.shape
    }

    pub fn requires_grad(&self, id: ValId) -> bool {
        self.nodes[id.index()].requires
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> ValId {
        assert!(self.nodes.len() < u32::MAX as usize);
        self.nodes.push(Node { value, op, requires });
        ValId(self.nodes.len() as u32 - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor) -> ValId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant: nothing upstream of it gets a gradient.
    pub fn constant(&mut self, value: Tensor) -> ValId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: Real) -> ValId {
        self.constant(Tensor::scalar(v))
    }

    fn req(&self, id: ValId) -> bool {
        self.nodes[id.index()].requires
    }

    fn same_shape(&self, op: &'static str, a: ValId, b: ValId) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- elementwise and structural ops ----

    pub fn stop_grad(&mut self, x: ValId) -> ValId {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad(x), false)
    }

    pub fn reshape(&mut self, x: ValId, shape: &[usize]) -> Result<ValId, DiffError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(DiffError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let v = self.value(x).clone().reshaped(shape);
        let r = self.req(x);
        Ok(self.push(v, Op::Reshape(x), r))
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId, DiffError> {
        self.same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let r = self.req(a) || self.req(b);
        Ok(self.push(v, Op::Add(a, b), r))
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> Result<ValId, DiffError> {
        self.same_shape("sub", a, b)?;
        let bv = self.value(b);
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(bv.data.iter()) {
            *x -= *y;
        }
        let r = self.req(a) || self.req(b);
        Ok(self.push(v, Op::Sub(a, b), r))
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId, DiffError> {
        self.same_shape("mul", a, b)?;
        let bv = self.value(b);
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(bv.data.iter()) {
            *x *= *y;
        }
        let r = self.req(a) || self.req(b);
        Ok(self.push(v, Op::Mul(a, b), r))
    }

    pub fn square(&mut self, x: ValId) -> Result<ValId, DiffError> {
        self.mul(x, x)
    }

    pub fn scale(&mut self, x: ValId, k: Real) -> ValId {
        let mut v = self.value(x).clone();
        for e in v.data.iter_mut() {
            *e *= k;
        }
        let r = self.req(x);
        self.push(v, Op::Scale(x, k), r)
    }

    pub fn add_scalar(&mut self, x: ValId, k: Real) -> ValId {
        let mut v = self.value(x).clone();
        for e in v.data.iter_mut() {
            *e += k;
        }
        let r = self.req(x);
        self.push(v, Op::AddScalar(x, k), r)
    }

    /// Multiply every element of `x` by the `[1]` tensor `s`.
    pub fn mul_scalar_t(&mut self, x: ValId, s: ValId) -> Result<ValId, DiffError> {
        if self.value(s).numel() != 1 {
            return Err(DiffError::shape("mul_scalar_t", format!("scale {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let mut v = self.value(x).clone();
        for e in v.data.iter_mut() {
            *e *= sv;
        }
        let r = self.req(x) || self.req(s);
        Ok(self.push(v, Op::MulScalarT(x, s), r))
    }

    /// Add bias `[C]` to a tensor whose last axis is C.
    pub fn add_channel_bias(&mut self, x: ValId, b: ValId) -> Result<ValId, DiffError> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(DiffError::shape(
                "add_channel_bias",
                format!("x {:?}, b {:?}", self.shape(x), self.shape(b)),
            ));
        }
        let bv = self.value(b).data.clone();
        let mut v = self.value(x).clone();
        for (i, e) in v.data.iter_mut().enumerate() {
            *e += bv[i % c];
        }
        let r = self.req(x) || self.req(b);
        Ok(self.push(v, Op::AddChannelBias(x, b), r))
    }

    pub fn exp(&mut self, x: ValId) -> ValId {
        let mut v = self.value(x).clone();
        for e in v.data.iter_mut() {
            *e = e.exp();
        }
        let r = self.req(x);
        self.push(v, Op::Exp(x), r)
    }

    pub fn abs(&mut self, x: ValId) -> ValId {
        let mut v = self.value(x).clone();
        for e in v.data.iter_mut() {
            *e = e.abs();
        }
        let r = self.req(x);
        self.push(v, Op::Abs(x), r)
    }

    pub fn leaky_relu(&mut self, x: ValId, slope: Real) -> ValId {
        let mut v = self.value(x).clone();
        for e in v.data.iter_mut() {
            if *e < 0.0 {
                *e *= slope;
            }
        }
        let r = self.req(x);
        self.push(v, Op::LeakyRelu(x, slope), r)
    }

    pub fn sin_scaled(&mut self, x: ValId, omega: Real) -> ValId {
        let mut v = self.value(x).clone();
        for e in v.data.iter_mut() {
            *e = (omega * *e).sin();
        }
        let r = self.req(x);
        self.push(v, Op::SinScaled(x, omega), r)
    }

    /// Sum of all elements, producing a `[1]` tensor.
    pub fn sum(&mut self, x: ValId) -> ValId {
        let s: Real = self.value(x).data.iter().sum();
        let r = self.req(x);
        self.push(Tensor::scalar(s), Op::Sum(x), r)
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: ValId) -> ValId {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as Real)
    }

    // ---- dense layers ----

    pub fn linear(&mut self, x: ValId, w: ValId, b: Option<ValId>) -> Result<ValId, DiffError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(DiffError::shape("linear", format!("x {:?}, w {:?}", xs, ws)));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(DiffError::shape("linear", format!("bias {:?}, w {:?}", self.shape(b), ws)));
            }
        }
        let v = kernels::linear_fwd(self.value(x), self.value(w), b.map(|b| self.value(b)), xs[0]);
        let r = self.req(x) || self.req(w) || b.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(v, Op::Linear { x, w, b }, r))
    }

    pub fn conv2d(
        &mut self,
        x: ValId,
        w: ValId,
        b: Option<ValId>,
        stride: usize,
        pad: usize,
    ) -> Result<ValId, DiffError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(DiffError::shape("conv2d", format!("x {:?}, w {:?}", xs, ws)));
        }
        let k = ws[2];
        if kernels::conv_out_dim(xs[1], k, stride, pad).is_none()
            || kernels::conv_out_dim(xs[2], k, stride, pad).is_none()
        {
            return Err(DiffError::invalid(
                "conv2d",
                format!("window k={} s={} p={} does not fit input {:?}", k, stride, pad, xs),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(DiffError::shape("conv2d", format!("bias {:?}, w {:?}", self.shape(b), ws)));
            }
        }
        let v = kernels::conv2d_fwd(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let r = self.req(x) || self.req(w) || b.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, pad }, r))
    }

    pub fn conv_t2d(
        &mut self,
        x: ValId,
        w: ValId,
        stride: usize,
        pad: usize,
    ) -> Result<ValId, DiffError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] || ws[2] != ws[3] {
            return Err(DiffError::shape("conv_t2d", format!("x {:?}, w {:?}", xs, ws)));
        }
        let k = ws[2];
        if kernels::convt_out_dim(xs[1], k, stride, pad).is_none()
            || kernels::convt_out_dim(xs[2], k, stride, pad).is_none()
        {
            return Err(DiffError::invalid(
                "conv_t2d",
                format!("k={} s={} p={} invalid for input {:?}", k, stride, pad, xs),
            ));
        }
        let v = kernels::convt2d_fwd(self.value(x), self.value(w), stride, pad);
        let r = self.req(x) || self.req(w);
        Ok(self.push(v, Op::ConvT2d { x, w, stride, pad }, r))
    }

    // ---- sampling and scatter/gather ----

    pub fn bilinear_sample(&mut self, map: ValId, coords: ValId) -> Result<ValId, DiffError> {
        let (ms, cs) = (self.shape(map).to_vec(), self.shape(coords).to_vec());
        if ms.len() != 3 || cs.len() != 2 || cs[1] != 2 {
            return Err(DiffError::shape(
                "bilinear_sample",
                format!("map {:?}, coords {:?}", ms, cs),
            ));
        }
        if !self.value(coords).is_finite() {
            return Err(DiffError::invalid("bilinear_sample", "non-finite coordinates"));
        }
        let v = kernels::bilinear_fwd(self.value(map), self.value(coords));
        let r = self.req(map) || self.req(coords);
        Ok(self.push(v, Op::BilinearSample { map, coords }, r))
    }

    pub fn gather_weighted(
        &mut self,
        attr: ValId,
        idx: Arc<Vec<[u32; 3]>>,
        w: Arc<Vec<[Real; 3]>>,
    ) -> Result<ValId, DiffError> {
        let ashape = self.shape(attr).to_vec();
        if ashape.len() != 2 || idx.len() != w.len() {
            return Err(DiffError::shape(
                "gather_weighted",
                format!("attr {:?}, {} idx rows, {} weight rows", ashape, idx.len(), w.len()),
            ));
        }
        let (n, c) = (ashape[0], ashape[1]);
        if let Some(bad) = idx.iter().flatten().find(|&&i| i as usize >= n) {
            return Err(DiffError::invalid("gather_weighted", format!("index {} >= {}", bad, n)));
        }
        let av = self.value(attr);
        let mut out = Tensor::zeros(&[idx.len(), c]);
        for (m, (tri, wt)) in idx.iter().zip(w.iter()).enumerate() {
            for k in 0..3 {
                let row = tri[k] as usize;
                for ch in 0..c {
                    out.data[m * c + ch] += wt[k] * av.data[row * c + ch];
                }
            }
        }
        let r = self.req(attr);
        Ok(self.push(out, Op::GatherWeighted { attr, idx, w }, r))
    }

    pub fn scatter_to_map(
        &mut self,
        x: ValId,
        pix: Arc<Vec<u32>>,
        h: usize,
        w: usize,
        fill: Real,
    ) -> Result<ValId, DiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 1 || xs[0] != pix.len() {
            return Err(DiffError::shape(
                "scatter_to_map",
                format!("x {:?} vs {} pixels", xs, pix.len()),
            ));
        }
        if let Some(bad) = pix.iter().find(|&&p| p as usize >= h * w) {
            return Err(DiffError::invalid("scatter_to_map", format!("pixel {} >= {}", bad, h * w)));
        }
        let xv = self.value(x);
        let mut out = Tensor::full(&[h, w, 1], fill);
        for (m, &p) in pix.iter().enumerate() {
            out.data[p as usize] = xv.data[m];
        }
        let r = self.req(x);
        Ok(self.push(out, Op::ScatterToMap { x, pix, h, w, fill }, r))
    }

    // ---- spatial ops on [H,W,C] maps ----

    fn map3(&self, op: &'static str, x: ValId) -> Result<(usize, usize, usize), DiffError> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(DiffError::shape(op, format!("expected [H,W,C], got {:?}", s)));
        }
        Ok((s[0], s[1], s[2]))
    }

    pub fn fwd_diff_x(&mut self, x: ValId) -> Result<ValId, DiffError> {
        let (h, w, c) = self.map3("fwd_diff_x", x)?;
        let xv = self.value(x);
        let mut out = Tensor::zeros(&[h, w, c]);
        for y in 0..h {
            for xx in 0..w - 1 {
                for ch in 0..c {
                    out.data[(y * w + xx) * c + ch] =
                        xv.data[(y * w + xx + 1) * c + ch] - xv.data[(y * w + xx) * c + ch];
                }
            }
        }
        let r = self.req(x);
        Ok(self.push(out, Op::FwdDiffX(x), r))
    }

    pub fn fwd_diff_y(&mut self, x: ValId) -> Result<ValId, DiffError> {
        let (h, w, c) = self.map3("fwd_diff_y", x)?;
        let xv = self.value(x);
        let mut out = Tensor::zeros(&[h, w, c]);
        for y in 0..h - 1 {
            for xx in 0..w {
                for ch in 0..c {
                    out.data[(y * w + xx) * c + ch] =
                        xv.data[((y + 1) * w + xx) * c + ch] - xv.data[(y * w + xx) * c + ch];
                }
            }
        }
        let r = self.req(x);
        Ok(self.push(out, Op::FwdDiffY(x), r))
    }

    // ---- rowwise 3-vector ops ----

    fn rows3(&self, op: &'static str, x: ValId) -> Result<usize, DiffError> {
        let s = self.shape(x);
        if s.last() != Some(&3) {
            return Err(DiffError::shape(op, format!("last axis must be 3, got {:?}", s)));
        }
        Ok(self.value(x).numel() / 3)
    }

    pub fn cross3(&mut self, a: ValId, b: ValId) -> Result<ValId, DiffError> {
        self.same_shape("cross3", a, b)?;
        let n = self.rows3("cross3", a)?;
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![0.0; n * 3];
        for r in 0..n {
            let (i, a0, b0) = (r * 3, &av[r * 3..r * 3 + 3], &bv[r * 3..r * 3 + 3]);
            out[i] = a0[1] * b0[2] - a0[2] * b0[1];
            out[i + 1] = a0[2] * b0[0] - a0[0] * b0[2];
            out[i + 2] = a0[0] * b0[1] - a0[1] * b0[0];
        }
        let shape = self.shape(a).to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(out, &shape), Op::Cross3(a, b), req))
    }

    pub fn normalize3(&mut self, x: ValId, eps: Real) -> Result<ValId, DiffError> {
        let n = self.rows3("normalize3", x)?;
        let xv = &self.value(x).data;
        let mut out = vec![0.0; n * 3];
        for r in 0..n {
            let v = &xv[r * 3..r * 3 + 3];
            let s = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + eps).sqrt();
            for k in 0..3 {
                out[r * 3 + k] = v[k] / s;
            }
        }
        let shape = self.shape(x).to_vec();
        let req = self.req(x);
        Ok(self.push(Tensor::new(out, &shape), Op::Normalize3(x, eps), req))
    }

    pub fn mul_rows(&mut self, x: ValId, s: ValId) -> Result<ValId, DiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(s) != [xs[0]] {
            return Err(DiffError::shape(
                "mul_rows",
                format!("x {:?}, s {:?}", xs, self.shape(s)),
            ));
        }
        let sv = self.value(s).data.clone();
        let mut v = self.value(x).clone();
        let c = xs[1];
        for (r, &sc) in sv.iter().enumerate() {
            for e in v.data[r * c..(r + 1) * c].iter_mut() {
                *e *= sc;
            }
        }
        let req = self.req(x) || self.req(s);
        Ok(self.push(v, Op::MulRows(x, s), req))
    }

    pub fn spmv(&mut self, m: Arc<CsrPair>, x: ValId) -> Result<ValId, DiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != m.fwd.cols {
            return Err(DiffError::shape(
                "spmv",
                format!("matrix {}x{}, x {:?}", m.fwd.rows, m.fwd.cols, xs),
            ));
        }
        let c = xs[1];
        let mut out = Tensor::zeros(&[m.fwd.rows, c]);
        m.fwd.matvec_dense(&self.value(x).data, c, &mut out.data);
        let r = self.req(x);
        Ok(self.push(out, Op::SpMv { m, x }, r))
    }

    pub fn concat(&mut self, parts: &[ValId], axis: usize) -> Result<ValId, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::invalid("concat", "no parts"));
        }
        let base = self.shape(parts[0]).to_vec();
        if axis >= base.len() {
            return Err(DiffError::invalid("concat", format!("axis {} rank {}", axis, base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(base.iter()).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(DiffError::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} on axis {}", s, base, axis),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&shape);
        let row_out = total * inner;
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let pa = pv.shape[axis];
            let row_in = pa * inner;
            for r in 0..outer {
                out.data[r * row_out + off..r * row_out + off + row_in]
                    .copy_from_slice(&pv.data[r * row_in..(r + 1) * row_in]);
            }
            off += row_in;
        }
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, req))
    }

    pub fn chw_to_hwc(&mut self, x: ValId) -> Result<ValId, DiffError> {
        let (c, h, w) = self.map3("chw_to_hwc", x)?;
        let xv = &self.value(x).data;
        let mut out = Tensor::zeros(&[h, w, c]);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out.data[(y * w + xx) * c + ch] = xv[(ch * h + y) * w + xx];
                }
            }
        }
        let r = self.req(x);
        Ok(self.push(out, Op::ChwToHwc(x), r))
    }

    pub fn hwc_to_chw(&mut self, x: ValId) -> Result<ValId, DiffError> {
        let (h, w, c) = self.map3("hwc_to_chw", x)?;
        let xv = &self.value(x).data;
        let mut out = Tensor::zeros(&[c, h, w]);
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    out.data[(ch * h + y) * w + xx] = xv[(y * w + xx) * c + ch];
                }
            }
        }
        let r = self.req(x);
        Ok(self.push(out, Op::HwcToChw(x), r))
    }

    pub fn dot_rows_const(&mut self, x: ValId, v: [Real; 3], off: Real) -> Result<ValId, DiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != 3 {
            return Err(DiffError::shape("dot_rows_const", format!("x {:?}", xs)));
        }
        let xv = &self.value(x).data;
        let out: Vec<Real> = (0..xs[0])
            .map(|r| xv[r * 3] * v[0] + xv[r * 3 + 1] * v[1] + xv[r * 3 + 2] * v[2] + off)
            .collect();
        let req = self.req(x);
        Ok(self.push(Tensor::new(out, &[xs[0]]), Op::DotRowsConst { x, v, off }, req))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns per-node gradients for every
    /// node on a differentiable path between a gradient-requiring leaf and
    /// the loss.
    pub fn backward(&self, loss: ValId) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index()] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].requires {
                continue;
            }
            let g = grads[i].clone().unwrap();
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::StopGrad(_) => {}
                Op::Reshape(x) => {
                    let gx = g.clone().reshaped(self.shape(*x));
                    self.acc(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    let mut gn = g;
                    for e in gn.data.iter_mut() {
                        *e = -*e;
                    }
                    self.acc(&mut grads, *b, gn);
                }
                Op::Mul(a, b) => {
                    if self.req(*a) {
                        let mut ga = g.clone();
                        for (x, y) in ga.data.iter_mut().zip(self.value(*b).data.iter()) {
                            *x *= *y;
                        }
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.req(*b) {
                        let mut gb = g;
                        for (x, y) in gb.data.iter_mut().zip(self.value(*a).data.iter()) {
                            *x *= *y;
                        }
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale(x, k) => {
                    let mut gx = g;
                    for e in gx.data.iter_mut() {
                        *e *= k;
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::AddScalar(x, _) => self.acc(&mut grads, *x, g),
                Op::MulScalarT(x, s) => {
                    if self.req(*x) {
                        let sv = self.value(*s).item();
                        let mut gx = g.clone();
                        for e in gx.data.iter_mut() {
                            *e *= sv;
                        }
                        self.acc(&mut grads, *x, gx);
                    }
                    if self.req(*s) {
                        let dot: Real =
                            g.data.iter().zip(self.value(*x).data.iter()).map(|(a, b)| a * b).sum();
                        self.acc(&mut grads, *s, Tensor::scalar(dot));
                    }
                }
                Op::AddChannelBias(x, b) => {
                    if self.req(*b) {
                        let c = self.value(*b).numel();
                        let mut gb = Tensor::zeros(&[c]);
                        for (i, v) in g.data.iter().enumerate() {
                            gb.data[i % c] += v;
                        }
                        self.acc(&mut grads, *b, gb);
                    }
                    self.acc(&mut grads, *x, g);
                }
                Op::Exp(x) => {
                    let mut gx = g;
                    for (e, o) in gx.data.iter_mut().zip(node.value.data.iter()) {
                        *e *= o;
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Abs(x) => {
                    let mut gx = g;
                    for (e, v) in gx.data.iter_mut().zip(self.value(*x).data.iter()) {
                        *e *= if *v > 0.0 {
                            1.0
                        } else if *v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let mut gx = g;
                    for (e, v) in gx.data.iter_mut().zip(self.value(*x).data.iter()) {
                        if *v < 0.0 {
                            *e *= slope;
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::SinScaled(x, omega) => {
                    let mut gx = g;
                    for (e, v) in gx.data.iter_mut().zip(self.value(*x).data.iter()) {
                        *e *= omega * (omega * *v).cos();
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    let gx = Tensor::full(self.shape(*x), gv);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = kernels::linear_bwd(&g, self.value(*x), self.value(*w));
                    if self.req(*x) {
                        self.acc(&mut grads, *x, gx);
                    }
                    if self.req(*w) {
                        self.acc(&mut grads, *w, gw);
                    }
                    if let Some(b) = b {
                        if self.req(*b) {
                            self.acc(&mut grads, *b, gb);
                        }
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    if self.req(*x) {
                        let gx = kernels::conv2d_bwd_x(&g, self.value(*w), *stride, *pad, self.shape(*x));
                        self.acc(&mut grads, *x, gx);
                    }
                    if self.req(*w) {
                        let gw = kernels::conv2d_bwd_w(&g, self.value(*x), *stride, *pad, self.shape(*w));
                        self.acc(&mut grads, *w, gw);
                    }
                    if let Some(b) = b {
                        if self.req(*b) {
                            self.acc(&mut grads, *b, kernels::conv2d_bwd_b(&g));
                        }
                    }
                }
                Op::ConvT2d { x, w, stride, pad } => {
                    if self.req(*x) {
                        let gx = kernels::convt2d_bwd_x(&g, self.value(*w), *stride, *pad, self.shape(*x));
                        self.acc(&mut grads, *x, gx);
                    }
                    if self.req(*w) {
                        let gw = kernels::convt2d_bwd_w(&g, self.value(*x), *stride, *pad, self.shape(*w));
                        self.acc(&mut grads, *w, gw);
                    }
                }
                Op::BilinearSample { map, coords } => {
                    let (gmap, gco) = kernels::bilinear_bwd(self.value(*map), self.value(*coords), &g);
                    if self.req(*map) {
                        self.acc(&mut grads, *map, gmap);
                    }
                    if self.req(*coords) {
                        self.acc(&mut grads, *coords, gco);
                    }
                }
                Op::GatherWeighted { attr, idx, w } => {
                    let c = self.shape(*attr)[1];
                    let mut ga = Tensor::zeros(self.shape(*attr));
                    for (m, (tri, wt)) in idx.iter().zip(w.iter()).enumerate() {
                        for k in 0..3 {
                            let row = tri[k] as usize;
                            for ch in 0..c {
                                ga.data[row * c + ch] += wt[k] * g.data[m * c + ch];
                            }
                        }
                    }
                    self.acc(&mut grads, *attr, ga);
                }
                Op::ScatterToMap { x, pix, .. } => {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    for (m, &p) in pix.iter().enumerate() {
                        gx.data[m] = g.data[p as usize];
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::FwdDiffX(x) => {
                    let s = self.shape(*x);
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let mut gx = Tensor::zeros(s);
                    for y in 0..h {
                        for xx in 0..w - 1 {
                            for ch in 0..c {
                                let gv = g.data[(y * w + xx) * c + ch];
                                gx.data[(y * w + xx + 1) * c + ch] += gv;
                                gx.data[(y * w + xx) * c + ch] -= gv;
                            }
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::FwdDiffY(x) => {
                    let s = self.shape(*x);
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let mut gx = Tensor::zeros(s);
                    for y in 0..h - 1 {
                        for xx in 0..w {
                            for ch in 0..c {
                                let gv = g.data[(y * w + xx) * c + ch];
                                gx.data[((y + 1) * w + xx) * c + ch] += gv;
                                gx.data[(y * w + xx) * c + ch] -= gv;
                            }
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Cross3(a, b) => {
                    let n = self.value(*a).numel() / 3;
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    if self.req(*a) {
                        let mut ga = Tensor::zeros(self.shape(*a));
                        for r in 0..n {
                            let (b0, g0) = (&bv[r * 3..r * 3 + 3], &g.data[r * 3..r * 3 + 3]);
                            // grad_a = b x g
                            ga.data[r * 3] = b0[1] * g0[2] - b0[2] * g0[1];
                            ga.data[r * 3 + 1] = b0[2] * g0[0] - b0[0] * g0[2];
                            ga.data[r * 3 + 2] = b0[0] * g0[1] - b0[1] * g0[0];
                        }
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.req(*b) {
                        let mut gb = Tensor::zeros(self.shape(*b));
                        for r in 0..n {
                            let (a0, g0) = (&av[r * 3..r * 3 + 3], &g.data[r * 3..r * 3 + 3]);
                            // grad_b = g x a
                            gb.data[r * 3] = g0[1] * a0[2] - g0[2] * a0[1];
                            gb.data[r * 3 + 1] = g0[2] * a0[0] - g0[0] * a0[2];
                            gb.data[r * 3 + 2] = g0[0] * a0[1] - g0[1] * a0[0];
                        }
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Normalize3(x, eps) => {
                    let n = self.value(*x).numel() / 3;
                    let xv = &self.value(*x).data;
                    let mut gx = Tensor::zeros(self.shape(*x));
                    for r in 0..n {
                        let v = &xv[r * 3..r * 3 + 3];
                        let g0 = &g.data[r * 3..r * 3 + 3];
                        let s2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + eps;
                        let s = s2.sqrt();
                        let vg = v[0] * g0[0] + v[1] * g0[1] + v[2] * g0[2];
                        for k in 0..3 {
                            gx.data[r * 3 + k] = g0[k] / s - v[k] * vg / (s2 * s);
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::MulRows(x, s) => {
                    let c = self.shape(*x)[1];
                    let n = self.shape(*x)[0];
                    if self.req(*x) {
                        let sv = &self.value(*s).data;
                        let mut gx = g.clone();
                        for r in 0..n {
                            for e in gx.data[r * c..(r + 1) * c].iter_mut() {
                                *e *= sv[r];
                            }
                        }
                        self.acc(&mut grads, *x, gx);
                    }
                    if self.req(*s) {
                        let xv = &self.value(*x).data;
                        let mut gs = Tensor::zeros(&[n]);
                        for r in 0..n {
                            gs.data[r] = (0..c).map(|k| g.data[r * c + k] * xv[r * c + k]).sum();
                        }
                        self.acc(&mut grads, *s, gs);
                    }
                }
                Op::SpMv { m, x } => {
                    let c = self.shape(*x)[1];
                    let mut gx = Tensor::zeros(self.shape(*x));
                    m.bwd.matvec_dense(&g.data, c, &mut gx.data);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Concat { parts, axis } => {
                    let shape = &node.value.shape;
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let row_out = shape[*axis] * inner;
                    let mut off = 0;
                    for &p in parts {
                        let ps = self.shape(p).to_vec();
                        let row_in = ps[*axis] * inner;
                        if self.req(p) {
                            let mut gp = Tensor::zeros(&ps);
                            for r in 0..outer {
                                gp.data[r * row_in..(r + 1) * row_in].copy_from_slice(
                                    &g.data[r * row_out + off..r * row_out + off + row_in],
                                );
                            }
                            self.acc(&mut grads, p, gp);
                        }
                        off += row_in;
                    }
                }
                Op::ChwToHwc(x) => {
                    let s = self.shape(*x);
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let mut gx = Tensor::zeros(s);
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx.data[(ch * h + y) * w + xx] = g.data[(y * w + xx) * c + ch];
                            }
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::HwcToChw(x) => {
                    let s = self.shape(*x);
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let mut gx = Tensor::zeros(s);
                    for y in 0..h {
                        for xx in 0..w {
                            for ch in 0..c {
                                gx.data[(y * w + xx) * c + ch] = g.data[(ch * h + y) * w + xx];
                            }
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::DotRowsConst { x, v, .. } => {
                    let n = self.shape(*x)[0];
                    let mut gx = Tensor::zeros(self.shape(*x));
                    for r in 0..n {
                        for k in 0..3 {
                            gx.data[r * 3 + k] = g.data[r] * v[k];
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: ValId, g: Tensor) {
        if !self.nodes[id.index()].requires {
            return;
        }
        debug_assert_eq!(g.shape, self.nodes[id.index()].value.shape, "gradient shape mismatch");
        match &mut grads[id.index()] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}
