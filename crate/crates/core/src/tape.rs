//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every differentiable operation appends one node holding the output value
//! and the opcode. Node indices grow monotonically and operations only
//! reference earlier nodes, so walking the tape backward visits each node
//! after all of its consumers — the reverse topological order the chain rule
//! needs. One tape is one training step; gradients reset by dropping the tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

/// Tape handles for an entire [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// GELU flavor: exact Gaussian-CDF form or the tanh approximation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeluMode {
    Erf,
    Tanh,
}

#[derive(Clone, Debug)]
enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    /// `[n, d] + [d]`, the bias pattern.
    AddRow(Var, Var),
    Scale(Var, F),
    /// Elementwise product with a constant (non-differentiated) tensor.
    MulConst(Var, Tensor<F>),
    Relu(Var),
    Gelu(Var, GeluMode),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: F },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    SumAll(Var),
}

#[derive(Clone, Debug)]
struct Node<F: Real> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Per-scope multiply-add tallies of forward work, used by the complexity
/// scaling checks.
#[derive(Clone, Debug, Default)]
pub struct FlopCounts {
    by_scope: BTreeMap<String, u64>,
    total: u64,
}

impl FlopCounts {
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn scope(&self, name: &str) -> u64 {
        self.by_scope.get(name).copied().unwrap_or(0)
    }

    pub fn scopes(&self) -> impl Iterator<Item = (&str, u64)> {
        self.by_scope.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    backward_run: bool,
    flops: FlopCounts,
    scope: String,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_run: false,
            flops: FlopCounts::default(),
            scope: "default".to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label for subsequent flop accounting (tokenizer, blocks, ...).
    pub fn set_scope(&mut self, name: &str) {
        self.scope = name.to_string();
    }

    pub fn flops(&self) -> &FlopCounts {
        &self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn add_flops(&mut self, n: u64) {
        self.flops.total += n;
        *self.flops.by_scope.entry(self.scope.clone()).or_insert(0) += n;
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────────

    pub fn input(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Bind every parameter of a store as a leaf. With `trainable = false`
    /// (frozen backbone, teacher network) no gradient ever reaches the store.
    pub fn bind(&mut self, store: &ParamStore<F>, trainable: bool) -> Bound {
        Bound {
            vars: store.tensors().iter().map(|t| self.input(t.clone(), trainable)).collect(),
        }
    }

    /// Gradients of bound parameters, aligned with the store's indices.
    pub fn collect_grads(&self, bound: &Bound) -> Vec<Option<Tensor<F>>> {
        bound.vars.iter().map(|v| self.grad(*v).cloned()).collect()
    }

    // ── Linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents disagree: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.add_flops(2 * (m * k * n) as u64);
        let value = Tensor::new(vec![m, n], data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatMul(a, b), value, req))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let req = self.requires(x);
        Ok(self.push(Op::Transpose(x), value, req))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let req = self.requires(x);
        Ok(self.push(Op::Reshape(x), value, req))
    }

    // ── Elementwise ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.add_flops(value.numel() as u64);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), value, req))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        if self.value(row).numel() != d || self.value(row).rank() > 2 {
            return Err(Error::Shape(format!(
                "row broadcast expects [{d}] bias, got {:?}",
                self.value(row).shape()
            )));
        }
        let av = self.value(a).data();
        let rv = self.value(row).data();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(av[i * d + j] + rv[j]);
            }
        }
        self.add_flops((n * d) as u64);
        let value = Tensor::new(vec![n, d], out)?;
        let req = self.requires(a) || self.requires(row);
        Ok(self.push(Op::AddRow(a, row), value, req))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let value = self.value(x).scale(c);
        self.add_flops(value.numel() as u64);
        let req = self.requires(x);
        Ok(self.push(Op::Scale(x, c), value, req))
    }

    pub fn mul_const(&mut self, x: Var, t: &Tensor<F>) -> Result<Var> {
        let value = self.value(x).zip(t, |a, b| a * b)?;
        self.add_flops(value.numel() as u64);
        let req = self.requires(x);
        Ok(self.push(Op::MulConst(x, t.clone()), value, req))
    }

    // ── Activations ──────────────────────────────────────────────────────

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.add_flops(value.numel() as u64);
        let req = self.requires(x);
        Ok(self.push(Op::Relu(x), value, req))
    }

    pub fn gelu(&mut self, x: Var, mode: GeluMode) -> Result<Var> {
        let value = self.value(x).map(|v| gelu_value(v, mode));
        self.add_flops(4 * value.numel() as u64);
        let req = self.requires(x);
        Ok(self.push(Op::Gelu(x, mode), value, req))
    }

    // ── Normalizations ───────────────────────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = softmax_forward(self.value(x), axis, false)?;
        self.add_flops(5 * value.numel() as u64);
        let req = self.requires(x);
        Ok(self.push(Op::Softmax(x, axis), value, req))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = softmax_forward(self.value(x), axis, true)?;
        self.add_flops(5 * value.numel() as u64);
        let req = self.requires(x);
        Ok(self.push(Op::LogSoftmax(x, axis), value, req))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must have {d} elements, got {:?}/{:?}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let xs = self.value(x).data();
        let gs = self.value(gain).data().to_vec();
        let bs = self.value(bias).data().to_vec();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..d {
                out.push((row[j] - mean) * inv_std * gs[j] + bs[j]);
            }
        }
        self.add_flops(8 * (n * d) as u64);
        let value = Tensor::new(vec![n, d], out)?;
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, value, req))
    }

    // ── Convolution / pooling ────────────────────────────────────────────

    /// Cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in, kh, kw]`
    /// plus per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let geom = ConvGeom::resolve(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        if self.value(b).numel() != geom.c_out {
            return Err(Error::Shape(format!(
                "conv2d bias expects {} elements, got {}",
                geom.c_out,
                self.value(b).numel()
            )));
        }
        let cols = im2col(self.value(x).data(), &geom);
        // out[c, p] = sum_k wmat[c, k] * cols[k, p] + b[c]
        let mut out =
            matmul_kernel(self.value(w).data(), &cols, geom.c_out, geom.k, geom.positions());
        let bv = self.value(b).data().to_vec();
        for c in 0..geom.c_out {
            for p in 0..geom.positions() {
                out[c * geom.positions() + p] += bv[c];
            }
        }
        self.add_flops(2 * (geom.c_out * geom.k * geom.positions()) as u64);
        let value = Tensor::new(vec![geom.c_out, geom.h_out, geom.w_out], out)?;
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, value, req))
    }

    /// Max pooling over `[C, H, W]`; gradient routes to argmax positions only.
    /// Padding cells hold negative infinity and are never selected.
    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize, pad: usize) -> Result<Var> {
        if window == 0 || stride == 0 {
            return Err(Error::Parameter("pool window and stride must be positive".into()));
        }
        let shape = self.value(x).shape().to_vec();
        let [c, h, w] = match shape.as_slice() {
            [c, h, w] => [*c, *h, *w],
            other => return Err(Error::Shape(format!("max_pool2d expects [C,H,W], got {other:?}"))),
        };
        if window > h + 2 * pad || window > w + 2 * pad {
            return Err(Error::Shape(format!(
                "pool window {window} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let h_out = (h + 2 * pad - window) / stride + 1;
        let w_out = (w + 2 * pad - window) / stride + 1;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(c * h_out * w_out);
        let mut argmax = Vec::with_capacity(c * h_out * w_out);
        for ch in 0..c {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = F::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..window {
                        for kx in 0..window {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let idx = ch * h * w + iy as usize * w + ix as usize;
                            if xs[idx] > best || best_idx == usize::MAX {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        self.add_flops((c * h_out * w_out * window * window) as u64);
        let value = Tensor::new(vec![c, h_out, w_out], out)?;
        let req = self.requires(x);
        Ok(self.push(Op::MaxPool2d { x, argmax }, value, req))
    }

    // ── Shape surgery ────────────────────────────────────────────────────

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > d {
            return Err(Error::Shape(format!(
                "column slice {start}..{} out of bounds for width {d}",
                start + len
            )));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xs[i * d + start..i * d + start + len]);
        }
        let value = Tensor::new(vec![n, len], out)?;
        let req = self.requires(x);
        Ok(self.push(Op::SliceCols { x, start }, value, req))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::Shape(format!("concat supports axes 0/1, got {axis}")));
        }
        let dims: Vec<(usize, usize)> =
            xs.iter().map(|v| self.value(*v).dims2()).collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let value = if axis == 0 {
            if dims.iter().any(|&(_, c)| c != c0) {
                return Err(Error::Shape("concat axis 0 requires equal widths".into()));
            }
            let rows: usize = dims.iter().map(|&(r, _)| r).sum();
            let mut out = Vec::with_capacity(rows * c0);
            for v in xs {
                out.extend_from_slice(self.value(*v).data());
            }
            Tensor::new(vec![rows, c0], out)?
        } else {
            if dims.iter().any(|&(r, _)| r != r0) {
                return Err(Error::Shape("concat axis 1 requires equal heights".into()));
            }
            let cols: usize = dims.iter().map(|&(_, c)| c).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (v, &(_, c)) in xs.iter().zip(&dims) {
                    let d = self.value(*v).data();
                    out.extend_from_slice(&d[i * c..(i + 1) * c]);
                }
            }
            Tensor::new(vec![r0, cols], out)?
        };
        let req = xs.iter().any(|v| self.requires(*v));
        Ok(self.push(Op::Concat { xs: xs.to_vec(), axis }, value, req))
    }

    // ── Reductions ───────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: F = self.value(x).iter().copied().sum();
        self.add_flops(self.value(x).numel() as u64);
        let req = self.requires(x);
        Ok(self.push(Op::SumAll(x), Tensor::scalar(s), req))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, F::from_f64(1.0 / n as f64))
    }

    // ── Backward pass ────────────────────────────────────────────────────

    /// Populate gradients of every `requires_grad` node reachable from `loss`.
    /// A second call on the same tape is an error; build a fresh tape per step.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_run {
            return Err(Error::Contract(
                "backward already ran on this tape; gradients reset by dropping the tape".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.value(loss).all_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        self.backward_run = true;
        self.grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].clone() else { continue };
            self.propagate(i, &g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<F>) -> Result<()> {
        if !self.requires(v) {
            return Ok(());
        }
        debug_assert_eq!(self.value(v).shape(), g.shape());
        self.grads[v.0] = Some(match self.grads[v.0].take() {
            Some(prev) => prev.add(&g)?,
            None => g,
        });
        Ok(())
    }

    fn propagate(&mut self, node: usize, g: &Tensor<F>) -> Result<()> {
        let op = self.nodes[node].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2()?;
                let n = self.value(b).dims2()?.1;
                if self.requires(a) {
                    // da = g . b^T
                    let bt = transpose_kernel(self.value(b).data(), k, n);
                    let da = matmul_kernel(g.data(), &bt, m, n, k);
                    self.accumulate(a, Tensor::new(vec![m, k], da)?)?;
                }
                if self.requires(b) {
                    // db = a^T . g
                    let at = transpose_kernel(self.value(a).data(), m, k);
                    let db = matmul_kernel(&at, g.data(), k, m, n);
                    self.accumulate(b, Tensor::new(vec![k, n], db)?)?;
                }
            }
            Op::Transpose(x) => {
                let (gn, gm) = g.dims2()?;
                let gt = transpose_kernel(g.data(), gn, gm);
                self.accumulate(x, Tensor::new(vec![gm, gn], gt)?)?;
            }
            Op::Reshape(x) => {
                let gx = g.reshaped(self.value(x).shape().to_vec())?;
                self.accumulate(x, gx)?;
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone())?;
                self.accumulate(b, g.clone())?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(a, g.clone())?;
                if self.requires(row) {
                    let (n, d) = g.dims2()?;
                    let mut dr = vec![F::zero(); d];
                    for i in 0..n {
                        for j in 0..d {
                            dr[j] += g.data()[i * d + j];
                        }
                    }
                    let shape = self.value(row).shape().to_vec();
                    self.accumulate(row, Tensor::new(shape, dr)?)?;
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(x, g.scale(c))?;
            }
            Op::MulConst(x, t) => {
                self.accumulate(x, g.zip(&t, |a, b| a * b)?)?;
            }
            Op::Relu(x) => {
                let gx = self.value(x).zip(g, |xv, gv| if xv > F::zero() { gv } else { F::zero() })?;
                self.accumulate(x, gx)?;
            }
            Op::Gelu(x, mode) => {
                let gx = self.value(x).zip(g, |xv, gv| gv * gelu_derivative(xv, mode))?;
                self.accumulate(x, gx)?;
            }
            Op::Softmax(x, axis) => {
                // dx = y * (g - <g, y>) per lane
                let y = self.nodes[node].value.clone();
                let gx = lanewise(&y, g, axis, |yl, gl, out| {
                    let dot: F = yl.iter().zip(gl).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yl).zip(gl) {
                        *o = yv * (gv - dot);
                    }
                })?;
                self.accumulate(x, gx)?;
            }
            Op::LogSoftmax(x, axis) => {
                // dx = g - softmax(x) * sum(g) per lane
                let y = self.nodes[node].value.clone();
                let gx = lanewise(&y, g, axis, |yl, gl, out| {
                    let gsum: F = gl.iter().copied().sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yl).zip(gl) {
                        *o = gv - yv.exp() * gsum;
                    }
                })?;
                self.accumulate(x, gx)?;
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (n, d) = self.value(x).dims2()?;
                let xs = self.value(x).data().to_vec();
                let gs = self.value(gain).data().to_vec();
                let inv_d = F::from_f64(1.0 / d as f64);
                let mut dx = vec![F::zero(); n * d];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                for i in 0..n {
                    let row = &xs[i * d..(i + 1) * d];
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let (mean, inv_std) = row_moments(row, eps);
                    let xhat: Vec<F> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dyg: Vec<F> = grow.iter().zip(&gs).map(|(&gv, &gn)| gv * gn).collect();
                    let mean_dyg: F = dyg.iter().copied().sum::<F>() * inv_d;
                    let mean_dyg_xhat: F =
                        dyg.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                    for j in 0..d {
                        dx[i * d + j] = inv_std * (dyg[j] - mean_dyg - xhat[j] * mean_dyg_xhat);
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                }
                self.accumulate(x, Tensor::new(vec![n, d], dx)?)?;
                let gshape = self.value(gain).shape().to_vec();
                let bshape = self.value(bias).shape().to_vec();
                self.accumulate(gain, Tensor::new(gshape, dgain)?)?;
                self.accumulate(bias, Tensor::new(bshape, dbias)?)?;
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let geom =
                    ConvGeom::resolve(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
                let p = geom.positions();
                if self.requires(b) {
                    let mut db = vec![F::zero(); geom.c_out];
                    for c in 0..geom.c_out {
                        for pos in 0..p {
                            db[c] += g.data()[c * p + pos];
                        }
                    }
                    let shape = self.value(b).shape().to_vec();
                    self.accumulate(b, Tensor::new(shape, db)?)?;
                }
                let cols = im2col(self.value(x).data(), &geom);
                if self.requires(w) {
                    // dW[c, k] = sum_p g[c, p] * cols[k, p]
                    let colst = transpose_kernel(&cols, geom.k, p);
                    let dw = matmul_kernel(g.data(), &colst, geom.c_out, p, geom.k);
                    let shape = self.value(w).shape().to_vec();
                    self.accumulate(w, Tensor::new(shape, dw)?)?;
                }
                if self.requires(x) {
                    // dcols = W^T . g, then scatter back through the patch map
                    let wt = transpose_kernel(self.value(w).data(), geom.c_out, geom.k);
                    let dcols = matmul_kernel(&wt, g.data(), geom.k, geom.c_out, p);
                    let dx = col2im(&dcols, &geom);
                    let shape = self.value(x).shape().to_vec();
                    self.accumulate(x, Tensor::new(shape, dx)?)?;
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![F::zero(); self.value(x).numel()];
                for (out_idx, &src) in argmax.iter().enumerate() {
                    if src != usize::MAX {
                        dx[src] += g.data()[out_idx];
                    }
                }
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, Tensor::new(shape, dx)?)?;
            }
            Op::SliceCols { x, start } => {
                let (n, d) = self.value(x).dims2()?;
                let len = g.dims2()?.1;
                let mut dx = vec![F::zero(); n * d];
                for i in 0..n {
                    for j in 0..len {
                        dx[i * d + start + j] = g.data()[i * len + j];
                    }
                }
                self.accumulate(x, Tensor::new(vec![n, d], dx)?)?;
            }
            Op::Concat { xs, axis } => {
                if axis == 0 {
                    let mut row_off = 0;
                    for v in xs {
                        let (r, c) = self.value(v).dims2()?;
                        let part = g.data()[row_off * c..(row_off + r) * c].to_vec();
                        self.accumulate(v, Tensor::new(vec![r, c], part)?)?;
                        row_off += r;
                    }
                } else {
                    let total = g.dims2()?.1;
                    let mut col_off = 0;
                    for v in xs {
                        let (r, c) = self.value(v).dims2()?;
                        let mut part = Vec::with_capacity(r * c);
                        for i in 0..r {
                            part.extend_from_slice(
                                &g.data()[i * total + col_off..i * total + col_off + c],
                            );
                        }
                        self.accumulate(v, Tensor::new(vec![r, c], part)?)?;
                        col_off += c;
                    }
                }
            }
            Op::SumAll(x) => {
                let gv = g.scalar_value()?;
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, Tensor::full(&shape, gv))?;
            }
        }
        Ok(())
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

// ── Kernels ──────────────────────────────────────────────────────────────

fn matmul_kernel<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_kernel<F: Real>(a: &[F], m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn row_moments<F: Real>(row: &[F], eps: F) -> (F, F) {
    let inv_d = F::from_f64(1.0 / row.len() as f64);
    let mean = row.iter().copied().sum::<F>() * inv_d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
    (mean, F::one() / (var + eps).sqrt())
}

fn gelu_value<F: Real>(x: F, mode: GeluMode) -> F {
    let half = F::from_f64(0.5);
    match mode {
        GeluMode::Erf => {
            let cdf = half * (F::one() + (x / F::from_f64(std::f64::consts::SQRT_2)).erf());
            x * cdf
        }
        GeluMode::Tanh => {
            let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
            let u = c * (x + F::from_f64(0.044715) * x * x * x);
            half * x * (F::one() + u.tanh())
        }
    }
}

fn gelu_derivative<F: Real>(x: F, mode: GeluMode) -> F {
    let half = F::from_f64(0.5);
    match mode {
        GeluMode::Erf => {
            let cdf = half * (F::one() + (x / F::from_f64(std::f64::consts::SQRT_2)).erf());
            let pdf = F::from_f64(0.398_942_280_401_432_7) * (-half * x * x).exp(); // 1/sqrt(2pi)
            cdf + x * pdf
        }
        GeluMode::Tanh => {
            let c = F::from_f64(0.797_884_560_802_865_4);
            let k = F::from_f64(0.044715);
            let u = c * (x + k * x * x * x);
            let t = u.tanh();
            let du = c * (F::one() + F::from_f64(3.0) * k * x * x);
            half * (F::one() + t) + half * x * (F::one() - t * t) * du
        }
    }
}

/// Numerically stabilized (log-)softmax along `axis` of a rank-2 tensor.
/// Rank-1 input is treated as a single row.
fn softmax_forward<F: Real>(x: &Tensor<F>, axis: usize, log: bool) -> Result<Tensor<F>> {
    if !x.all_finite() {
        return Err(Error::Numeric("softmax input contains NaN or infinity".into()));
    }
    let (t, restore_rank1) = if x.rank() == 1 {
        (x.reshaped(vec![1, x.numel()])?, true)
    } else {
        (x.clone(), false)
    };
    let (n, d) = t.dims2()?;
    if axis > 1 {
        return Err(Error::Parameter(format!("softmax axis {axis} out of range for rank 2")));
    }
    let out = lanewise_src(&t, axis, |lane, out| {
        let mx = lane.iter().copied().fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for &v in lane {
            z += (v - mx).exp();
        }
        if log {
            let lz = z.ln();
            for (o, &v) in out.iter_mut().zip(lane) {
                *o = v - mx - lz;
            }
        } else {
            for (o, &v) in out.iter_mut().zip(lane) {
                *o = (v - mx).exp() / z;
            }
        }
    })?;
    if restore_rank1 {
        out.reshaped(vec![n * d])
    } else {
        Ok(out)
    }
}

/// Apply `f(lane_of_a, lane_of_b, out_lane)` along `axis` of rank-2 tensors.
fn lanewise<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    axis: usize,
    f: impl Fn(&[F], &[F], &mut [F]),
) -> Result<Tensor<F>> {
    let (a2, rank1) =
        if a.rank() == 1 { (a.reshaped(vec![1, a.numel()])?, true) } else { (a.clone(), false) };
    let b2 = if b.rank() == 1 { b.reshaped(vec![1, b.numel()])? } else { b.clone() };
    let (n, d) = a2.dims2()?;
    let mut out = vec![F::zero(); n * d];
    if axis == 1 {
        for i in 0..n {
            let al = &a2.data()[i * d..(i + 1) * d];
            let bl = &b2.data()[i * d..(i + 1) * d];
            f(al, bl, &mut out[i * d..(i + 1) * d]);
        }
    } else {
        let mut al = vec![F::zero(); n];
        let mut bl = vec![F::zero(); n];
        let mut ol = vec![F::zero(); n];
        for j in 0..d {
            for i in 0..n {
                al[i] = a2.data()[i * d + j];
                bl[i] = b2.data()[i * d + j];
            }
            f(&al, &bl, &mut ol);
            for i in 0..n {
                out[i * d + j] = ol[i];
            }
        }
    }
    let t = Tensor::new(vec![n, d], out)?;
    if rank1 {
        t.reshaped(vec![a.numel()])
    } else {
        Ok(t)
    }
}

fn lanewise_src<F: Real>(
    a: &Tensor<F>,
    axis: usize,
    f: impl Fn(&[F], &mut [F]),
) -> Result<Tensor<F>> {
    lanewise(a, a, axis, |al, _, out| f(al, out))
}

/// Geometry of one conv2d application.
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    /// Kernel footprint: c_in * kh * kw.
    k: usize,
}

impl ConvGeom {
    fn resolve(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [c_in, h, w] = match x_shape {
            [c, h, w] => [*c, *h, *w],
            other => return Err(Error::Shape(format!("conv2d input expects [C,H,W], got {other:?}"))),
        };
        let [c_out, wc_in, kh, kw] = match w_shape {
            [o, i, kh, kw] => [*o, *i, *kh, *kw],
            other => {
                return Err(Error::Shape(format!(
                    "conv2d kernels expect [C_out,C_in,kh,kw], got {other:?}"
                )))
            }
        };
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {c_in}, kernels expect {wc_in}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { c_in, h, w, c_out, kh, kw, stride, pad, h_out, w_out, k: c_in * kh * kw })
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfold input into `[K, P]`: row = kernel offset, column = output position.
fn im2col<F: Real>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let p = g.positions();
    let mut cols = vec![F::zero(); g.k * p];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let krow = (c * g.kh * g.kw + ky * g.kw + kx) * p;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        cols[krow + oy * g.w_out + ox] =
                            x[c * g.h * g.w + iy as usize * g.w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
fn col2im<F: Real>(dcols: &[F], g: &ConvGeom) -> Vec<F> {
    let p = g.positions();
    let mut dx = vec![F::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let krow = (c * g.kh * g.kw + ky * g.kw + kx) * p;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dx[c * g.h * g.w + iy as usize * g.w + ix as usize] +=
                            dcols[krow + oy * g.w_out + ox];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t2<F: Real>(rows: usize, cols: usize, vals: &[f64]) -> Tensor<F> {
        Tensor::new(vec![rows, cols], vals.iter().map(|&v| F::from_f64(v)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_leaves_operand_unchanged() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t2(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let m = tape.constant(t2(3, 3, &[2., -1., 3., 0.5, 4., -2., 7., 0., 1.]));
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(m).data());
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(t2(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let z = tape.constant(Tensor::zeros(&[3, 2]));
        let out = tape.matmul(m, z).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Oracle: naive i/j/p triple loop, written independently of the kernel.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..20).map(|_| rng.random::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut expect = vec![0.0f64; 12];
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a[i * 5 + p] * b[p * 3 + j];
                }
                expect[i * 3 + j] = s;
            }
        }
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(Tensor::new(vec![4, 5], a).unwrap());
        let bv = tape.constant(Tensor::new(vec![5, 3], b).unwrap());
        let out = tape.matmul(av, bv).unwrap();
        for (got, want) in tape.value(out).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 3, &[4.2, 4.2, 4.2]));
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.value(y).iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_single_element_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 1, &[-3.0]));
        let y = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 4, &[0.3, -1.2, 2.0, 0.0]));
        let xc = tape.constant(t2(1, 4, &[0.3 + 7.5, -1.2 + 7.5, 2.0 + 7.5, 7.5]));
        let y = tape.softmax(x, 1).unwrap();
        let yc = tape.softmax(xc, 1).unwrap();
        for (a, b) in tape.value(y).iter().zip(tape.value(yc).iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 2, &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x, 1), Err(Error::Numeric(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3, 3], |i| i as f64));
        let w = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.constant(Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64) * 0.1 - 0.5));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        // Oracle: direct quadruple loop over output position and kernel window.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
        let w: Vec<f64> = (0..9).map(|_| rng.random::<f64>() - 0.5).collect();
        let bias = 0.25;
        let mut expect = vec![0.0f64; 9];
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = bias;
                for ky in 0..3 {
                    for kx in 0..3 {
                        s += x[(oy + ky) * 5 + (ox + kx)] * w[ky * 3 + kx];
                    }
                }
                expect[oy * 3 + ox] = s;
            }
        }
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(vec![1, 5, 5], x).unwrap());
        let wv = tape.constant(Tensor::new(vec![1, 1, 3, 3], w).unwrap());
        let bv = tape.constant(Tensor::new(vec![1], vec![bias]).unwrap());
        let y = tape.conv2d(xv, wv, bv, 1, 0).unwrap();
        for (got, want) in tape.value(y).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_kernel_larger_than_padded_input_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, w, b, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn pool_constant_input_stays_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 4, 4], 2.5));
        let y = tape.max_pool2d(x, 2, 2, 0).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 2.5));
    }

    #[test]
    fn pool_window_selects_forced_max() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let y = tape.max_pool2d(x, 2, 2, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn pool_matches_nested_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..36).map(|_| rng.random::<f64>()).collect();
        // Oracle: explicit window scan, 2x2 stride 2 over 6x6.
        let mut expect = vec![f64::NEG_INFINITY; 9];
        for oy in 0..3 {
            for ox in 0..3 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let v = x[(oy * 2 + ky) * 6 + ox * 2 + kx];
                        if v > expect[oy * 3 + ox] {
                            expect[oy * 3 + ox] = v;
                        }
                    }
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(vec![1, 6, 6], x).unwrap());
        let y = tape.max_pool2d(xv, 2, 2, 0).unwrap();
        assert_eq!(tape.value(y).data(), expect.as_slice());
    }

    #[test]
    fn pool_zero_window_is_parameter_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4]));
        assert!(matches!(tape.max_pool2d(x, 0, 1, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn layer_norm_zero_variance_row_maps_to_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 4, &[3.0, 3.0, 3.0, 3.0]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.value(y).iter() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_scale_invariance() {
        let mut tape = Tape::<f64>::new();
        let vals = [0.2, -1.4, 0.9, 2.3];
        let doubled: Vec<f64> = vals.iter().map(|v| v * 2.0).collect();
        let x = tape.constant(t2(1, 4, &vals));
        let x2 = tape.constant(t2(1, 4, &doubled));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let y2 = tape.layer_norm(x2, g, b, 1e-12).unwrap();
        for (a, c) in tape.value(y).iter().zip(tape.value(y2).iter()) {
            assert!((a - c).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let gain = [1.5, -0.5, 2.0, 1.0, 0.25, 3.0];
        let bias = [0.1, 0.2, -0.3, 0.0, 1.0, -1.0];
        let eps = 1e-5;
        // Oracle: explicit two-pass mean/variance then affine.
        let mean: f64 = vals.iter().sum::<f64>() / 6.0;
        let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        let expect: Vec<f64> = vals
            .iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
            .collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 6], vals).unwrap());
        let g = tape.constant(Tensor::new(vec![6], gain.to_vec()).unwrap());
        let b = tape.constant(Tensor::new(vec![6], bias.to_vec()).unwrap());
        let y = tape.layer_norm(x, g, b, eps).unwrap();
        for (got, want) in tape.value(y).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn relu_and_gelu_point_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 3, &[-1.0, 2.0, 0.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let g = tape.gelu(x, GeluMode::Erf).unwrap();
        assert_eq!(tape.value(g).data()[2], 0.0);
        let gt = tape.gelu(x, GeluMode::Tanh).unwrap();
        assert_eq!(tape.value(gt).data()[2], 0.0);
    }

    #[test]
    fn gelu_matches_gaussian_cdf_oracle_on_grid() {
        // Oracle: x * Phi(x) with Phi from the erf identity, evaluated at f64.
        let phi = |x: f64| 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        let mut tape = Tape::<f64>::new();
        let grid: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
        let x = tape.constant(Tensor::new(vec![1, grid.len()], grid.clone()).unwrap());
        for mode in [GeluMode::Erf, GeluMode::Tanh] {
            let y = tape.gelu(x, mode).unwrap();
            for (got, &xi) in tape.value(y).iter().zip(&grid) {
                assert!((got - xi * phi(xi)).abs() < 1e-3, "mode {mode:?} at {xi}");
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_square_at_three_is_six() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(vec![1, 1], vec![3.0]).unwrap(), true);
        let sq = tape.matmul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(1.0), true);
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(t2(2, 2, &[1., 2., 3., 4.]), true);
        let b = tape.input(t2(2, 1, &[5., 6.]), true);
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(cat).shape(), &[2, 3]);
        let sl = tape.slice_cols(cat, 2, 1).unwrap();
        let loss = tape.sum_all(sl).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|&v| v == 0.0));
        assert!(tape.grad(b).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn flop_scopes_accumulate() {
        let mut tape = Tape::<f64>::new();
        tape.set_scope("a");
        let x = tape.constant(Tensor::zeros(&[4, 4]));
        let _ = tape.matmul(x, x).unwrap();
        tape.set_scope("b");
        let _ = tape.matmul(x, x).unwrap();
        assert_eq!(tape.flops().scope("a"), 128);
        assert_eq!(tape.flops().scope("b"), 128);
        assert_eq!(tape.flops().total(), 256);
    }
}
