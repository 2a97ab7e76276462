//! Tape-based reverse-mode automatic differentiation over [`NumArray`].
//!
//! Every operation appends a node to the [`Tape`]; inputs always precede the
//! node that consumes them, so walking the node list backwards is a reverse
//! topological order and each node is visited exactly once per backward pass.
//! Gradients of leaves created with [`Tape::param`] accumulate across calls
//! to [`Tape::backward`] until cleared with [`Tape::zero_grad`].

use crate::error::{Error, Result};
use crate::tensor::NumArray;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward behaviour of the spike nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeFn {
    /// Binary Heaviside step forward, triangular surrogate backward.
    Heaviside,
    /// The integral of the triangular surrogate forward, so the backward rule
    /// is the exact derivative. Used for gradient checking.
    Smooth,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    AddBias(Var, Var),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    ScalarAffine {
        x: Var,
        a: f32,
    },
    Spike {
        x: Var,
        threshold: f32,
        width: f32,
    },
    Relu(Var),
    AvgPool2d {
        x: Var,
        k: usize,
    },
    Reshape(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: NumArray,
    op: Op,
    requires_grad: bool,
}

/// Single-owner recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Triangular surrogate derivative of the spike function at `v` (membrane
/// potential minus threshold).
pub fn triangle_surrogate(v: f32, width: f32) -> f32 {
    (1.0 - v.abs() / width).max(0.0) / width
}

/// Integral of [`triangle_surrogate`], a smooth clamp from 0 to 1.
pub fn smooth_step(v: f32, width: f32) -> f32 {
    if v <= -width {
        0.0
    } else if v >= width {
        1.0
    } else if v <= 0.0 {
        let d = v + width;
        d * d / (2.0 * width * width)
    } else {
        let d = width - v;
        1.0 - d * d / (2.0 * width * width)
    }
}

fn same_shape(a: &NumArray, b: &NumArray, context: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
            context,
        });
    }
    Ok(())
}

/// Output extent of a strided, padded correlation along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("convolution stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::Config(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::Config(format!(
            "non-integral output extent: ({input} + 2*{padding} - {kernel}) / {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Range of output positions `o` with `o*stride + k - padding` inside `0..input`.
#[inline]
fn valid_out_range(out: usize, input: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    // o*stride + k - padding <= input - 1
    let limit = input as isize - 1 + padding as isize - k as isize;
    if limit < 0 {
        return (0, 0);
    }
    let hi = (limit as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NumArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn param(&mut self, value: NumArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: NumArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &NumArray {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
                context: "matmul inner extents",
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += aip * b;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(NumArray::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [F, C, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Dimension {
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
                context: "conv2d input channels",
            });
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = conv_out_extent(h, kh, stride, padding)?;
        let ow = conv_out_extent(wd, kw, stride, padding)?;
        let (xd, wdat) = (xv.data(), wv.data());
        let mut out = vec![0.0f32; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                let plane = &mut out[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
                for ci in 0..c {
                    let xplane = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    for ki in 0..kh {
                        let (ylo, yhi) = valid_out_range(oh, h, ki, stride, padding);
                        for kj in 0..kw {
                            let wt = wdat[((fi * c + ci) * kh + ki) * kw + kj];
                            if wt == 0.0 {
                                continue;
                            }
                            let (xlo, xhi) = valid_out_range(ow, wd, kj, stride, padding);
                            for oy in ylo..yhi {
                                let iy = oy * stride + ki - padding;
                                let xrow = &xplane[iy * wd..(iy + 1) * wd];
                                let orow = &mut plane[oy * ow..(oy + 1) * ow];
                                for ox in xlo..xhi {
                                    orow[ox] += wt * xrow[ox * stride + kj - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            NumArray::new(vec![n, f, oh, ow], out)?,
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// `x: [N, F, ...] + b: [F]`, broadcast over the batch and any trailing axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let xs = xv.shape();
        if xs.len() < 2 || bv.shape() != [xs[1]] {
            return Err(Error::Dimension {
                lhs: xs.to_vec(),
                rhs: bv.shape().to_vec(),
                context: "bias add",
            });
        }
        let f = xs[1];
        let inner: usize = xs[2..].iter().product();
        let mut out = xv.data().to_vec();
        for (chunk_idx, chunk) in out.chunks_mut(inner).enumerate() {
            let bias = bv.data()[chunk_idx % f];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(NumArray::new(xs.to_vec(), out)?, Op::AddBias(x, b), rg))
    }

    /// Per-channel `x * scale[c] + shift[c]` for `x: [N, C, ...]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (xv, sv, tv) = (self.value(x), self.value(scale), self.value(shift));
        let xs = xv.shape();
        if xs.len() < 2 || sv.shape() != [xs[1]] || tv.shape() != [xs[1]] {
            return Err(Error::Dimension {
                lhs: xs.to_vec(),
                rhs: sv.shape().to_vec(),
                context: "channel affine",
            });
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let mut out = xv.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let (s, t) = (sv.data()[i % c], tv.data()[i % c]);
            chunk.iter_mut().for_each(|v| *v = *v * s + t);
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            NumArray::new(xs.to_vec(), out)?,
            Op::ChannelAffine { x, scale, shift },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "elementwise add")?;
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(NumArray::new(av.shape().to_vec(), out)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "elementwise mul")?;
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(NumArray::new(av.shape().to_vec(), out)?, Op::Mul(a, b), rg))
    }

    /// Elementwise `a * x + b` with scalar constants.
    pub fn scalar_affine(&mut self, x: Var, a: f32, b: f32) -> Var {
        let xv = self.value(x);
        let out = xv.map(|v| a * v + b);
        let rg = self.rg(x);
        self.push(out, Op::ScalarAffine { x, a }, rg)
    }

    /// Spike nonlinearity on membrane potential `x`: fires where `x >= threshold`.
    pub fn spike(&mut self, x: Var, threshold: f32, width: f32, kind: SpikeFn) -> Var {
        let xv = self.value(x);
        let out = match kind {
            SpikeFn::Heaviside => xv.map(|v| if v >= threshold { 1.0 } else { 0.0 }),
            SpikeFn::Smooth => xv.map(|v| smooth_step(v - threshold, width)),
        };
        let rg = self.rg(x);
        self.push(
            out,
            Op::Spike {
                x,
                threshold,
                width,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Non-overlapping `k x k` average pooling on `[N, C, H, W]`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape();
        if xs.len() != 4 || k == 0 || xs[2] % k != 0 || xs[3] % k != 0 {
            return Err(Error::Config(format!(
                "average pooling with window {k} does not tile input {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f32;
        let xd = xv.data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for iy in 0..h {
                for ix in 0..w {
                    dst[(iy / k) * ow + ix / k] += src[iy * w + ix];
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(
            NumArray::new(vec![n, c, oh, ow], out)?,
            Op::AvgPool2d { x, k },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(NumArray::scalar(s), Op::Sum(x), rg)
    }

    /// Mean cross-entropy of `softmax(logits)` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let ls = lv.shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::Dimension {
                lhs: ls.to_vec(),
                rhs: vec![labels.len()],
                context: "cross-entropy logits vs labels",
            });
        }
        let classes = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut total = 0.0f64;
        for (row, &label) in lv.data().chunks(classes).zip(labels) {
            total += (log_sum_exp(row) - row[label]) as f64;
        }
        let loss = (total / labels.len() as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            NumArray::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates `d loss / d node` to every node and accumulates it into
    /// the gradient buffers of trainable leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {
                    self.nodes[idx].value.accumulate_grad(&g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.rg(a) {
                        // dA = dC * B^T
                        let mut da = vec![0.0f32; m * k];
                        let bd = bv.data();
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads, a, da);
                    }
                    if self.rg(b) {
                        // dB = A^T * dC
                        let mut db = vec![0.0f32; k * n];
                        let ad = av.data();
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ad[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += aip * gv;
                                }
                            }
                        }
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    stride,
                    padding,
                } => {
                    let (dx, dw) = self.conv2d_backward(x, w, stride, padding, &g);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads, w, dw);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.rg(b) {
                        let xs = self.value(x).shape();
                        let f = xs[1];
                        let inner: usize = xs[2..].iter().product();
                        let mut db = vec![0.0f32; f];
                        for (i, chunk) in g.chunks(inner).enumerate() {
                            db[i % f] += chunk.iter().sum::<f32>();
                        }
                        accumulate(&mut grads, b, db);
                    }
                    if self.rg(x) {
                        accumulate(&mut grads, x, g);
                    }
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let xv = self.value(x);
                    let c = xv.shape()[1];
                    let inner: usize = xv.shape()[2..].iter().product();
                    if self.rg(scale) || self.rg(shift) {
                        let mut ds = vec![0.0f32; c];
                        let mut dt = vec![0.0f32; c];
                        for (i, (gc, xc)) in g.chunks(inner).zip(xv.data().chunks(inner)).enumerate() {
                            ds[i % c] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f32>();
                            dt[i % c] += gc.iter().sum::<f32>();
                        }
                        if self.rg(scale) {
                            accumulate(&mut grads, scale, ds);
                        }
                        if self.rg(shift) {
                            accumulate(&mut grads, shift, dt);
                        }
                    }
                    if self.rg(x) {
                        let sv = self.value(scale).data();
                        let mut dx = g;
                        for (i, chunk) in dx.chunks_mut(inner).enumerate() {
                            let s = sv[i % c];
                            chunk.iter_mut().for_each(|v| *v *= s);
                        }
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(a) && self.rg(b) {
                        accumulate(&mut grads, a, g.clone());
                        accumulate(&mut grads, b, g);
                    } else if self.rg(a) {
                        accumulate(&mut grads, a, g);
                    } else if self.rg(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let d = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, a, d);
                    }
                    if self.rg(b) {
                        let d = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, b, d);
                    }
                }
                Op::ScalarAffine { x, a } => {
                    let d = g.iter().map(|v| v * a).collect();
                    accumulate(&mut grads, x, d);
                }
                Op::Spike {
                    x,
                    threshold,
                    width,
                } => {
                    let d = g
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(gv, &u)| gv * triangle_surrogate(u - threshold, width))
                        .collect();
                    accumulate(&mut grads, x, d);
                }
                Op::Relu(x) => {
                    let d = g
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(gv, &u)| if u > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x, d);
                }
                Op::AvgPool2d { x, k } => {
                    let xs = self.value(x).shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (oh, ow) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f32;
                    let mut dx = vec![0.0f32; n * c * h * w];
                    for p in 0..n * c {
                        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                        let dp = &mut dx[p * h * w..(p + 1) * h * w];
                        for iy in 0..h {
                            for ix in 0..w {
                                dp[iy * w + ix] = gp[(iy / k) * ow + ix / k] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Reshape(x) => accumulate(&mut grads, x, g),
                Op::Sum(x) => {
                    let n = self.value(x).len();
                    accumulate(&mut grads, x, vec![g[0]; n]);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let lv = self.value(logits);
                    let classes = lv.shape()[1];
                    let scale = g[0] / labels.len() as f32;
                    let mut d = vec![0.0f32; lv.len()];
                    for ((row, drow), &label) in
                        lv.data().chunks(classes).zip(d.chunks_mut(classes)).zip(&labels)
                    {
                        let lse = log_sum_exp(row);
                        for (dv, &z) in drow.iter_mut().zip(row) {
                            *dv = (z - lse).exp() * scale;
                        }
                        drow[label] -= scale;
                    }
                    accumulate(&mut grads, logits, d);
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        g: &[f32],
    ) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let (need_x, need_w) = (self.rg(x), self.rg(w));
        let mut dx = need_x.then(|| vec![0.0f32; xv.len()]);
        let mut dw = need_w.then(|| vec![0.0f32; wv.len()]);
        let (xd, wdat) = (xv.data(), wv.data());
        for ni in 0..n {
            for fi in 0..f {
                let gplane = &g[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
                for ci in 0..c {
                    let base = (ni * c + ci) * h * wd;
                    for ki in 0..kh {
                        let (ylo, yhi) = valid_out_range(oh, h, ki, stride, padding);
                        for kj in 0..kw {
                            let widx = ((fi * c + ci) * kh + ki) * kw + kj;
                            let (xlo, xhi) = valid_out_range(ow, wd, kj, stride, padding);
                            let wt = wdat[widx];
                            let mut acc = 0.0f32;
                            for oy in ylo..yhi {
                                let iy = oy * stride + ki - padding;
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                let row_base = base + iy * wd;
                                if need_w {
                                    for ox in xlo..xhi {
                                        acc += grow[ox] * xd[row_base + ox * stride + kj - padding];
                                    }
                                }
                                if let Some(dx) = dx.as_mut() {
                                    if wt != 0.0 {
                                        for ox in xlo..xhi {
                                            dx[row_base + ox * stride + kj - padding] += grow[ox] * wt;
                                        }
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
        (dx, dw)
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, delta: Vec<f32>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let s: f32 = row.iter().map(|&z| (z - max).exp()).sum();
    max + s.ln()
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = row.iter().map(|&z| (z - max).exp()).collect();
    let s: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f32]) -> NumArray {
        NumArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut t = Tape::new();
        let i2 = t.constant(arr(&[2, 2], &[1., 0., 0., 1.]));
        let m = t.constant(arr(&[2, 2], &[1., 2., 3., 4.]));
        let out = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(out).data(), &[1., 2., 3., 4.]);

        let p = t.constant(arr(&[2, 2], &[1., 0., 0., 0.]));
        let m2 = t.constant(arr(&[2, 2], &[5., 6., 7., 8.]));
        let out = t.matmul(p, m2).unwrap();
        assert_eq!(t.value(out).data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(NumArray::zeros(&[2, 3]));
        let b = t.constant(NumArray::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn conv_all_ones_is_nine() {
        let mut t = Tape::new();
        let x = t.constant(NumArray::filled(&[1, 1, 3, 3], 1.0));
        let w = t.constant(NumArray::filled(&[1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_zero_kernel_gives_zero() {
        let mut t = Tape::new();
        let x = t.constant(NumArray::new(vec![1, 2, 4, 4], (0..32).map(|v| v as f32).collect()).unwrap());
        let w = t.constant(NumArray::zeros(&[3, 2, 3, 3]));
        let y = t.conv2d(x, w, 1, 1).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(t.value(y).shape(), &[1, 3, 4, 4]);
    }

    #[test]
    fn conv_non_integral_extent_is_config_error() {
        let mut t = Tape::new();
        let x = t.constant(NumArray::zeros(&[1, 1, 6, 6]));
        let w = t.constant(NumArray::zeros(&[1, 1, 3, 3]));
        assert!(matches!(t.conv2d(x, w, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let theta = t.param(NumArray::filled(&[5], 0.3));
        let loss = t.sum(theta);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(theta).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn backward_square_and_accumulation() {
        let mut t = Tape::new();
        let theta = t.param(arr(&[2], &[1.0, 2.0]));
        let sq = t.mul(theta, theta).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(theta).unwrap(), &[2.0, 4.0]);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(theta).unwrap(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(theta).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let theta = t.param(NumArray::zeros(&[3]));
        assert!(matches!(t.backward(theta), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut t = Tape::new();
        let a = t.param(arr(&[2], &[1.0, 2.0]));
        let m = t.constant(arr(&[2], &[1.0, 0.0]));
        let p = t.mul(a, m).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0, 0.0]);
        assert!(t.grad(m).is_none());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut t = Tape::new();
        let z = t.param(NumArray::zeros(&[2, 4]));
        let l = t.softmax_cross_entropy(z, &[0, 3]).unwrap();
        assert!((t.value(l).data()[0] - 4f32.ln()).abs() < 1e-6);
        assert!(t.softmax_cross_entropy(z, &[0, 4]).is_err());
    }

    #[test]
    fn smooth_step_matches_surrogate_shape() {
        assert_eq!(smooth_step(-2.0, 1.0), 0.0);
        assert_eq!(smooth_step(2.0, 1.0), 1.0);
        assert!((smooth_step(0.0, 1.0) - 0.5).abs() < 1e-7);
        assert_eq!(triangle_surrogate(0.0, 1.0), 1.0);
        assert_eq!(triangle_surrogate(0.5, 1.0), 0.5);
        assert_eq!(triangle_surrogate(1.0, 1.0), 0.0);
    }

    #[test]
    fn valid_range_respects_padding() {
        // input 4, kernel offset 0, pad 1, stride 1, out 4: o - 1 in [0, 4) -> o in [1, 4)
        assert_eq!(valid_out_range(4, 4, 0, 1, 1), (1, 4));
        // offset 2: o + 1 in [0, 4) -> o in [0, 3)
        assert_eq!(valid_out_range(4, 4, 2, 1, 1), (0, 3));
        // stride 2, pad 0, in 5, k offset 1, out 2: 2o + 1 <= 4 -> o in [0, 2)
        assert_eq!(valid_out_range(2, 5, 1, 2, 0), (0, 2));
    }
}
