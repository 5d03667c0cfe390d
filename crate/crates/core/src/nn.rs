//! Differentiable layers: convolution, pooling, resampling, activations,
//! normalization and fully connected projections.
//!
//! Feature maps are `C×H×W` tensors; token sequences are `T×d`.

use rand::Rng;

use crate::autodiff::{Result, Tape, Var};
use crate::params::{glorot_uniform, ParamId, ParamStore};
use crate::tensor::{self, Tensor, TensorError};

/// A tape together with the parameter values bound to it for one pass.
#[derive(Clone, Copy)]
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub store: &'t ParamStore,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self { tape, store }
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.store, id)
    }
}

fn shape_err(op: &'static str, msg: String) -> crate::autodiff::AutodiffError {
    TensorError::Shape { op, msg }.into()
}

fn chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err(op, format!("expected C×H×W, got {shape:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding of `(k-1)/2` on every side.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let p = self.positions();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(
                                row * p + oy * self.wo + ox,
                                (c * self.h + iy as usize) * self.w + ix as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.cols_rows() * self.positions()];
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.c * self.h * self.w];
        self.for_each_tap(|ci, xi| x[xi] += cols[ci]);
        x
    }
}

impl<'t> Var<'t> {
    /// 2D cross-correlation of `self: C×H×W` with `weight: O×C×k×k` plus
    /// `bias: O`.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Var<'t>,
        padding: Padding,
        stride: usize,
    ) -> Result<Var<'t>> {
        let x = self.val()?;
        let w = weight.val()?;
        let b = bias.val()?;
        let (c, h, wd) = chw("conv2d", x.shape())?;
        let (o, k) = match *w.shape() {
            [o, ci, kh, kw] if ci == c && kh == kw => (o, kh),
            [_, ci, kh, kw] if kh == kw => {
                return Err(shape_err(
                    "conv2d",
                    format!("input has {c} channels, kernel expects {ci}"),
                ))
            }
            _ => return Err(shape_err("conv2d", format!("bad kernel shape {:?}", w.shape()))),
        };
        if b.shape() != [o] {
            return Err(shape_err("conv2d", format!("bias {:?} for {o} outputs", b.shape())));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride 0".into()));
        }
        let pad = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(shape_err("conv2d", format!("same padding needs odd kernel, got {k}")));
                }
                (k - 1) / 2
            }
            Padding::Valid => 0,
        };
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(shape_err(
                "conv2d",
                format!("kernel {k}×{k} larger than padded input {}×{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            pad,
            stride,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let p = geom.positions();
        let ckk = geom.cols_rows();
        let cols = geom.im2col(x.data());
        let mut out = vec![0.0; o * p];
        for (oc, row) in out.chunks_exact_mut(p).enumerate() {
            row.fill(b.data()[oc]);
        }
        tensor::gemm(o, ckk, p, w.data(), false, &cols, false, &mut out, true);
        let out = Tensor::new([o, geom.ho, geom.wo], out)?;
        self.tape().record(
            &[self, weight, bias],
            out,
            Box::new(move |g, ins, _, needs| {
                let (x, w) = (&ins[0], &ins[1]);
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut dcols = vec![0.0; ckk * p];
                    tensor::gemm(ckk, o, p, w.data(), true, gd, false, &mut dcols, false);
                    Tensor::new(x.shape(), geom.col2im(&dcols)).expect("conv dx")
                });
                let gw = needs[1].then(|| {
                    let cols = geom.im2col(x.data());
                    let mut dw = vec![0.0; o * ckk];
                    tensor::gemm(o, p, ckk, gd, false, &cols, true, &mut dw, false);
                    Tensor::new(w.shape(), dw).expect("conv dw")
                });
                let gb = needs[2].then(|| {
                    Tensor::from_vec(gd.chunks_exact(p).map(|r| r.iter().sum()).collect())
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// 2×2 max pooling with stride 2; gradient goes to the first maximum of
    /// each window in row-major order.
    pub fn maxpool2x2(self) -> Result<Var<'t>> {
        let x = self.val()?;
        let (c, h, w) = chw("maxpool2x2", x.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("maxpool2x2", format!("odd extents {h}×{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut arg = Vec::with_capacity(c * ho * wo);
        let xd = x.data();
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = usize::MAX;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                            if best == usize::MAX || xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        let out = Tensor::new([c, ho, wo], out)?;
        self.tape().record(
            &[self],
            out,
            Box::new(move |g, ins, _, _| {
                let mut d = vec![0.0; ins[0].len()];
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    d[i] += gv;
                }
                vec![Some(Tensor::new(ins[0].shape(), d).expect("pool grad"))]
            }),
        )
    }

    /// 2×2 average pooling with stride 2.
    pub fn avgpool2x2(self) -> Result<Var<'t>> {
        let x = self.val()?;
        let out = avg_pool2x2(&x)?;
        self.tape().record(
            &[self],
            out,
            Box::new(|g, ins, _, _| {
                let up = upsample_nearest(&g.map(|v| 0.25 * v), 2);
                vec![Some(up.reshape(ins[0].shape()).expect("avgpool grad"))]
            }),
        )
    }

    /// Nearest-neighbour upsampling of H and W by `factor`.
    pub fn upsample(self, factor: usize) -> Result<Var<'t>> {
        let x = self.val()?;
        chw("upsample", x.shape())?;
        if factor == 0 {
            return Err(shape_err("upsample", "factor 0".into()));
        }
        let out = upsample_nearest(&x, factor);
        self.tape().record(
            &[self],
            out,
            Box::new(move |g, ins, _, _| {
                let (c, h, w) = (ins[0].shape()[0], ins[0].shape()[1], ins[0].shape()[2]);
                let wf = w * factor;
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h * factor {
                        for x in 0..wf {
                            d[(ch * h + y / factor) * w + x / factor] +=
                                g.data()[(ch * h * factor + y) * wf + x];
                        }
                    }
                }
                vec![Some(Tensor::new(ins[0].shape(), d).expect("upsample grad"))]
            }),
        )
    }

    pub fn upsample2x(self) -> Result<Var<'t>> {
        self.upsample(2)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let out = self.val()?.map(|x| x.max(0.0));
        self.tape().record(
            &[self],
            out,
            Box::new(|g, ins, _, _| {
                vec![Some(g.zip_map(&ins[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
            }),
        )
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let out = self.val()?.map(sigmoid);
        self.tape().record(
            &[self],
            out,
            Box::new(|g, _, y, _| vec![Some(g.zip_map(y, |g, y| g * y * (1.0 - y)))]),
        )
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.val()?;
        let lanes = Lanes::new(x.shape(), axis)?;
        let mut y = x.as_ref().clone();
        lanes.for_each(|idx| {
            let d = y.data_mut();
            let m = idx.clone().map(|i| d[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for i in idx.clone() {
                d[i] = (d[i] - m).exp();
                s += d[i];
            }
            for i in idx {
                d[i] /= s;
            }
        });
        self.tape().record(
            &[self],
            y,
            Box::new(move |g, _, y, _| {
                let mut d = vec![0.0; y.len()];
                lanes.for_each(|idx| {
                    let dot: f64 = idx.clone().map(|i| g.data()[i] * y.data()[i]).sum();
                    for i in idx {
                        d[i] = y.data()[i] * (g.data()[i] - dot);
                    }
                });
                vec![Some(Tensor::new(y.shape(), d).expect("softmax grad"))]
            }),
        )
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.val()?;
        let lanes = Lanes::new(x.shape(), axis)?;
        let mut y = x.as_ref().clone();
        lanes.for_each(|idx| {
            let d = y.data_mut();
            let m = idx.clone().map(|i| d[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + idx.clone().map(|i| (d[i] - m).exp()).sum::<f64>().ln();
            for i in idx {
                d[i] -= lse;
            }
        });
        self.tape().record(
            &[self],
            y,
            Box::new(move |g, _, y, _| {
                let mut d = vec![0.0; y.len()];
                lanes.for_each(|idx| {
                    let gs: f64 = idx.clone().map(|i| g.data()[i]).sum();
                    for i in idx {
                        d[i] = g.data()[i] - y.data()[i].exp() * gs;
                    }
                });
                vec![Some(Tensor::new(y.shape(), d).expect("log_softmax grad"))]
            }),
        )
    }

    /// Normalizes every vector along the last axis to zero mean and unit
    /// (population) variance, then applies `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.val()?;
        let n = *x.shape().last().ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(shape_err(
                "layer_norm",
                format!("trailing extent {n}, affine {:?}/{:?}", gamma.shape(), beta.shape()),
            ));
        }
        let (gv, bv) = (gamma.val()?, beta.val()?);
        let rows = x.len() / n;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        self.tape().record(
            &[self, gamma, beta],
            out,
            Box::new(move |g, ins, _, needs| {
                let gamma = &ins[1];
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut d = vec![0.0; gd.len()];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let dxh = gd[r * n + j] * gamma.data()[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * n + j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            let dxh = gd[r * n + j] * gamma.data()[j];
                            d[r * n + j] = inv_std[r] * (dxh - m1 - xhat[r * n + j] * m2);
                        }
                    }
                    Tensor::new(ins[0].shape(), d).expect("ln dx")
                });
                let gg = needs[1].then(|| {
                    let mut d = vec![0.0; n];
                    for (i, &gv) in gd.iter().enumerate() {
                        d[i % n] += gv * xhat[i];
                    }
                    Tensor::from_vec(d)
                });
                let gb = needs[2].then(|| {
                    let mut d = vec![0.0; n];
                    for (i, &gv) in gd.iter().enumerate() {
                        d[i % n] += gv;
                    }
                    Tensor::from_vec(d)
                });
                vec![gx, gg, gb]
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index lanes along one axis of a row-major shape.
#[derive(Clone, Copy)]
struct Lanes {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Lanes {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            }
            .into());
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    fn for_each(&self, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                let start = o * self.len * self.inner + i;
                f((start..start + self.len * self.inner).step_by(self.inner));
            }
        }
    }
}

/// Nearest-neighbour upsampling of a `C×H×W` tensor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            let row = &x.data()[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
            for xx in 0..wo {
                out.push(row[xx / factor]);
            }
        }
    }
    Tensor::new([c, ho, wo], out).expect("upsample shape")
}

/// 2×2 average pooling of a `C×H×W` tensor with even extents.
pub fn avg_pool2x2(x: &Tensor) -> tensor::Result<Tensor> {
    let [c, h, w] = *x.shape() else {
        return Err(TensorError::Shape {
            op: "avg_pool2x2",
            msg: format!("expected C×H×W, got {:?}", x.shape()),
        });
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Shape {
            op: "avg_pool2x2",
            msg: format!("odd extents {h}×{w}"),
        });
    }
    let d = x.data();
    let mut out = Vec::with_capacity(c * h * w / 4);
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let i = (ch * h + 2 * y) * w + 2 * xx;
                out.push(0.25 * (d[i] + d[i + 1] + d[i + w] + d[i + w + 1]));
            }
        }
    }
    Tensor::new([c, h / 2, w / 2], out)
}

/// Convolution layer with `O×I×k×k` weights and `O` biases.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: Padding,
    pub stride: usize,
}

impl Conv2d {
    /// Glorot-uniform weights, zero bias, `same` padding, stride 1.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kk = kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform(
                &[out_channels, in_channels, kernel, kernel],
                in_channels * kk,
                out_channels * kk,
                rng,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            padding: Padding::Same,
            stride: 1,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(
            ctx.param(self.weight),
            ctx.param(self.bias),
            self.padding,
            self.stride,
        )
    }

    pub fn zero(&self, store: &mut ParamStore) {
        zero_param(store, self.weight);
        zero_param(store, self.bias);
    }
}

/// Fully connected layer applied to the last axis: `y = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform(&[out_features, in_features], in_features, out_features, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    /// `x` is `T×in` (or a single `in` vector).
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let x2 = match shape.as_slice() {
            [n] => x.reshape([1, *n])?,
            [_, _] => x,
            _ => return Err(shape_err("linear", format!("expected T×in, got {shape:?}"))),
        };
        let y = x2
            .matmul(ctx.param(self.weight).transpose()?)?
            .add(ctx.param(self.bias))?;
        if shape.len() == 1 {
            y.reshape([self.out_features])
        } else {
            Ok(y)
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        zero_param(store, self.weight);
        zero_param(store, self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub len: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, len: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones([len]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([len]));
        Self {
            gamma,
            beta,
            len,
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(ctx.param(self.gamma), ctx.param(self.beta), self.eps)
    }
}

/// Per-channel normalization over the spatial extent of a `C×H×W` map,
/// followed by a per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones([channels, 1, 1]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels, 1, 1]));
        Self {
            gamma,
            beta,
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (c, h, w) = chw("instance_norm", &shape)?;
        if c != self.channels {
            return Err(TensorError::Shape {
                op: "instance_norm",
                msg: format!("built for {} channels, got {c}", self.channels),
            }
            .into());
        }
        let tape = ctx.tape;
        let unit = x.reshape([c, h * w])?.layer_norm(
            tape.constant(Tensor::ones([h * w])),
            tape.constant(Tensor::zeros([h * w])),
            self.eps,
        )?;
        unit.reshape([c, h, w])?.mul(ctx.param(self.gamma))?.add(ctx.param(self.beta))
    }

    /// Zero scale and shift: the output is identically zero.
    pub fn zero(&self, store: &mut ParamStore) {
        zero_param(store, self.gamma);
        zero_param(store, self.beta);
    }
}

pub(crate) fn zero_param(store: &mut ParamStore, id: ParamId) {
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 3, 4], (0..12).map(f64::from).collect()).unwrap());
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let w = tape.constant(k);
        let b = tape.constant(Tensor::zeros([1]));
        let y = x.conv2d(w, b, Padding::Same, 1).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn conv_all_ones_same_padding() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 3, 3]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros([1]));
        let y = x.conv2d(w, b, Padding::Same, 1).unwrap().value();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_zero_weights_gives_bias() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones([2, 4, 4]));
        let w = tape.constant(Tensor::zeros([3, 2, 3, 3]));
        let b = tape.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let y = x.conv2d(w, b, Padding::Same, 1).unwrap().value();
        assert_eq!(y.shape(), &[3, 4, 4]);
        for c in 0..3 {
            for i in 0..16 {
                assert_eq!(y.data()[c * 16 + i], [1.0, -2.0, 0.5][c]);
            }
        }
    }

    #[test]
    fn conv_valid_and_stride_output_extents() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 7, 9]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros([1]));
        let y = x.conv2d(w, b, Padding::Valid, 2).unwrap();
        // floor((H + 2p - k) / s) + 1
        assert_eq!(y.shape(), vec![1, 3, 4]);
        assert!(y.value().data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones([2, 4, 4]));
        let b = tape.constant(Tensor::zeros([1]));
        let w = tape.constant(Tensor::ones([1, 3, 3, 3]));
        assert!(x.conv2d(w, b, Padding::Same, 1).unwrap_err().to_string().contains("channels"));
        let w = tape.constant(Tensor::ones([1, 2, 5, 5]));
        assert!(x.conv2d(w, b, Padding::Valid, 1).unwrap_err().to_string().contains("larger"));
        let w = tape.constant(Tensor::ones([1, 2, 2, 2]));
        assert!(x.conv2d(w, b, Padding::Same, 1).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.maxpool2x2().unwrap().value().data(), &[4.0]);
        let c = tape.constant(Tensor::full([2, 4, 6], 3.5));
        assert_eq!(c.maxpool2x2().unwrap().value(), Tensor::full([2, 2, 3], 3.5));
        let r = tape.constant(Tensor::new([1, 4, 4], (0..16).map(f64::from).collect()).unwrap());
        assert_eq!(r.maxpool2x2().unwrap().value().data(), &[5.0, 7.0, 13.0, 15.0]);
        let odd = tape.constant(Tensor::ones([1, 3, 4]));
        assert!(odd.maxpool2x2().is_err());
    }

    #[test]
    fn activations() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(z.sigmoid().unwrap().value().item(), 0.5);
        let big = tape.constant(t(&[2], &[-800.0, 800.0]));
        let s = big.sigmoid().unwrap().value();
        assert!(s.data()[0] >= 0.0 && s.data()[1] <= 1.0);
        let u = tape.constant(Tensor::zeros([4]));
        assert_eq!(u.softmax(0).unwrap().value().data(), &[0.25; 4]);
        assert!(u.softmax(1).is_err());
    }

    #[test]
    fn softmax_along_middle_axis_sums_to_one() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(glorot_uniform(&[3, 4, 5], 1, 1, &mut rng).map(|v| v * 10.0));
        let y = x.softmax(1).unwrap().value();
        for a in 0..3 {
            for c in 0..5 {
                let s: f64 = (0..4).map(|b| y.at(&[a, b, c])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let ls = x.log_softmax(1).unwrap().value();
        for (a, b) in ls.data().iter().zip(y.data()) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_examples() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::zeros([2]));
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = x.layer_norm(g, b, 0.0).unwrap().value();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        let c = tape.constant(Tensor::full([2, 2], 4.0));
        assert_eq!(c.layer_norm(g, b, 1e-5).unwrap().value(), Tensor::zeros([2, 2]));
        let g0 = tape.constant(Tensor::zeros([2]));
        let b5 = tape.constant(Tensor::full([2], 5.0));
        assert_eq!(x.layer_norm(g0, b5, 1e-5).unwrap().value().data(), &[5.0, 5.0]);
        let g3 = tape.constant(Tensor::ones([3]));
        assert!(x.layer_norm(g3, b, 1e-5).is_err());
    }

    #[test]
    fn upsample_examples() {
        let tape = Tape::new();
        let one = tape.constant(t(&[1, 1, 1], &[1.0]));
        assert_eq!(one.upsample2x().unwrap().value(), Tensor::ones([1, 2, 2]));
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let u = x.upsample2x().unwrap().value();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(u.at(&[0, i, j]), x.value().at(&[0, i / 2, j / 2]));
            }
        }
        let back = x.upsample2x().unwrap().avgpool2x2().unwrap().value();
        assert_eq!(back, x.value());
        let mp = x.upsample2x().unwrap().maxpool2x2().unwrap().value();
        assert_eq!(mp, x.value());
    }

    #[test]
    fn linear_shapes_and_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "fc", 3, 2, &mut rng);
        assert_eq!(store.count(), 8);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(Tensor::ones([5, 3]));
        assert_eq!(lin.forward(&ctx, x).unwrap().shape(), vec![5, 2]);
        let v = tape.constant(Tensor::ones([3]));
        assert_eq!(lin.forward(&ctx, v).unwrap().shape(), vec![2]);
    }
}
