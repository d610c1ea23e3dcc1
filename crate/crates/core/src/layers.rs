//! Differentiable layers for NHWC image batches: convolution, batch
//! normalization, max pooling, dense, activations and dropout.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that the output keeps the input's spatial extents.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Weights drawn from N(0, 2 / fan_in).
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    pad_h: usize,
    pad_w: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one HWC image into a `pixels × (kh·kw·cin)` patch matrix.
fn im2col(img: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let k = g.patch();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * k..][..k];
            for ky in 0..g.kh {
                let iy = (oy + ky) as isize - g.pad_h as isize;
                for kx in 0..g.kw {
                    let ix = (ox + kx) as isize - g.pad_w as isize;
                    let dst = &mut row[(ky * g.kw + kx) * g.cin..][..g.cin];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        dst.copy_from_slice(&img[src..src + g.cin]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into the image.
fn col2im(cols: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    let k = g.patch();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * k..][..k];
            for ky in 0..g.kh {
                let iy = (oy + ky) as isize - g.pad_h as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox + kx) as isize - g.pad_w as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kw + kx) * g.cin..][..g.cin];
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    img[dst..dst + g.cin]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}

struct Conv2dRule {
    geom: ConvGeometry,
}

impl Backward for Conv2dRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = &self.geom;
        let (x, kernel) = (inputs[0], inputs[1]);
        let n = x.shape()[0];
        let (k, p) = (g.patch(), g.pixels());
        let in_len = g.h * g.w * g.cin;
        let out_len = p * g.cout;

        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dk = needs[1].then(|| vec![0.0; kernel.len()]);
        let mut cols = vec![0.0; p * k];
        for i in 0..n {
            let gy = &grad[i * out_len..][..out_len];
            if let Some(dk) = dk.as_mut() {
                im2col(&x.data()[i * in_len..][..in_len], g, &mut cols);
                gemm(k, p, g.cout, &cols, true, gy, false, dk, true);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(p, g.cout, k, gy, false, kernel.data(), true, &mut cols, false);
                col2im(&cols, g, &mut dx[i * in_len..][..in_len]);
            }
        }
        let db = needs[2].then(|| {
            let mut db = vec![0.0; g.cout];
            for row in grad.chunks(g.cout) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            db
        });
        vec![dx, dk, db]
    }
}

/// 2-D convolution, stride 1. `x` is `[N, H, W, Cin]`, `kernel` is
/// `[kh, kw, Cin, Cout]`, `bias` is `[Cout]`.
pub fn conv2d<'t>(x: Var<'t>, kernel: Var<'t>, bias: Var<'t>, padding: Padding) -> Result<Var<'t>> {
    let (xv, kv, bv) = (x.value(), kernel.value(), bias.value());
    if xv.rank() != 4 || kv.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d: input {:?}, kernel {:?}",
            xv.shape(),
            kv.shape()
        )));
    }
    let (n, h, w, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (kh, kw, kcin, cout) = (kv.shape()[0], kv.shape()[1], kv.shape()[2], kv.shape()[3]);
    if kcin != cin {
        return Err(Error::shape(format!(
            "conv2d: input has {cin} channels, kernel expects {kcin}"
        )));
    }
    if bv.shape() != [cout] {
        return Err(Error::shape(format!(
            "conv2d: bias {:?} for {cout} filters",
            bv.shape()
        )));
    }
    let (pad_h, pad_w, out_h, out_w) = match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, w),
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::shape(format!(
                    "conv2d: {h}×{w} input smaller than {kh}×{kw} kernel"
                )));
            }
            (0, 0, h - kh + 1, w - kw + 1)
        }
    };
    let geom = ConvGeometry {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        pad_h,
        pad_w,
        out_h,
        out_w,
    };
    let (k, p) = (geom.patch(), geom.pixels());
    let in_len = h * w * cin;
    let mut out = vec![0.0; n * p * cout];
    let mut cols = vec![0.0; p * k];
    for i in 0..n {
        im2col(&xv.data()[i * in_len..][..in_len], &geom, &mut cols);
        let dst = &mut out[i * p * cout..][..p * cout];
        gemm(p, k, cout, &cols, false, kv.data(), false, dst, false);
        for row in dst.chunks_mut(cout) {
            row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
    }
    let value = Tensor::new(&[n, out_h, out_w, cout], out)?;
    x.tape()
        .record(value, &[x, kernel, bias], Conv2dRule { geom })
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "batchnorm momentum {momentum} / epsilon {epsilon}"
            )));
        }
        Ok(Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

struct BatchNormRule {
    channels: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl Backward for BatchNormRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let c = self.channels;
        let gamma = inputs[1].data();
        let mut dbeta = vec![0.0; c];
        let mut dgamma = vec![0.0; c];
        for (g, xh) in grad.chunks(c).zip(self.xhat.chunks(c)) {
            for j in 0..c {
                dbeta[j] += g[j];
                dgamma[j] += g[j] * xh[j];
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; grad.len()];
            if self.train {
                let m = (grad.len() / c) as f64;
                for ((d, g), xh) in dx.chunks_mut(c).zip(grad.chunks(c)).zip(self.xhat.chunks(c)) {
                    for j in 0..c {
                        d[j] = gamma[j] * self.inv_std[j] / m
                            * (m * g[j] - dbeta[j] - xh[j] * dgamma[j]);
                    }
                }
            } else {
                for (d, g) in dx.chunks_mut(c).zip(grad.chunks(c)) {
                    for j in 0..c {
                        d[j] = g[j] * gamma[j] * self.inv_std[j];
                    }
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

fn check_bn_shapes(x: &Tensor, gamma: &Tensor, beta: &Tensor, channels: usize) -> Result<usize> {
    let c = x.shape().last().copied().unwrap_or(0);
    if x.rank() < 2 || c != channels || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "batchnorm: input {:?}, gamma {:?}, beta {:?}, {channels} running channels",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(c)
}

fn bn_record<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    mean: &[f64],
    var: &[f64],
    epsilon: f64,
    train: bool,
) -> Result<Var<'t>> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let c = mean.len();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut xhat = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    for ((xr, hr), orow) in xv
        .data()
        .chunks(c)
        .zip(xhat.chunks_mut(c))
        .zip(out.chunks_mut(c))
    {
        for j in 0..c {
            hr[j] = (xr[j] - mean[j]) * inv_std[j];
            orow[j] = hr[j] * gv.data()[j] + bv.data()[j];
        }
    }
    let value = Tensor::new(xv.shape(), out)?;
    x.tape().record(
        value,
        &[x, gamma, beta],
        BatchNormRule {
            channels: c,
            xhat,
            inv_std,
            train,
        },
    )
}

/// Normalizes with the batch's per-channel statistics (over every axis but
/// the last) and folds them into the running estimates.
pub fn batchnorm_train<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    state: &mut BatchNormState,
) -> Result<Var<'t>> {
    let xv = x.value();
    let c = check_bn_shapes(&xv, &gamma.value(), &beta.value(), state.channels())?;
    let m = xv.len() / c;
    if m < 2 {
        return Err(Error::shape(format!(
            "batchnorm: train mode needs at least 2 values per channel, got {m}"
        )));
    }
    let mut mean = vec![0.0; c];
    for row in xv.data().chunks(c) {
        mean.iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    mean.iter_mut().for_each(|s| *s /= m as f64);
    let mut var = vec![0.0; c];
    for row in xv.data().chunks(c) {
        for j in 0..c {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= m as f64);

    let out = bn_record(x, gamma, beta, &mean, &var, state.epsilon, true)?;

    let mom = state.momentum;
    let unbias = m as f64 / (m as f64 - 1.0);
    for (r, b) in state.running_mean.data_mut().iter_mut().zip(&mean) {
        *r = mom * *r + (1.0 - mom) * b;
    }
    for (r, b) in state.running_var.data_mut().iter_mut().zip(&var) {
        *r = mom * *r + (1.0 - mom) * b * unbias;
    }
    Ok(out)
}

/// Normalizes with the stored running statistics.
pub fn batchnorm_eval<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    state: &BatchNormState,
) -> Result<Var<'t>> {
    check_bn_shapes(&x.value(), &gamma.value(), &beta.value(), state.channels())?;
    bn_record(
        x,
        gamma,
        beta,
        state.running_mean.data(),
        state.running_var.data(),
        state.epsilon,
        false,
    )
}

pub fn batchnorm<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<Var<'t>> {
    match mode {
        Mode::Train => batchnorm_train(x, gamma, beta, state),
        Mode::Eval => batchnorm_eval(x, gamma, beta, state),
    }
}

// ---------------------------------------------------------------------------
// Pooling, dense, activations, dropout

struct MaxPoolRule {
    argmax: Vec<usize>,
}

impl Backward for MaxPoolRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; inputs[0].len()];
        for (&src, g) in self.argmax.iter().zip(grad) {
            dx[src] += g;
        }
        vec![Some(dx)]
    }
}

/// 2×2 max pooling with stride 2 on `[N, H, W, C]`; H and W must be even.
/// Ties resolve to the first maximum in row-major window order.
pub fn maxpool2d(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    if xv.rank() != 4 || !xv.shape()[1].is_multiple_of(2) || !xv.shape()[2].is_multiple_of(2) {
        return Err(Error::shape(format!(
            "maxpool2d needs [N, even H, even W, C], got {:?}",
            xv.shape()
        )));
    }
    let (n, h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let data = xv.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if best == usize::MAX || data[i] > data[best] {
                            best = i;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
    }
    let value = Tensor::new(&[n, oh, ow, c], out)?;
    x.tape().record(value, &[x], MaxPoolRule { argmax })
}

/// Collapses every axis after the first.
pub fn flatten(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    let n = *shape.first().ok_or_else(|| Error::shape("flatten of a scalar"))?;
    let rest: usize = shape[1..].iter().product();
    x.reshape(&[n, rest])
}

/// `x · weight + bias` for `x: [N, in]`, `weight: [in, out]`, `bias: [out]`.
pub fn dense<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::shape(format!(
            "dense: input {xs:?} vs weight {ws:?}"
        )));
    }
    x.matmul(weight)?.bias_add(bias)
}

pub fn activation(x: Var<'_>, kind: Activation) -> Result<Var<'_>> {
    match kind {
        Activation::Relu => x.relu(),
        Activation::Sigmoid => x.sigmoid(),
    }
}

struct DropoutRule {
    mask: Vec<f64>,
}

impl Backward for DropoutRule {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().zip(&self.mask).map(|(g, m)| g * m).collect())]
    }
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 − rate)`.
pub fn dropout<'t>(x: Var<'t>, rate: f64, mode: Mode, rng: &mut (impl Rng + ?Sized)) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let xv = x.value();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..xv.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let out = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    let value = Tensor::new(xv.shape(), out)?;
    x.tape().record(value, &[x], DropoutRule { mask })
}
