//! Forward and backward kernels for every [`LayerSpec`] variant.

use super::params::{Mode, ParamStore, GDN_BETA_MIN};
use super::spec::LayerSpec;
use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col, pairwise_sum, pairwise_sum_by, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    None,
    Input(Tensor<T>),
    Output(Tensor<T>),
    Shape(Vec<usize>),
    Norm {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Divisive {
        input: Tensor<T>,
        norm: Tensor<T>,
    },
}

/// Batch statistics a training-mode BatchNorm wants folded into its
/// running estimates.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub layer: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Forward<T> {
    pub output: Tensor<T>,
    pub cache: Cache<T>,
    pub stats: Option<StatUpdate<T>>,
}

fn key(name: &str, suffix: &str) -> String {
    format!("{name}.{suffix}")
}

/// Runs one layer. When `record` is false no cache is kept.
pub fn forward<T: Real>(
    name: &str,
    spec: &LayerSpec,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    mode: Mode,
    record: bool,
) -> Result<Forward<T>> {
    let out_shape = spec.output_shape(x.shape())?;
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("input of {name} ({spec})")));
    }
    let mut stats = None;
    let (output, cache) = match *spec {
        LayerSpec::Conv2d {
            kernel,
            stride,
            padding,
            bias,
            ..
        } => {
            let mut y = conv_forward(x, params.value(&key(name, "weight"))?, kernel, stride, padding, &out_shape);
            if bias {
                add_channel_bias(&mut y, params.value(&key(name, "bias"))?);
            }
            (y, keep_input(x, record))
        }
        LayerSpec::TransConv2d { kernel, stride, bias, .. } => {
            let mut y = tconv_forward(x, params.value(&key(name, "weight"))?, kernel, stride, &out_shape);
            if bias {
                add_channel_bias(&mut y, params.value(&key(name, "bias"))?);
            }
            (y, keep_input(x, record))
        }
        LayerSpec::Dense { inp, out, bias } => {
            let n = x.batch();
            let w = params.value(&key(name, "weight"))?;
            let mut y = Tensor::zeros(vec![n, out]);
            gemm(false, true, n, out, inp, T::one(), x.data(), w.data(), T::zero(), y.data_mut());
            if bias {
                let b = params.value(&key(name, "bias"))?.data();
                for row in y.data_mut().chunks_mut(out) {
                    for (v, &bb) in row.iter_mut().zip(b) {
                        *v += bb;
                    }
                }
            }
            (y, keep_input(x, record))
        }
        LayerSpec::BatchNorm { ch } => {
            let (y, cache, upd) = batchnorm_forward(name, x, params, ch, mode)?;
            stats = upd;
            (y, if record { cache } else { Cache::None })
        }
        LayerSpec::ReLU => {
            let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
            let cache = if record { Cache::Output(y.clone()) } else { Cache::None };
            (y, cache)
        }
        LayerSpec::PReLU { ch } => {
            let slope = params.value(&key(name, "weight"))?.data();
            let s = spatial(x.shape());
            let mut y = x.clone();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                if *v <= T::zero() {
                    *v *= slope[(i / s) % ch];
                }
            }
            (y, keep_input(x, record))
        }
        LayerSpec::Sigmoid => {
            let y = x.map(sigmoid);
            let cache = if record { Cache::Output(y.clone()) } else { Cache::None };
            (y, cache)
        }
        LayerSpec::GlobalAvgPool => {
            let (n, c) = (x.dim(0), x.dim(1));
            let s = spatial(x.shape());
            let inv = T::one() / T::from_usize_lossy(s);
            let data = x.data();
            let y = Tensor::from_fn(vec![n, c], |i| pairwise_sum(&data[i * s..(i + 1) * s]) * inv);
            (y, Cache::Shape(x.shape().to_vec()))
        }
        LayerSpec::AvgPool { kernel, stride } => (avgpool_forward(x, kernel, stride, &out_shape), Cache::Shape(x.shape().to_vec())),
        LayerSpec::UpsampleNearest { factor } => (upsample_forward(x, factor, &out_shape), Cache::Shape(x.shape().to_vec())),
        LayerSpec::Gdn { .. } | LayerSpec::Igdn { .. } => {
            let inverse = matches!(spec, LayerSpec::Igdn { .. });
            let beta = params.value(&key(name, "beta"))?;
            let gamma = params.value(&key(name, "gamma"))?;
            let norm = divisive_norm(x, beta, gamma);
            let mut y = x.clone();
            for (v, &d) in y.data_mut().iter_mut().zip(norm.data()) {
                if inverse {
                    *v *= d.sqrt();
                } else {
                    *v /= d.sqrt();
                }
            }
            let cache = if record {
                Cache::Divisive {
                    input: x.clone(),
                    norm,
                }
            } else {
                Cache::None
            };
            (y, cache)
        }
    };
    debug_assert_eq!(output.shape(), &out_shape[..]);
    Ok(Forward { output, cache, stats })
}

/// Back-propagates `dy` through one layer, accumulating parameter
/// gradients into `params` and returning the input gradient.
pub fn backward<T: Real>(
    name: &str,
    spec: &LayerSpec,
    params: &mut ParamStore<T>,
    cache: &Cache<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let missing = || Error::invalid(format!("{name}: backward without a recorded forward"));
    match *spec {
        LayerSpec::Conv2d {
            kernel,
            stride,
            padding,
            bias,
            ..
        } => {
            let Cache::Input(x) = cache else { return Err(missing()) };
            if bias {
                accumulate_channel_sum(dy, &mut params.get_mut(&key(name, "bias"))?.grad);
            }
            let wp = params.get_mut(&key(name, "weight"))?;
            Ok(conv_backward(x, &wp.value, &mut wp.grad, dy, kernel, stride, padding))
        }
        LayerSpec::TransConv2d { kernel, stride, bias, .. } => {
            let Cache::Input(x) = cache else { return Err(missing()) };
            if bias {
                accumulate_channel_sum(dy, &mut params.get_mut(&key(name, "bias"))?.grad);
            }
            let wp = params.get_mut(&key(name, "weight"))?;
            Ok(tconv_backward(x, &wp.value, &mut wp.grad, dy, kernel, stride))
        }
        LayerSpec::Dense { inp, out, bias } => {
            let Cache::Input(x) = cache else { return Err(missing()) };
            let n = x.batch();
            if bias {
                let g = params.get_mut(&key(name, "bias"))?;
                let d = dy.data();
                for (o, gb) in g.grad.data_mut().iter_mut().enumerate() {
                    *gb += pairwise_sum_by(n, 0, |i| d[i * out + o]);
                }
            }
            let wp = params.get_mut(&key(name, "weight"))?;
            gemm(true, false, out, inp, n, T::one(), dy.data(), x.data(), T::one(), wp.grad.data_mut());
            let mut dx = Tensor::zeros(x.shape().to_vec());
            gemm(false, false, n, inp, out, T::one(), dy.data(), wp.value.data(), T::zero(), dx.data_mut());
            Ok(dx)
        }
        LayerSpec::BatchNorm { ch } => {
            let Cache::Norm {
                xhat,
                inv_std,
                batch_stats,
            } = cache
            else {
                return Err(missing());
            };
            batchnorm_backward(name, params, ch, xhat, inv_std, *batch_stats, dy)
        }
        LayerSpec::ReLU => {
            let Cache::Output(y) = cache else { return Err(missing()) };
            let mut dx = dy.clone();
            for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                if v <= T::zero() {
                    *g = T::zero();
                }
            }
            Ok(dx)
        }
        LayerSpec::PReLU { ch } => {
            let Cache::Input(x) = cache else { return Err(missing()) };
            let s = spatial(x.shape());
            let n = x.batch();
            let p = params.get_mut(&key(name, "weight"))?;
            let (xd, dyd) = (x.data(), dy.data());
            for c in 0..ch {
                let parts: Vec<T> = (0..n)
                    .map(|b| {
                        let base = (b * ch + c) * s;
                        pairwise_sum_by(s, base, |i| if xd[i] <= T::zero() { dyd[i] * xd[i] } else { T::zero() })
                    })
                    .collect();
                p.grad.data_mut()[c] += pairwise_sum(&parts);
            }
            let slope = p.value.data();
            let mut dx = dy.clone();
            for (i, g) in dx.data_mut().iter_mut().enumerate() {
                if xd[i] <= T::zero() {
                    *g *= slope[(i / s) % ch];
                }
            }
            Ok(dx)
        }
        LayerSpec::Sigmoid => {
            let Cache::Output(y) = cache else { return Err(missing()) };
            let mut dx = dy.clone();
            for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                *g *= v * (T::one() - v);
            }
            Ok(dx)
        }
        LayerSpec::GlobalAvgPool => {
            let Cache::Shape(shape) = cache else { return Err(missing()) };
            let s = spatial(shape);
            let inv = T::one() / T::from_usize_lossy(s);
            let d = dy.data();
            Ok(Tensor::from_fn(shape.clone(), |i| d[i / s] * inv))
        }
        LayerSpec::AvgPool { kernel, stride } => {
            let Cache::Shape(shape) = cache else { return Err(missing()) };
            Ok(avgpool_backward(dy, shape, kernel, stride))
        }
        LayerSpec::UpsampleNearest { factor } => {
            let Cache::Shape(shape) = cache else { return Err(missing()) };
            Ok(upsample_backward(dy, shape, factor))
        }
        LayerSpec::Gdn { ch } | LayerSpec::Igdn { ch } => {
            let Cache::Divisive { input, norm } = cache else { return Err(missing()) };
            let inverse = matches!(spec, LayerSpec::Igdn { .. });
            divisive_backward(name, params, ch, inverse, input, norm, dy)
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn keep_input<T: Real>(x: &Tensor<T>, record: bool) -> Cache<T> {
    if record {
        Cache::Input(x.clone())
    } else {
        Cache::None
    }
}

/// Elements per channel per sample.
fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product::<usize>().max(1)
}

fn add_channel_bias<T: Real>(y: &mut Tensor<T>, b: &Tensor<T>) {
    let c = y.dim(1);
    let s = spatial(y.shape());
    let b = b.data();
    for (i, chunk) in y.data_mut().chunks_mut(s).enumerate() {
        let bb = b[i % c];
        chunk.iter_mut().for_each(|v| *v += bb);
    }
}

/// Per-channel sums over batch and space, computed pairwise.
fn channel_sums<T: Real>(shape: &[usize], f: impl Fn(usize) -> T + Copy) -> Vec<T> {
    let (n, c) = (shape[0], shape[1]);
    let s = spatial(shape);
    (0..c)
        .map(|ch| {
            let parts: Vec<T> = (0..n).map(|b| pairwise_sum_by(s, (b * c + ch) * s, f)).collect();
            pairwise_sum(&parts)
        })
        .collect()
}

fn accumulate_channel_sum<T: Real>(dy: &Tensor<T>, grad: &mut Tensor<T>) {
    let d = dy.data();
    for (g, s) in grad.data_mut().iter_mut().zip(channel_sums(dy.shape(), |i| d[i])) {
        *g += s;
    }
}

fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) -> Tensor<T> {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, ho, wo) = (out_shape[1], out_shape[2], out_shape[3]);
    let kk = cin * k * k;
    let p = ho * wo;
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * p] };
    let mut y = Tensor::zeros(out_shape.to_vec());
    for i in 0..n {
        let xs = x.sample(i);
        let src: &[T] = if direct {
            xs
        } else {
            im2col(xs, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
            &cols
        };
        gemm(false, false, cout, p, kk, T::one(), w.data(), src, T::zero(), y.sample_mut(i));
    }
    y
}

fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dw: &mut Tensor<T>,
    dy: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, ho, wo) = (dy.dim(1), dy.dim(2), dy.dim(3));
    let kk = cin * k * k;
    let p = ho * wo;
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * p] };
    let mut dcols = vec![T::zero(); kk * p];
    let mut dx = Tensor::zeros(x.shape().to_vec());
    for i in 0..n {
        let xs = x.sample(i);
        let dys = dy.sample(i);
        let src: &[T] = if direct {
            xs
        } else {
            im2col(xs, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
            &cols
        };
        gemm(false, true, cout, kk, p, T::one(), dys, src, T::one(), dw.data_mut());
        if direct {
            gemm(true, false, kk, p, cout, T::one(), w.data(), dys, T::zero(), dx.sample_mut(i));
        } else {
            gemm(true, false, kk, p, cout, T::one(), w.data(), dys, T::zero(), &mut dcols);
            col2im(&dcols, cin, h, wd, k, stride, pad, ho, wo, dx.sample_mut(i));
        }
    }
    dx
}

fn tconv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, k: usize, stride: usize, out_shape: &[usize]) -> Tensor<T> {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, ho, wo) = (out_shape[1], out_shape[2], out_shape[3]);
    let rows = cout * k * k;
    let mut cols = vec![T::zero(); rows * h * wd];
    let mut y = Tensor::zeros(out_shape.to_vec());
    for i in 0..n {
        gemm(true, false, rows, h * wd, cin, T::one(), w.data(), x.sample(i), T::zero(), &mut cols);
        col2im(&cols, cout, ho, wo, k, stride, 0, h, wd, y.sample_mut(i));
    }
    y
}

fn tconv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dw: &mut Tensor<T>,
    dy: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Tensor<T> {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, ho, wo) = (dy.dim(1), dy.dim(2), dy.dim(3));
    let rows = cout * k * k;
    let mut dcols = vec![T::zero(); rows * h * wd];
    let mut dx = Tensor::zeros(x.shape().to_vec());
    for i in 0..n {
        im2col(dy.sample(i), cout, ho, wo, k, stride, 0, h, wd, &mut dcols);
        gemm(false, true, cin, rows, h * wd, T::one(), x.sample(i), &dcols, T::one(), dw.data_mut());
        gemm(false, false, cin, h * wd, rows, T::one(), w.data(), &dcols, T::zero(), dx.sample_mut(i));
    }
    dx
}

type BnOut<T> = (Tensor<T>, Cache<T>, Option<StatUpdate<T>>);

fn batchnorm_forward<T: Real>(
    name: &str,
    x: &Tensor<T>,
    params: &ParamStore<T>,
    ch: usize,
    mode: Mode,
) -> Result<BnOut<T>> {
    let s = spatial(x.shape());
    let n = x.batch();
    let m = n * s;
    let eps = T::lit(BN_EPS);
    let xd = x.data();
    let (mean, var, stats) = match mode {
        Mode::Train => {
            let inv_m = T::one() / T::from_usize_lossy(m);
            let mean: Vec<T> = channel_sums(x.shape(), |i| xd[i]).into_iter().map(|v| v * inv_m).collect();
            let sq = channel_sums(x.shape(), |i| {
                let d = xd[i] - mean[(i / s) % ch];
                d * d
            });
            let var: Vec<T> = sq.iter().map(|&v| v * inv_m).collect();
            let unbiased: Vec<T> = if m > 1 {
                let inv = T::one() / T::from_usize_lossy(m - 1);
                sq.iter().map(|&v| v * inv).collect()
            } else {
                var.clone()
            };
            let upd = StatUpdate {
                layer: name.to_string(),
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(upd))
        }
        Mode::Eval => (
            params.value(&key(name, "running_mean"))?.data().to_vec(),
            params.value(&key(name, "running_var"))?.data().to_vec(),
            None,
        ),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let gamma = params.value(&key(name, "weight"))?.data();
    let beta = params.value(&key(name, "bias"))?.data();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for (i, (h, o)) in xhat.data_mut().iter_mut().zip(y.data_mut()).enumerate() {
        let c = (i / s) % ch;
        *h = (*h - mean[c]) * inv_std[c];
        *o = gamma[c] * *h + beta[c];
    }
    let cache = Cache::Norm {
        xhat,
        inv_std,
        batch_stats: mode == Mode::Train,
    };
    Ok((y, cache, stats))
}

fn batchnorm_backward<T: Real>(
    name: &str,
    params: &mut ParamStore<T>,
    ch: usize,
    xhat: &Tensor<T>,
    inv_std: &[T],
    batch_stats: bool,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = spatial(xhat.shape());
    let m = T::from_usize_lossy(xhat.batch() * s);
    let (dyd, xh) = (dy.data(), xhat.data());
    let sum_dy = channel_sums(dy.shape(), |i| dyd[i]);
    let sum_dy_xhat = channel_sums(dy.shape(), |i| dyd[i] * xh[i]);
    {
        let g = params.get_mut(&key(name, "bias"))?;
        for (a, &b) in g.grad.data_mut().iter_mut().zip(&sum_dy) {
            *a += b;
        }
    }
    let gp = params.get_mut(&key(name, "weight"))?;
    for (a, &b) in gp.grad.data_mut().iter_mut().zip(&sum_dy_xhat) {
        *a += b;
    }
    let gamma = gp.value.data();
    let mut dx = dy.clone();
    for (i, g) in dx.data_mut().iter_mut().enumerate() {
        let c = (i / s) % ch;
        let scale = gamma[c] * inv_std[c];
        *g = if batch_stats {
            scale * (*g - (sum_dy[c] + xh[i] * sum_dy_xhat[c]) / m)
        } else {
            scale * *g
        };
    }
    Ok(dx)
}

fn avgpool_forward<T: Real>(x: &Tensor<T>, k: usize, stride: usize, out_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (x.dim(2), x.dim(3));
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let planes = x.dim(0) * x.dim(1);
    let inv = T::one() / T::from_usize_lossy(k * k);
    let mut y = Tensor::zeros(out_shape.to_vec());
    let (xd, yd) = (x.data(), y.data_mut());
    for p in 0..planes {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = T::zero();
                for i in 0..k {
                    let row = p * h * w + (oh * stride + i) * w + ow * stride;
                    for j in 0..k {
                        acc += xd[row + j];
                    }
                }
                yd[(p * ho + oh) * wo + ow] = acc * inv;
            }
        }
    }
    y
}

fn avgpool_backward<T: Real>(dy: &Tensor<T>, in_shape: &[usize], k: usize, stride: usize) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (dy.dim(2), dy.dim(3));
    let planes = in_shape[0] * in_shape[1];
    let inv = T::one() / T::from_usize_lossy(k * k);
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let (dyd, dxd) = (dy.data(), dx.data_mut());
    for p in 0..planes {
        for oh in 0..ho {
            for ow in 0..wo {
                let g = dyd[(p * ho + oh) * wo + ow] * inv;
                for i in 0..k {
                    let row = p * h * w + (oh * stride + i) * w + ow * stride;
                    for j in 0..k {
                        dxd[row + j] += g;
                    }
                }
            }
        }
    }
    dx
}

fn upsample_forward<T: Real>(x: &Tensor<T>, f: usize, out_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (x.dim(2), x.dim(3));
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let xd = x.data();
    Tensor::from_fn(out_shape.to_vec(), |i| {
        let p = i / (ho * wo);
        let r = i % (ho * wo);
        let (oh, ow) = (r / wo, r % wo);
        xd[p * h * w + (oh / f) * w + ow / f]
    })
}

fn upsample_backward<T: Real>(dy: &Tensor<T>, in_shape: &[usize], f: usize) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (dy.dim(2), dy.dim(3));
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let dxd = dx.data_mut();
    for (i, &g) in dy.data().iter().enumerate() {
        let p = i / (ho * wo);
        let r = i % (ho * wo);
        let (oh, ow) = (r / wo, r % wo);
        dxd[p * h * w + (oh / f) * w + ow / f] += g;
    }
    dx
}

/// `β_i + Σ_j γ_ij x_j²` at every location, with the squared
/// reparameterization `β = β_raw² + β_min`, `γ = γ_raw²`.
fn divisive_norm<T: Real>(x: &Tensor<T>, beta_raw: &Tensor<T>, gamma_raw: &Tensor<T>) -> Tensor<T> {
    let c = x.dim(1);
    let s = spatial(x.shape());
    let gamma: Vec<T> = gamma_raw.data().iter().map(|&g| g * g).collect();
    let beta: Vec<T> = beta_raw.data().iter().map(|&b| b * b + T::lit(GDN_BETA_MIN)).collect();
    let mut norm = Tensor::zeros(x.shape().to_vec());
    let mut sq = vec![T::zero(); c * s];
    for i in 0..x.batch() {
        for (q, &v) in sq.iter_mut().zip(x.sample(i)) {
            *q = v * v;
        }
        let out = norm.sample_mut(i);
        gemm(false, false, c, s, c, T::one(), &gamma, &sq, T::zero(), out);
        for (j, v) in out.iter_mut().enumerate() {
            *v += beta[j / s];
        }
    }
    norm
}

fn divisive_backward<T: Real>(
    name: &str,
    params: &mut ParamStore<T>,
    c: usize,
    inverse: bool,
    x: &Tensor<T>,
    norm: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = spatial(x.shape());
    let gamma_raw = params.value(&key(name, "gamma"))?.data().to_vec();
    let gamma: Vec<T> = gamma_raw.iter().map(|&g| g * g).collect();
    let half = T::lit(0.5);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dgamma = vec![T::zero(); c * c];
    let mut dbeta_parts: Vec<Vec<T>> = Vec::with_capacity(x.batch());
    let mut a = vec![T::zero(); c * s];
    let mut sq = vec![T::zero(); c * s];
    let mut mix = vec![T::zero(); c * s];
    for i in 0..x.batch() {
        let (xs, ns, gs) = (x.sample(i), norm.sample(i), dy.sample(i));
        // a_i = ∂L/∂norm_i scaled by 2 (sign folded in below)
        for j in 0..c * s {
            sq[j] = xs[j] * xs[j];
            a[j] = if inverse {
                gs[j] * xs[j] / ns[j].sqrt()
            } else {
                gs[j] * xs[j] / (ns[j] * ns[j].sqrt())
            };
        }
        gemm(true, false, c, s, c, T::one(), &gamma, &a, T::zero(), &mut mix);
        let out = dx.sample_mut(i);
        for j in 0..c * s {
            let direct = if inverse { gs[j] * ns[j].sqrt() } else { gs[j] / ns[j].sqrt() };
            out[j] = if inverse {
                direct + xs[j] * mix[j]
            } else {
                direct - xs[j] * mix[j]
            };
        }
        let sign = if inverse { half } else { -half };
        gemm(false, true, c, c, s, sign, &a, &sq, T::one(), &mut dgamma);
        dbeta_parts.push((0..c).map(|ch| sign * pairwise_sum(&a[ch * s..(ch + 1) * s])).collect());
    }
    let two = T::lit(2.0);
    {
        let gp = params.get_mut(&key(name, "gamma"))?;
        for ((g, &d), &raw) in gp.grad.data_mut().iter_mut().zip(&dgamma).zip(&gamma_raw) {
            *g += d * two * raw;
        }
    }
    let bp = params.get_mut(&key(name, "beta"))?;
    let raw = bp.value.data().to_vec();
    for ch in 0..c {
        let parts: Vec<T> = dbeta_parts.iter().map(|p| p[ch]).collect();
        bp.grad.data_mut()[ch] += pairwise_sum(&parts) * two * raw[ch];
    }
    Ok(dx)
}
