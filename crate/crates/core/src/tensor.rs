//! Dense NCHW tensors and the elementwise / normalization primitives the
//! attention stacks and backbones are built from.
//!
//! All values are `f64`. Every operation is a pure function returning a new
//! tensor; there are no views and no broadcasting beyond per-channel vectors.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch / channel / height / width extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}x{}x{}]", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::LengthMismatch {
                op: "tensor",
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, bound: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { shape, data }
    }

    /// A single 1.0 at `(n, c, h, w)`, zeros elsewhere.
    pub fn impulse(shape: Shape, at: (usize, usize, usize, usize)) -> Self {
        let mut t = Self::zeros(shape);
        let i = t.offset(at.0, at.1, at.2, at.3);
        t.data[i] = 1.0;
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    /// Row-major `h x w` slice for one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| alpha * v)
    }

    /// Extract batch item `n` as a batch of one.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let per = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape { n: 1, ..self.shape },
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::EmptyBatch)?.shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first,
                    right: s,
                });
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape { n, ..first }, data)
    }

    pub(crate) fn ensure_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    pub(crate) fn ensure_channels(&self, len: usize, op: &'static str) -> Result<()> {
        if len != self.shape.c {
            return Err(Error::ChannelMismatch {
                op,
                expected: self.shape.c,
                actual: len,
            });
        }
        Ok(())
    }
}

/// Elementwise product.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

pub fn hadamard_vjp(a: &Tensor, b: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    a.ensure_same_shape(upstream, "hadamard_vjp")?;
    Ok((hadamard(upstream, b)?, hadamard(upstream, a)?))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "add", |x, y| x + y)
}

/// Standard normal CDF. `erfc` keeps the lower tail accurate.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_vjp(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.zip_map(upstream, "gelu_vjp", |v, g| g * (normal_cdf(v) + v * normal_pdf(v)))
}

/// `out[n,c,h,w] = lambda[c] * x[n,c,h,w]`.
pub fn scale_channels(x: &Tensor, lambda: &[f64]) -> Result<Tensor> {
    x.ensure_channels(lambda.len(), "scale_channels")?;
    let s = x.shape;
    let mut out = x.data.clone();
    for (i, chunk) in out.chunks_mut(s.plane()).enumerate() {
        let l = lambda[i % s.c];
        chunk.iter_mut().for_each(|v| *v *= l);
    }
    Tensor::from_vec(s, out)
}

/// Returns `(d input, d lambda)`.
pub fn scale_channels_vjp(x: &Tensor, lambda: &[f64], upstream: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    x.ensure_same_shape(upstream, "scale_channels_vjp")?;
    let dx = scale_channels(upstream, lambda)?;
    let s = x.shape;
    let mut dl = vec![0.0; s.c];
    for (i, (xs, gs)) in x.data.chunks(s.plane()).zip(upstream.data.chunks(s.plane())).enumerate() {
        dl[i % s.c] += xs.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok((dx, dl))
}

/// Per-channel affine normalization. `forward` uses batch statistics,
/// `forward_frozen` the stored mean / variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BatchNorm {
    /// gamma = 1, beta = 0, zero mean, unit variance.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        x.ensure_channels(self.gamma.len(), "batch_norm")?;
        x.ensure_channels(self.beta.len(), "batch_norm")?;
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("batch_norm eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    fn apply(&self, x: &Tensor, mean: &[f64], var: &[f64]) -> Tensor {
        let s = x.shape;
        let mut out = x.data.clone();
        for (i, chunk) in out.chunks_mut(s.plane()).enumerate() {
            let c = i % s.c;
            let inv = 1.0 / (var[c] + self.eps).sqrt();
            let (g, b, m) = (self.gamma[c], self.beta[c], mean[c]);
            chunk.iter_mut().for_each(|v| *v = g * (*v - m) * inv + b);
        }
        Tensor { shape: s, data: out }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (mean, var) = channel_stats(x);
        Ok(self.apply(x, &mean, &var))
    }

    pub fn forward_frozen(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        if self.mean.len() != self.gamma.len() || self.var.len() != self.gamma.len() {
            return Err(Error::Config("batch_norm running statistics length mismatch".into()));
        }
        Ok(self.apply(x, &self.mean, &self.var))
    }

    pub fn vjp_frozen(&self, x: &Tensor, upstream: &Tensor) -> Result<BatchNormGrads> {
        self.check(x)?;
        x.ensure_same_shape(upstream, "batch_norm_vjp")?;
        let s = x.shape;
        let mut dx = upstream.data.clone();
        let mut dg = vec![0.0; s.c];
        let mut db = vec![0.0; s.c];
        for (i, (gs, xs)) in dx.chunks_mut(s.plane()).zip(x.data.chunks(s.plane())).enumerate() {
            let c = i % s.c;
            let inv = 1.0 / (self.var[c] + self.eps).sqrt();
            for (g, &v) in gs.iter_mut().zip(xs) {
                dg[c] += *g * (v - self.mean[c]) * inv;
                db[c] += *g;
                *g *= self.gamma[c] * inv;
            }
        }
        Ok(BatchNormGrads {
            input: Tensor { shape: s, data: dx },
            gamma: dg,
            beta: db,
        })
    }
}

/// Mean over each spatial plane; output is `[N, C, 1, 1]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape;
    let inv = 1.0 / s.plane() as f64;
    let data = x.data.chunks(s.plane()).map(|p| p.iter().sum::<f64>() * inv).collect();
    Tensor {
        shape: Shape::new(s.n, s.c, 1, 1),
        data,
    }
}

pub fn global_avg_pool_vjp(input: Shape, upstream: &Tensor) -> Result<Tensor> {
    let expect = Shape::new(input.n, input.c, 1, 1);
    if upstream.shape != expect {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_vjp",
            left: expect,
            right: upstream.shape,
        });
    }
    let inv = 1.0 / input.plane() as f64;
    let data = upstream
        .data
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, input.plane()))
        .collect();
    Tensor::from_vec(input, data)
}

/// Per-channel mean and biased variance over the (N, H, W) axes.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape;
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    for (i, chunk) in x.data.chunks(s.plane()).enumerate() {
        mean[i % s.c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; s.c];
    for (i, chunk) in x.data.chunks(s.plane()).enumerate() {
        let m = mean[i % s.c];
        var[i % s.c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}
