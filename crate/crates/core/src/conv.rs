//! Direct loop-nest convolutions: depth-wise (2-D, horizontal 1-D, vertical
//! 1-D, optionally dilated), point-wise, and strided dense. Each has a
//! matching vector-Jacobian product.
//!
//! Convolution here is cross-correlation with zero same-padding of
//! `d * (k - 1) / 2` per axis, so depth-wise output dims equal input dims.
//! MAC counts are accumulated inside the loops over the zero-padded input:
//! every output pixel is charged one MAC per kernel tap, whether the tap
//! lands on data or on padding.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Depthwise2d,
    /// `1 x k`, slides along the width axis.
    DepthwiseHorizontal,
    /// `k x 1`, slides along the height axis.
    DepthwiseVertical,
    Pointwise,
}

impl KernelKind {
    pub fn is_depthwise(self) -> bool {
        !matches!(self, KernelKind::Pointwise)
    }
}

/// Weights for one convolution layer.
///
/// Depth-wise weights are stored `[channel][kh][kw]`; point-wise weights are a
/// row-major `out x in` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    kind: KernelKind,
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    dilation: usize,
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl ConvKernel {
    pub fn depthwise(
        kind: KernelKind,
        channels: usize,
        kh: usize,
        kw: usize,
        dilation: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let k = Self {
            kind,
            out_channels: channels,
            in_channels: channels,
            kh,
            kw,
            dilation,
            weights,
            bias: None,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn pointwise(out_channels: usize, in_channels: usize, weights: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        let k = Self {
            kind: KernelKind::Pointwise,
            out_channels,
            in_channels,
            kh: 1,
            kw: 1,
            dilation: 1,
            weights,
            bias,
        };
        k.validate()?;
        Ok(k)
    }

    /// Depth-wise kernel whose every channel is the identity tap.
    pub fn depthwise_identity(kind: KernelKind, channels: usize, kh: usize, kw: usize, dilation: usize) -> Result<Self> {
        let mut w = vec![0.0; channels * kh * kw];
        let center = (kh / 2) * kw + kw / 2;
        for c in 0..channels {
            w[c * kh * kw + center] = 1.0;
        }
        Self::depthwise(kind, channels, kh, kw, dilation, w)
    }

    pub fn pointwise_identity(channels: usize) -> Self {
        let mut w = vec![0.0; channels * channels];
        for c in 0..channels {
            w[c * channels + c] = 1.0;
        }
        Self::pointwise(channels, channels, w, None).expect("square identity is valid")
    }

    /// Per-channel rank-1 product `vertical (k_v x 1) ⊗ horizontal (1 x k_h)`.
    pub fn outer(vertical: &ConvKernel, horizontal: &ConvKernel) -> Result<Self> {
        if vertical.kind != KernelKind::DepthwiseVertical || horizontal.kind != KernelKind::DepthwiseHorizontal {
            return Err(Error::InvalidKernel("outer product needs a vertical and a horizontal kernel".into()));
        }
        if vertical.out_channels != horizontal.out_channels || vertical.dilation != horizontal.dilation {
            return Err(Error::InvalidKernel("outer product operands disagree on channels or dilation".into()));
        }
        let (kh, kw, c) = (vertical.kh, horizontal.kw, vertical.out_channels);
        let mut w = Vec::with_capacity(c * kh * kw);
        for ch in 0..c {
            let v = &vertical.weights[ch * kh..(ch + 1) * kh];
            let h = &horizontal.weights[ch * kw..(ch + 1) * kw];
            for &vi in v {
                w.extend(h.iter().map(|&hj| vi * hj));
            }
        }
        Self::depthwise(KernelKind::Depthwise2d, c, kh, kw, vertical.dilation, w)
    }

    fn validate(&self) -> Result<()> {
        let expected = match self.kind {
            KernelKind::Pointwise => self.out_channels * self.in_channels,
            _ => self.out_channels * self.kh * self.kw,
        };
        if self.weights.len() != expected {
            return Err(Error::InvalidKernel(format!(
                "{:?} kernel expects {expected} weights, got {}",
                self.kind,
                self.weights.len()
            )));
        }
        if self.dilation < 1 {
            return Err(Error::InvalidKernel("dilation must be >= 1".into()));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(Error::InvalidKernel(format!(
                    "bias length {} does not match {} output channels",
                    b.len(),
                    self.out_channels
                )));
            }
        }
        match self.kind {
            KernelKind::DepthwiseHorizontal if self.kh != 1 => {
                return Err(Error::InvalidKernel(format!("horizontal kernel must be 1 x k, got {}x{}", self.kh, self.kw)))
            }
            KernelKind::DepthwiseVertical if self.kw != 1 => {
                return Err(Error::InvalidKernel(format!("vertical kernel must be k x 1, got {}x{}", self.kh, self.kw)))
            }
            _ => {}
        }
        if self.kind.is_depthwise() && (self.kh % 2 == 0 || self.kw % 2 == 0) {
            return Err(Error::InvalidKernel(format!(
                "depth-wise kernel extent must be odd, got {}x{}",
                self.kh, self.kw
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Same structure, new weight values.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        let k = Self {
            weights,
            ..self.clone()
        };
        k.validate()?;
        Ok(k)
    }

    pub fn with_bias(&self, bias: Option<Vec<f64>>) -> Result<Self> {
        let k = Self { bias, ..self.clone() };
        k.validate()?;
        Ok(k)
    }

    /// Spatial reach of this layer as `(extent, dilation)` along (height, width).
    pub fn reach(&self) -> ((usize, usize), (usize, usize)) {
        ((self.kh, self.dilation), (self.kw, self.dilation))
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Depth-wise convolution (any depth-wise kind, any dilation).
pub fn dw_conv(x: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    dw_conv_counted(x, kernel).map(|(t, _)| t)
}

/// [`dw_conv`] plus the number of MACs executed.
pub fn dw_conv_counted(x: &Tensor, kernel: &ConvKernel) -> Result<(Tensor, u64)> {
    check_depthwise(x, kernel)?;
    let s = x.shape();
    let mut out = vec![0.0; s.numel()];
    let taps = kernel.kh * kernel.kw;
    let macs: u64 = out
        .par_chunks_mut(s.plane().max(1))
        .enumerate()
        .map(|(i, plane)| {
            let (n, c) = (i / s.c, i % s.c);
            let w = &kernel.weights[c * taps..(c + 1) * taps];
            let m = dw_plane(x.plane(n, c), plane, s.h, s.w, w, kernel.kh, kernel.kw, kernel.dilation);
            if let Some(b) = &kernel.bias {
                plane.iter_mut().for_each(|v| *v += b[c]);
            }
            m
        })
        .sum();
    Ok((Tensor::from_vec(s, out)?, macs))
}

fn check_depthwise(x: &Tensor, kernel: &ConvKernel) -> Result<()> {
    if !kernel.kind.is_depthwise() {
        return Err(Error::InvalidKernel("dw_conv needs a depth-wise kernel".into()));
    }
    if kernel.out_channels != x.shape().c {
        return Err(Error::ChannelMismatch {
            op: "dw_conv",
            expected: x.shape().c,
            actual: kernel.out_channels,
        });
    }
    Ok(())
}

/// Signed offsets of tap `q` relative to the kernel center.
#[inline]
fn tap_offset(q: usize, k: usize, d: usize) -> isize {
    d as isize * (q as isize - (k / 2) as isize)
}

/// Column range `[lo, hi)` of output positions whose shifted input column
/// `x + dx` is in bounds.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn dw_plane(inp: &[f64], out: &mut [f64], h: usize, w: usize, wts: &[f64], kh: usize, kw: usize, d: usize) -> u64 {
    let mut macs = 0u64;
    for qy in 0..kh {
        let dy = tap_offset(qy, kh, d);
        let (y0, y1) = valid_range(h, dy);
        for qx in 0..kw {
            let wv = wts[qy * kw + qx];
            let dx = tap_offset(qx, kw, d);
            let (x0, x1) = valid_range(w, dx);
            macs += (h * w) as u64;
            if x0 == x1 {
                continue;
            }
            for y in y0..y1 {
                let iy = (y as isize + dy) as usize;
                let orow = &mut out[y * w + x0..y * w + x1];
                let ibase = (iy * w) as isize + dx;
                let irow = &inp[(ibase + x0 as isize) as usize..(ibase + x1 as isize) as usize];
                for (o, i) in orow.iter_mut().zip(irow) {
                    *o += wv * i;
                }
            }
        }
    }
    macs
}

pub fn dw_conv_vjp(x: &Tensor, kernel: &ConvKernel, upstream: &Tensor) -> Result<ConvGrads> {
    check_depthwise(x, kernel)?;
    x.ensure_same_shape(upstream, "dw_conv_vjp")?;
    let s = x.shape();
    let taps = kernel.kh * kernel.kw;
    let d = kernel.dilation;
    let planes: Vec<(Vec<f64>, Vec<f64>)> = (0..s.n * s.c)
        .into_par_iter()
        .map(|i| {
            let (n, c) = (i / s.c, i % s.c);
            let wts = &kernel.weights[c * taps..(c + 1) * taps];
            let inp = x.plane(n, c);
            let g = upstream.plane(n, c);
            let mut dx = vec![0.0; s.plane()];
            let mut dw = vec![0.0; taps];
            for qy in 0..kernel.kh {
                let dy = tap_offset(qy, kernel.kh, d);
                let (y0, y1) = valid_range(s.h, dy);
                for qx in 0..kernel.kw {
                    let t = qy * kernel.kw + qx;
                    let dxo = tap_offset(qx, kernel.kw, d);
                    let (x0, x1) = valid_range(s.w, dxo);
                    let wv = wts[t];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let ib = (iy * s.w) as isize + dxo;
                        for xo in x0..x1 {
                            let gv = g[y * s.w + xo];
                            let j = (ib + xo as isize) as usize;
                            acc += gv * inp[j];
                            dx[j] += wv * gv;
                        }
                    }
                    dw[t] = acc;
                }
            }
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(s.numel());
    let mut dw = vec![0.0; kernel.weights.len()];
    for (i, (px, pw)) in planes.into_iter().enumerate() {
        let c = i % s.c;
        dx.extend(px);
        for (acc, v) in dw[c * taps..(c + 1) * taps].iter_mut().zip(pw) {
            *acc += v;
        }
    }
    let bias = kernel.bias.as_ref().map(|_| {
        let mut db = vec![0.0; s.c];
        for (i, g) in upstream.data().chunks(s.plane()).enumerate() {
            db[i % s.c] += g.iter().sum::<f64>();
        }
        db
    });
    Ok(ConvGrads {
        input: Tensor::from_vec(s, dx)?,
        weights: dw,
        bias,
    })
}

/// `out[n,o,h,w] = Σ_c W[o,c] x[n,c,h,w] + b[o]`.
pub fn pointwise_conv(x: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    pointwise_conv_counted(x, kernel).map(|(t, _)| t)
}

pub fn pointwise_conv_counted(x: &Tensor, kernel: &ConvKernel) -> Result<(Tensor, u64)> {
    check_pointwise(x, kernel)?;
    let s = x.shape();
    let os = s.with_channels(kernel.out_channels);
    let cin = kernel.in_channels;
    let mut out = vec![0.0; os.numel()];
    let macs: u64 = out
        .par_chunks_mut(s.plane().max(1))
        .enumerate()
        .map(|(i, plane)| {
            let (n, o) = (i / os.c, i % os.c);
            if let Some(b) = &kernel.bias {
                plane.iter_mut().for_each(|v| *v = b[o]);
            }
            let row = &kernel.weights[o * cin..(o + 1) * cin];
            let mut m = 0u64;
            for (c, &wv) in row.iter().enumerate() {
                m += plane.len() as u64;
                for (v, xi) in plane.iter_mut().zip(x.plane(n, c)) {
                    *v += wv * xi;
                }
            }
            m
        })
        .sum();
    Ok((Tensor::from_vec(os, out)?, macs))
}

fn check_pointwise(x: &Tensor, kernel: &ConvKernel) -> Result<()> {
    if kernel.kind != KernelKind::Pointwise {
        return Err(Error::InvalidKernel("pointwise_conv needs a point-wise kernel".into()));
    }
    if kernel.in_channels != x.shape().c {
        return Err(Error::ChannelMismatch {
            op: "pointwise_conv",
            expected: x.shape().c,
            actual: kernel.in_channels,
        });
    }
    Ok(())
}

pub fn pointwise_conv_vjp(x: &Tensor, kernel: &ConvKernel, upstream: &Tensor) -> Result<ConvGrads> {
    check_pointwise(x, kernel)?;
    let s = x.shape();
    let os = s.with_channels(kernel.out_channels);
    if upstream.shape() != os {
        return Err(Error::ShapeMismatch {
            op: "pointwise_conv_vjp",
            left: os,
            right: upstream.shape(),
        });
    }
    let (cin, cout) = (kernel.in_channels, kernel.out_channels);
    let mut dx = vec![0.0; s.numel()];
    dx.par_chunks_mut(s.plane().max(1)).enumerate().for_each(|(i, plane)| {
        let (n, c) = (i / cin, i % cin);
        for o in 0..cout {
            let wv = kernel.weights[o * cin + c];
            for (v, g) in plane.iter_mut().zip(upstream.plane(n, o)) {
                *v += wv * g;
            }
        }
    });
    let dw: Vec<f64> = (0..cout * cin)
        .into_par_iter()
        .map(|j| {
            let (o, c) = (j / cin, j % cin);
            (0..s.n)
                .map(|n| upstream.plane(n, o).iter().zip(x.plane(n, c)).map(|(g, v)| g * v).sum::<f64>())
                .sum()
        })
        .collect();
    let bias = kernel.bias.as_ref().map(|_| {
        (0..cout)
            .map(|o| (0..s.n).map(|n| upstream.plane(n, o).iter().sum::<f64>()).sum())
            .collect()
    });
    Ok(ConvGrads {
        input: Tensor::from_vec(s, dx)?,
        weights: dw,
        bias,
    })
}

/// Dense (all-to-all channel) convolution with stride and symmetric zero
/// padding. Used for the stem and the downsampling layers.
#[derive(Debug, Clone, PartialEq)]
pub struct StridedConv {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out][in][ky][kx]`.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl StridedConv {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if weights.len() != out_channels * in_channels * kernel * kernel {
            return Err(Error::InvalidKernel(format!(
                "strided conv expects {} weights, got {}",
                out_channels * in_channels * kernel * kernel,
                weights.len()
            )));
        }
        if stride == 0 || kernel % 2 == 0 {
            return Err(Error::InvalidKernel(format!("strided conv needs odd kernel and stride >= 1, got k={kernel} s={stride}")));
        }
        if bias.as_ref().is_some_and(|b| b.len() != out_channels) {
            return Err(Error::InvalidKernel("strided conv bias length mismatch".into()));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weights,
            bias,
        })
    }

    pub fn output_shape(&self, s: Shape) -> Shape {
        let ho = (s.h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (s.w + 2 * self.padding - self.kernel) / self.stride + 1;
        Shape::new(s.n, self.out_channels, ho, wo)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().c != self.in_channels {
            return Err(Error::ChannelMismatch {
                op: "strided_conv",
                expected: x.shape().c,
                actual: self.in_channels,
            });
        }
        Ok(())
    }

    /// Input coordinate for output index `o` and tap `q`, if in bounds.
    #[inline]
    fn source(&self, o: usize, q: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + q) as isize - self.padding as isize;
        (0..len as isize).contains(&i).then_some(i as usize)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_counted(x).map(|(t, _)| t)
    }

    pub fn forward_counted(&self, x: &Tensor) -> Result<(Tensor, u64)> {
        self.check(x)?;
        let s = x.shape();
        let os = self.output_shape(s);
        let k = self.kernel;
        let mut out = vec![0.0; os.numel()];
        let macs = out
            .par_chunks_mut(os.plane().max(1))
            .enumerate()
            .map(|(i, plane)| {
                let (n, o) = (i / os.c, i % os.c);
                if let Some(b) = &self.bias {
                    plane.iter_mut().for_each(|v| *v = b[o]);
                }
                let mut m = 0u64;
                for c in 0..self.in_channels {
                    let inp = x.plane(n, c);
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = self.weights[((o * self.in_channels + c) * k + ky) * k + kx];
                            m += os.plane() as u64;
                            for oy in 0..os.h {
                                let Some(iy) = self.source(oy, ky, s.h) else { continue };
                                for ox in 0..os.w {
                                    if let Some(ix) = self.source(ox, kx, s.w) {
                                        plane[oy * os.w + ox] += wv * inp[iy * s.w + ix];
                                    }
                                }
                            }
                        }
                    }
                }
                m
            })
            .sum();
        Ok((Tensor::from_vec(os, out)?, macs))
    }

    pub fn vjp(&self, x: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
        self.check(x)?;
        let s = x.shape();
        let os = self.output_shape(s);
        if upstream.shape() != os {
            return Err(Error::ShapeMismatch {
                op: "strided_conv_vjp",
                left: os,
                right: upstream.shape(),
            });
        }
        let k = self.kernel;
        let cin = self.in_channels;
        let mut dx = vec![0.0; s.numel()];
        dx.par_chunks_mut(s.plane().max(1)).enumerate().for_each(|(i, plane)| {
            let (n, c) = (i / cin, i % cin);
            for o in 0..self.out_channels {
                let g = upstream.plane(n, o);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weights[((o * cin + c) * k + ky) * k + kx];
                        for oy in 0..os.h {
                            let Some(iy) = self.source(oy, ky, s.h) else { continue };
                            for ox in 0..os.w {
                                if let Some(ix) = self.source(ox, kx, s.w) {
                                    plane[iy * s.w + ix] += wv * g[oy * os.w + ox];
                                }
                            }
                        }
                    }
                }
            }
        });
        let dw: Vec<f64> = (0..self.weights.len())
            .into_par_iter()
            .map(|j| {
                let (kx, ky) = (j % k, (j / k) % k);
                let (c, o) = ((j / (k * k)) % cin, j / (k * k * cin));
                let mut acc = 0.0;
                for n in 0..s.n {
                    let g = upstream.plane(n, o);
                    let inp = x.plane(n, c);
                    for oy in 0..os.h {
                        let Some(iy) = self.source(oy, ky, s.h) else { continue };
                        for ox in 0..os.w {
                            if let Some(ix) = self.source(ox, kx, s.w) {
                                acc += g[oy * os.w + ox] * inp[iy * s.w + ix];
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let bias = self.bias.as_ref().map(|_| {
            (0..self.out_channels)
                .map(|o| (0..s.n).map(|n| upstream.plane(n, o).iter().sum::<f64>()).sum())
                .collect()
        });
        Ok(ConvGrads {
            input: Tensor::from_vec(s, dx)?,
            weights: dw,
            bias,
        })
    }
}

/// Maximum receptive field of a stride-1 cascade of `(extent, dilation)`
/// layers: `1 + Σ d_i (k_i - 1)`.
pub fn receptive_field_analytic(chain: &[(usize, usize)]) -> usize {
    1 + chain.iter().map(|&(k, d)| d * (k.saturating_sub(1))).sum::<usize>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImpulseSupport {
    Extent { height: usize, width: usize },
    /// Nonzero output reached the border; the true support may be larger.
    Clipped,
}

/// Push a centered unit impulse (in every channel) through `forward` and
/// measure the bounding box of nonzero output.
pub fn impulse_support<F>(forward: F, channels: usize, size: (usize, usize)) -> Result<ImpulseSupport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let (h, w) = size;
    let shape = Shape::new(1, channels, h, w);
    let mut data = vec![0.0; shape.numel()];
    for c in 0..channels {
        data[(c * h + h / 2) * w + w / 2] = 1.0;
    }
    let out = forward(&Tensor::from_vec(shape, data)?)?;
    let os = out.shape();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for c in 0..os.c {
        for (i, &v) in out.plane(0, c).iter().enumerate() {
            if v != 0.0 {
                let (y, x) = (i / os.w, i % os.w);
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 == usize::MAX {
        return Ok(ImpulseSupport::Extent { height: 0, width: 0 });
    }
    if y0 == 0 || x0 == 0 || y1 + 1 == os.h || x1 + 1 == os.w {
        return Ok(ImpulseSupport::Clipped);
    }
    Ok(ImpulseSupport::Extent {
        height: y1 - y0 + 1,
        width: x1 - x0 + 1,
    })
}
