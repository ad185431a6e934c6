//! The four large-kernel attention designs.
//!
//! | variant        | depth-wise layers                                      |
//! |----------------|--------------------------------------------------------|
//! | `LkaTrivial`   | `k x k`                                                |
//! | `LskaTrivial`  | `1 x k`, `k x 1`                                       |
//! | `Lka`          | `(2d-1)^2`, `⌊k/d⌋^2` dilated by `d`                   |
//! | `Lska`         | `1 x (2d-1)`, `(2d-1) x 1`, `1 x ⌊k/d⌋`, `⌊k/d⌋ x 1` (last two dilated) |
//!
//! Every design ends with a `1 x 1` convolution producing the attention map
//! `A`, and the module output is `A ⊙ F`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conv::{self, ConvKernel, KernelKind};
use crate::error::{Error, Result};
use crate::init::{self, fan_in_uniform};
use crate::tensor::{self, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    LkaTrivial,
    LskaTrivial,
    Lka,
    Lska,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [Self::LkaTrivial, Self::LskaTrivial, Self::Lka, Self::Lska];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LkaTrivial => "lka-trivial",
            Self::LskaTrivial => "lska-trivial",
            Self::Lka => "lka",
            Self::Lska => "lska",
        }
    }

    /// Trivial variants use a single undecomposed `k` extent and ignore `d`.
    pub fn is_trivial(self) -> bool {
        matches!(self, Self::LkaTrivial | Self::LskaTrivial)
    }

    pub fn is_separable(self) -> bool {
        matches!(self, Self::LskaTrivial | Self::Lska)
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "lka-trivial" => Ok(Self::LkaTrivial),
            "lska-trivial" => Ok(Self::LskaTrivial),
            "lka" => Ok(Self::Lka),
            "lska" => Ok(Self::Lska),
            other => Err(Error::Config(format!("unknown attention variant '{other}'"))),
        }
    }
}

/// Kernel sizes with a default dilation.
pub const KERNEL_SIZES: [usize; 6] = [7, 11, 23, 35, 53, 65];

/// Default dilation for the standard kernel sizes.
pub fn dilation_for_kernel(k: usize) -> Result<usize> {
    match k {
        7 | 11 => Ok(2),
        23 | 35 | 53 | 65 => Ok(3),
        other => Err(Error::UnknownKernelSize(other)),
    }
}

/// Maximum receptive field `k` and dilation `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelSpec {
    pub k: usize,
    pub d: usize,
}

impl KernelSpec {
    pub fn new(k: usize, d: usize) -> Self {
        Self { k, d }
    }

    /// `k` with its default dilation.
    pub fn standard(k: usize) -> Result<Self> {
        Ok(Self::new(k, dilation_for_kernel(k)?))
    }

    /// Extent of the local (undilated) depth-wise kernel, `2d - 1`.
    pub fn local_extent(&self) -> usize {
        (2 * self.d).saturating_sub(1)
    }

    /// Extent of the dilated depth-wise kernel, `⌊k/d⌋`.
    pub fn dilated_extent(&self) -> usize {
        self.k / self.d.max(1)
    }

    pub fn validate(&self, variant: AttentionVariant) -> Result<()> {
        let odd = |name: &str, e: usize| {
            if e == 0 || e % 2 == 0 {
                Err(Error::Config(format!("{variant}: {name} extent {e} must be odd and >= 1 (k={}, d={})", self.k, self.d)))
            } else {
                Ok(())
            }
        };
        if variant.is_trivial() {
            return odd("k", self.k);
        }
        if self.d == 0 {
            return Err(Error::Config(format!("{variant}: dilation must be >= 1")));
        }
        odd("2d-1", self.local_extent())?;
        odd("floor(k/d)", self.dilated_extent())
    }
}

/// One named depth-wise layer of an attention stack.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseLayer {
    pub name: &'static str,
    pub kernel: ConvKernel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModule {
    variant: AttentionVariant,
    spec: KernelSpec,
    channels: usize,
    depthwise: Vec<DepthwiseLayer>,
    pointwise: ConvKernel,
}

/// Depth-wise layer shapes `(name, kind, kh, kw, dilation)` for a design.
fn layer_plan(variant: AttentionVariant, spec: KernelSpec) -> Vec<(&'static str, KernelKind, usize, usize, usize)> {
    use KernelKind::*;
    let (k, d) = (spec.k, spec.d);
    let (l, g) = (spec.local_extent(), spec.dilated_extent());
    match variant {
        AttentionVariant::LkaTrivial => vec![("dw", Depthwise2d, k, k, 1)],
        AttentionVariant::LskaTrivial => vec![("dw_h", DepthwiseHorizontal, 1, k, 1), ("dw_v", DepthwiseVertical, k, 1, 1)],
        AttentionVariant::Lka => vec![("dw", Depthwise2d, l, l, 1), ("dw_d", Depthwise2d, g, g, d)],
        AttentionVariant::Lska => vec![
            ("dw_h", DepthwiseHorizontal, 1, l, 1),
            ("dw_v", DepthwiseVertical, l, 1, 1),
            ("dw_dh", DepthwiseHorizontal, 1, g, d),
            ("dw_dv", DepthwiseVertical, g, 1, d),
        ],
    }
}

/// Build a module with seeded fan-in-uniform weights and no bias.
pub fn build_attention(variant: AttentionVariant, spec: KernelSpec, channels: usize, seed: u64) -> Result<AttentionModule> {
    AttentionModule::random(variant, spec, channels, false, &mut init::rng(seed))
}

impl AttentionModule {
    /// Random weights drawn from `rng`; `pointwise_bias` adds a zero bias to
    /// the `1 x 1` layer.
    pub fn random<R: Rng + ?Sized>(
        variant: AttentionVariant,
        spec: KernelSpec,
        channels: usize,
        pointwise_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate(variant)?;
        if channels == 0 {
            return Err(Error::Config("attention needs at least one channel".into()));
        }
        let mut depthwise = Vec::new();
        for (name, kind, kh, kw, d) in layer_plan(variant, spec) {
            let w = fan_in_uniform(rng, channels * kh * kw, kh * kw);
            depthwise.push(DepthwiseLayer {
                name,
                kernel: ConvKernel::depthwise(kind, channels, kh, kw, d, w)?,
            });
        }
        let w = fan_in_uniform(rng, channels * channels, channels);
        let bias = pointwise_bias.then(|| vec![0.0; channels]);
        let pointwise = ConvKernel::pointwise(channels, channels, w, bias)?;
        Ok(Self {
            variant,
            spec,
            channels,
            depthwise,
            pointwise,
        })
    }

    /// Assemble from explicit kernels; shapes must match the variant's plan.
    pub fn from_kernels(
        variant: AttentionVariant,
        spec: KernelSpec,
        depthwise: Vec<ConvKernel>,
        pointwise: ConvKernel,
    ) -> Result<Self> {
        spec.validate(variant)?;
        let plan = layer_plan(variant, spec);
        if plan.len() != depthwise.len() {
            return Err(Error::Config(format!(
                "{variant} needs {} depth-wise kernels, got {}",
                plan.len(),
                depthwise.len()
            )));
        }
        let channels = pointwise.out_channels();
        let mut layers = Vec::new();
        for ((name, kind, kh, kw, d), kernel) in plan.into_iter().zip(depthwise) {
            if kernel.kind() != kind || kernel.extent() != (kh, kw) || kernel.dilation() != d || kernel.out_channels() != channels {
                return Err(Error::Config(format!(
                    "{variant} layer {name}: expected {kind:?} {kh}x{kw} d={d} over {channels} channels"
                )));
            }
            layers.push(DepthwiseLayer { name, kernel });
        }
        if pointwise.in_channels() != channels {
            return Err(Error::Config("attention 1x1 must be square".into()));
        }
        Ok(Self {
            variant,
            spec,
            channels,
            depthwise: layers,
            pointwise,
        })
    }

    pub fn variant(&self) -> AttentionVariant {
        self.variant
    }

    pub fn spec(&self) -> KernelSpec {
        self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn depthwise_layers(&self) -> &[DepthwiseLayer] {
        &self.depthwise
    }

    pub fn pointwise(&self) -> &ConvKernel {
        &self.pointwise
    }

    /// Weight count with biases excluded.
    pub fn weight_count(&self) -> usize {
        self.depthwise.iter().map(|l| l.kernel.weight_count()).sum::<usize>() + self.pointwise.weight_count()
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.iter().map(|l| l.kernel.param_count()).sum::<usize>() + self.pointwise.param_count()
    }

    /// Per-axis `(extent, dilation)` cascade: `(height chain, width chain)`.
    pub fn receptive_chains(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let mut hs = Vec::new();
        let mut ws = Vec::new();
        for l in &self.depthwise {
            let ((kh, dh), (kw, dw)) = l.kernel.reach();
            hs.push((kh, dh));
            ws.push((kw, dw));
        }
        (hs, ws)
    }

    /// Replace every kernel's weights through `f(layer name, kernel)`.
    pub fn map_weights(&self, mut f: impl FnMut(&str, &ConvKernel) -> Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        for l in &mut out.depthwise {
            l.kernel = l.kernel.with_weights(f(l.name, &l.kernel))?;
        }
        out.pointwise = out.pointwise.with_weights(f("pw", &self.pointwise))?;
        Ok(out)
    }

    /// All weights set to one, biases dropped.
    pub fn with_all_ones(&self) -> Result<Self> {
        let mut m = self.map_weights(|_, k| vec![1.0; k.weight_count()])?;
        m.pointwise = m.pointwise.with_bias(None)?;
        Ok(m)
    }

    /// The attention map `A` (everything before the Hadamard product).
    pub fn attention_map(&self, f: &Tensor) -> Result<Tensor> {
        let mut z = conv::dw_conv(f, &self.depthwise[0].kernel)?;
        for l in &self.depthwise[1..] {
            z = conv::dw_conv(&z, &l.kernel)?;
        }
        conv::pointwise_conv(&z, &self.pointwise)
    }

    /// `A ⊙ F`.
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        tensor::hadamard(&self.attention_map(f)?, f)
    }

    /// Record the forward pass on `tape`, naming layers `{scope}.{layer}`.
    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, scope: &str, f: Var) -> Result<Var> {
        let a = self.record_map(tape, scope, f)?;
        tape.hadamard(a, f)
    }

    pub fn record_map<'a>(&'a self, tape: &mut Tape<'a>, scope: &str, f: Var) -> Result<Var> {
        let mut z = f;
        for l in &self.depthwise {
            z = tape.dw_conv(&format!("{scope}.{}", l.name), z, &l.kernel)?;
        }
        tape.pointwise(&format!("{scope}.pw"), z, &self.pointwise)
    }

    /// The undecomposed counterpart of a separable module: each horizontal /
    /// vertical pair becomes its per-channel outer product, the `1 x 1` layer
    /// is shared. `Lska -> Lka`, `LskaTrivial -> LkaTrivial`.
    pub fn to_rank1_square(&self) -> Result<Self> {
        let variant = match self.variant {
            AttentionVariant::Lska => AttentionVariant::Lka,
            AttentionVariant::LskaTrivial => AttentionVariant::LkaTrivial,
            other => return Err(Error::Config(format!("{other} is not a separable design"))),
        };
        let depthwise = self
            .depthwise
            .chunks(2)
            .map(|pair| ConvKernel::outer(&pair[1].kernel, &pair[0].kernel))
            .collect::<Result<Vec<_>>>()?;
        Self::from_kernels(variant, self.spec, depthwise, self.pointwise.clone())
    }
}

/// Max elementwise output difference between a separable module and its
/// rank-1 square counterpart on `x`.
pub fn rank1_difference(separable: &AttentionModule, x: &Tensor) -> Result<f64> {
    let square = separable.to_rank1_square()?;
    separable.forward(x)?.max_abs_diff(&square.forward(x)?)
}

/// Over `trials` seeded draws of LSKA kernels and `2k x 2k` inputs, the
/// largest |LSKA - LKA(outer products)| seen.
pub fn rank1_equivalence_check(spec: KernelSpec, channels: usize, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = init::rng(seed);
    let side = 2 * spec.k;
    let mut worst: f64 = 0.0;
    for _ in 0..trials.max(1) {
        let lska = AttentionModule::random(AttentionVariant::Lska, spec, channels, false, &mut rng)?;
        let x = Tensor::uniform(Shape::new(1, channels, side, side), 1.0, &mut rng);
        worst = worst.max(rank1_difference(&lska, &x)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{impulse_support, receptive_field_analytic, ImpulseSupport};

    #[test]
    fn dilation_table() {
        let got: Vec<usize> = KERNEL_SIZES.iter().map(|&k| dilation_for_kernel(k).unwrap()).collect();
        assert_eq!(got, vec![2, 2, 3, 3, 3, 3]);
        assert_eq!(dilation_for_kernel(9), Err(Error::UnknownKernelSize(9)));
    }

    fn shapes(m: &AttentionModule) -> Vec<((usize, usize), usize)> {
        m.depthwise_layers().iter().map(|l| (l.kernel.extent(), l.kernel.dilation())).collect()
    }

    #[test]
    fn layer_structures() {
        let m = build_attention(AttentionVariant::Lska, KernelSpec::new(23, 3), 32, 0).unwrap();
        assert_eq!(shapes(&m), vec![((1, 5), 1), ((5, 1), 1), ((1, 7), 3), ((7, 1), 3)]);
        assert_eq!(m.pointwise().extent(), (1, 1));
        assert_eq!(m.channels(), 32);

        let m = build_attention(AttentionVariant::Lka, KernelSpec::new(7, 2), 1, 0).unwrap();
        assert_eq!(shapes(&m), vec![((3, 3), 1), ((3, 3), 2)]);

        let m = build_attention(AttentionVariant::LkaTrivial, KernelSpec::new(1, 1), 1, 0).unwrap();
        assert_eq!(shapes(&m), vec![((1, 1), 1)]);
        assert_eq!(m.weight_count(), 2);

        let m = build_attention(AttentionVariant::LskaTrivial, KernelSpec::new(11, 2), 4, 0).unwrap();
        assert_eq!(shapes(&m), vec![((1, 11), 1), ((11, 1), 1)]);
    }

    #[test]
    fn invalid_specs_name_the_extent() {
        let err = build_attention(AttentionVariant::Lka, KernelSpec::new(8, 2), 4, 0).unwrap_err();
        assert!(err.to_string().contains("floor(k/d) extent 4"), "{err}");
        assert!(build_attention(AttentionVariant::LkaTrivial, KernelSpec::new(6, 1), 4, 0).is_err());
    }

    #[test]
    fn identity_kernels_give_square_of_input() {
        let m = build_attention(AttentionVariant::Lska, KernelSpec::new(23, 3), 3, 1).unwrap();
        let id = m
            .map_weights(|name, k| {
                if name == "pw" {
                    ConvKernel::pointwise_identity(3).weights().to_vec()
                } else {
                    let (kh, kw) = k.extent();
                    ConvKernel::depthwise_identity(k.kind(), 3, kh, kw, k.dilation()).unwrap().weights().to_vec()
                }
            })
            .unwrap();
        let mut rng = init::rng(2);
        let f = Tensor::uniform(Shape::new(1, 3, 9, 9), 2.0, &mut rng);
        assert_eq!(id.forward(&f).unwrap(), tensor::hadamard(&f, &f).unwrap());

        let zero = m.map_weights(|_, k| vec![0.0; k.weight_count()]).unwrap();
        assert_eq!(zero.forward(&f).unwrap(), Tensor::zeros(f.shape()));
    }

    #[test]
    fn rank1_equivalence_small() {
        assert!(rank1_equivalence_check(KernelSpec::new(7, 2), 1, 10, 3).unwrap() < 1e-12);
        assert!(rank1_equivalence_check(KernelSpec::new(23, 3), 4, 5, 4).unwrap() < 1e-12);

        let lska = build_attention(AttentionVariant::Lska, KernelSpec::new(11, 2), 2, 0).unwrap();
        let zero = lska.map_weights(|_, k| vec![0.0; k.weight_count()]).unwrap();
        let x = Tensor::uniform(Shape::new(1, 2, 22, 22), 1.0, &mut init::rng(0));
        assert_eq!(rank1_difference(&zero, &x).unwrap(), 0.0);

        let trivial = build_attention(AttentionVariant::LskaTrivial, KernelSpec::new(7, 1), 2, 5).unwrap();
        assert!(rank1_difference(&trivial, &x).unwrap() < 1e-12);
    }

    #[test]
    fn homogeneous_of_degree_two() {
        let m = build_attention(AttentionVariant::Lka, KernelSpec::new(11, 2), 2, 7).unwrap();
        let f = Tensor::uniform(Shape::new(1, 2, 12, 12), 1.0, &mut init::rng(8));
        let alpha = 1.7;
        let lhs = m.forward(&f.scale(alpha)).unwrap();
        let rhs = m.forward(&f).unwrap().scale(alpha * alpha);
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn impulse_support_equals_k() {
        for variant in [AttentionVariant::Lka, AttentionVariant::Lska] {
            for &k in &[7, 23] {
                let m = build_attention(variant, KernelSpec::standard(k).unwrap(), 1, 0)
                    .unwrap()
                    .with_all_ones()
                    .unwrap();
                let (hc, wc) = m.receptive_chains();
                assert_eq!(receptive_field_analytic(&hc), k);
                assert_eq!(receptive_field_analytic(&wc), k);
                let got = impulse_support(|x: &Tensor| m.attention_map(x), 1, (2 * k, 2 * k)).unwrap();
                assert_eq!(got, ImpulseSupport::Extent { height: k, width: k }, "{variant} k={k}");
            }
        }
    }
}
