//! Self-check suite behind `lska verify`.
//!
//! Each property is deterministic for a given seed and reports a one-line
//! detail. Properties are grouped under the names `rank1`,
//! `gradient-check`, `impulse-mrf`, `cost` and `probe`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::analysis::probe::{correlation, dimensionality, mutual_information};
use crate::attention::{build_attention, AttentionModule, AttentionVariant, KernelSpec, KERNEL_SIZES};
use crate::conv::{self, impulse_support, ConvKernel, ImpulseSupport, KernelKind, StridedConv};
use crate::cost::{attention_flops_analytic, instrumented_count, model_cost};
use crate::error::{Error, Result};
use crate::gradcheck::{check_coords, sample_coords, GradCheck};
use crate::init::{self, SeededRng};
use crate::tensor::{self, BatchNorm, Shape, Tensor};
use crate::van::{build_van, Capacity, ModelConfig};

/// Largest rank-1 discrepancy accepted in 64-bit.
pub const RANK1_TOL: f64 = 1e-12;
/// Largest finite-difference relative error accepted for a VJP.
pub const VJP_TOL: f64 = 1e-6;

pub const PROPERTIES: [&str; 5] = ["rank1", "gradient-check", "impulse-mrf", "cost", "probe"];

/// Deliberate defects used to prove the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Perturb the depth-wise input VJP by 1 %.
    CorruptVjp,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrupt-vjp" => Ok(Fault::CorruptVjp),
            other => Err(Error::Config(format!("unknown fault {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Substring matched against property names.
    pub filter: Option<String>,
    pub fault: Option<Fault>,
    pub seed: u64,
}

/// Run every property whose name matches the filter.
pub fn run_suite(opts: &VerifyOptions) -> Vec<PropertyResult> {
    PROPERTIES
        .iter()
        .filter(|p| opts.filter.as_deref().is_none_or(|f| p.contains(f)))
        .map(|&name| {
            let outcome = match name {
                "rank1" => rank1_property(opts.seed),
                "gradient-check" => gradient_property(opts.seed, opts.fault),
                "impulse-mrf" => impulse_property(),
                "cost" => cost_property(),
                _ => probe_property(opts.seed),
            };
            match outcome {
                Ok((passed, detail)) => PropertyResult { name, passed, detail },
                Err(e) => PropertyResult {
                    name,
                    passed: false,
                    detail: format!("error: {e}"),
                },
            }
        })
        .collect()
}

type Outcome = Result<(bool, String)>;

fn rank1_property(seed: u64) -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, &k) in KERNEL_SIZES.iter().enumerate() {
        let spec = KernelSpec::standard(k)?;
        worst = worst.max(crate::attention::rank1_equivalence_check(spec, 4, 2, seed + i as u64)?);
        let mut rng = init::rng(seed ^ 0x5eed ^ k as u64);
        let trivial = AttentionModule::random(AttentionVariant::LskaTrivial, spec, 4, false, &mut rng)?;
        let x = Tensor::uniform(Shape::new(1, 4, 2 * k, 2 * k), 1.0, &mut rng);
        worst = worst.max(crate::attention::rank1_difference(&trivial, &x)?);
    }
    Ok((worst < RANK1_TOL, format!("max |square - separable| = {worst:.3e}")))
}

fn gradient_property(seed: u64, fault: Option<Fault>) -> Outcome {
    let checks = vjp_checks(seed, 24, fault)?;
    let (name, worst) = checks
        .iter()
        .map(|(n, g)| (n.as_str(), g.max_rel_err))
        .fold(("", 0.0f64), |acc, x| if x.1 > acc.1 { x } else { acc });
    Ok((
        worst <= VJP_TOL,
        format!("{} VJPs, worst rel err {worst:.3e} ({name})", checks.len()),
    ))
}

fn impulse_property() -> Outcome {
    let mut bad = Vec::new();
    for &k in &KERNEL_SIZES {
        let spec = KernelSpec::standard(k)?;
        for v in [AttentionVariant::Lka, AttentionVariant::Lska] {
            let ones = build_attention(v, spec, 1, 0)?.with_all_ones()?;
            let side = 2 * k + 1;
            let got = impulse_support(|x| ones.attention_map(x), 1, (side, side))?;
            if got != (ImpulseSupport::Extent { height: k, width: k }) {
                bad.push(format!("{v} k={k}: {got:?}"));
            }
        }
    }
    Ok((bad.is_empty(), if bad.is_empty() { "support == k for 12 stacks".into() } else { bad.join("; ") }))
}

fn cost_property() -> Outcome {
    let mut mismatches = Vec::new();
    for v in AttentionVariant::ALL {
        for &k in &KERNEL_SIZES {
            let spec = KernelSpec::standard(k)?;
            let m = build_attention(v, spec, 8, 0)?;
            let x = Tensor::zeros(Shape::new(1, 8, 14, 14));
            let counted = instrumented_count(&m, &x)?.macs;
            let analytic = attention_flops_analytic(v, spec, 8, 14, 14)?;
            if counted != analytic {
                mismatches.push(format!("{v} k={k}: {counted} vs {analytic}"));
            }
        }
    }
    let cfg = ModelConfig::new(Capacity::Tiny, AttentionVariant::Lska, KernelSpec::standard(23)?);
    let model = build_van(&cfg)?;
    let walked = model_cost(&cfg, 32, 32)?;
    let counted = instrumented_count(&model, &Tensor::zeros(Shape::new(1, 3, 32, 32)))?;
    if walked.breakdown != counted.breakdown || walked.params as usize != model.count_params() {
        mismatches.push("Tiny model walker disagrees with instrumented pass".into());
    }
    Ok((
        mismatches.is_empty(),
        if mismatches.is_empty() { "24 modules and Tiny model agree".into() } else { mismatches.join("; ") },
    ))
}

fn probe_property(seed: u64) -> Outcome {
    let mut fails = Vec::new();
    if mutual_information(0.0) != 0.0 {
        fails.push("MI(0) != 0".to_string());
    }
    if (mutual_information(0.8) - 0.51083).abs() > 1e-4 {
        fails.push(format!("MI(0.8) = {}", mutual_information(0.8)));
    }
    let d = dimensionality([0.0; 3], 256);
    if d.iter().any(|v| (v - 85.33).abs() > 0.01) || (d.iter().sum::<f64>() - 256.0).abs() > 1e-9 {
        fails.push(format!("dimensionality(0,0,0) = {d:?}"));
    }
    let mut rng = init::rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let za: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zb: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b, g, dd) = (
            rng.random_range(0.01..10.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(0.01..10.0),
            rng.random_range(-5.0..5.0),
        );
        let ta: Vec<f64> = za.iter().map(|v| a * v + b).collect();
        let tb: Vec<f64> = zb.iter().map(|v| g * v + dd).collect();
        worst = worst.max((correlation(&za, &zb)?.value - correlation(&ta, &tb)?.value).abs());
    }
    if worst > 1e-9 {
        fails.push(format!("affine invariance off by {worst:.3e}"));
    }
    Ok((fails.is_empty(), if fails.is_empty() { "identities hold".into() } else { fails.join("; ") }))
}

/// Finite-difference checks of every VJP on `coords` random coordinates
/// each: depth-wise (square, horizontal, vertical, dilated), pointwise,
/// strided dense, GELU, frozen BN, Hadamard and channel scale, with respect
/// to inputs and parameters.
pub fn vjp_checks(seed: u64, coords: usize, fault: Option<Fault>) -> Result<Vec<(String, GradCheck)>> {
    let mut rng = init::rng(seed);
    let mut out = Vec::new();
    let xs = Shape::new(2, 3, 9, 10);
    let x = Tensor::uniform(xs, 1.0, &mut rng);

    let dw_cases = [
        ("dw 3x5", KernelKind::Depthwise2d, 3, 5, 1, true),
        ("dw 3x3 d=2", KernelKind::Depthwise2d, 3, 3, 2, false),
        ("dw 1x7 d=2", KernelKind::DepthwiseHorizontal, 1, 7, 2, false),
        ("dw 5x1 d=3", KernelKind::DepthwiseVertical, 5, 1, 3, false),
    ];
    for (i, (name, kind, kh, kw, d, bias)) in dw_cases.into_iter().enumerate() {
        let w = init::fan_in_uniform(&mut rng, 3 * kh * kw, kh * kw);
        let mut k = ConvKernel::depthwise(kind, 3, kh, kw, d, w)?;
        if bias {
            k = k.with_bias(Some(init::fan_in_uniform(&mut rng, 3, 1)))?;
        }
        let r = Tensor::uniform(xs, 1.0, &mut rng);
        let g = conv::dw_conv_vjp(&x, &k, &r)?;
        let mut dx = g.input.into_data();
        if i == 0 && fault == Some(Fault::CorruptVjp) {
            dx.iter_mut().for_each(|v| *v *= 1.01);
        }
        let f = |p: &[f64]| Ok(conv::dw_conv(&Tensor::from_vec(xs, p.to_vec())?, &k)?.into_data());
        push(&mut out, &mut rng, format!("{name} input"), f, x.data(), &r, &dx, coords)?;
        let f = |p: &[f64]| Ok(conv::dw_conv(&x, &k.with_weights(p.to_vec())?)?.into_data());
        push(&mut out, &mut rng, format!("{name} weights"), f, k.weights(), &r, &g.weights, coords)?;
        if let (Some(b), Some(gb)) = (k.bias(), &g.bias) {
            let f = |p: &[f64]| Ok(conv::dw_conv(&x, &k.with_bias(Some(p.to_vec()))?)?.into_data());
            push(&mut out, &mut rng, format!("{name} bias"), f, b, &r, gb, coords)?;
        }
    }

    let pw = ConvKernel::pointwise(
        4,
        3,
        init::fan_in_uniform(&mut rng, 12, 3),
        Some(init::fan_in_uniform(&mut rng, 4, 3)),
    )?;
    let r = Tensor::uniform(xs.with_channels(4), 1.0, &mut rng);
    let g = conv::pointwise_conv_vjp(&x, &pw, &r)?;
    let f = |p: &[f64]| Ok(conv::pointwise_conv(&Tensor::from_vec(xs, p.to_vec())?, &pw)?.into_data());
    push(&mut out, &mut rng, "pointwise input".into(), f, x.data(), &r, g.input.data(), coords)?;
    let f = |p: &[f64]| Ok(conv::pointwise_conv(&x, &pw.with_weights(p.to_vec())?)?.into_data());
    push(&mut out, &mut rng, "pointwise weights".into(), f, pw.weights(), &r, &g.weights, coords)?;
    let f = |p: &[f64]| Ok(conv::pointwise_conv(&x, &pw.with_bias(Some(p.to_vec()))?)?.into_data());
    push(&mut out, &mut rng, "pointwise bias".into(), f, pw.bias().unwrap_or(&[]), &r, g.bias.as_deref().unwrap_or(&[]), coords)?;

    let sc = StridedConv::new(
        4,
        3,
        3,
        2,
        init::fan_in_uniform(&mut rng, 4 * 3 * 9, 27),
        Some(init::fan_in_uniform(&mut rng, 4, 27)),
    )?;
    let r = Tensor::uniform(sc.output_shape(xs), 1.0, &mut rng);
    let g = sc.vjp(&x, &r)?;
    let f = |p: &[f64]| Ok(sc.forward(&Tensor::from_vec(xs, p.to_vec())?)?.into_data());
    push(&mut out, &mut rng, "strided input".into(), f, x.data(), &r, g.input.data(), coords)?;
    let f = |p: &[f64]| {
        let c = StridedConv { weights: p.to_vec(), ..sc.clone() };
        Ok(c.forward(&x)?.into_data())
    };
    push(&mut out, &mut rng, "strided weights".into(), f, &sc.weights, &r, &g.weights, coords)?;
    let f = |p: &[f64]| {
        let c = StridedConv { bias: Some(p.to_vec()), ..sc.clone() };
        Ok(c.forward(&x)?.into_data())
    };
    push(&mut out, &mut rng, "strided bias".into(), f, sc.bias.as_deref().unwrap_or(&[]), &r, g.bias.as_deref().unwrap_or(&[]), coords)?;

    let xg = x.scale(3.0);
    let r = Tensor::uniform(xs, 1.0, &mut rng);
    let dx = tensor::gelu_vjp(&xg, &r)?;
    let f = |p: &[f64]| Ok(tensor::gelu(&Tensor::from_vec(xs, p.to_vec())?).into_data());
    push(&mut out, &mut rng, "gelu input".into(), f, xg.data(), &r, dx.data(), coords)?;

    let bn = BatchNorm {
        gamma: (0..3).map(|_| rng.random_range(0.5..2.0)).collect(),
        beta: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        mean: (0..3).map(|_| rng.random_range(-0.5..0.5)).collect(),
        var: (0..3).map(|_| rng.random_range(0.2..2.0)).collect(),
        eps: tensor::BN_EPS,
    };
    let r = Tensor::uniform(xs, 1.0, &mut rng);
    let g = bn.vjp_frozen(&x, &r)?;
    let f = |p: &[f64]| Ok(bn.forward_frozen(&Tensor::from_vec(xs, p.to_vec())?)?.into_data());
    push(&mut out, &mut rng, "bn-frozen input".into(), f, x.data(), &r, g.input.data(), coords)?;
    let f = |p: &[f64]| Ok(BatchNorm { gamma: p.to_vec(), ..bn.clone() }.forward_frozen(&x)?.into_data());
    push(&mut out, &mut rng, "bn-frozen gamma".into(), f, &bn.gamma, &r, &g.gamma, coords)?;
    let f = |p: &[f64]| Ok(BatchNorm { beta: p.to_vec(), ..bn.clone() }.forward_frozen(&x)?.into_data());
    push(&mut out, &mut rng, "bn-frozen beta".into(), f, &bn.beta, &r, &g.beta, coords)?;

    let y = Tensor::uniform(xs, 1.0, &mut rng);
    let r = Tensor::uniform(xs, 1.0, &mut rng);
    let (ga, gb) = tensor::hadamard_vjp(&x, &y, &r)?;
    let f = |p: &[f64]| Ok(tensor::hadamard(&Tensor::from_vec(xs, p.to_vec())?, &y)?.into_data());
    push(&mut out, &mut rng, "hadamard left".into(), f, x.data(), &r, ga.data(), coords)?;
    let f = |p: &[f64]| Ok(tensor::hadamard(&x, &Tensor::from_vec(xs, p.to_vec())?)?.into_data());
    push(&mut out, &mut rng, "hadamard right".into(), f, y.data(), &r, gb.data(), coords)?;

    let lambda: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = Tensor::uniform(xs, 1.0, &mut rng);
    let (dx, dl) = tensor::scale_channels_vjp(&x, &lambda, &r)?;
    let f = |p: &[f64]| Ok(tensor::scale_channels(&Tensor::from_vec(xs, p.to_vec())?, &lambda)?.into_data());
    push(&mut out, &mut rng, "scale input".into(), f, x.data(), &r, dx.data(), coords)?;
    let f = |p: &[f64]| Ok(tensor::scale_channels(&x, p)?.into_data());
    push(&mut out, &mut rng, "scale lambda".into(), f, &lambda, &r, &dl, coords)?;

    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn push<F>(
    out: &mut Vec<(String, GradCheck)>,
    rng: &mut SeededRng,
    name: String,
    f: F,
    params: &[f64],
    r: &Tensor,
    analytic: &[f64],
    coords: usize,
) -> Result<()>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let picks = sample_coords(rng, params.len(), coords);
    out.push((name, check_coords(f, params, r.data(), analytic, &picks)?));
    Ok(())
}
