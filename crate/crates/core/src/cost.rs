//! Parameter and FLOP accounting.
//!
//! Attention-module formulas (biases ignored), with `C` channels and an
//! `H x W` map:
//!
//! ```text
//! LKA-trivial   k²C + C²
//! LSKA-trivial  2kC + C²
//! LKA           (2d-1)²C + ⌊k/d⌋²C + C²
//! LSKA          2(2d-1)C + 2⌊k/d⌋C + C²
//! FLOPs         params · H · W
//! ```
//!
//! One multiply-accumulate is displayed as one FLOP. BN, GELU, LayerScale,
//! Hadamard and residual adds contribute parameters where they have them
//! but no MACs; their elementwise work is reported separately as `aux_ops`.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionModule, AttentionVariant, KernelSpec};
use crate::autodiff::{Recordable, Tape};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::van::{ModelConfig, Stage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub macs: u64,
    pub aux_ops: u64,
    pub breakdown: Vec<LayerCost>,
    /// `H * W` of the input the report was computed for.
    pub n_pixels: u64,
}

impl CostReport {
    pub fn from_layers(breakdown: Vec<LayerCost>, aux_ops: u64, n_pixels: u64) -> Self {
        Self {
            params: breakdown.iter().map(|l| l.params).sum(),
            macs: breakdown.iter().map(|l| l.macs).sum(),
            aux_ops,
            breakdown,
            n_pixels,
        }
    }

    /// MACs in units of 1e9, displayed as GFLOPs.
    pub fn gflops(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.params as f64 / 1e6
    }
}

/// Attention-module parameter count, biases excluded.
pub fn attention_params_analytic(variant: AttentionVariant, spec: KernelSpec, channels: usize) -> Result<u64> {
    spec.validate(variant)?;
    let (k, c) = (spec.k as u64, channels as u64);
    let (l, g) = (spec.local_extent() as u64, spec.dilated_extent() as u64);
    Ok(match variant {
        AttentionVariant::LkaTrivial => k * k * c + c * c,
        AttentionVariant::LskaTrivial => 2 * k * c + c * c,
        AttentionVariant::Lka => l * l * c + g * g * c + c * c,
        AttentionVariant::Lska => 2 * l * c + 2 * g * c + c * c,
    })
}

pub fn attention_flops_analytic(
    variant: AttentionVariant,
    spec: KernelSpec,
    channels: usize,
    h: usize,
    w: usize,
) -> Result<u64> {
    Ok(attention_params_analytic(variant, spec, channels)? * (h * w) as u64)
}

/// Per-layer parameter saving factors of LSKA against LKA:
/// `((2d-1)/2, ⌊k/d⌋/2)`.
pub fn savings_ratio(spec: KernelSpec) -> (f64, f64) {
    (spec.local_extent() as f64 / 2.0, spec.dilated_extent() as f64 / 2.0)
}

/// Layer-by-layer analytic walk of the architecture a config describes.
/// Layer names match the instrumented forward pass.
pub fn model_cost(config: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    config.validate()?;
    config.check_input(h, w)?;
    let mut layers = Vec::new();
    let mut aux = 0u64;
    let mut push = |name: String, params: u64, macs: u64| layers.push(LayerCost { layer: name, params, macs });

    let att = config.attention;
    let spec = att.spec();
    let (mut hh, mut ww) = (h, w);
    let mut cin = 3u64;
    for (i, st) in config.stages.iter().enumerate() {
        let pad = st.down_kernel / 2;
        hh = (hh + 2 * pad - st.down_kernel) / st.stride + 1;
        ww = (ww + 2 * pad - st.down_kernel) / st.stride + 1;
        let px = (hh * ww) as u64;
        let c = st.channels as u64;
        let k2 = (st.down_kernel * st.down_kernel) as u64;
        let scope = Stage::down_scope(i);
        push(format!("{scope}.conv"), c * cin * k2 + c, c * cin * k2 * px);
        push(format!("{scope}.bn"), 2 * c, 0);
        aux += c * px;

        let hidden = c * st.expansion as u64;
        for j in 0..st.depth {
            let b = format!("stage{}.block{}", i + 1, j);
            push(format!("{b}.norm1"), 2 * c, 0);
            push(format!("{b}.proj1"), c * c + c, c * c * px);
            for (name, kh, kw) in attention_layer_extents(att.variant, spec) {
                let p = c * (kh * kw) as u64;
                push(format!("{b}.attn.{name}"), p, p * px);
            }
            push(format!("{b}.attn.pw"), c * c + c, c * c * px);
            push(format!("{b}.proj2"), c * c + c, c * c * px);
            push(format!("{b}.scale1"), c, 0);
            push(format!("{b}.norm2"), 2 * c, 0);
            push(format!("{b}.fc1"), hidden * c + hidden, hidden * c * px);
            push(format!("{b}.dwconv"), hidden * 9 + hidden, hidden * 9 * px);
            push(format!("{b}.fc2"), c * hidden + c, c * hidden * px);
            push(format!("{b}.scale2"), c, 0);
            // norm1, gelu, hadamard, scale1, add, norm2, scale2, add; gelu on hidden
            aux += 8 * c * px + hidden * px;
        }
        cin = c;
    }
    aux += cin * (hh * ww) as u64;
    let classes = config.num_classes as u64;
    push("head".to_string(), classes * cin + classes, classes * cin);
    Ok(CostReport::from_layers(layers, aux, (h * w) as u64))
}

fn attention_layer_extents(variant: AttentionVariant, spec: KernelSpec) -> Vec<(&'static str, usize, usize)> {
    let (k, l, g) = (spec.k, spec.local_extent(), spec.dilated_extent());
    match variant {
        AttentionVariant::LkaTrivial => vec![("dw", k, k)],
        AttentionVariant::LskaTrivial => vec![("dw_h", 1, k), ("dw_v", k, 1)],
        AttentionVariant::Lka => vec![("dw", l, l), ("dw_d", g, g)],
        AttentionVariant::Lska => vec![("dw_h", 1, l), ("dw_v", l, 1), ("dw_dh", 1, g), ("dw_dv", g, 1)],
    }
}

/// Run the real forward pass with MAC counting enabled.
pub fn instrumented_count<M: Recordable + ?Sized>(model: &M, input: &Tensor) -> Result<CostReport> {
    let mut tape = Tape::inference().instrumented();
    let x = tape.leaf(input.clone());
    model.record(&mut tape, x)?;
    let s = input.shape();
    Ok(CostReport::from_layers(tape.costs().to_vec(), tape.aux_ops(), (s.h * s.w) as u64))
}

/// Instrumented MACs of one attention module on a zero `1 x C x H x W` map.
pub fn module_instrumented_macs(module: &AttentionModule, h: usize, w: usize) -> Result<u64> {
    let x = Tensor::zeros(crate::tensor::Shape::new(1, module.channels(), h, w));
    Ok(instrumented_count(module, &x)?.macs)
}
