//! Shared fixtures for the criterion benches under `benches/`.

use lska_core::attention::{build_attention, AttentionModule, AttentionVariant, KernelSpec};
use lska_core::tensor::{Shape, Tensor};
use lska_core::init;

/// Seeded attention module and a `1 x C x hw x hw` input for it.
pub fn attention_fixture(variant: AttentionVariant, k: usize, channels: usize, hw: usize) -> (AttentionModule, Tensor) {
    let spec = KernelSpec::standard(k).expect("standard kernel size");
    let module = build_attention(variant, spec, channels, 0).expect("valid module");
    let x = Tensor::uniform(Shape::new(1, channels, hw, hw), 1.0, &mut init::rng(1));
    (module, x)
}
