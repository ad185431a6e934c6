//! Large separable kernel attention and the VAN backbones built on it.
//!
//! Everything runs on `f64` NCHW tensors with a hand-written direct
//! convolution engine and a small reverse-mode tape. The crate also carries
//! the analytic cost model, effective-receptive-field tooling, the latent
//! dimensionality probe and a self-verification suite.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod conv;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod report;
pub mod tensor;
pub mod timing;
pub mod van;
pub mod verify;

pub use analysis::{compute_erf, erf_radius, ErfMap, ProbeReport};
pub use attention::{build_attention, dilation_for_kernel, AttentionModule, AttentionVariant, KernelSpec, KERNEL_SIZES};
pub use autodiff::{Recordable, Tape, Var};
pub use conv::{ConvKernel, KernelKind, StridedConv};
pub use cost::{model_cost, CostReport, LayerCost};
pub use error::{Error, Result};
pub use report::{Scope, SweepRow};
pub use tensor::{BatchNorm, Shape, Tensor};
pub use timing::TimingStats;
pub use van::{build_van, Capacity, ModelConfig, VanModel};
