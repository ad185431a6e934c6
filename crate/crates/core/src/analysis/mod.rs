//! Effective receptive fields and the shape/texture dimensionality probe.

pub mod erf;
pub mod probe;

pub use erf::{compute_erf, erf_radius, ErfMap, ERF_MASS};
pub use probe::{
    correlation, dimensionality, factor_scores, mutual_information, run_probe, Correlation, Factor, FactorPairs,
    LatentMatrix, ProbeReport,
};
