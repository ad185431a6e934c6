//! Central finite-difference checks for vector-Jacobian products.
//!
//! The scalar probed is `L(p) = Σ r ⊙ f(p)` for a fixed random `r`, so the
//! analytic gradient is the VJP of `f` applied to `r`. Output differences
//! are taken elementwise before weighting, which keeps untouched outputs
//! from contributing rounding noise.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coords: usize,
}

/// Compare `analytic[i]` with the central difference of `L` at each of the
/// given coordinates of `params`.
pub fn check_coords<F>(f: F, params: &[f64], weights: &[f64], analytic: &[f64], coords: &[usize]) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if analytic.len() != params.len() {
        return Err(Error::LengthMismatch {
            op: "gradcheck",
            expected: params.len(),
            actual: analytic.len(),
        });
    }
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for &i in coords {
        let orig = p[i];
        p[i] = orig + FD_STEP;
        let plus = f(&p)?;
        p[i] = orig - FD_STEP;
        let minus = f(&p)?;
        p[i] = orig;
        if plus.len() != weights.len() || minus.len() != weights.len() {
            return Err(Error::LengthMismatch {
                op: "gradcheck",
                expected: weights.len(),
                actual: plus.len(),
            });
        }
        let diff: f64 = plus
            .iter()
            .zip(&minus)
            .zip(weights)
            .map(|((a, b), r)| r * (a - b))
            .sum();
        worst = worst.max(rel_err(diff / (2.0 * FD_STEP), analytic[i]));
    }
    Ok(GradCheck {
        max_rel_err: worst,
        coords: coords.len(),
    })
}

/// Up to `count` distinct coordinates in `0..len`.
pub fn sample_coords<R: Rng + ?Sized>(rng: &mut R, len: usize, count: usize) -> Vec<usize> {
    let mut v = index::sample(rng, len, count.min(len)).into_vec();
    v.sort_unstable();
    v
}
