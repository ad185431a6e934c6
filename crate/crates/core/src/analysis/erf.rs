//! Effective receptive field maps from input gradients.

use std::fmt::Write as _;

use crate::autodiff::Recordable;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::van::{input_gradient, Target};

/// Normalized `|d output / d input|` heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct ErfMap {
    height: usize,
    width: usize,
    grid: Vec<f64>,
    pub source_k: usize,
    pub n_inputs: usize,
}

impl ErfMap {
    /// Normalize a non-negative grid to unit mass.
    pub fn from_grid(height: usize, width: usize, grid: Vec<f64>, source_k: usize, n_inputs: usize) -> Result<Self> {
        if grid.len() != height * width {
            return Err(Error::LengthMismatch {
                op: "erf map",
                expected: height * width,
                actual: grid.len(),
            });
        }
        let total: f64 = grid.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateErf);
        }
        Ok(Self {
            height,
            width,
            grid: grid.into_iter().map(|v| v / total).collect(),
            source_k,
            n_inputs,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.grid[h * self.width + w]
    }

    /// `(H/2, W/2)`.
    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    /// Mass inside the square of cells within Chebyshev distance `r` of the
    /// center.
    pub fn enclosed_mass(&self, r: usize) -> f64 {
        let (cy, cx) = self.center();
        let (y0, y1) = (cy.saturating_sub(r), (cy + r).min(self.height - 1));
        let (x0, x1) = (cx.saturating_sub(r), (cx + r).min(self.width - 1));
        (y0..=y1)
            .map(|y| self.grid[y * self.width + x0..=y * self.width + x1].iter().sum::<f64>())
            .sum()
    }

    /// Binary P5 PGM, scaled so the largest cell is 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.grid.iter().cloned().fold(0.0, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.grid.iter().map(|&v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        out
    }

    /// One CSV line per row of the grid.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.grid.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }
}

/// Default mass fraction for [`erf_radius`].
pub const ERF_MASS: f64 = 0.95;

/// Half-width of the smallest centered square whose enclosed mass reaches
/// `mass`. A single-cell map gives 0; a uniform `H x H` map at `mass = 1`
/// gives `H/2`.
pub fn erf_radius(map: &ErfMap, mass: f64) -> f64 {
    let target = mass.clamp(f64::MIN_POSITIVE, 1.0);
    let max_r = map.height.max(map.width);
    // tolerance absorbs rounding in the normalized sum
    (0..=max_r)
        .find(|&r| map.enclosed_mass(r) >= target - 1e-12)
        .unwrap_or(max_r) as f64
}

/// Sum over inputs of the channel-summed absolute input gradient of the
/// channel-summed center output, normalized to unit mass.
pub fn compute_erf<M: Recordable + ?Sized>(model: &M, inputs: &Tensor, source_k: usize) -> Result<ErfMap> {
    let s = inputs.shape();
    if s.n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut grid = vec![0.0; s.plane()];
    for n in 0..s.n {
        let g = input_gradient(model, &inputs.batch_item(n), Target::Center)?;
        for c in 0..s.c {
            for (acc, v) in grid.iter_mut().zip(g.plane(0, c)) {
                *acc += v.abs();
            }
        }
    }
    ErfMap::from_grid(s.h, s.w, grid, source_k, s.n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{ConvKernel, KernelKind};
    use crate::init;
    use crate::tensor::Shape;

    fn map(h: usize, w: usize, grid: Vec<f64>) -> ErfMap {
        ErfMap::from_grid(h, w, grid, 0, 1).unwrap()
    }

    #[test]
    fn radius_of_delta_and_uniform() {
        let mut g = vec![0.0; 81];
        g[40] = 3.0;
        assert_eq!(erf_radius(&map(9, 9, g), ERF_MASS), 0.0);
        assert_eq!(erf_radius(&map(16, 16, vec![1.0; 256]), 1.0), 8.0);
        assert_eq!(erf_radius(&map(9, 9, vec![1.0; 81]), 1.0), 4.0);
    }

    #[test]
    fn radius_of_gaussian_is_about_two_sigma() {
        // Oracle: a sampled isotropic Gaussian, sigma = 5, on a 101 x 101
        // grid. The 95 % square of the continuous density has half-width
        // sigma * Φ⁻¹((1 + sqrt(0.95)) / 2) ≈ 2.236 sigma; sampling puts the
        // first discrete square reaching it at 11.
        let (n, sigma) = (101usize, 5.0f64);
        let c = (n / 2) as f64;
        let grid: Vec<f64> = (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let r = erf_radius(&map(n, n, grid), 0.95);
        assert_eq!(r, 11.0);
        assert!((r - 2.0 * sigma).abs() <= 1.0);
    }

    #[test]
    fn normalization_and_degenerate() {
        let m = map(2, 2, vec![1.0, 1.0, 2.0, 0.0]);
        assert!((m.grid().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(ErfMap::from_grid(2, 2, vec![0.0; 4], 0, 1), Err(Error::DegenerateErf));
    }

    #[test]
    fn single_depthwise_layer_support() {
        let mut rng = init::rng(11);
        let w: Vec<f64> = (0..9).map(|i| 0.5 + i as f64).collect();
        let k = ConvKernel::depthwise(KernelKind::Depthwise2d, 1, 3, 3, 1, w).unwrap();
        let x = Tensor::uniform(Shape::new(2, 1, 15, 15), 1.0, &mut rng);
        let m = compute_erf(&k, &x, 3).unwrap();
        for h in 0..15 {
            for w in 0..15 {
                let inside = (6..=8).contains(&h) && (6..=8).contains(&w);
                assert_eq!(m.get(h, w) > 0.0, inside, "({h},{w})");
            }
        }
    }

    #[test]
    fn zero_model_is_degenerate() {
        let k = ConvKernel::depthwise(KernelKind::Depthwise2d, 1, 3, 3, 1, vec![0.0; 9]).unwrap();
        let x = Tensor::ones(Shape::new(1, 1, 8, 8));
        assert_eq!(compute_erf(&k, &x, 3), Err(Error::DegenerateErf));
        assert_eq!(compute_erf(&k, &Tensor::zeros(Shape::new(0, 1, 8, 8)), 3), Err(Error::EmptyBatch));
    }

    #[test]
    fn pgm_header_and_scaling() {
        let m = map(2, 3, vec![0.0, 1.0, 2.0, 4.0, 0.0, 0.0]);
        let pgm = m.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[0, 64, 128, 255, 0, 0]);
        assert_eq!(m.to_csv().lines().count(), 2);
    }
}
