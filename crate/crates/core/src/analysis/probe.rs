//! Shape/texture dimensionality estimation from paired latent codes.
//!
//! Each neuron's pair correlation `c_i` is summed into a factor score
//! `s_k`; a softmax over (shape, texture, residual) splits the `N` latent
//! dimensions among the factors. The residual score is fixed at zero.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Bound applied to `|c|` before taking the mutual information.
pub const CORRELATION_CLAMP: f64 = 0.999_999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Shape,
    Texture,
    Residual,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Shape, Factor::Texture, Factor::Residual];

    pub fn as_str(self) -> &'static str {
        match self {
            Factor::Shape => "shape",
            Factor::Texture => "texture",
            Factor::Residual => "residual",
        }
    }
}

/// Pearson correlation of two series. A zero-variance series gives `value = 0`
/// with `degenerate` set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

pub fn correlation(za: &[f64], zb: &[f64]) -> Result<Correlation> {
    if za.len() != zb.len() {
        return Err(Error::LengthMismatch {
            op: "correlation",
            expected: za.len(),
            actual: zb.len(),
        });
    }
    if za.len() < 2 {
        return Err(Error::Probe(format!("correlation needs at least 2 samples, got {}", za.len())));
    }
    if za.iter().chain(zb).any(|v| !v.is_finite()) {
        return Err(Error::Probe("non-finite value in series".into()));
    }
    let n = za.len() as f64;
    let ma = za.iter().sum::<f64>() / n;
    let mb = zb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (a, b) in za.iter().zip(zb) {
        let (da, db) = (a - ma, b - mb);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        value: (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// `-ln(1 - c²) / 2` in nats, after clamping `c` to `±CORRELATION_CLAMP`.
pub fn mutual_information(c: f64) -> f64 {
    let c = c.clamp(-CORRELATION_CLAMP, CORRELATION_CLAMP);
    -0.5 * (1.0 - c * c).ln()
}

/// Row-major `pairs x N` matrix of latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl LatentMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                op: "latent matrix",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Probe(format!("row {bad} has {} columns, expected {cols}", rows[bad].len())));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Headerless numeric CSV, one row per image pair.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Probe(format!("{}: {e}", path.display())))?;
            let row = record
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Probe(format!("{}: line {}: {e}", path.display(), i + 1)))?;
            rows.push(row);
        }
        Self::from_rows(&rows).map_err(|e| Error::Probe(format!("{}: {e}", path.display())))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }
}

/// Paired codes `(z^a, z^b)` for one factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPairs {
    pub a: LatentMatrix,
    pub b: LatentMatrix,
}

impl FactorPairs {
    pub fn new(a: LatentMatrix, b: LatentMatrix) -> Result<Self> {
        if (a.rows, a.cols) != (b.rows, b.cols) {
            return Err(Error::Probe(format!(
                "paired matrices differ: {}x{} vs {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        Ok(Self { a, b })
    }

    pub fn dims(&self) -> usize {
        self.a.cols
    }

    /// Per-neuron correlations.
    pub fn correlations(&self) -> Result<Vec<Correlation>> {
        (0..self.dims())
            .map(|j| correlation(&self.a.column(j), &self.b.column(j)))
            .collect()
    }

    /// `Σ_i c_i`.
    pub fn score(&self) -> Result<f64> {
        Ok(self.correlations()?.iter().map(|c| c.value).sum())
    }
}

/// `(s_shape, s_texture, s_residual)`.
pub fn factor_scores(shape: &FactorPairs, texture: &FactorPairs) -> Result<[f64; 3]> {
    if shape.dims() != texture.dims() {
        return Err(Error::Probe(format!(
            "latent dimension differs between factors: shape {} vs texture {}",
            shape.dims(),
            texture.dims()
        )));
    }
    Ok([shape.score()?, texture.score()?, 0.0])
}

/// Softmax of the three scores scaled to `n`.
pub fn dimensionality(scores: [f64; 3], n: usize) -> [f64; 3] {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = scores.map(|s| (s - max).exp());
    let z: f64 = e.iter().sum();
    e.map(|v| v / z * n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorEstimate {
    pub factor: Factor,
    pub score: f64,
    pub dimensionality: f64,
    pub pairs: usize,
}

impl FactorEstimate {
    pub fn percent_of_n(&self, n: usize) -> f64 {
        100.0 * self.dimensionality / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub n: usize,
    pub factors: [FactorEstimate; 3],
}

impl ProbeReport {
    pub fn get(&self, factor: Factor) -> &FactorEstimate {
        &self.factors[factor as usize]
    }
}

/// Full estimate. `n` defaults to the latent width of the inputs.
pub fn run_probe(shape: &FactorPairs, texture: &FactorPairs, n: Option<usize>) -> Result<ProbeReport> {
    let scores = factor_scores(shape, texture)?;
    let n = n.unwrap_or(shape.dims());
    if n != shape.dims() {
        return Err(Error::Probe(format!("N = {n} but latent files have {} columns", shape.dims())));
    }
    let dims = dimensionality(scores, n);
    let pairs = [shape.a.rows, texture.a.rows, 0];
    let est = |i: usize| FactorEstimate {
        factor: Factor::ALL[i],
        score: scores[i],
        dimensionality: dims[i],
        pairs: pairs[i],
    };
    Ok(ProbeReport {
        n,
        factors: [est(0), est(1), est(2)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use proptest::prelude::*;
    use rand::Rng;

    fn pairs(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> FactorPairs {
        FactorPairs::new(LatentMatrix::from_rows(&a).unwrap(), LatentMatrix::from_rows(&b).unwrap()).unwrap()
    }

    fn noise(rows: usize, cols: usize, seed: u64) -> LatentMatrix {
        let mut rng = init::rng(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        LatentMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn correlation_examples() {
        let z = [1.0, 2.0, 3.0, 4.0];
        assert!((correlation(&z, &z).unwrap().value - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        assert!((correlation(&z, &neg).unwrap().value + 1.0).abs() < 1e-15);
        // deviations a = (-1.5, -0.5, 0.5, 1.5), b = (-3, -1, 0, 4):
        // Σab = 11, Σa² = 5, Σb² = 26, c = 11 / sqrt(130) ≈ 0.96476
        let c = correlation(&z, &[2.0, 4.0, 5.0, 9.0]).unwrap().value;
        assert!((c - 11.0 / 130f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn constant_series_is_flagged() {
        let c = correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c, Correlation { value: 0.0, degenerate: true });
        assert!(correlation(&[1.0], &[1.0]).is_err());
        assert!(correlation(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn mutual_information_examples() {
        assert_eq!(mutual_information(0.0), 0.0);
        assert!((mutual_information(0.8) - 0.510_825_623_765_990_7).abs() < 1e-12);
        assert_eq!(mutual_information(0.3), mutual_information(-0.3));
        assert!(mutual_information(1.0).is_finite());
    }

    #[test]
    fn dimensionality_examples() {
        let d = dimensionality([0.0; 3], 256);
        for v in d {
            assert!((v - 256.0 / 3.0).abs() < 1e-9);
        }
        let e = std::f64::consts::E;
        assert!((dimensionality([1.0, 0.0, 0.0], 256)[0] - e / (e + 2.0) * 256.0).abs() < 1e-9);
        let a = dimensionality([0.3, -2.0, 0.0], 100);
        let b = dimensionality([10.3, 8.0, 10.0], 100);
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-9);
        }
        assert!(dimensionality([800.0, -800.0, 0.0], 10).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn score_extremes() {
        let z = noise(200, 16, 1);
        let same = FactorPairs::new(z.clone(), z).unwrap();
        assert!((same.score().unwrap() - 16.0).abs() < 1e-9);
        let indep = FactorPairs::new(noise(10_000, 16, 2), noise(10_000, 16, 3)).unwrap();
        assert!(indep.score().unwrap().abs() < 0.05 * 16.0);
    }

    #[test]
    fn opposite_correlations_cancel() {
        // c = 0.5 on one neuron, -0.5 on the other
        let p = pairs(
            vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]],
            vec![vec![1.0, 2.0], vec![3.0, 3.0], vec![2.0, 1.0]],
        );
        let c = p.correlations().unwrap();
        assert!((c[0].value - 0.5).abs() < 1e-15 && (c[1].value + 0.5).abs() < 1e-15);
        assert!(p.score().unwrap().abs() < 1e-15);
    }

    #[test]
    fn probe_report_allocates_n() {
        let z = noise(300, 32, 4);
        let shape = FactorPairs::new(z.clone(), z).unwrap();
        let texture = FactorPairs::new(noise(300, 32, 5), noise(300, 32, 6)).unwrap();
        let r = run_probe(&shape, &texture, None).unwrap();
        let total: f64 = r.factors.iter().map(|f| f.dimensionality).sum();
        assert!((total - 32.0).abs() < 1e-9);
        assert!(r.get(Factor::Shape).dimensionality > 31.9);
        assert_eq!(r.get(Factor::Texture).pairs, 300);
        assert!(run_probe(&shape, &FactorPairs::new(noise(5, 8, 1), noise(5, 8, 2)).unwrap(), None).is_err());
        assert!(run_probe(&shape, &texture, Some(64)).is_err());
    }

    proptest! {
        #[test]
        fn correlation_is_affine_invariant(
            seed in any::<u64>(),
            alpha in 0.01f64..100.0, beta in -50.0f64..50.0,
            gamma in 0.01f64..100.0, delta in -50.0f64..50.0,
        ) {
            let mut rng = init::rng(seed);
            let za: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let zb: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ta: Vec<f64> = za.iter().map(|v| alpha * v + beta).collect();
            let tb: Vec<f64> = zb.iter().map(|v| gamma * v + delta).collect();
            let c0 = correlation(&za, &zb).unwrap().value;
            let c1 = correlation(&ta, &tb).unwrap().value;
            prop_assert!((c0 - c1).abs() < 1e-9);
        }

        #[test]
        fn mutual_information_monotone(a in 0.0f64..0.999, b in 0.0f64..0.999) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(mutual_information(lo) <= mutual_information(hi));
            prop_assert!(mutual_information(-hi) == mutual_information(hi));
        }

        #[test]
        fn dimensionality_sums_to_n(s in prop::array::uniform3(-300.0f64..300.0), n in 1usize..2048) {
            let d = dimensionality(s, n);
            prop_assert!((d.iter().sum::<f64>() - n as f64).abs() < 1e-9);
            prop_assert!(d.iter().all(|v| *v >= 0.0));
        }
    }
}
