//! The n-batch transform: `n` independent augmentations of a batch,
//! concatenated as contrastive input.
//!
//! Augmentation for vector data is `t(x) = x ⊙ (1 + jitter·ε₁) + σ·ε₂` with
//! independent standard normal `ε₁, ε₂` per coordinate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub n: usize,
    pub noise_sigma: f64,
    pub jitter_scale: f64,
    /// Upper bound on `n·B`.
    pub max_rows: usize,
    pub seed: u64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            n: 8,
            noise_sigma: 0.05,
            jitter_scale: 0.05,
            max_rows: 8192,
            seed: 0,
        }
    }
}

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param("n must be at least 1"));
        }
        for (name, v) in [("noise_sigma", self.noise_sigma), ("jitter_scale", self.jitter_scale)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::param(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.noise_sigma == 0.0 && self.jitter_scale == 0.0
    }
}

/// `(n·B) × D` rows; row `k·B + i` is `t_k(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBatch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub is_outlier: Vec<bool>,
}

/// Standard deviation of every input coordinate, pooled over dimensions.
pub fn feature_std(inputs: &[f64]) -> f64 {
    if inputs.is_empty() {
        return 0.0;
    }
    let n = inputs.len() as f64;
    let mean = inputs.iter().sum::<f64>() / n;
    (inputs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Seed of the augmentation stream for row `row` of draw `k`; row streams are
/// independent of scheduling.
fn row_rng(seed: u64, k: usize, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 40) ^ row as u64);
    rng
}

pub fn multi_batch_transform(
    inputs: &[f64],
    dim: usize,
    labels: &[usize],
    is_outlier: &[bool],
    spec: &TransformSpec,
) -> Result<MultiBatch> {
    spec.validate()?;
    if dim == 0 || inputs.is_empty() || inputs.len() % dim != 0 {
        return Err(Error::shape("batch must be a nonempty whole number of rows"));
    }
    let b = inputs.len() / dim;
    if labels.len() != b || is_outlier.len() != b {
        return Err(Error::shape(format!(
            "{b} rows but {} labels and {} outlier flags",
            labels.len(),
            is_outlier.len()
        )));
    }
    let rows = spec.n * b;
    if rows > spec.max_rows {
        return Err(Error::Capacity {
            rows,
            max_rows: spec.max_rows,
        });
    }
    let mut out = Vec::with_capacity(rows * dim);
    for k in 0..spec.n {
        for i in 0..b {
            let x = &inputs[i * dim..(i + 1) * dim];
            if spec.is_identity() {
                out.extend_from_slice(x);
                continue;
            }
            let mut rng = row_rng(spec.seed, k, i);
            out.extend(x.iter().map(|&v| {
                let e1: f64 = StandardNormal.sample(&mut rng);
                let e2: f64 = StandardNormal.sample(&mut rng);
                v * (1.0 + spec.jitter_scale * e1) + spec.noise_sigma * e2
            }));
        }
    }
    Ok(MultiBatch {
        inputs: out,
        labels: labels.repeat(spec.n),
        is_outlier: is_outlier.repeat(spec.n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(b: usize, d: usize) -> (Vec<f64>, Vec<usize>, Vec<bool>) {
        let x = (0..b * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = (0..b).map(|i| i % 3).collect();
        let o = (0..b).map(|i| i % 4 == 0).collect();
        (x, y, o)
    }

    #[test]
    fn identity_when_magnitudes_zero() {
        let (x, y, o) = batch(5, 3);
        let spec = TransformSpec {
            n: 1,
            noise_sigma: 0.0,
            jitter_scale: 0.0,
            ..TransformSpec::default()
        };
        let mb = multi_batch_transform(&x, 3, &y, &o, &spec).unwrap();
        assert_eq!(mb.inputs, x);
        assert_eq!(mb.labels, y);
        assert_eq!(mb.is_outlier, o);
    }

    #[test]
    fn tiles_labels_and_flags() {
        let (x, y, o) = batch(8, 2);
        let spec = TransformSpec {
            n: 4,
            ..TransformSpec::default()
        };
        let mb = multi_batch_transform(&x, 2, &y, &o, &spec).unwrap();
        assert_eq!(mb.inputs.len(), 32 * 2);
        assert_eq!(mb.labels.len(), 32);
        for k in 0..4 {
            assert_eq!(&mb.labels[k * 8..(k + 1) * 8], &y[..]);
            assert_eq!(&mb.is_outlier[k * 8..(k + 1) * 8], &o[..]);
        }
    }

    #[test]
    fn copies_differ_and_are_reproducible() {
        let (x, y, o) = batch(3, 2);
        let spec = TransformSpec {
            n: 2,
            seed: 9,
            ..TransformSpec::default()
        };
        let a = multi_batch_transform(&x, 2, &y, &o, &spec).unwrap();
        assert_ne!(&a.inputs[..6], &a.inputs[6..]);
        assert_eq!(a, multi_batch_transform(&x, 2, &y, &o, &spec).unwrap());
        let other = TransformSpec { seed: 10, ..spec };
        assert_ne!(a, multi_batch_transform(&x, 2, &y, &o, &other).unwrap());
    }

    #[test]
    fn capacity_error() {
        let (x, y, o) = batch(8, 2);
        let spec = TransformSpec {
            n: 8,
            max_rows: 63,
            ..TransformSpec::default()
        };
        assert!(matches!(
            multi_batch_transform(&x, 2, &y, &o, &spec),
            Err(Error::Capacity { rows: 64, max_rows: 63 })
        ));
    }

    #[test]
    fn rejects_bad_spec() {
        let (x, y, o) = batch(2, 2);
        let spec = TransformSpec {
            n: 0,
            ..TransformSpec::default()
        };
        assert!(multi_batch_transform(&x, 2, &y, &o, &spec).is_err());
    }
}
