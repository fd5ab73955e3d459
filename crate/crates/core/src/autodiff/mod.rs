//! Minimal dense-tensor arithmetic with reverse-mode differentiation.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Softened probabilities `softmax(logits / temperature)` of a single logit vector.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let mut out = vec![0.0; logits.len()];
    kernels::softmax_into(logits, temperature, &mut out);
    Ok(out)
}

/// Unit-Euclidean-norm copy of `f`.
pub fn l2_normalize(f: &[f64]) -> Result<Vec<f64>> {
    let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!("cannot normalise a vector of norm {norm}")));
    }
    Ok(f.iter().map(|x| x / norm).collect())
}

/// Stable `log Σ exp(x)`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    kernels::log_sum_exp_scaled(x, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        // e²/(e²+1)
        let e2 = 2f64.exp();
        let p = softmax(&[8.0, 0.0], 4.0).unwrap();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax(&[1.0], -2.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax(&[f64::NAN, 1.0], 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_shift_and_temperature_identities() {
        let z = [0.3, -2.1, 5.0, 1.7];
        let p = softmax(&z, 1.0).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.25).collect();
        let q = softmax(&shifted, 1.0).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn l2_normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        for c in [0.1, 1.0, 7.5, 1e6] {
            let v = l2_normalize(&[c, c]).unwrap();
            let h = 1.0 / 2f64.sqrt();
            assert!((v[0] - h).abs() < 1e-15 && (v[1] - h).abs() < 1e-15);
        }
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::Degenerate(_))));
    }
}
