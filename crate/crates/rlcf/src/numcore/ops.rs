//! Plain (non-differentiable) numeric kernels shared across the crate.

use crate::error::{Error, Result};

/// Numerically stable softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Stable log-softmax: `x - max - ln Σ exp(x - max)`.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(logits.iter().map(|&v| v - lse).collect())
}

/// Shannon entropy in nats, with `0·ln 0 := 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::EmptyInput("entropy"));
    }
    if p.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("entropy: negative probability entry"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "entropy: probabilities sum to {sum}, expected 1"
        )));
    }
    Ok(p.iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum())
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding drift.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            context: "cosine",
            expected: format!("len {}", u.len()),
            got: format!("len {}", v.len()),
        });
    }
    if u.is_empty() {
        return Err(Error::EmptyInput("cosine"));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> Result<usize> {
    if v.is_empty() {
        return Err(Error::EmptyInput("argmax"));
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_no_overflow_on_large_logits() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(p[0] > 1.0 - 1e-12 && p[1] < 1e-12);
    }

    #[test]
    fn softmax_matches_high_precision_reference() {
        // Frozen from an independent 50-digit evaluation.
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expect = [0.0900305731704, 0.244728471055, 0.665240955775];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(matches!(softmax(&[]), Err(Error::EmptyLogits)));
    }

    #[test]
    fn softmax_sums_to_one_under_fuzz() {
        // Magnitudes up to 1e6 must stay normalized and finite.
        let mut state = 0x9e3779b97f4a7c15u64;
        for _ in 0..200 {
            let mut xs = Vec::new();
            for _ in 0..7 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                let u = (state >> 11) as f64 / (1u64 << 53) as f64;
                xs.push((u - 0.5) * 2e6);
            }
            let p = softmax(&xs).unwrap();
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_uniform_and_onehot() {
        let h = entropy(&[0.25; 4]).unwrap();
        assert!((h - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let h2 = entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((h2 - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_negative() {
        assert!(entropy(&[1.1, -0.1]).is_err());
    }

    #[test]
    fn entropy_shift_invariance_through_softmax() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let shifted: Vec<f64> = x.iter().map(|v| v + 123.456).collect();
        let h1 = entropy(&softmax(&x).unwrap()).unwrap();
        let h2 = entropy(&softmax(&shifted).unwrap()).unwrap();
        assert!((h1 - h2).abs() < 1e-9);
    }

    #[test]
    fn cosine_basics() {
        let u = [1.0, 2.0, -0.5];
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        let nu: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine(&u, &nu).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);
    }

    #[test]
    fn cosine_zero_norm_is_degenerate() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn l2_normalize_basics() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let unit = [0.6, 0.8];
        let again = l2_normalize(&unit).unwrap();
        assert!((again[0] - 0.6).abs() < 1e-15 && (again[1] - 0.8).abs() < 1e-15);
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn argmax_tie_breaks_low_index() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]).unwrap(), 0);
    }
}
