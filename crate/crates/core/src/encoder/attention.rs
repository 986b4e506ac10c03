//! Attention probability computation, in two interchangeable forms.
//!
//! The reference functions below are pure forward math, generic over the
//! scalar type; they exist so the stabilized rescaling can be compared
//! against the plain softmax at full precision and demonstrated to survive
//! half precision where the plain form overflows.

use crate::errors::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Plain attention probabilities: `softmax(q·k^T / sqrt(d) + bias)` without
/// any max subtraction. Overflow-prone outside f64.
pub fn attention_probs_naive<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (t, d) = check_shapes(q, k, bias)?;
    let inv_sqrt_d = F::one() / F::cst((d as f64).sqrt());
    let mut probs = vec![F::zero(); t * t];
    for i in 0..t {
        let mut row = vec![F::zero(); t];
        for j in 0..t {
            let mut dot = F::zero();
            for l in 0..d {
                dot = dot + q.data()[i * d + l] * k.data()[j * d + l];
            }
            row[j] = (dot * inv_sqrt_d + bias.data()[i * t + j]).exp();
        }
        let mut sum = F::zero();
        for &x in &row {
            sum = sum + x;
        }
        for j in 0..t {
            probs[i * t + j] = row[j] / sum;
        }
    }
    Tensor::new(vec![t, t], probs)
}

/// Rescaled attention probabilities: queries are pre-divided by `c·sqrt(d)`,
/// the per-row maximum of the scaled scores is subtracted before multiplying
/// back by `c` and adding the bias, keeping every intermediate within the
/// representable range of low-precision floats.
pub fn attention_probs_stabilized<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    bias: &Tensor<F>,
    c: f64,
) -> Result<Tensor<F>> {
    let (t, d) = check_shapes(q, k, bias)?;
    let c_f = F::cst(c);
    let inv = F::one() / (c_f * F::cst(d as f64).sqrt());
    // scale queries first, then take dot products
    let qs: Vec<F> = q.data().iter().map(|&x| x * inv).collect();
    let mut probs = vec![F::zero(); t * t];
    let mut scores = vec![F::zero(); t];
    for i in 0..t {
        for (j, s) in scores.iter_mut().enumerate() {
            let mut dot = F::zero();
            for l in 0..d {
                dot = dot + qs[i * d + l] * k.data()[j * d + l];
            }
            *s = dot;
        }
        let m = scores.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for j in 0..t {
            let e = ((scores[j] - m) * c_f + bias.data()[i * t + j]).exp();
            probs[i * t + j] = e;
            sum = sum + e;
        }
        for j in 0..t {
            probs[i * t + j] = probs[i * t + j] / sum;
        }
    }
    Tensor::new(vec![t, t], probs)
}

fn check_shapes<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<(usize, usize)> {
    if q.shape().len() != 2 || q.shape() != k.shape() {
        return Err(Error::ShapeMismatch {
            op: "attention_probs",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let t = q.shape()[0];
    if bias.shape() != [t, t] {
        return Err(Error::ShapeMismatch {
            op: "attention_probs",
            lhs: vec![t, t],
            rhs: bias.shape().to_vec(),
        });
    }
    if !q.all_finite() || !k.all_finite() {
        return Err(Error::NonFinite {
            context: "attention inputs".into(),
        });
    }
    Ok((t, q.shape()[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::F16;
    use num_traits::Float;
    use rand::distributions::{Distribution, Uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_qkb(seed: u64, t: usize, d: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new_inclusive(-1.0, 1.0);
        let q = Tensor::new(vec![t, d], (0..t * d).map(|_| u.sample(&mut rng)).collect()).unwrap();
        let k = Tensor::new(vec![t, d], (0..t * d).map(|_| u.sample(&mut rng)).collect()).unwrap();
        let b = Tensor::new(
            vec![t, t],
            (0..t * t).map(|_| 0.3 * u.sample(&mut rng)).collect(),
        )
        .unwrap();
        (q, k, b)
    }

    #[test]
    fn single_position_gets_weight_one() {
        let q = Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let k = q.clone();
        let b = Tensor::new(vec![1, 1], vec![0.7]).unwrap();
        let p = attention_probs_stabilized(&q, &k, &b, 32.0).unwrap();
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn stabilized_matches_naive_at_f64() {
        for seed in 0..20 {
            let (q, k, b) = random_qkb(seed, 6, 8);
            let naive = attention_probs_naive(&q, &k, &b).unwrap();
            let stab = attention_probs_stabilized(&q, &k, &b, 32.0).unwrap();
            for (x, y) in naive.data().iter().zip(stab.data()) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn half_precision_overflow_demonstration() {
        let (q, k, b) = random_qkb(7, 6, 8);
        // scale so the largest |q_i.k_j|/sqrt(d) is 1e5
        let mut m: f64 = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = (0..8).map(|l| q.data()[i * 8 + l] * k.data()[j * 8 + l]).sum();
                m = m.max(dot.abs() / (8f64).sqrt());
            }
        }
        let s = (1e5 / m).sqrt();
        let scale = |t: &Tensor<f64>| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect()).unwrap()
        };
        let (q16, k16, b16) = (
            scale(&q).cast::<F16>(),
            scale(&k).cast::<F16>(),
            b.cast::<F16>(),
        );
        let naive = attention_probs_naive(&q16, &k16, &b16).unwrap();
        assert!(
            naive.data().iter().any(|x| !x.is_finite()),
            "naive half precision should overflow"
        );
        let stab = attention_probs_stabilized(&q16, &k16, &b16, 32.0).unwrap();
        assert!(stab.data().iter().all(|x| x.is_finite()));
        for r in 0..6 {
            let row_sum: f64 = (0..6).map(|j| stab.data()[r * 6 + j].get()).sum();
            assert!((row_sum - 1.0).abs() < 1e-2, "row {r} sums to {row_sum}");
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let q = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        let k = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert!(matches!(
            attention_probs_naive(&q, &k, &b),
            Err(Error::NonFinite { .. })
        ));
    }
}
