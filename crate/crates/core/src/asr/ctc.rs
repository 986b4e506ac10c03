//! CTC loss via the forward recursion over the blank-interleaved target,
//! computed in log space, with the standard closed-form gradient.

use crate::asr::BLANK;
use crate::errors::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{CustomOp, Tape, Tensor, Var};

fn logaddexp<F: Scalar>(a: F, b: F) -> F {
    if a == F::neg_infinity() {
        return b;
    }
    if b == F::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Fewest frames that can emit `target` (repeats need a separating blank).
pub fn min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn validate_target(target: &[usize], v: usize) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&s| s == BLANK || s >= v) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: v,
        });
    }
    Ok(())
}

/// Row-wise log-softmax of raw scores.
fn log_probs<F: Scalar>(logits: &Tensor<F>) -> Vec<F> {
    let v = logits.shape()[1];
    let src = logits.data();
    let mut out = vec![F::zero(); src.len()];
    for r in 0..src.len() / v {
        let row = &src[r * v..(r + 1) * v];
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for &x in row {
            sum = sum + (x - m).exp();
        }
        let lse = m + sum.ln();
        for (j, &x) in row.iter().enumerate() {
            out[r * v + j] = x - lse;
        }
    }
    out
}

fn extended_label(target: &[usize]) -> Vec<usize> {
    let mut l = Vec::with_capacity(2 * target.len() + 1);
    l.push(BLANK);
    for &t in target {
        l.push(t);
        l.push(BLANK);
    }
    l
}

/// alpha[t][s]: log probability of consuming frames 0..=t and being at
/// extended-label position s.
fn forward_lattice<F: Scalar>(lp: &[F], t_len: usize, v: usize, ext: &[usize]) -> Vec<F> {
    let s_len = ext.len();
    let ninf = F::neg_infinity();
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = logaddexp(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = logaddexp(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf {
                ninf
            } else {
                acc + lp[t * v + ext[s]]
            };
        }
    }
    alpha
}

/// beta[t][s]: log probability of emitting everything after frame t given
/// position s at frame t (emission at t itself excluded).
fn backward_lattice<F: Scalar>(lp: &[F], t_len: usize, v: usize, ext: &[usize]) -> Vec<F> {
    let s_len = ext.len();
    let ninf = F::neg_infinity();
    let mut beta = vec![ninf; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = F::zero();
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = F::zero();
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s] + lp[(t + 1) * v + ext[s]];
            if s + 1 < s_len {
                acc = logaddexp(acc, beta[(t + 1) * s_len + s + 1] + lp[(t + 1) * v + ext[s + 1]]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc = logaddexp(acc, beta[(t + 1) * s_len + s + 2] + lp[(t + 1) * v + ext[s + 2]]);
            }
            beta[t * s_len + s] = acc;
        }
    }
    beta
}

/// Total log probability of all alignments of `target` under raw `logits`
/// (log-softmaxed internally). `None` when the target is infeasible for T.
pub fn ctc_log_prob<F: Scalar>(logits: &Tensor<F>, target: &[usize]) -> Result<Option<F>> {
    let (t_len, v) = shape2(logits)?;
    validate_target(target, v)?;
    if min_frames(target) > t_len {
        return Ok(None);
    }
    let lp = log_probs(logits);
    let ext = extended_label(target);
    let alpha = forward_lattice(&lp, t_len, v, &ext);
    let s_len = ext.len();
    let mut total = alpha[(t_len - 1) * s_len + s_len - 1];
    if s_len > 1 {
        total = logaddexp(total, alpha[(t_len - 1) * s_len + s_len - 2]);
    }
    Ok(Some(total))
}

fn shape2<F: Scalar>(logits: &Tensor<F>) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 || logits.shape()[0] == 0 || logits.shape()[1] < 2 {
        return Err(Error::ShapeMismatch {
            op: "ctc_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((logits.shape()[0], logits.shape()[1]))
}

#[derive(Debug)]
struct CtcLossOp {
    target: Vec<usize>,
}

impl<F: Scalar> CustomOp<F> for CtcLossOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn forward(&self, inputs: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let logp = ctc_log_prob(inputs[0], &self.target)?
            .expect("feasibility checked before recording the op");
        Ok(Tensor::scalar(-logp))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad_out: &[F],
    ) -> Vec<Option<Vec<F>>> {
        let logits = inputs[0];
        let (t_len, v) = (logits.shape()[0], logits.shape()[1]);
        let lp = log_probs(logits);
        let ext = extended_label(&self.target);
        let s_len = ext.len();
        let alpha = forward_lattice(&lp, t_len, v, &ext);
        let beta = backward_lattice(&lp, t_len, v, &ext);
        let mut log_p = alpha[(t_len - 1) * s_len + s_len - 1];
        if s_len > 1 {
            log_p = logaddexp(log_p, alpha[(t_len - 1) * s_len + s_len - 2]);
        }
        let g = grad_out[0];
        let mut grad = vec![F::zero(); t_len * v];
        for t in 0..t_len {
            // posterior mass per class at frame t
            let mut gamma = vec![F::neg_infinity(); v];
            for s in 0..s_len {
                let occ = alpha[t * s_len + s] + beta[t * s_len + s];
                gamma[ext[s]] = logaddexp(gamma[ext[s]], occ);
            }
            for c in 0..v {
                let softmax = lp[t * v + c].exp();
                let post = (gamma[c] - log_p).exp();
                grad[t * v + c] = g * (softmax - post);
            }
        }
        vec![Some(grad)]
    }
}

/// Result of building the loss: `var` is absent when the target cannot fit
/// in the available frames, in which case `value` is +inf and the flag set.
pub struct CtcLoss {
    pub var: Option<Var>,
    pub value: f64,
    pub infeasible: bool,
}

/// Record the CTC loss of raw per-frame scores against a target sequence.
pub fn ctc_loss<F: Scalar>(tape: &mut Tape<F>, logits: Var, target: &[usize]) -> Result<CtcLoss> {
    let (t_len, v) = shape2(tape.value(logits))?;
    validate_target(target, v)?;
    if min_frames(target) > t_len {
        return Ok(CtcLoss {
            var: None,
            value: f64::INFINITY,
            infeasible: true,
        });
    }
    let var = tape.custom(
        Box::new(CtcLossOp {
            target: target.to_vec(),
        }),
        &[logits],
    )?;
    let value = tape.scalar_value(var).as_f64();
    Ok(CtcLoss {
        var: Some(var),
        value,
        infeasible: false,
    })
}

/// Best-path decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_decode<F: Scalar>(logits: &Tensor<F>) -> Vec<usize> {
    let v = logits.shape()[1];
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for row in logits.data().chunks_exact(v) {
        let mut best = 0usize;
        let mut best_v = row[0];
        for (j, &x) in row.iter().enumerate().skip(1) {
            if x > best_v {
                best_v = x;
                best = j;
            }
        }
        if best != prev && best != BLANK {
            out.push(best);
        }
        prev = best;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_logits(t: usize, v: usize) -> Tensor<f64> {
        Tensor::new(vec![t, v], vec![0.0; t * v]).unwrap()
    }

    #[test]
    fn single_frame_single_symbol() {
        let logits = uniform_logits(1, 2);
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let r = ctc_loss(&mut tape, l, &[1]).unwrap();
        assert!(!r.infeasible);
        assert!((r.value - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        let logits = uniform_logits(2, 2);
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let r = ctc_loss(&mut tape, l, &[1]).unwrap();
        // paths (a,-), (-,a), (a,a) of the 4 total
        assert!((r.value - (-(0.75f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let data = vec![0.3, -0.7, 1.1, 0.2, -0.5, 0.9];
        let logits = Tensor::new(vec![2, 3], data.clone()).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let r = ctc_loss(&mut tape, l, &[]).unwrap();
        let lp = log_probs(&logits);
        let expect = -(lp[0] + lp[3]);
        assert!((r.value - expect).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_flags_infinity() {
        let logits = uniform_logits(2, 3);
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        // "aa" needs 3 frames (repeat requires a blank)
        let r = ctc_loss(&mut tape, l, &[1, 1]).unwrap();
        assert!(r.infeasible);
        assert!(r.value.is_infinite());
        assert!(r.var.is_none());
        assert_eq!(min_frames(&[1, 1]), 3);
    }

    #[test]
    fn blank_in_target_rejected() {
        let logits = uniform_logits(3, 3);
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        assert!(ctc_loss(&mut tape, l, &[0]).is_err());
        assert!(ctc_loss(&mut tape, l, &[3]).is_err());
    }

    #[test]
    fn greedy_collapse_rules() {
        let rows = |seq: &[usize], v: usize| -> Tensor<f64> {
            let mut data = vec![0.0; seq.len() * v];
            for (t, &s) in seq.iter().enumerate() {
                data[t * v + s] = 5.0;
            }
            Tensor::new(vec![seq.len(), v], data).unwrap()
        };
        assert_eq!(greedy_decode(&rows(&[1, 1, 0, 2], 3)), vec![1, 2]);
        assert_eq!(greedy_decode(&rows(&[0, 0, 0], 3)), Vec::<usize>::new());
        assert_eq!(greedy_decode(&rows(&[1, 0, 1], 3)), vec![1, 1]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::tensor::check::{finite_difference_grad, max_rel_err};
        let t_len = 4;
        let v = 3;
        let target = vec![1usize, 2];
        let base: Vec<f64> = (0..t_len * v).map(|i| ((i * 13 % 7) as f64) * 0.31 - 0.8).collect();
        let logits = Tensor::new(vec![t_len, v], base).unwrap();
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone(), true);
        let r = ctc_loss(&mut tape, l, &target).unwrap();
        tape.backward(r.var.unwrap()).unwrap();
        let analytic = tape.grad(l).unwrap().to_vec();
        let numeric = finite_difference_grad(
            &mut |p: &Tensor<f64>| {
                let mut tp = Tape::new();
                let lv = tp.constant(p.clone());
                ctc_loss(&mut tp, lv, &target).unwrap().value
            },
            &logits,
            1e-6,
        );
        let err = max_rel_err(&analytic, numeric.data());
        assert!(err < 1e-4, "relative error {err}");
    }

    /// Brute-force oracle: enumerate every frame labelling, collapse it, and
    /// sum the probabilities of those that produce the target.
    fn brute_force_log_prob(logits: &Tensor<f64>, target: &[usize]) -> f64 {
        let (t_len, v) = (logits.shape()[0], logits.shape()[1]);
        let lp = log_probs(logits);
        let mut total = f64::NEG_INFINITY;
        let n_paths = v.pow(t_len as u32);
        for code in 0..n_paths {
            let mut path = Vec::with_capacity(t_len);
            let mut c = code;
            for _ in 0..t_len {
                path.push(c % v);
                c /= v;
            }
            let collapsed: Vec<usize> = {
                let mut out = Vec::new();
                let mut prev = usize::MAX;
                for &s in &path {
                    if s != prev && s != BLANK {
                        out.push(s);
                    }
                    prev = s;
                }
                out
            };
            if collapsed == target {
                let logp: f64 = path.iter().enumerate().map(|(t, &s)| lp[t * v + s]).sum();
                total = logaddexp(total, logp);
            }
        }
        total
    }

    #[test]
    fn forward_recursion_matches_path_enumeration() {
        let mut rng_state = 0xDEADBEEFu64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        for t_len in 1..=5 {
            for v in 2..=3 {
                let logits = Tensor::new(
                    vec![t_len, v],
                    (0..t_len * v).map(|_| next() * 2.0).collect(),
                )
                .unwrap();
                for target in [vec![], vec![1], vec![1, 1], vec![1, 2], vec![2, 1, 2]] {
                    if target.iter().any(|&s| s >= v) {
                        continue;
                    }
                    let got = ctc_log_prob(&logits, &target).unwrap();
                    if min_frames(&target) > t_len {
                        assert!(got.is_none());
                        continue;
                    }
                    let want = brute_force_log_prob(&logits, &target);
                    let got = got.unwrap();
                    assert!(
                        (got - want).abs() < 1e-10,
                        "T={t_len} V={v} target {target:?}: {got} vs {want}"
                    );
                }
            }
        }
    }
}
