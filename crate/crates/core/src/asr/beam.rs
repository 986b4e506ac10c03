//! Prefix beam search over CTC posteriors with shallow LM fusion: pruning
//! uses incrementally fused scores, the final ranking recomputes the exact
//! composite `log p_ctc + w1 * log p_lm + w2 * |y|` for each survivor.

use std::collections::HashMap;

use crate::asr::ctc::ctc_log_prob;
use crate::asr::ngram::CharLm;
use crate::asr::{Vocabulary, BLANK};
use crate::errors::Result;
use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct DecodeWeights {
    /// LM weight w1.
    pub lm_weight: f64,
    /// Per-symbol insertion score w2.
    pub insertion_bonus: f64,
    pub beam: usize,
}

impl Default for DecodeWeights {
    fn default() -> Self {
        DecodeWeights {
            lm_weight: 2.0,
            insertion_bonus: -1.0,
            beam: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub text: String,
    /// Composite score of the final ranking.
    pub score: f64,
    /// Exact total CTC log probability of the hypothesis.
    pub log_p_ctc: f64,
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

struct Prefix {
    ids: Vec<usize>,
    /// log prob of the prefix with the last frame blank / non-blank
    pb: f64,
    pnb: f64,
    /// accumulated LM log prob of the prefix characters (no end marker)
    lm: f64,
}

impl Prefix {
    fn total(&self) -> f64 {
        logaddexp(self.pb, self.pnb)
    }
}

/// Fused prefix beam search. `logits` are raw per-frame scores (internally
/// log-softmaxed, matching the loss). Returns hypotheses sorted by the
/// composite score, best first.
pub fn beam_search_fused(
    logits: &Tensor,
    lm: &CharLm,
    weights: &DecodeWeights,
    vocab: &Vocabulary,
) -> Result<Vec<Hypothesis>> {
    assert!(weights.beam >= 1, "beam width must be at least 1");
    let (t_len, v) = (logits.shape()[0], logits.shape()[1]);
    // log-softmax rows
    let mut lp = vec![0.0f64; t_len * v];
    for t in 0..t_len {
        let row = &logits.data()[t * v..(t + 1) * v];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for j in 0..v {
            lp[t * v + j] = row[j] - lse;
        }
    }

    let mut beams = vec![Prefix {
        ids: Vec::new(),
        pb: 0.0,
        pnb: f64::NEG_INFINITY,
        lm: 0.0,
    }];
    for t in 0..t_len {
        let mut next: HashMap<Vec<usize>, Prefix> = HashMap::new();
        for p in &beams {
            let chars: Vec<char> = p.ids.iter().map(|&id| vocab.char_of(id).unwrap()).collect();
            // blank keeps the prefix
            {
                let entry = next.entry(p.ids.clone()).or_insert_with(|| Prefix {
                    ids: p.ids.clone(),
                    pb: f64::NEG_INFINITY,
                    pnb: f64::NEG_INFINITY,
                    lm: p.lm,
                });
                entry.pb = logaddexp(entry.pb, p.total() + lp[t * v + BLANK]);
            }
            for s in 1..v {
                let ls = lp[t * v + s];
                if Some(&s) == p.ids.last() {
                    // same symbol again without a blank: merges into the prefix
                    let entry = next.entry(p.ids.clone()).or_insert_with(|| Prefix {
                        ids: p.ids.clone(),
                        pb: f64::NEG_INFINITY,
                        pnb: f64::NEG_INFINITY,
                        lm: p.lm,
                    });
                    entry.pnb = logaddexp(entry.pnb, p.pnb + ls);
                    // extension across a blank boundary
                    let mut ext = p.ids.clone();
                    ext.push(s);
                    let lm_inc = lm.logp_next(&chars, vocab.char_of(s).unwrap())?;
                    let e = next.entry(ext.clone()).or_insert_with(|| Prefix {
                        ids: ext,
                        pb: f64::NEG_INFINITY,
                        pnb: f64::NEG_INFINITY,
                        lm: p.lm + lm_inc,
                    });
                    e.pnb = logaddexp(e.pnb, p.pb + ls);
                } else {
                    let mut ext = p.ids.clone();
                    ext.push(s);
                    let lm_inc = lm.logp_next(&chars, vocab.char_of(s).unwrap())?;
                    let e = next.entry(ext.clone()).or_insert_with(|| Prefix {
                        ids: ext,
                        pb: f64::NEG_INFINITY,
                        pnb: f64::NEG_INFINITY,
                        lm: p.lm + lm_inc,
                    });
                    e.pnb = logaddexp(e.pnb, p.total() + ls);
                }
            }
        }
        let mut pruned: Vec<Prefix> = next.into_values().collect();
        // prune by the fused score; ties broken lexicographically for
        // deterministic output
        pruned.sort_by(|a, b| {
            let sa = a.total() + weights.lm_weight * a.lm + weights.insertion_bonus * a.ids.len() as f64;
            let sb = b.total() + weights.lm_weight * b.lm + weights.insertion_bonus * b.ids.len() as f64;
            sb.partial_cmp(&sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.ids.cmp(&b.ids))
        });
        pruned.truncate(weights.beam);
        beams = pruned;
    }

    // final ranking: exact composite score per survivor
    let mut hyps = Vec::with_capacity(beams.len());
    for p in &beams {
        let text = vocab.decode(&p.ids);
        let log_p_ctc = ctc_log_prob(logits, &p.ids)?
            .map(|x| x as Real)
            .unwrap_or(f64::NEG_INFINITY);
        let score = log_p_ctc
            + weights.lm_weight * lm.logp_sequence(&text)?
            + weights.insertion_bonus * p.ids.len() as f64;
        hyps.push(Hypothesis {
            ids: p.ids.clone(),
            text,
            score,
            log_p_ctc,
        });
    }
    hyps.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.ids.cmp(&b.ids))
    });
    Ok(hyps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr::ngram::train_char_ngram;

    fn vocab2() -> Vocabulary {
        Vocabulary::new(vec!['a', 'b']).unwrap()
    }

    fn flat_lm(vocab: &Vocabulary) -> CharLm {
        train_char_ngram(&[], 2, vocab).unwrap()
    }

    /// All label sequences up to the frame count, scored by exact CTC total
    /// probability.
    fn exhaustive_best(logits: &Tensor, vocab: &Vocabulary) -> (Vec<usize>, f64) {
        let v = vocab.size();
        let t = logits.shape()[0];
        let mut best: (Vec<usize>, f64) = (vec![], f64::NEG_INFINITY);
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(seq) = stack.pop() {
            if let Some(lp) = ctc_log_prob(logits, &seq).unwrap() {
                if lp > best.1 || (lp == best.1 && seq < best.0) {
                    best = (seq.clone(), lp);
                }
            }
            if seq.len() < t {
                for s in 1..v {
                    let mut nxt = seq.clone();
                    nxt.push(s);
                    stack.push(nxt);
                }
            }
        }
        best
    }

    fn random_logits(t: usize, v: usize, seed: u64) -> Tensor {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        Tensor::new(vec![t, v], (0..t * v).map(|_| next() * 2.5).collect()).unwrap()
    }

    #[test]
    fn exhaustive_beam_matches_brute_force() {
        let vocab = vocab2();
        let lm = flat_lm(&vocab);
        let weights = DecodeWeights {
            lm_weight: 0.0,
            insertion_bonus: 0.0,
            beam: 10_000,
        };
        for seed in 0..8 {
            for t in 1..=4 {
                let logits = random_logits(t, 3, 100 + seed * 17 + t as u64);
                let hyps = beam_search_fused(&logits, &lm, &weights, &vocab).unwrap();
                let (want_ids, want_lp) = exhaustive_best(&logits, &vocab);
                assert_eq!(hyps[0].ids, want_ids, "T={t} seed={seed}");
                assert!((hyps[0].log_p_ctc - want_lp).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn insertion_bonus_prefers_longer_hypotheses() {
        let vocab = vocab2();
        let lm = flat_lm(&vocab);
        let logits = random_logits(4, 3, 42);
        let neutral = beam_search_fused(
            &logits,
            &lm,
            &DecodeWeights {
                lm_weight: 0.0,
                insertion_bonus: 0.0,
                beam: 64,
            },
            &vocab,
        )
        .unwrap();
        let wordy = beam_search_fused(
            &logits,
            &lm,
            &DecodeWeights {
                lm_weight: 0.0,
                insertion_bonus: 50.0,
                beam: 64,
            },
            &vocab,
        )
        .unwrap();
        assert!(wordy[0].ids.len() >= neutral[0].ids.len());
        assert_eq!(wordy[0].ids.len(), 4, "huge bonus drives to max feasible length");
    }

    #[test]
    fn reported_score_recomputes_independently() {
        let vocab = vocab2();
        let lm = train_char_ngram(&["abab".into(), "aab".into()], 3, &vocab).unwrap();
        let weights = DecodeWeights {
            lm_weight: 1.7,
            insertion_bonus: -0.4,
            beam: 8,
        };
        let logits = random_logits(5, 3, 7);
        let hyps = beam_search_fused(&logits, &lm, &weights, &vocab).unwrap();
        for h in &hyps {
            let mut tape = crate::Tape::new();
            let lv = tape.constant(logits.clone());
            let ctc = crate::asr::ctc::ctc_loss(&mut tape, lv, &h.ids).unwrap();
            let recomputed = -ctc.value
                + weights.lm_weight * lm.logp_sequence(&h.text).unwrap()
                + weights.insertion_bonus * h.ids.len() as f64;
            assert!(
                (h.score - recomputed).abs() < 1e-9,
                "{} vs {}",
                h.score,
                recomputed
            );
        }
    }
}
