//! Span masking over encoder frames.

use rand::Rng;

use crate::errors::{Error, Result};

/// Set of masked frame indices plus the span starts that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    masked: Vec<usize>,
    span_starts: Vec<usize>,
}

impl MaskSpec {
    /// Union of `[s, min(s + span_len, t))` over the given starts.
    pub fn from_starts(span_starts: Vec<usize>, span_len: usize, t: usize) -> Result<Self> {
        if let Some(&bad) = span_starts.iter().find(|&&s| s >= t) {
            return Err(Error::MaskOutOfRange { index: bad, len: t });
        }
        let mut covered = vec![false; t];
        for &s in &span_starts {
            for c in covered.iter_mut().skip(s).take(span_len) {
                *c = true;
            }
        }
        let masked = covered
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        Ok(MaskSpec {
            masked,
            span_starts,
        })
    }

    pub fn empty() -> Self {
        MaskSpec {
            masked: Vec::new(),
            span_starts: Vec::new(),
        }
    }

    /// Sorted masked indices.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn span_starts(&self) -> &[usize] {
        &self.span_starts
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

/// Sample a mask: every position is independently a span start with
/// probability `p`; spans may overlap and are truncated at `t`.
pub fn sample_mask<R: Rng>(t: usize, p: f64, span_len: usize, rng: &mut R) -> MaskSpec {
    assert!((0.0..=1.0).contains(&p), "mask probability out of range");
    assert!(span_len >= 1, "span length must be at least 1");
    let starts: Vec<usize> = (0..t).filter(|_| rng.gen::<f64>() < p).collect();
    MaskSpec::from_starts(starts, span_len, t).expect("starts are in range by construction")
}

/// Expected masked fraction for interior frames: a frame stays unmasked iff
/// none of the `span_len` positions covering it fired.
pub fn expected_masked_fraction(p: f64, span_len: usize) -> f64 {
    1.0 - (1.0 - p).powi(span_len as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_probability_masks_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = sample_mask(50, 0.0, 10, &mut rng);
        assert!(spec.is_empty());
    }

    #[test]
    fn forced_start_covers_full_span() {
        let spec = MaskSpec::from_starts(vec![0], 10, 10).unwrap();
        assert_eq!(spec.masked(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn spans_truncate_at_the_end() {
        let spec = MaskSpec::from_starts(vec![8], 10, 10).unwrap();
        assert_eq!(spec.masked(), &[8, 9]);
    }

    #[test]
    fn overlapping_spans_union() {
        let spec = MaskSpec::from_starts(vec![2, 4], 4, 20).unwrap();
        assert_eq!(spec.masked(), &[2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn out_of_range_start_rejected() {
        assert!(matches!(
            MaskSpec::from_starts(vec![10], 3, 10),
            Err(Error::MaskOutOfRange { .. })
        ));
    }

    #[test]
    fn empirical_fraction_matches_closed_form() {
        let expect = expected_masked_fraction(0.08, 10);
        assert!((expect - 0.5656).abs() < 2e-4);
        let mut total = 0usize;
        let t = 1000;
        let seeds = 200;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            total += sample_mask(t, 0.08, 10, &mut rng).len();
        }
        let frac = total as f64 / (t * seeds as usize) as f64;
        assert!((frac - expect).abs() < 0.01, "empirical {frac} vs {expect}");
    }
}
