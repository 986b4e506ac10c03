//! Bucketed key-query offset mapping for the relative position bias.
//!
//! Buckets are exact for small offsets and logarithmic up to a cap; every
//! offset at or beyond the cap shares the last bucket of its sign half.

/// Map a signed offset to a bucket index in `[0, n_buckets)`.
///
/// With `h = n_buckets / 2` and `e = h / 2`: positive offsets occupy the
/// upper half, absolute offsets below `e` map exactly, larger ones
/// logarithmically until `max_offset`.
pub fn relative_bucket(offset: i64, n_buckets: usize, max_offset: usize) -> usize {
    debug_assert!(n_buckets % 2 == 0 && n_buckets >= 4);
    debug_assert!(max_offset > 0);
    let h = n_buckets / 2;
    let e = h / 2;
    let half = if offset > 0 { h } else { 0 };
    let a = offset.unsigned_abs() as usize;
    if a < e {
        return half + a;
    }
    let log_ratio = ((a as f64) / (e as f64)).ln() / ((max_offset as f64) / (e as f64)).ln();
    let g = e + (log_ratio * e as f64).floor() as usize;
    half + g.min(h - 1)
}

/// Bucket indices for all (query i, key j) pairs of a length-`t` sequence,
/// using offset `i - j`, flattened row-major.
pub fn bucket_matrix(t: usize, n_buckets: usize, max_offset: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            out.push(relative_bucket(i as i64 - j as i64, n_buckets, max_offset));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_offset_is_bucket_zero() {
        assert_eq!(relative_bucket(0, 320, 800), 0);
    }

    #[test]
    fn far_offsets_share_the_last_bucket() {
        assert_eq!(relative_bucket(900, 320, 800), 319);
        assert_eq!(relative_bucket(2000, 320, 800), 319);
        assert_eq!(relative_bucket(800, 320, 800), 319);
        assert_eq!(relative_bucket(-900, 320, 800), 159);
        assert_eq!(relative_bucket(-2000, 320, 800), 159);
    }

    #[test]
    fn small_negative_offsets_map_exactly() {
        assert_eq!(relative_bucket(-5, 320, 800), 5);
        assert_eq!(relative_bucket(-79, 320, 800), 79);
        // first logarithmic bucket
        assert_eq!(relative_bucket(-80, 320, 800), 80);
    }

    #[test]
    fn sign_halves_mirror() {
        for a in 1..1200i64 {
            let neg = relative_bucket(-a, 320, 800);
            let pos = relative_bucket(a, 320, 800);
            assert_eq!(pos, neg + 160, "offset {a}");
        }
    }

    #[test]
    fn monotone_within_half() {
        let mut prev = 0;
        for a in 1..2000i64 {
            let b = relative_bucket(a, 320, 800);
            assert!(b >= prev, "offset {a}: bucket {b} < {prev}");
            prev = b;
        }
    }
}
