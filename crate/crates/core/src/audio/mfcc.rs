//! 39-dimensional MFCC features: 13 cepstra (c0 in place of log-energy)
//! plus first and second temporal differences. 25 ms Hamming window,
//! 10 ms hop, 26 mel filters, pre-emphasis 0.97.

use crate::audio::{FeatureSequence, FeatureSource, Waveform, SAMPLE_RATE};
use crate::errors::{Error, Result};
use crate::tensor::Tensor;

pub const WINDOW: usize = SAMPLE_RATE * 25 / 1000; // 400
pub const HOP: usize = SAMPLE_RATE * 10 / 1000; // 160
pub const N_FFT: usize = 512;
pub const N_MEL: usize = 26;
pub const N_CEPSTRA: usize = 13;
pub const MFCC_DIM: usize = 3 * N_CEPSTRA;
const PRE_EMPHASIS: f64 = 0.97;
const LOG_FLOOR: f64 = 1e-10;

/// Number of frames produced for `n` samples.
pub fn n_frames(n: usize) -> usize {
    if n < WINDOW {
        0
    } else {
        (n - WINDOW) / HOP + 1
    }
}

/// Extract MFCC+Δ+ΔΔ features at a 10 ms stride.
pub fn compute_mfcc(w: &Waveform) -> Result<FeatureSequence> {
    let n = w.len();
    if n < WINDOW {
        return Err(Error::WaveformTooShort {
            needed: WINDOW,
            got: n,
        });
    }
    let frames = n_frames(n);

    // pre-emphasis with the first sample scaled as if preceded by itself
    let x = w.samples();
    let mut emph = vec![0.0f64; n];
    emph[0] = x[0] * (1.0 - PRE_EMPHASIS);
    for t in 1..n {
        emph[t] = x[t] - PRE_EMPHASIS * x[t - 1];
    }

    let window = hamming(WINDOW);
    let mel_bank = mel_filterbank();
    let mut cepstra = vec![0.0f64; frames * N_CEPSTRA];
    let mut re = vec![0.0f64; N_FFT];
    let mut im = vec![0.0f64; N_FFT];
    for f in 0..frames {
        let start = f * HOP;
        for i in 0..N_FFT {
            re[i] = if i < WINDOW {
                emph[start + i] * window[i]
            } else {
                0.0
            };
            im[i] = 0.0;
        }
        fft_in_place(&mut re, &mut im);
        let mut power = [0.0f64; N_FFT / 2 + 1];
        for (k, p) in power.iter_mut().enumerate() {
            *p = re[k] * re[k] + im[k] * im[k];
        }
        let mut log_mel = [0.0f64; N_MEL];
        for (m, row) in mel_bank.iter().enumerate() {
            let mut e = 0.0;
            for &(k, wgt) in row {
                e += wgt * power[k];
            }
            log_mel[m] = e.max(LOG_FLOOR).ln();
        }
        for c in 0..N_CEPSTRA {
            cepstra[f * N_CEPSTRA + c] = dct2_coeff(&log_mel, c);
        }
    }

    let deltas = temporal_delta(&cepstra, frames, N_CEPSTRA);
    let ddeltas = temporal_delta(&deltas, frames, N_CEPSTRA);
    let mut out = vec![0.0f64; frames * MFCC_DIM];
    for f in 0..frames {
        for c in 0..N_CEPSTRA {
            out[f * MFCC_DIM + c] = cepstra[f * N_CEPSTRA + c];
            out[f * MFCC_DIM + N_CEPSTRA + c] = deltas[f * N_CEPSTRA + c];
            out[f * MFCC_DIM + 2 * N_CEPSTRA + c] = ddeltas[f * N_CEPSTRA + c];
        }
    }
    FeatureSequence::new(
        Tensor::new(vec![frames, MFCC_DIM], out)?,
        10.0,
        FeatureSource::Mfcc,
    )
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Sparse triangular filters as (fft_bin, weight) lists.
fn mel_filterbank() -> Vec<Vec<(usize, f64)>> {
    let f_max = SAMPLE_RATE as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    let points: Vec<f64> = (0..N_MEL + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (N_MEL + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
    (0..N_MEL)
        .map(|m| {
            let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
            let mut row = Vec::new();
            for k in 0..=N_FFT / 2 {
                let f = k as f64 * bin_hz;
                let wgt = if f > lo && f < mid {
                    (f - lo) / (mid - lo)
                } else if f >= mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if wgt > 0.0 {
                    row.push((k, wgt));
                }
            }
            row
        })
        .collect()
}

/// Orthonormal DCT-II coefficient `c` of `input`.
fn dct2_coeff(input: &[f64], c: usize) -> f64 {
    let m = input.len() as f64;
    let scale = if c == 0 {
        (1.0 / m).sqrt()
    } else {
        (2.0 / m).sqrt()
    };
    let mut acc = 0.0;
    for (j, &x) in input.iter().enumerate() {
        acc += x * (std::f64::consts::PI * c as f64 * (j as f64 + 0.5) / m).cos();
    }
    scale * acc
}

/// Regression deltas with a ±2 window and edge replication.
fn temporal_delta(x: &[f64], frames: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; frames * dim];
    let denom = 10.0; // 2 * (1^2 + 2^2)
    let at = |f: isize, c: usize| -> f64 {
        let f = f.clamp(0, frames as isize - 1) as usize;
        x[f * dim + c]
    };
    for f in 0..frames {
        for c in 0..dim {
            let fi = f as isize;
            out[f * dim + c] =
                ((at(fi + 1, c) - at(fi - 1, c)) + 2.0 * (at(fi + 2, c) - at(fi - 2, c))) / denom;
        }
    }
    out
}

/// Iterative radix-2 FFT (length must be a power of two).
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    assert!(n.is_power_of_two() && n == im.len());
    // bit reversal
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cr - im[i + k + len / 2] * ci,
                    re[i + k + len / 2] * ci + im[i + k + len / 2] * cr,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::FeatureSource;

    fn tone(freq: f64, n: usize, amp: f64) -> Waveform {
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Waveform::new(samples).unwrap()
    }

    #[test]
    fn fft_matches_naive_dft() {
        let n = 64;
        let mut re: Vec<f64> = (0..n).map(|i| ((i * 7 % 13) as f64) / 13.0 - 0.4).collect();
        let mut im = vec![0.0f64; n];
        let x = re.clone();
        fft_in_place(&mut re, &mut im);
        for k in 0..n {
            let (mut rr, mut ii) = (0.0, 0.0);
            for (i, &xi) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                rr += xi * ang.cos();
                ii += xi * ang.sin();
            }
            assert!((rr - re[k]).abs() < 1e-9 && (ii - im[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn one_second_yields_98_frames() {
        let w = tone(440.0, SAMPLE_RATE, 0.5);
        let fs = compute_mfcc(&w).unwrap();
        assert_eq!(fs.n_frames(), 98);
        assert_eq!(fs.dim(), MFCC_DIM);
        assert_eq!(fs.frame_stride_ms(), 10.0);
        assert_eq!(fs.source(), FeatureSource::Mfcc);
    }

    #[test]
    fn too_short_waveform_errors() {
        let w = Waveform::new(vec![0.0; WINDOW - 1]).unwrap();
        assert!(matches!(
            compute_mfcc(&w),
            Err(Error::WaveformTooShort { .. })
        ));
    }

    #[test]
    fn silence_rows_are_near_constant() {
        // zeros plus tiny dither; rows should barely vary over time
        let mut samples = vec![0.0f64; SAMPLE_RATE];
        let mut state = 0x12345678u64;
        for s in samples.iter_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *s = ((state >> 33) as f64 / (1u64 << 31) as f64 - 1.0) * 1e-6;
        }
        let fs = compute_mfcc(&Waveform::new(samples).unwrap()).unwrap();
        let frames = fs.n_frames();
        // energy-channel scale: magnitude of mean c0
        let c0_mean: f64 =
            (0..frames).map(|t| fs.row(t)[0]).sum::<f64>() / frames as f64;
        for c in 0..N_CEPSTRA {
            let mean: f64 = (0..frames).map(|t| fs.row(t)[c]).sum::<f64>() / frames as f64;
            let var: f64 = (0..frames)
                .map(|t| (fs.row(t)[c] - mean).powi(2))
                .sum::<f64>()
                / frames as f64;
            assert!(
                var < 1e-3 * c0_mean.abs(),
                "coefficient {c}: variance {var} vs energy scale {c0_mean}"
            );
        }
    }

    #[test]
    fn distinct_tones_distinct_features() {
        let a = compute_mfcc(&tone(440.0, SAMPLE_RATE, 0.5)).unwrap();
        let b = compute_mfcc(&tone(880.0, SAMPLE_RATE, 0.5)).unwrap();
        let mean = |fs: &FeatureSequence| -> Vec<f64> {
            let mut m = vec![0.0; fs.dim()];
            for t in 0..fs.n_frames() {
                for (j, &v) in fs.row(t).iter().enumerate() {
                    m[j] += v;
                }
            }
            m.iter_mut().for_each(|v| *v /= fs.n_frames() as f64);
            m
        };
        let (ma, mb) = (mean(&a), mean(&b));
        let dist: f64 = ma
            .iter()
            .zip(&mb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0, "identical mean MFCC for distinct tones");
    }

    #[test]
    fn time_reversal_of_stationary_signal_keeps_frame_mean() {
        // A stationary tone whose sample sequence is reversal-symmetric about
        // its centre: the reversed waveform is sample-identical, so the frame
        // mean must match to rounding error.
        let n = WINDOW + 97 * HOP; // aligned framing
        let freq = 330.0;
        let mid = (n - 1) as f64 / 2.0;
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                0.4 * (2.0 * std::f64::consts::PI * freq * (i as f64 - mid)
                    / SAMPLE_RATE as f64)
                    .cos()
            })
            .collect();
        let mut rev = samples.clone();
        rev.reverse();
        let fwd = compute_mfcc(&Waveform::new(samples).unwrap()).unwrap();
        let bwd = compute_mfcc(&Waveform::new(rev).unwrap()).unwrap();
        assert_eq!(fwd.n_frames(), bwd.n_frames());
        for c in 0..MFCC_DIM {
            let mf: f64 = (0..fwd.n_frames()).map(|t| fwd.row(t)[c]).sum::<f64>()
                / fwd.n_frames() as f64;
            let mb: f64 = (0..bwd.n_frames()).map(|t| bwd.row(t)[c]).sum::<f64>()
                / bwd.n_frames() as f64;
            assert!((mf - mb).abs() < 1e-6, "dim {c}: {mf} vs {mb}");
        }
    }
}
