//! Convolutional feature encoder: seven temporal-convolution blocks, each
//! followed by layer normalization and GELU, mapping 16 kHz waveform to
//! 20 ms-strided frames.

use crate::errors::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{Binding, ParamStore};

/// (kernel width, stride) per block; overall stride 320 samples = 20 ms.
pub const CONV_LAYERS: [(usize, usize); 7] =
    [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)];

/// Output stride in samples.
pub const FRAME_STRIDE_SAMPLES: usize = 320;

/// Smallest input that yields one output frame.
pub const MIN_SAMPLES: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FrontendConfig {
    /// Channel width of every block (512 at paper scale, 64 at desk scale).
    pub channels: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig { channels: 64 }
    }
}

/// Closed-form output length: `floor((l - k) / s) + 1` per block.
pub fn expected_output_length(n_samples: usize) -> usize {
    let mut len = n_samples;
    for (k, s) in CONV_LAYERS {
        if len < k {
            return 0;
        }
        len = (len - k) / s + 1;
    }
    len
}

/// Register the encoder parameters under `frontend.*`.
pub fn register_params<F: Scalar>(store: &mut ParamStore<F>, cfg: &FrontendConfig) {
    let c = cfg.channels;
    for (i, (k, _)) in CONV_LAYERS.iter().enumerate() {
        let c_in = if i == 0 { 1 } else { c };
        let fan_in = c_in * k;
        let bound = (6.0 / (fan_in + c * k) as f64).sqrt();
        store.add_uniform(&format!("frontend.conv{i}.w"), vec![c, c_in, *k], bound);
        store.add_zeros(&format!("frontend.conv{i}.b"), vec![c]);
        store.add_full(&format!("frontend.conv{i}.ln_g"), vec![c], 1.0);
        store.add_zeros(&format!("frontend.conv{i}.ln_b"), vec![c]);
    }
}

/// Names of all frontend parameters (used to freeze them during fine-tuning).
pub fn is_frontend_param(name: &str) -> bool {
    name.starts_with("frontend.")
}

/// Run the encoder over raw samples; returns a `[t, channels]` node.
pub fn forward<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    samples: &[F],
) -> Result<Var> {
    if expected_output_length(samples.len()) == 0 {
        return Err(Error::WaveformTooShort {
            needed: MIN_SAMPLES,
            got: samples.len(),
        });
    }
    let n = samples.len();
    let mut x = tape.constant(Tensor::new(vec![n, 1], samples.to_vec())?);
    for (i, (_, s)) in CONV_LAYERS.iter().enumerate() {
        let w = binding.var(&format!("frontend.conv{i}.w"));
        let b = binding.var(&format!("frontend.conv{i}.b"));
        let g = binding.var(&format!("frontend.conv{i}.ln_g"));
        let beta = binding.var(&format!("frontend.conv{i}.ln_b"));
        let conv = tape.conv1d(x, w, Some(b), *s)?;
        let normed = tape.layer_norm(conv);
        let scaled = tape.mul_row(normed, g)?;
        let shifted = tape.add_row(scaled, beta)?;
        x = tape.gelu(shifted);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_setup(channels: usize) -> (ParamStore<f64>, FrontendConfig) {
        let cfg = FrontendConfig { channels };
        let mut store = ParamStore::new(42);
        register_params(&mut store, &cfg);
        (store, cfg)
    }

    #[test]
    fn length_recurrence_reference_points() {
        assert_eq!(expected_output_length(16_000), 49);
        assert_eq!(expected_output_length(400), 1);
        assert_eq!(expected_output_length(32_000), 99);
        assert_eq!(expected_output_length(399), 0);
    }

    #[test]
    fn forward_length_matches_recurrence() {
        let (store, _) = toy_setup(8);
        for n in [400usize, 801, 1234, 4000] {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape, &|_| true);
            let samples = vec![0.01f64; n];
            let out = forward(&mut tape, &binding, &samples).unwrap();
            assert_eq!(tape.value(out).shape()[0], expected_output_length(n));
        }
    }

    #[test]
    fn too_short_input_errors() {
        let (store, _) = toy_setup(4);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, &|_| true);
        let err = forward(&mut tape, &binding, &vec![0.0f64; 300]).unwrap_err();
        assert!(matches!(err, Error::WaveformTooShort { .. }));
    }

    #[test]
    fn zero_input_zero_preactivation_first_block() {
        let (store, _) = toy_setup(4);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, &|_| true);
        let x = tape.constant(Tensor::new(vec![500, 1], vec![0.0f64; 500]).unwrap());
        let w = binding.var("frontend.conv0.w");
        let b = binding.var("frontend.conv0.b");
        let conv = tape.conv1d(x, w, Some(b), 5).unwrap();
        assert!(tape.value(conv).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shift_by_stride_shifts_output_by_one_frame() {
        let (store, _) = toy_setup(6);
        let n = 2000usize;
        let wave: Vec<f64> = (0..n + FRAME_STRIDE_SAMPLES)
            .map(|i| (i as f64 * 0.013).sin() * 0.4)
            .collect();
        let run = |samples: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape, &|_| true);
            let out = forward(&mut tape, &binding, samples).unwrap();
            tape.value(out).data().to_vec()
        };
        let a = run(&wave[..n]);
        let b = run(&wave[FRAME_STRIDE_SAMPLES..]);
        let t = expected_output_length(n);
        let d = a.len() / t;
        // interior frames: frame i of the shifted input equals frame i+1
        for i in 0..t - 1 {
            for j in 0..d {
                let (x, y) = (b[i * d + j], a[(i + 1) * d + j]);
                assert!(
                    (x - y).abs() < 1e-9,
                    "frame {i} dim {j}: {x} vs {y}"
                );
            }
        }
    }
}
