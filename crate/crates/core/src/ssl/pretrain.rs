//! Masked-prediction pre-training loop: sample a span mask, corrupt the conv
//! frames, run the transformer, apply the supervised-layer loss and update
//! with AdamW under a linear warmup/decay schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::synth::SyntheticUtterance;
use crate::errors::{Error, Result};
use crate::model::ModelConfig;
use crate::ssl::heads::{HeadConfig, SupervisedLayers};
use crate::ssl::loss::{ils_loss, normalized_loss};
use crate::ssl::mask::sample_mask;
use crate::train::{AdamW, ParamStore};
use crate::{Real, Tape};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub peak_lr: f64,
    /// Fraction of total steps spent ramping up linearly.
    pub warmup_fraction: f64,
    /// Probability that a frame starts a masked span.
    pub mask_prob: f64,
    /// Masked span length in frames.
    pub span_len: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 800,
            peak_lr: 3e-3,
            warmup_fraction: 0.08,
            mask_prob: 0.08,
            span_len: 10,
            seed: 1,
        }
    }
}

/// Linear ramp to `peak` over the warmup fraction, then linear decay to 0
/// at `total`. `step` is 1-based.
pub fn warmup_decay_lr(step: usize, total: usize, warmup_fraction: f64, peak: f64) -> f64 {
    assert!(step >= 1 && step <= total);
    let warmup = ((total as f64 * warmup_fraction).round() as usize).clamp(1, total);
    if step <= warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

/// One logged training step.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub raw_loss: f64,
    pub normalized_loss: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.8e}\t{:.12e}\t{:.12e}",
            self.step, self.lr, self.raw_loss, self.normalized_loss
        )
    }
}

fn mix(seed: u64, tag: u64, t: u64) -> u64 {
    // splitmix64 over a combined word: decouples the per-step streams
    let mut z = seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(t);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Run pre-training steps `start_step+1 ..= end_step` with the schedule laid
/// out over `cfg.steps` total (pass `0, cfg.steps` to train from scratch).
/// Per-step RNG streams are derived statelessly, so abort-and-resume replays
/// the uninterrupted run exactly.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    store: &mut ParamStore<Real>,
    opt: &mut AdamW<Real>,
    model: &ModelConfig,
    heads: &HeadConfig,
    layers: &SupervisedLayers,
    corpus: &[SyntheticUtterance],
    targets: &[Vec<usize>],
    cfg: &PretrainConfig,
    start_step: usize,
    end_step: usize,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("pre-training corpus".into()));
    }
    if corpus.len() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "corpus vs targets".into(),
            lhs: corpus.len(),
            rhs: targets.len(),
        });
    }
    assert!(end_step <= cfg.steps, "end_step beyond the schedule");
    let n = corpus.len();
    let mut epoch_order: Vec<usize> = (0..n).collect();
    let mut cached_epoch = usize::MAX;
    for step in start_step + 1..=end_step {
        let epoch = (step - 1) / n;
        if epoch != cached_epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xE70C, epoch as u64));
            epoch_order = (0..n).collect();
            epoch_order.shuffle(&mut rng);
            cached_epoch = epoch;
        }
        let utt_idx = epoch_order[(step - 1) % n];
        let utt = &corpus[utt_idx];
        let target = &targets[utt_idx];

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, &|_| false);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x3A5F, step as u64));
        let mut drop_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xD909, step as u64));
        let t_frames = crate::audio::frontend::expected_output_length(utt.waveform.len());
        let spec = sample_mask(t_frames, cfg.mask_prob, cfg.span_len, &mut mask_rng);
        let states = model.encode(
            &mut tape,
            &binding,
            utt.waveform.samples(),
            Some(&spec),
            Some(&mut drop_rng),
        )?;
        let loss = ils_loss(&mut tape, &binding, heads, layers, &states, &spec, target)?;
        let raw = tape.scalar_value(loss);
        let lr = warmup_decay_lr(step, cfg.steps, cfg.warmup_fraction, cfg.peak_lr);
        if !raw.is_finite() {
            return Err(Error::NonFiniteLoss { step, lr });
        }
        if !spec.is_empty() {
            tape.backward(loss)?;
            let grads = store.collect_grads(&tape, &binding);
            opt.step(store, &grads, lr);
        }
        let record = StepRecord {
            step,
            lr,
            raw_loss: raw,
            normalized_loss: normalized_loss(raw, layers, &spec),
        };
        on_step(&record);
    }
    if !store.all_finite() {
        return Err(Error::NonFinite {
            context: "parameters after pre-training".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let total = 200;
        let peak = 0.1;
        let warmup = (total as f64 * 0.08).round() as usize; // 16
        assert_eq!(warmup_decay_lr(warmup, total, 0.08, peak), peak);
        assert!(warmup_decay_lr(1, total, 0.08, peak) > 0.0);
        assert!(warmup_decay_lr(1, total, 0.08, peak) < peak / 10.0);
        assert_eq!(warmup_decay_lr(total, total, 0.08, peak), 0.0);
        assert!(warmup_decay_lr(total, total, 0.08, peak) <= peak / total as f64);
        // monotone up then down
        for s in 2..=warmup {
            assert!(
                warmup_decay_lr(s, total, 0.08, peak) > warmup_decay_lr(s - 1, total, 0.08, peak)
            );
        }
        for s in warmup + 1..=total {
            assert!(
                warmup_decay_lr(s, total, 0.08, peak) < warmup_decay_lr(s - 1, total, 0.08, peak)
            );
        }
    }

    #[test]
    fn zero_steps_leaves_parameters_at_init() {
        use crate::ssl::heads::register_heads;
        use crate::train::{AdamW, AdamWConfig};

        let model = tiny_model();
        let heads = HeadConfig {
            n_classes: 4,
            embed_dim: 4,
            ..Default::default()
        };
        let layers = SupervisedLayers::top_only(model.encoder.n_layers);
        let mut store = ParamStore::new(3);
        model.register_base(&mut store);
        model.register_mask_embedding(&mut store);
        register_heads(&mut store, &heads, &layers, model.encoder.model_dim).unwrap();
        let snapshot: Vec<Vec<f64>> = store.iter().map(|(_, t)| t.data().to_vec()).collect();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let corpus = toy_corpus();
        let targets = toy_targets(&corpus, 4);
        let cfg = PretrainConfig {
            steps: 0,
            ..Default::default()
        };
        pretrain(
            &mut store, &mut opt, &model, &heads, &layers, &corpus, &targets, &cfg, 0, 0, |_| {},
        )
        .unwrap();
        let after: Vec<Vec<f64>> = store.iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(snapshot, after);
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            frontend: crate::audio::frontend::FrontendConfig { channels: 8 },
            encoder: crate::encoder::EncoderConfig {
                n_layers: 2,
                model_dim: 8,
                inner_dim: 16,
                n_heads: 2,
                conv_pos_kernel: 4,
                conv_pos_groups: 2,
                n_rel_buckets: 16,
                max_rel_offset: 12,
                ..Default::default()
            },
        }
    }

    fn toy_corpus() -> Vec<SyntheticUtterance> {
        let cfg = crate::audio::synth::SynthConfig::new(4, 3, 17, (300, 500));
        crate::audio::synth::generate_corpus(&cfg).unwrap()
    }

    fn toy_targets(corpus: &[SyntheticUtterance], c: usize) -> Vec<Vec<usize>> {
        corpus
            .iter()
            .map(|u| {
                let t = crate::audio::frontend::expected_output_length(u.waveform.len());
                (0..t).map(|i| i % c).collect()
            })
            .collect()
    }

    #[test]
    fn loss_falls_and_interrupted_run_replays_exactly() {
        use crate::ssl::heads::register_heads;
        use crate::train::{AdamW, AdamWConfig};

        let model = tiny_model();
        let heads = HeadConfig {
            n_classes: 4,
            embed_dim: 4,
            ..Default::default()
        };
        let layers = SupervisedLayers::new(vec![1, 2], 2).unwrap();
        let corpus = toy_corpus();
        let targets = toy_targets(&corpus, 4);
        let cfg = PretrainConfig {
            steps: 30,
            peak_lr: 2e-3,
            seed: 5,
            ..Default::default()
        };

        let build = || {
            let mut store = ParamStore::new(3);
            model.register_base(&mut store);
            model.register_mask_embedding(&mut store);
            register_heads(&mut store, &heads, &layers, model.encoder.model_dim).unwrap();
            let opt = AdamW::new(AdamWConfig::default(), &store);
            (store, opt)
        };

        // uninterrupted run
        let (mut store_a, mut opt_a) = build();
        let mut losses_a = Vec::new();
        pretrain(
            &mut store_a, &mut opt_a, &model, &heads, &layers, &corpus, &targets, &cfg, 0, 30,
            |r| losses_a.push(r.raw_loss),
        )
        .unwrap();
        let first = losses_a.iter().take(5).sum::<f64>() / 5.0;
        let last = losses_a.iter().rev().take(5).sum::<f64>() / 5.0;
        assert!(last < first, "loss should fall: {first} -> {last}");

        // same run interrupted at step 13 and resumed
        let (mut store_b, mut opt_b) = build();
        let mut losses_b = Vec::new();
        pretrain(
            &mut store_b, &mut opt_b, &model, &heads, &layers, &corpus, &targets, &cfg, 0, 13,
            |r| losses_b.push(r.raw_loss),
        )
        .unwrap();
        pretrain(
            &mut store_b, &mut opt_b, &model, &heads, &layers, &corpus, &targets, &cfg, 13, 30,
            |r| losses_b.push(r.raw_loss),
        )
        .unwrap();
        assert_eq!(losses_a, losses_b);
        for ((na, ta), (nb, tb)) in store_a.iter().zip(store_b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "parameter {na} diverged after resume");
        }
    }
}
