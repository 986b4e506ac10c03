//! CTC fine-tuning of a pre-trained checkpoint: prediction heads are gone,
//! a fresh linear output layer sits on the top transformer layer, the conv
//! encoder stays frozen and the transformer unfreezes after `freeze_steps`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asr::ctc::{ctc_loss, greedy_decode};
use crate::asr::Vocabulary;
use crate::audio::frontend::is_frontend_param;
use crate::audio::synth::SyntheticUtterance;
use crate::encoder::is_encoder_param;
use crate::errors::{Error, Result};
use crate::model::ModelConfig;
use crate::ssl::heads::SupervisedLayers;
use crate::train::{AdamW, Binding, ParamStore};
use crate::{Real, Tape, Var};

/// Whether fine-tuning applies CTC losses at the supervised intermediate
/// layers too, and with which output weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlsFtMode {
    Off,
    Shared,
    Separate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub peak_lr: f64,
    /// Steps during which the transformer stays frozen (conv is always).
    pub freeze_steps: usize,
    pub seed: u64,
    pub ils_ft: IlsFtMode,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 1500,
            peak_lr: 4e-3,
            freeze_steps: 0,
            seed: 1,
            ils_ft: IlsFtMode::Off,
        }
    }
}

/// Warmup for the first 10% of updates, constant for the next 40%, linear
/// decay to zero over the remainder. Continuous at both boundaries.
pub fn tri_stage_lr(step: usize, total: usize, peak: f64) -> f64 {
    assert!(step <= total, "step beyond schedule");
    if total == 0 {
        return 0.0;
    }
    let t = step as f64;
    let s1 = 0.1 * total as f64;
    let s2 = 0.5 * total as f64;
    if t <= s1 {
        peak * t / s1
    } else if t <= s2 {
        peak
    } else {
        peak * (total as f64 - t) / (total as f64 - s2)
    }
}

fn output_prefix(mode: IlsFtMode, layer: usize) -> String {
    match mode {
        IlsFtMode::Separate => format!("ctc.out{layer}"),
        _ => "ctc.out".to_string(),
    }
}

/// Layers that receive a CTC loss under the given mode.
fn loss_layers(mode: IlsFtMode, layers: &SupervisedLayers, n_layers: usize) -> Vec<usize> {
    match mode {
        IlsFtMode::Off => vec![n_layers],
        _ => layers.ids().to_vec(),
    }
}

/// Register the fresh output layer(s) over the vocabulary.
pub fn register_ctc_outputs<FS: crate::scalar::Scalar>(
    store: &mut ParamStore<FS>,
    model_dim: usize,
    vocab_size: usize,
    mode: IlsFtMode,
    layers: &SupervisedLayers,
    n_layers: usize,
) {
    let mut prefixes: Vec<String> = loss_layers(mode, layers, n_layers)
        .iter()
        .map(|&l| output_prefix(mode, l))
        .collect();
    prefixes.dedup();
    for p in prefixes {
        store.add_linear(&format!("{p}.w"), model_dim, vocab_size);
        store.add_zeros(&format!("{p}.b"), vec![vocab_size]);
    }
}

/// Per-frame class scores of layer `layer` under the given mode.
fn layer_logits(
    tape: &mut Tape,
    binding: &Binding,
    states: &[Var],
    layer: usize,
    mode: IlsFtMode,
) -> Result<Var> {
    let p = output_prefix(mode, layer);
    let m = tape.matmul(states[layer - 1], binding.var(&format!("{p}.w")))?;
    tape.add_row(m, binding.var(&format!("{p}.b")))
}

/// One fine-tuning step record.
#[derive(Clone, Copy, Debug)]
pub struct FtStepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub skipped_infeasible: bool,
}

impl FtStepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.8e}\t{:.12e}\t{}",
            self.step,
            self.lr,
            self.loss,
            if self.skipped_infeasible { 1 } else { 0 }
        )
    }
}

fn mix(seed: u64, tag: u64, t: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(t);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Fine-tune on labelled utterances. The store must already hold the
/// pre-trained base parameters plus freshly registered output layers.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    store: &mut ParamStore<Real>,
    opt: &mut AdamW<Real>,
    model: &ModelConfig,
    vocab: &Vocabulary,
    corpus: &[SyntheticUtterance],
    cfg: &FinetuneConfig,
    layers: &SupervisedLayers,
    mut on_step: impl FnMut(&FtStepRecord),
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("fine-tuning corpus".into()));
    }
    let targets: Vec<Vec<usize>> = corpus
        .iter()
        .map(|u| vocab.encode(&u.transcript))
        .collect::<Result<_>>()?;
    let n = corpus.len();
    let active = loss_layers(cfg.ils_ft, layers, model.encoder.n_layers);
    let mut epoch_order: Vec<usize> = (0..n).collect();
    let mut cached_epoch = usize::MAX;
    for step in 1..=cfg.steps {
        let epoch = (step - 1) / n;
        if epoch != cached_epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xF73A, epoch as u64));
            epoch_order = (0..n).collect();
            epoch_order.shuffle(&mut rng);
            cached_epoch = epoch;
        }
        let utt = &corpus[epoch_order[(step - 1) % n]];
        let target = &targets[epoch_order[(step - 1) % n]];
        let lr = tri_stage_lr(step, cfg.steps, cfg.peak_lr);

        let mut tape = Tape::new();
        let transformer_frozen = step <= cfg.freeze_steps;
        let binding = store.bind(&mut tape, &|name| {
            is_frontend_param(name) || (transformer_frozen && is_encoder_param(name))
        });
        let mut drop_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xD41, step as u64));
        let states = model.encode(
            &mut tape,
            &binding,
            utt.waveform.samples(),
            None,
            Some(&mut drop_rng),
        )?;
        let mut total: Option<Var> = None;
        let mut infeasible = false;
        for &l in &active {
            let logits = layer_logits(&mut tape, &binding, &states, l, cfg.ils_ft)?;
            let ctc = ctc_loss(&mut tape, logits, target)?;
            match ctc.var {
                Some(v) => {
                    total = Some(match total {
                        Some(acc) => tape.add(acc, v)?,
                        None => v,
                    })
                }
                None => {
                    infeasible = true;
                    break;
                }
            }
        }
        let record = if infeasible || total.is_none() {
            FtStepRecord {
                step,
                lr,
                loss: f64::INFINITY,
                skipped_infeasible: true,
            }
        } else {
            let loss = total.unwrap();
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, lr });
            }
            tape.backward(loss)?;
            let grads = store.collect_grads(&tape, &binding);
            opt.step(store, &grads, lr);
            FtStepRecord {
                step,
                lr,
                loss: value,
                skipped_infeasible: false,
            }
        };
        on_step(&record);
    }
    if !store.all_finite() {
        return Err(Error::NonFinite {
            context: "parameters after fine-tuning".into(),
        });
    }
    Ok(())
}

/// Best-path transcription of one utterance from the top layer.
pub fn transcribe_greedy(
    store: &ParamStore<Real>,
    model: &ModelConfig,
    vocab: &Vocabulary,
    utt: &SyntheticUtterance,
    mode: IlsFtMode,
) -> Result<String> {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape, &|_| true);
    let states = model.encode(&mut tape, &binding, utt.waveform.samples(), None, None)?;
    let logits = layer_logits(
        &mut tape,
        &binding,
        &states,
        model.encoder.n_layers,
        match mode {
            IlsFtMode::Separate => IlsFtMode::Separate,
            _ => IlsFtMode::Off,
        },
    )?;
    Ok(vocab.decode(&greedy_decode(tape.value(logits))))
}

/// Raw top-layer class scores for external decoding.
pub fn top_layer_logits(
    store: &ParamStore<Real>,
    model: &ModelConfig,
    utt: &SyntheticUtterance,
    mode: IlsFtMode,
) -> Result<crate::Tensor> {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape, &|_| true);
    let states = model.encode(&mut tape, &binding, utt.waveform.samples(), None, None)?;
    let logits = layer_logits(
        &mut tape,
        &binding,
        &states,
        model.encoder.n_layers,
        match mode {
            IlsFtMode::Separate => IlsFtMode::Separate,
            _ => IlsFtMode::Off,
        },
    )?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tri_stage_reference_points() {
        let total = 1000;
        let peak = 0.3;
        assert_eq!(tri_stage_lr(0, total, peak), 0.0);
        assert_eq!(tri_stage_lr(100, total, peak), peak);
        assert_eq!(tri_stage_lr(300, total, peak), peak);
        assert_eq!(tri_stage_lr(500, total, peak), peak);
        assert_eq!(tri_stage_lr(total, total, peak), 0.0);
    }

    #[test]
    fn tri_stage_is_continuous_at_boundaries() {
        let total = 1000;
        let peak = 1.0;
        // steepest stage slope is peak / (0.1 * total); adjacent steps can
        // never jump more than that if the stages join continuously
        let max_slope = peak / (0.1 * total as f64);
        for boundary in [100usize, 500] {
            let before = tri_stage_lr(boundary - 1, total, peak);
            let at = tri_stage_lr(boundary, total, peak);
            let after = tri_stage_lr(boundary + 1, total, peak);
            assert!((at - before).abs() <= max_slope + 1e-12);
            assert!((after - at).abs() <= max_slope + 1e-12);
        }
    }

    #[test]
    fn separate_mode_registers_one_output_per_supervised_layer() {
        let layers = SupervisedLayers::new(vec![2, 4], 4).unwrap();
        let count = |mode: IlsFtMode| -> usize {
            let mut store = ParamStore::<f64>::new(0);
            register_ctc_outputs(&mut store, 8, 5, mode, &layers, 4);
            store.len()
        };
        assert_eq!(count(IlsFtMode::Off), 2); // w + b
        assert_eq!(count(IlsFtMode::Shared), 2);
        assert_eq!(count(IlsFtMode::Separate), 4); // two layers, w + b each
    }
}
