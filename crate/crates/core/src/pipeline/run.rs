//! Command implementations behind the CLI: corpus generation, the
//! two-iteration pre-training protocol, re-labelling, fine-tuning, decoding
//! and layer-wise analysis. Everything is deterministic given the config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::asr::beam::{beam_search_fused, DecodeWeights};
use crate::asr::finetune::{
    finetune, register_ctc_outputs, top_layer_logits, transcribe_greedy, FinetuneConfig,
};
use crate::asr::ngram::train_char_ngram;
use crate::asr::Vocabulary;
use crate::audio::corpus::{read_corpus, write_corpus, TextLog};
use crate::audio::frontend::expected_output_length;
use crate::audio::synth::{generate_corpus, SyntheticUtterance, SynthConfig};
use crate::errors::{Error, Result};
use crate::labels::targets::{build_iteration1_targets, build_iteration2_targets};
use crate::labels::{write_codebook, write_labels};
use crate::metrics::{layerwise_quality, quality_table_tsv, wer_chars, LayerQualityRow};
use crate::model::ModelConfig;
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::PipelineConfig;
use crate::ssl::heads::register_heads;
use crate::ssl::pretrain::{pretrain, PretrainConfig};
use crate::ssl::{HeadConfig, SupervisedLayers};
use crate::train::{AdamW, AdamWConfig, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusSplit {
    Train,
    Eval,
}

/// Generate and persist one corpus split.
pub fn cmd_gen_corpus(cfg: &PipelineConfig, out_dir: &Path, split: CorpusSplit) -> Result<usize> {
    cfg.validate()?;
    let (n, seed) = match split {
        CorpusSplit::Train => (cfg.corpus.n_utts, cfg.corpus.seed),
        CorpusSplit::Eval => (cfg.corpus.eval_n_utts, cfg.corpus.eval_seed),
    };
    let mut synth = SynthConfig::new(n, cfg.corpus.n_phones, seed, cfg.corpus.duration_range_ms);
    synth.seed = seed;
    let utts = generate_corpus(&synth)?;
    write_corpus(out_dir, &utts)?;
    Ok(utts.len())
}

/// Optionally crop training utterances to the configured length.
fn apply_crop(cfg: &PipelineConfig, utts: Vec<SyntheticUtterance>) -> Vec<SyntheticUtterance> {
    let Some(crop_ms) = cfg.corpus.crop_ms else {
        return utts;
    };
    let crop_frames = crop_ms / 10;
    utts.into_iter()
        .map(|mut u| {
            if u.phone_ids.len() > crop_frames {
                let samples = u.waveform.samples()[..crop_frames * 160].to_vec();
                u.waveform = crate::audio::Waveform::new(samples).expect("crop keeps validity");
                u.phone_ids.truncate(crop_frames);
            }
            u
        })
        .collect()
}

/// The architecture actually trained in a given iteration: the bucketed
/// relative bias only enters in the second iteration.
pub fn model_for_iteration(cfg: &PipelineConfig, iteration: u8) -> ModelConfig {
    let mut model = cfg.model.clone();
    if iteration == 1 {
        model.encoder.use_bucket_bias = false;
    }
    model
}

fn derived_seed(base: u64, iteration: u8) -> u64 {
    base.wrapping_add(iteration as u64)
}

pub struct PretrainOutcome {
    pub warnings: Vec<String>,
    pub final_step: usize,
    pub final_raw_loss: f64,
}

/// Pre-train one iteration. Iteration 2 needs either a labels file or the
/// previous iteration's checkpoint to generate targets from.
#[allow(clippy::too_many_arguments)]
pub fn cmd_pretrain(
    cfg: &PipelineConfig,
    corpus_dir: &Path,
    iteration: u8,
    prev_checkpoint: Option<&Path>,
    labels_file: Option<&Path>,
    out_checkpoint: &Path,
    log_path: Option<&Path>,
    resume: bool,
    end_step: Option<usize>,
    force: bool,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if iteration != 1 && iteration != 2 {
        return Err(Error::InvalidConfig(format!(
            "iteration must be 1 or 2, got {iteration}"
        )));
    }
    let mut warnings = Vec::new();
    let named = read_corpus(corpus_dir)?;
    let ids: Vec<String> = named.iter().map(|(id, _)| id.clone()).collect();
    let utts = apply_crop(cfg, named.into_iter().map(|(_, u)| u).collect());

    let model = model_for_iteration(cfg, iteration);
    let n_layers = model.encoder.n_layers;
    let (layers, n_classes, total_steps) = if iteration == 1 {
        let configured = SupervisedLayers::new(cfg.ssl.supervised_layers.clone(), n_layers)?;
        if configured.ids() != [n_layers] {
            warnings.push(format!(
                "iteration 1 supervises only the top layer; configured {:?} replaced by [{}]",
                configured.ids(),
                n_layers
            ));
        }
        if cfg.model.encoder.use_bucket_bias {
            warnings.push("iteration 1 trains without the bucketed relative bias".into());
        }
        (
            SupervisedLayers::top_only(n_layers),
            cfg.ssl.iteration1_classes,
            cfg.ssl.steps_iteration1,
        )
    } else {
        (
            SupervisedLayers::new(cfg.ssl.supervised_layers.clone(), n_layers)?,
            cfg.ssl.iteration2_classes,
            cfg.ssl.steps_iteration2,
        )
    };

    // targets
    let targets: Vec<Vec<usize>> = if iteration == 1 {
        let (_, t) =
            build_iteration1_targets(&utts, n_classes, cfg.ssl.seed ^ 0x17, cfg.ssl.fit_fraction)?;
        t
    } else if let Some(path) = labels_file {
        let entries = crate::labels::read_labels(path)?;
        if entries.len() != utts.len() {
            return Err(Error::LengthMismatch {
                what: "label file vs corpus".into(),
                lhs: entries.len(),
                rhs: utts.len(),
            });
        }
        let mut out = Vec::with_capacity(entries.len());
        for ((id, labels), (expect_id, u)) in entries.into_iter().zip(ids.iter().zip(&utts)) {
            if &id != expect_id {
                return Err(Error::Malformed {
                    what: "label file".into(),
                    detail: format!("utterance {id:?} does not match corpus {expect_id:?}"),
                });
            }
            let expect_len = expected_output_length(u.waveform.len());
            if labels.len() != expect_len {
                return Err(Error::LengthMismatch {
                    what: format!("labels for {id}"),
                    lhs: labels.len(),
                    rhs: expect_len,
                });
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: n_classes,
                });
            }
            out.push(labels);
        }
        out
    } else if let Some(prev) = prev_checkpoint {
        let ck = Checkpoint::load(prev)?;
        ck.verify_fingerprint(&cfg.fingerprint(), force)?;
        let prev_model = ck.model.clone();
        let mut prev_store = ParamStore::new(0);
        prev_model.register_base(&mut prev_store);
        ck.restore_base(&mut prev_store)?;
        let (_, t) = build_iteration2_targets(
            &utts,
            &prev_store,
            &prev_model,
            cfg.ssl.iteration2_source_layer,
            n_classes,
            cfg.ssl.seed ^ 0x27,
            cfg.ssl.fit_fraction,
        )?;
        t
    } else {
        return Err(Error::InvalidConfig(
            "iteration 2 needs --labels or --prev-checkpoint".into(),
        ));
    };

    // model + heads
    let heads = HeadConfig {
        n_classes,
        embed_dim: cfg.ssl.embed_dim,
        temperature: cfg.ssl.temperature,
        share_weights: cfg.ssl.share_head_weights,
    };
    let seed = derived_seed(cfg.ssl.seed, iteration);
    let mut store = ParamStore::new(seed);
    model.register_base(&mut store);
    model.register_mask_embedding(&mut store);
    register_heads(&mut store, &heads, &layers, model.encoder.model_dim)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            beta1: cfg.ssl.beta1,
            beta2: cfg.ssl.beta2,
            eps: 1e-8,
            weight_decay: cfg.ssl.weight_decay,
        },
        &store,
    );

    let mut start_step = 0usize;
    if resume {
        let ck = Checkpoint::load(out_checkpoint)?;
        ck.verify_fingerprint(&cfg.fingerprint(), force)?;
        ck.restore_full(&mut store, &mut opt)?;
        start_step = ck.step as usize;
    }
    let end = end_step.unwrap_or(total_steps).min(total_steps);

    let pcfg = PretrainConfig {
        steps: total_steps,
        peak_lr: cfg.ssl.peak_lr,
        warmup_fraction: cfg.ssl.warmup_fraction,
        mask_prob: cfg.ssl.mask_prob,
        span_len: cfg.ssl.span_len,
        seed,
    };
    let mut log = match log_path {
        Some(p) if start_step == 0 => Some(TextLog::create(p)?),
        Some(p) => {
            let file = fs::OpenOptions::new()
                .append(true)
                .create(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some(TextLog::from_file(file))
        }
        None => None,
    };
    let mut final_raw = f64::NAN;
    pretrain(
        &mut store,
        &mut opt,
        &model,
        &heads,
        &layers,
        &utts,
        &targets,
        &pcfg,
        start_step,
        end,
        |r| {
            final_raw = r.raw_loss;
            if let Some(log) = log.as_mut() {
                let _ = log.line(&r.log_line());
            }
        },
    )?;
    let ck = Checkpoint::from_store(&cfg.fingerprint(), &model, end as u64, &store, Some(&opt));
    ck.save(out_checkpoint)?;
    Ok(PretrainOutcome {
        warnings,
        final_step: end,
        final_raw_loss: final_raw,
    })
}

/// Extract layer features from a checkpoint and write the next-generation
/// labels (plus the codebook) for the corpus.
pub fn cmd_relabel(
    cfg: &PipelineConfig,
    corpus_dir: &Path,
    checkpoint: &Path,
    layer: Option<usize>,
    out_labels: &Path,
    out_codebook: Option<&Path>,
    force: bool,
) -> Result<()> {
    cfg.validate()?;
    let named = read_corpus(corpus_dir)?;
    let ids: Vec<String> = named.iter().map(|(id, _)| id.clone()).collect();
    let utts: Vec<SyntheticUtterance> = named.into_iter().map(|(_, u)| u).collect();
    let ck = Checkpoint::load(checkpoint)?;
    ck.verify_fingerprint(&cfg.fingerprint(), force)?;
    let model = ck.model.clone();
    let mut store = ParamStore::new(0);
    model.register_base(&mut store);
    ck.restore_base(&mut store)?;
    let layer = layer.unwrap_or(cfg.ssl.iteration2_source_layer);
    let (codebook, labels) = build_iteration2_targets(
        &utts,
        &store,
        &model,
        layer,
        cfg.ssl.iteration2_classes,
        cfg.ssl.seed ^ 0x27,
        cfg.ssl.fit_fraction,
    )?;
    let entries: Vec<(String, Vec<usize>)> = ids.into_iter().zip(labels).collect();
    write_labels(out_labels, &entries)?;
    if let Some(p) = out_codebook {
        write_codebook(p, &codebook)?;
    }
    Ok(())
}

pub struct FinetuneOutcome {
    pub final_loss: f64,
    pub skipped_utterances: usize,
}

/// Fine-tune a pre-trained checkpoint with CTC on labelled utterances.
#[allow(clippy::too_many_arguments)]
pub fn cmd_finetune(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    train_corpus_dir: &Path,
    out_checkpoint: &Path,
    log_path: Option<&Path>,
    force: bool,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    ck.verify_fingerprint(&cfg.fingerprint(), force)?;
    let model = ck.model.clone();
    let vocab = Vocabulary::for_phones(cfg.corpus.n_phones)?;
    let layers = SupervisedLayers::new(
        cfg.ssl.supervised_layers.clone(),
        model.encoder.n_layers,
    )?;
    let mut store = ParamStore::new(cfg.finetune.seed);
    model.register_base(&mut store);
    register_ctc_outputs(
        &mut store,
        model.encoder.model_dim,
        vocab.size(),
        cfg.finetune.ils_ft,
        &layers,
        model.encoder.n_layers,
    );
    ck.restore_base(&mut store)?;
    let named = read_corpus(train_corpus_dir)?;
    let mut utts: Vec<SyntheticUtterance> = named.into_iter().map(|(_, u)| u).collect();
    utts.truncate(cfg.finetune.n_train_utts);
    let mut opt = AdamW::new(
        AdamWConfig {
            beta1: cfg.ssl.beta1,
            beta2: cfg.ssl.beta2,
            eps: 1e-8,
            weight_decay: cfg.finetune.weight_decay,
        },
        &store,
    );
    let fcfg = FinetuneConfig {
        steps: cfg.finetune.steps,
        peak_lr: cfg.finetune.peak_lr,
        freeze_steps: cfg.finetune.freeze_steps,
        seed: cfg.finetune.seed,
        ils_ft: cfg.finetune.ils_ft,
    };
    let mut log = log_path.map(TextLog::create).transpose()?;
    let mut final_loss = f64::NAN;
    let mut skipped = 0usize;
    finetune(
        &mut store,
        &mut opt,
        &model,
        &vocab,
        &utts,
        &fcfg,
        &layers,
        |r| {
            if r.skipped_infeasible {
                skipped += 1;
            } else {
                final_loss = r.loss;
            }
            if let Some(log) = log.as_mut() {
                let _ = log.line(&r.log_line());
            }
        },
    )?;
    let out = Checkpoint::from_store(
        &cfg.fingerprint(),
        &model,
        cfg.finetune.steps as u64,
        &store,
        Some(&opt),
    );
    out.save(out_checkpoint)?;
    Ok(FinetuneOutcome {
        final_loss,
        skipped_utterances: skipped,
    })
}

pub struct DecodeOutcome {
    /// One line per utterance: id, hypothesis, composite score, ctc score.
    pub lines: Vec<String>,
    pub fused_wer: f64,
    pub greedy_wer: f64,
}

/// Decode an evaluation corpus with both greedy and LM-fused beam search.
#[allow(clippy::too_many_arguments)]
pub fn cmd_decode(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    eval_corpus_dir: &Path,
    lm_corpus_dir: &Path,
    out_path: Option<&Path>,
    limit: Option<usize>,
    force: bool,
) -> Result<DecodeOutcome> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    ck.verify_fingerprint(&cfg.fingerprint(), force)?;
    let model = ck.model.clone();
    let vocab = Vocabulary::for_phones(cfg.corpus.n_phones)?;
    let layers = SupervisedLayers::new(
        cfg.ssl.supervised_layers.clone(),
        model.encoder.n_layers,
    )?;
    let mut store = ParamStore::new(0);
    model.register_base(&mut store);
    register_ctc_outputs(
        &mut store,
        model.encoder.model_dim,
        vocab.size(),
        cfg.finetune.ils_ft,
        &layers,
        model.encoder.n_layers,
    );
    ck.restore_all(&mut store)?;

    let lm_corpus = read_corpus(lm_corpus_dir)?;
    let transcripts: Vec<String> = lm_corpus
        .iter()
        .map(|(_, u)| u.transcript.clone())
        .collect();
    let lm = train_char_ngram(&transcripts, cfg.decode.lm_order, &vocab)?;
    let weights = DecodeWeights {
        lm_weight: cfg.decode.lm_weight,
        insertion_bonus: cfg.decode.insertion_bonus,
        beam: cfg.decode.beam,
    };

    let mut eval = read_corpus(eval_corpus_dir)?;
    if let Some(n) = limit {
        eval.truncate(n);
    }
    let mut lines = Vec::with_capacity(eval.len());
    let mut fused_err = 0.0f64;
    let mut greedy_err = 0.0f64;
    let mode = cfg.finetune.ils_ft;
    for (id, utt) in &eval {
        let logits = top_layer_logits(&store, &model, utt, mode)?;
        let hyps = beam_search_fused(&logits, &lm, &weights, &vocab)?;
        let best = hyps.first().ok_or_else(|| Error::EmptyInput("beam output".into()))?;
        let greedy = transcribe_greedy(&store, &model, &vocab, utt, mode)?;
        fused_err += wer_chars(&utt.transcript, &best.text)?;
        greedy_err += wer_chars(&utt.transcript, &greedy)?;
        lines.push(format!(
            "{id}\t{}\t{:.6}\t{:.6}",
            best.text, best.score, best.log_p_ctc
        ));
    }
    let n = eval.len().max(1) as f64;
    if let Some(p) = out_path {
        let mut text = lines.join("\n");
        text.push('\n');
        fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(DecodeOutcome {
        lines,
        fused_wer: fused_err / n,
        greedy_wer: greedy_err / n,
    })
}

/// Per-layer cluster-quality table of a checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn cmd_analyze(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    fit_corpus_dir: &Path,
    eval_corpus_dir: &Path,
    out_prefix: Option<&Path>,
    force: bool,
) -> Result<Vec<LayerQualityRow>> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    ck.verify_fingerprint(&cfg.fingerprint(), force)?;
    let model = ck.model.clone();
    let mut store = ParamStore::new(0);
    model.register_base(&mut store);
    ck.restore_base(&mut store)?;
    let fit: Vec<SyntheticUtterance> = read_corpus(fit_corpus_dir)?
        .into_iter()
        .map(|(_, u)| u)
        .collect();
    let eval: Vec<SyntheticUtterance> = read_corpus(eval_corpus_dir)?
        .into_iter()
        .map(|(_, u)| u)
        .collect();
    let rows = layerwise_quality(
        &store,
        &model,
        &fit,
        &eval,
        cfg.analysis.n_clusters,
        cfg.analysis.sample_fraction,
        cfg.analysis.seed,
    )?;
    if let Some(prefix) = out_prefix {
        let tsv_path = with_extension(prefix, "tsv");
        fs::write(&tsv_path, quality_table_tsv(&rows)).map_err(|e| Error::io(&tsv_path, e))?;
        let json_path = with_extension(prefix, "json");
        let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
        let mut f = fs::File::create(&json_path).map_err(|e| Error::io(&json_path, e))?;
        writeln!(f, "{json}").map_err(|e| Error::io(&json_path, e))?;
    }
    Ok(rows)
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}
