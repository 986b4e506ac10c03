//! End-to-end orchestration: configuration, checkpoints and the command
//! implementations behind the CLI.

pub mod checkpoint;
pub mod run;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asr::finetune::IlsFtMode;
use crate::errors::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_utts: usize,
    pub n_phones: usize,
    pub seed: u64,
    pub duration_range_ms: (usize, usize),
    /// Held-out split used for evaluation and analysis.
    pub eval_n_utts: usize,
    pub eval_seed: u64,
    /// Optional crop applied to training examples, in ms (unused by the
    /// shipped profiles; utterances are already short at desk scale).
    pub crop_ms: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SslConfig {
    pub mask_prob: f64,
    pub span_len: usize,
    /// Supervised layer set for the second iteration (1-based, top included).
    pub supervised_layers: Vec<usize>,
    pub iteration1_classes: usize,
    pub iteration2_classes: usize,
    /// Layer whose representations are re-clustered between iterations.
    pub iteration2_source_layer: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub share_head_weights: bool,
    pub steps_iteration1: usize,
    pub steps_iteration2: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Fraction of utterances the label codebooks are fit on.
    pub fit_fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneSection {
    pub steps: usize,
    pub peak_lr: f64,
    pub freeze_steps: usize,
    pub seed: u64,
    pub ils_ft: IlsFtMode,
    pub weight_decay: f64,
    /// Leading slice of the training corpus used as labelled data.
    pub n_train_utts: usize,
    /// Leading slice of the evaluation corpus scored after fine-tuning.
    pub n_eval_utts: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub lm_weight: f64,
    pub insertion_bonus: f64,
    pub beam: usize,
    pub lm_order: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub n_clusters: usize,
    pub sample_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub ssl: SslConfig,
    pub finetune: FinetuneSection,
    pub decode: DecodeConfig,
    pub analysis: AnalysisConfig,
}

impl PipelineConfig {
    /// Small configuration the tests and the default CLI profile run.
    pub fn desk() -> Self {
        PipelineConfig {
            corpus: CorpusConfig {
                n_utts: 300,
                n_phones: 8,
                seed: 101,
                duration_range_ms: (1500, 2500),
                eval_n_utts: 60,
                eval_seed: 9101,
                crop_ms: None,
            },
            model: ModelConfig::default(),
            ssl: SslConfig {
                mask_prob: 0.08,
                span_len: 10,
                supervised_layers: vec![2, 4],
                iteration1_classes: 20,
                iteration2_classes: 50,
                iteration2_source_layer: 2,
                embed_dim: 32,
                temperature: 0.1,
                share_head_weights: false,
                steps_iteration1: 500,
                steps_iteration2: 900,
                peak_lr: 3e-3,
                warmup_fraction: 0.08,
                weight_decay: 0.01,
                beta1: 0.9,
                beta2: 0.98,
                seed: 11,
                fit_fraction: 1.0,
            },
            finetune: FinetuneSection {
                steps: 1200,
                peak_lr: 4e-3,
                freeze_steps: 0,
                seed: 21,
                ils_ft: IlsFtMode::Off,
                weight_decay: 0.0,
                n_train_utts: 50,
                n_eval_utts: 20,
            },
            decode: DecodeConfig {
                lm_weight: 2.0,
                insertion_bonus: -1.0,
                beam: 16,
                lm_order: 4,
            },
            analysis: AnalysisConfig {
                n_clusters: 50,
                sample_fraction: 0.2,
                seed: 31,
            },
        }
    }

    /// The recipe at publication scale for the 12-layer model. Documents the
    /// full-size hyperparameters; not runnable on a desk CPU.
    pub fn paper_base() -> Self {
        let mut cfg = PipelineConfig::desk();
        cfg.model.frontend.channels = 512;
        cfg.model.encoder.n_layers = 12;
        cfg.model.encoder.model_dim = 768;
        cfg.model.encoder.inner_dim = 3072;
        cfg.model.encoder.n_heads = 12;
        cfg.model.encoder.conv_pos_kernel = 128;
        cfg.model.encoder.conv_pos_groups = 16;
        cfg.model.encoder.dropout = 0.1;
        cfg.ssl.supervised_layers = vec![4, 12];
        cfg.ssl.iteration1_classes = 100;
        cfg.ssl.iteration2_classes = 500;
        cfg.ssl.iteration2_source_layer = 6;
        cfg.ssl.steps_iteration1 = 250_000;
        cfg.ssl.steps_iteration2 = 400_000;
        cfg.ssl.peak_lr = 5e-4;
        cfg.ssl.warmup_fraction = 0.08; // 32k of 400k
        cfg.ssl.embed_dim = 256;
        cfg.finetune.steps = 80_000;
        cfg.finetune.peak_lr = 3e-5;
        cfg.finetune.freeze_steps = 0;
        cfg.decode.beam = 1500;
        cfg.analysis.n_clusters = 500;
        cfg.analysis.sample_fraction = 0.1;
        cfg
    }

    /// The 24-layer configuration, supported as configuration only.
    pub fn paper_large() -> Self {
        let mut cfg = PipelineConfig::paper_base();
        cfg.model.encoder.n_layers = 24;
        cfg.model.encoder.model_dim = 1024;
        cfg.model.encoder.inner_dim = 4096;
        cfg.model.encoder.n_heads = 16;
        cfg.ssl.supervised_layers = vec![9, 24];
        cfg.ssl.iteration2_source_layer = 9;
        cfg.ssl.steps_iteration2 = 600_000;
        cfg.ssl.peak_lr = 1.5e-3;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let n_layers = self.model.encoder.n_layers;
        crate::ssl::SupervisedLayers::new(self.ssl.supervised_layers.clone(), n_layers)?;
        if self.ssl.iteration2_source_layer == 0 || self.ssl.iteration2_source_layer > n_layers {
            return Err(Error::LayerOutOfRange {
                layer: self.ssl.iteration2_source_layer,
                n_layers,
            });
        }
        if !(0.0..=1.0).contains(&self.ssl.mask_prob) {
            return Err(Error::InvalidConfig("mask_prob out of [0,1]".into()));
        }
        if self.ssl.span_len == 0 {
            return Err(Error::InvalidConfig("span_len must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ssl.fit_fraction) || self.ssl.fit_fraction == 0.0 {
            return Err(Error::InvalidConfig("fit_fraction out of (0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.analysis.sample_fraction)
            || self.analysis.sample_fraction == 0.0
        {
            return Err(Error::InvalidConfig("sample_fraction out of (0,1]".into()));
        }
        if self.decode.beam == 0 {
            return Err(Error::InvalidConfig("beam must be at least 1".into()));
        }
        if self.decode.lm_order == 0 {
            return Err(Error::InvalidConfig("lm_order must be at least 1".into()));
        }
        if self.corpus.n_phones < 2 {
            return Err(Error::InvalidConfig("need at least 2 phones".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Malformed {
            what: "pipeline config".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable identity of this configuration, embedded into checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
