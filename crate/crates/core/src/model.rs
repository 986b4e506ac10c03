//! Assembly of the waveform-to-states model: conv feature encoder, optional
//! width projection, mask replacement and the transformer stack.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::frontend::{self, FrontendConfig};
use crate::encoder::{self, EncoderConfig};
use crate::errors::Result;
use crate::scalar::Scalar;
use crate::ssl::mask::MaskSpec;
use crate::tensor::{Tape, Var};
use crate::train::{Binding, ParamStore};

pub const MASK_EMBEDDING: &str = "ssl.mask_emb";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frontend: FrontendConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()
    }

    fn needs_projection(&self) -> bool {
        self.frontend.channels != self.encoder.model_dim
    }

    /// Register frontend, projection (when widths differ) and encoder.
    pub fn register_base<F: Scalar>(&self, store: &mut ParamStore<F>) {
        frontend::register_params(store, &self.frontend);
        if self.needs_projection() {
            store.add_linear("proj.w", self.frontend.channels, self.encoder.model_dim);
            store.add_zeros("proj.b", vec![self.encoder.model_dim]);
        }
        encoder::register_params(store, &self.encoder);
    }

    /// Additionally register the learned mask embedding (pre-training only).
    pub fn register_mask_embedding<F: Scalar>(&self, store: &mut ParamStore<F>) {
        let d = self.encoder.model_dim;
        store.add_uniform(MASK_EMBEDDING, vec![d], (1.0 / d as f64).sqrt());
    }

    /// Waveform -> conv frames -> (optional) projection.
    pub fn conv_frames<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        samples: &[F],
    ) -> Result<Var> {
        let x = frontend::forward(tape, binding, samples)?;
        if self.needs_projection() {
            let m = tape.matmul(x, binding.var("proj.w"))?;
            tape.add_row(m, binding.var("proj.b"))
        } else {
            Ok(x)
        }
    }

    /// Full forward pass exposing every transformer layer's states.
    /// When `mask` is given, the listed frames are replaced by the learned
    /// mask embedding before the transformer.
    pub fn encode<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        samples: &[F],
        mask: Option<&MaskSpec>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        let mut x = self.conv_frames(tape, binding, samples)?;
        if let Some(spec) = mask {
            x = tape.mask_rows(x, spec.masked(), binding.var(MASK_EMBEDDING))?;
        }
        encoder::encoder_forward(tape, binding, x, &self.encoder, dropout_rng)
    }
}
