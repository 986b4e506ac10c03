//! Transformer encoder with convolutional position embedding, shared
//! bucketed relative-position bias and post-layer-norm blocks, exposing
//! every layer's hidden states.

pub mod attention;
pub mod bucket;

use rand::distributions::{Bernoulli, Distribution};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::errors::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{Binding, ParamStore};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub inner_dim: usize,
    pub n_heads: usize,
    pub conv_pos_kernel: usize,
    pub conv_pos_groups: usize,
    pub n_rel_buckets: usize,
    pub max_rel_offset: usize,
    /// Rescaling constant of the overflow-safe attention score form.
    pub stabilization_scale: f64,
    pub use_bucket_bias: bool,
    /// Dropout on attention and feed-forward outputs (0 disables).
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 4,
            model_dim: 64,
            inner_dim: 128,
            n_heads: 4,
            conv_pos_kernel: 16,
            conv_pos_groups: 4,
            n_rel_buckets: 320,
            max_rel_offset: 800,
            stabilization_scale: 32.0,
            use_bucket_bias: true,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
        }
        if self.model_dim == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} must be a positive multiple of n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.n_rel_buckets % 2 != 0 || self.n_rel_buckets < 4 {
            return Err(Error::InvalidConfig(format!(
                "n_rel_buckets {} must be even and at least 4",
                self.n_rel_buckets
            )));
        }
        if self.max_rel_offset == 0 {
            return Err(Error::InvalidConfig("max_rel_offset must be positive".into()));
        }
        if self.stabilization_scale <= 0.0 {
            return Err(Error::InvalidConfig("stabilization scale must be positive".into()));
        }
        if self.model_dim % self.conv_pos_groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} not divisible by conv_pos_groups {}",
                self.model_dim, self.conv_pos_groups
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} out of range", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

pub const BIAS_TABLE: &str = "encoder.bias_table";

/// Register all encoder parameters under `encoder.*`.
///
/// The bias table (one scalar per head and bucket, shared by all layers) is
/// only registered when bucket bias is enabled, so the ablation genuinely
/// removes those parameters.
pub fn register_params<F: Scalar>(store: &mut ParamStore<F>, cfg: &EncoderConfig) {
    let d = cfg.model_dim;
    let cg = d / cfg.conv_pos_groups;
    let k = cfg.conv_pos_kernel;
    let conv_bound = (3.0 / (cg * k) as f64).sqrt();
    store.add_uniform("encoder.pos_conv.w", vec![d, cg, k], conv_bound);
    store.add_zeros("encoder.pos_conv.b", vec![d]);
    store.add_full("encoder.input_ln.g", vec![d], 1.0);
    store.add_zeros("encoder.input_ln.b", vec![d]);
    if cfg.use_bucket_bias {
        store.add_zeros(BIAS_TABLE, vec![cfg.n_heads, cfg.n_rel_buckets]);
    }
    for l in 0..cfg.n_layers {
        for proj in ["wq", "wk", "wv", "wo"] {
            store.add_linear(&format!("encoder.layer{l}.attn.{proj}"), d, d);
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            store.add_zeros(&format!("encoder.layer{l}.attn.{bias}"), vec![d]);
        }
        store.add_full(&format!("encoder.layer{l}.ln1.g"), vec![d], 1.0);
        store.add_zeros(&format!("encoder.layer{l}.ln1.b"), vec![d]);
        store.add_linear(&format!("encoder.layer{l}.ffn.w1"), d, cfg.inner_dim);
        store.add_zeros(&format!("encoder.layer{l}.ffn.b1"), vec![cfg.inner_dim]);
        store.add_linear(&format!("encoder.layer{l}.ffn.w2"), cfg.inner_dim, d);
        store.add_zeros(&format!("encoder.layer{l}.ffn.b2"), vec![d]);
        store.add_full(&format!("encoder.layer{l}.ln2.g"), vec![d], 1.0);
        store.add_zeros(&format!("encoder.layer{l}.ln2.b"), vec![d]);
    }
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("encoder.")
}

/// Grouped convolution position embedding followed by GELU, added onto the
/// input (identity when all its weights are zero).
pub fn conv_position_embedding<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    x: Var,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let w = binding.var("encoder.pos_conv.w");
    let b = binding.var("encoder.pos_conv.b");
    let conv = tape.conv1d_same(x, w, Some(b), cfg.conv_pos_groups)?;
    let act = tape.gelu(conv);
    tape.add(x, act)
}

fn affine_ln<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let normed = tape.layer_norm(x);
    let scaled = tape.mul_row(normed, binding.var(&format!("{prefix}.g")))?;
    tape.add_row(scaled, binding.var(&format!("{prefix}.b")))
}

fn maybe_dropout<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    p: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = Bernoulli::new(1.0 - p).expect("valid dropout rate");
    let scale = F::cst(1.0 / (1.0 - p));
    let n = tape.value(x).numel();
    let mask: Vec<F> = (0..n)
        .map(|_| if keep.sample(rng) { scale } else { F::zero() })
        .collect();
    let shape = tape.value(x).shape().to_vec();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

/// One self-attention block in the rescaled score form: queries are divided
/// by `c*sqrt(d_head)` before the key product, the row max is subtracted
/// inside the softmax, and the bucketed bias is added per head.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    layer: usize,
    x: Var,
    cfg: &EncoderConfig,
    buckets: Option<&[usize]>,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if !tape.value(x).all_finite() {
        return Err(Error::NonFinite {
            context: format!("attention input at layer {layer}"),
        });
    }
    let t = tape.value(x).shape()[0];
    let dh = cfg.head_dim();
    let p = &format!("encoder.layer{layer}.attn");
    let q = {
        let m = tape.matmul(x, binding.var(&format!("{p}.wq")))?;
        tape.add_row(m, binding.var(&format!("{p}.bq")))?
    };
    let k = {
        let m = tape.matmul(x, binding.var(&format!("{p}.wk")))?;
        tape.add_row(m, binding.var(&format!("{p}.bk")))?
    };
    let v = {
        let m = tape.matmul(x, binding.var(&format!("{p}.wv")))?;
        tape.add_row(m, binding.var(&format!("{p}.bv")))?
    };
    let c = cfg.stabilization_scale;
    let inv = F::cst(1.0 / (c * (dh as f64).sqrt()));
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let qs = tape.scale(qh, inv);
        let s = tape.matmul_nt(qs, kh)?;
        let s2 = tape.scale(s, F::cst(c));
        let logits = match buckets {
            Some(idx) => {
                let table = binding.var(BIAS_TABLE);
                let flat: Vec<usize> = idx.iter().map(|&b| h * cfg.n_rel_buckets + b).collect();
                let bias = tape.gather(table, flat, vec![t, t])?;
                tape.add(s2, bias)?
            }
            None => s2,
        };
        let probs = tape.softmax(logits);
        heads.push(tape.matmul(probs, vh)?);
    }
    let concat = tape.concat_cols(&heads)?;
    let proj = tape.matmul(concat, binding.var(&format!("{p}.wo")))?;
    let out = tape.add_row(proj, binding.var(&format!("{p}.bo")))?;
    maybe_dropout(tape, out, cfg.dropout, rng)
}

fn feed_forward<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    layer: usize,
    x: Var,
    cfg: &EncoderConfig,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let p = &format!("encoder.layer{layer}.ffn");
    let h = tape.matmul(x, binding.var(&format!("{p}.w1")))?;
    let h = tape.add_row(h, binding.var(&format!("{p}.b1")))?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, binding.var(&format!("{p}.w2")))?;
    let h = tape.add_row(h, binding.var(&format!("{p}.b2")))?;
    maybe_dropout(tape, h, cfg.dropout, rng)
}

/// Run the full encoder over `[t, d]` input states, returning every block's
/// output in order (`h^1 .. h^L`).
pub fn encoder_forward<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    x: Var,
    cfg: &EncoderConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let t = tape.value(x).shape()[0];
    let buckets = if cfg.use_bucket_bias {
        Some(bucket::bucket_matrix(t, cfg.n_rel_buckets, cfg.max_rel_offset))
    } else {
        None
    };
    let x = conv_position_embedding(tape, binding, x, cfg)?;
    let mut x = affine_ln(tape, binding, x, "encoder.input_ln")?;
    let mut states = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let attn = attention_block(tape, binding, l, x, cfg, buckets.as_deref(), &mut rng)?;
        let res = tape.add(x, attn)?;
        let mid = affine_ln(tape, binding, res, &format!("encoder.layer{l}.ln1"))?;
        let ffn = feed_forward(tape, binding, l, mid, cfg, &mut rng)?;
        let res2 = tape.add(mid, ffn)?;
        x = affine_ln(tape, binding, res2, &format!("encoder.layer{l}.ln2"))?;
        states.push(x);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::distributions::{Distribution, Uniform};
    use rand::SeedableRng;

    fn toy_cfg(n_layers: usize, bias: bool) -> EncoderConfig {
        EncoderConfig {
            n_layers,
            model_dim: 8,
            inner_dim: 16,
            n_heads: 2,
            conv_pos_kernel: 4,
            conv_pos_groups: 2,
            n_rel_buckets: 16,
            max_rel_offset: 12,
            use_bucket_bias: bias,
            ..Default::default()
        }
    }

    fn random_input(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new_inclusive(-1.0, 1.0);
        Tensor::new(vec![t, d], (0..t * d).map(|_| u.sample(&mut rng)).collect()).unwrap()
    }

    fn run(cfg: &EncoderConfig, store: &ParamStore<f64>, x: &Tensor<f64>) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, &|_| true);
        let xv = tape.constant(x.clone());
        let states = encoder_forward(&mut tape, &binding, xv, cfg, None).unwrap();
        states
            .into_iter()
            .map(|v| tape.value(v).data().to_vec())
            .collect()
    }

    #[test]
    fn one_layer_yields_one_state() {
        let cfg = toy_cfg(1, true);
        let mut store = ParamStore::new(3);
        register_params(&mut store, &cfg);
        let states = run(&cfg, &store, &random_input(5, 8, 1));
        assert_eq!(states.len(), 1);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = toy_cfg(2, true);
        let mut store = ParamStore::new(3);
        register_params(&mut store, &cfg);
        let x = random_input(6, 8, 2);
        let a = run(&cfg, &store, &x);
        let b = run(&cfg, &store, &x);
        assert_eq!(a, b);
    }

    #[test]
    fn disabled_bias_equals_zeroed_table() {
        let with = toy_cfg(2, true);
        let without = toy_cfg(2, false);
        let mut store_with = ParamStore::new(3);
        register_params(&mut store_with, &with);
        let mut store_without = ParamStore::new(3);
        register_params(&mut store_without, &without);
        // table starts at zero, so outputs must agree exactly
        let x = random_input(7, 8, 5);
        assert_eq!(run(&with, &store_with, &x), run(&without, &store_without, &x));
        // and the ablation really removes parameters
        let diff = store_with.total_scalars() - store_without.total_scalars();
        assert_eq!(diff, with.n_heads * with.n_rel_buckets);
    }

    #[test]
    fn zero_pos_conv_weights_are_identity() {
        let cfg = toy_cfg(1, false);
        let mut store = ParamStore::new(3);
        register_params(&mut store, &cfg);
        *store.get_mut("encoder.pos_conv.w") = Tensor::zeros(vec![8, 4, 4]);
        let x = random_input(5, 8, 9);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, &|_| true);
        let xv = tape.constant(x.clone());
        let out = conv_position_embedding(&mut tape, &binding, xv, &cfg).unwrap();
        assert_eq!(tape.value(out).data(), x.data());
    }

    #[test]
    fn constant_input_stays_constant_in_interior() {
        let cfg = toy_cfg(1, false);
        let mut store = ParamStore::new(3);
        register_params(&mut store, &cfg);
        let t = 12;
        let x = Tensor::new(vec![t, 8], vec![0.37; t * 8]).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, &|_| true);
        let xv = tape.constant(x);
        let out = conv_position_embedding(&mut tape, &binding, xv, &cfg).unwrap();
        let data = tape.value(out).data();
        let k = cfg.conv_pos_kernel;
        // rows at least k away from both ends see identical contexts
        let mid = &data[k * 8..(k + 1) * 8];
        for r in k..t - k {
            assert_eq!(&data[r * 8..r * 8 + 8], mid, "row {r}");
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let cfg = toy_cfg(1, true);
        let mut store = ParamStore::new(3);
        register_params(&mut store, &cfg);
        let mut x = random_input(4, 8, 2);
        x.data_mut()[5] = f64::INFINITY;
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, &|_| true);
        let xv = tape.constant(x);
        let err = encoder_forward(&mut tape, &binding, xv, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn dropout_zero_is_noop_and_positive_masks() {
        let cfg = toy_cfg(1, false);
        let mut store = ParamStore::new(3);
        register_params(&mut store, &cfg);
        let x = random_input(5, 8, 4);
        let base = run(&cfg, &store, &x);
        // rng supplied but rate 0: identical
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, &|_| true);
        let xv = tape.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let states = encoder_forward(&mut tape, &binding, xv, &cfg, Some(&mut rng)).unwrap();
        assert_eq!(tape.value(states[0]).data().to_vec(), base[0]);
        // positive rate changes the output
        let mut cfg_d = cfg.clone();
        cfg_d.dropout = 0.5;
        let mut tape2 = Tape::new();
        let binding2 = store.bind(&mut tape2, &|_| true);
        let xv2 = tape2.constant(x);
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let states2 =
            encoder_forward(&mut tape2, &binding2, xv2, &cfg_d, Some(&mut rng2)).unwrap();
        assert_ne!(tape2.value(states2[0]).data().to_vec(), base[0]);
    }
}
