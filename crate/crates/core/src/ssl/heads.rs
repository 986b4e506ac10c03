//! Per-layer prediction heads: a projection and codeword embeddings whose
//! temperature-scaled cosine similarities parameterize the target
//! distribution.

use serde::{Deserialize, Serialize};

use crate::errors::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};
use crate::train::{Binding, ParamStore};

/// Sorted set of supervised layer ids (1-based; the top layer is always a
/// member, matching every shipped configuration).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisedLayers(Vec<usize>);

impl SupervisedLayers {
    pub fn new(mut ids: Vec<usize>, n_layers: usize) -> Result<Self> {
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::InvalidConfig("supervised layer set is empty".into()));
        }
        if ids[0] == 0 || *ids.last().unwrap() > n_layers {
            return Err(Error::LayerOutOfRange {
                layer: *ids.last().unwrap(),
                n_layers,
            });
        }
        if *ids.last().unwrap() != n_layers {
            return Err(Error::InvalidConfig(format!(
                "supervised layers {ids:?} must include the top layer {n_layers}"
            )));
        }
        Ok(SupervisedLayers(ids))
    }

    pub fn top_only(n_layers: usize) -> Self {
        SupervisedLayers(vec![n_layers])
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Codeword count C.
    pub n_classes: usize,
    /// Projection output width.
    pub embed_dim: usize,
    /// Softmax temperature over cosine similarities.
    pub temperature: f64,
    /// One shared (projection, codewords) pair instead of one per layer.
    pub share_weights: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            n_classes: 50,
            embed_dim: 32,
            temperature: 0.1,
            share_weights: false,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 codewords, got {}",
                self.n_classes
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

fn head_prefix(cfg: &HeadConfig, layer: usize) -> String {
    if cfg.share_weights {
        "head.shared".to_string()
    } else {
        format!("head.layer{layer}")
    }
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

/// Register prediction heads for every supervised layer (or one shared pair).
pub fn register_heads<F: Scalar>(
    store: &mut ParamStore<F>,
    cfg: &HeadConfig,
    layers: &SupervisedLayers,
    model_dim: usize,
) -> Result<()> {
    cfg.validate()?;
    let mut prefixes: Vec<String> = layers.ids().iter().map(|&l| head_prefix(cfg, l)).collect();
    prefixes.dedup();
    let cw_bound = (1.0 / cfg.embed_dim as f64).sqrt();
    for p in prefixes {
        store.add_linear(&format!("{p}.w"), model_dim, cfg.embed_dim);
        store.add_uniform(
            &format!("{p}.codewords"),
            vec![cfg.n_classes, cfg.embed_dim],
            cw_bound,
        );
    }
    Ok(())
}

/// Codeword distribution for a batch of hidden states:
/// `softmax_c(cos(W h, e_c) / temperature)`, shape `[n, C]`.
pub fn codeword_distribution<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    cfg: &HeadConfig,
    layer: usize,
    states: Var,
) -> Result<Var> {
    let logits = codeword_logits(tape, binding, cfg, layer, states)?;
    Ok(tape.softmax(logits))
}

/// Temperature-scaled cosine similarity logits, shape `[n, C]`.
pub fn codeword_logits<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    cfg: &HeadConfig,
    layer: usize,
    states: Var,
) -> Result<Var> {
    let p = head_prefix(cfg, layer);
    let proj = tape.matmul(states, binding.var(&format!("{p}.w")))?;
    let sims = tape.cosine_sim(proj, binding.var(&format!("{p}.codewords")))?;
    Ok(tape.scale(sims, F::cst(1.0 / cfg.temperature)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn setup(cfg: &HeadConfig) -> (ParamStore<f64>, SupervisedLayers) {
        let layers = SupervisedLayers::new(vec![2, 4], 4).unwrap();
        let mut store = ParamStore::new(11);
        register_heads(&mut store, cfg, &layers, 8).unwrap();
        (store, layers)
    }

    #[test]
    fn layer_set_rules() {
        assert!(SupervisedLayers::new(vec![], 4).is_err());
        assert!(SupervisedLayers::new(vec![0, 4], 4).is_err());
        assert!(SupervisedLayers::new(vec![5], 4).is_err());
        assert!(SupervisedLayers::new(vec![2], 4).is_err(), "missing top layer");
        let k = SupervisedLayers::new(vec![4, 2, 2], 4).unwrap();
        assert_eq!(k.ids(), &[2, 4]);
    }

    #[test]
    fn shared_weights_shrink_parameter_count() {
        let separate = HeadConfig::default();
        let shared = HeadConfig {
            share_weights: true,
            ..HeadConfig::default()
        };
        let (sep_store, _) = setup(&separate);
        let (sh_store, _) = setup(&shared);
        assert_eq!(sep_store.total_scalars(), 2 * sh_store.total_scalars());
    }

    #[test]
    fn equal_similarities_give_uniform_distribution() {
        let cfg = HeadConfig {
            n_classes: 5,
            embed_dim: 4,
            ..HeadConfig::default()
        };
        let (mut store, _) = setup(&cfg);
        // identical codewords: every class at the same cosine similarity
        *store.get_mut("head.layer2.codewords") =
            Tensor::new(vec![5, 4], vec![0.3; 20]).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, &|_| true);
        let h = tape.constant(Tensor::new(vec![1, 8], vec![0.1, -0.4, 0.2, 0.9, -0.2, 0.5, 0.0, 0.3]).unwrap());
        let probs = codeword_distribution(&mut tape, &binding, &cfg, 2, h).unwrap();
        for &p in tape.value(probs).data() {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn two_class_extreme_similarity() {
        // sims (1, 0) at temperature 0.1 -> p1 = e^10 / (e^10 + 1)
        let cfg = HeadConfig {
            n_classes: 2,
            embed_dim: 2,
            ..HeadConfig::default()
        };
        let layers = SupervisedLayers::new(vec![1], 1).unwrap();
        let mut store = ParamStore::new(0);
        register_heads(&mut store, &cfg, &layers, 2).unwrap();
        *store.get_mut("head.layer1.w") =
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        *store.get_mut("head.layer1.codewords") =
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, &|_| true);
        let h = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let probs = codeword_distribution(&mut tape, &binding, &cfg, 1, h).unwrap();
        let p1 = tape.value(probs).data()[0];
        let expect = 10f64.exp() / (10f64.exp() + 1.0);
        assert!((p1 - expect).abs() < 1e-9, "{p1} vs {expect}");
        assert!((expect - 0.9999546).abs() < 1e-7);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let cfg = HeadConfig::default();
        let (store, _) = setup(&cfg);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, &|_| true);
        let h = tape.constant(Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let probs = codeword_distribution(&mut tape, &binding, &cfg, 4, h).unwrap();
        let v = tape.value(probs);
        for r in 0..3 {
            let s: f64 = v.data()[r * cfg.n_classes..(r + 1) * cfg.n_classes].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_invariance_of_distribution() {
        let cfg = HeadConfig::default();
        let (store, _) = setup(&cfg);
        let base: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).cos()).collect();
        let run = |scale: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape, &|_| true);
            let data: Vec<f64> = base.iter().map(|x| x * scale).collect();
            let h = tape.constant(Tensor::new(vec![1, 8], data).unwrap());
            let probs = codeword_distribution(&mut tape, &binding, &cfg, 2, h).unwrap();
            tape.value(probs).data().to_vec()
        };
        let (a, b) = (run(1.0), run(3.7));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
