//! Frame-level discrete target construction for the two training iterations:
//! MFCC-cluster labels first, then re-clustered intermediate-layer features
//! of the previous model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::frontend::expected_output_length;
use crate::audio::mfcc::compute_mfcc;
use crate::audio::synth::SyntheticUtterance;
use crate::errors::{Error, Result};
use crate::labels::kmeans::{kmeans_assign, kmeans_fit, Codebook, CodebookSource};
use crate::model::ModelConfig;
use crate::train::ParamStore;
use crate::{Real, Tape, Tensor};

pub const KMEANS_MAX_ITERS: usize = 60;
pub const KMEANS_TOL: f64 = 1e-7;

/// Convert 10 ms-rate labels to the 20 ms encoder rate: keep even frames,
/// then truncate or pad (repeating the last label) to exactly `t_enc`.
pub fn align_labels_to_encoder(labels_10ms: &[usize], t_enc: usize) -> Vec<usize> {
    let mut out: Vec<usize> = labels_10ms.iter().step_by(2).copied().collect();
    if out.len() > t_enc {
        out.truncate(t_enc);
    } else if let Some(&last) = out.last() {
        while out.len() < t_enc {
            out.push(last);
        }
    }
    out
}

/// Deterministically choose a fraction of utterance indices to fit on.
fn fit_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let take = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    if take < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(take);
        idx.sort_unstable();
    }
    idx
}

fn concat_rows(parts: &[&Tensor]) -> Tensor {
    let d = parts[0].shape()[1];
    let total: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(total * d);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![total, d], data).unwrap()
}

/// First-iteration targets: k-means over MFCC frames, decimated 2:1 onto the
/// encoder frame rate.
pub fn build_iteration1_targets(
    corpus: &[SyntheticUtterance],
    n_clusters: usize,
    seed: u64,
    fit_fraction: f64,
) -> Result<(Codebook<Real>, Vec<Vec<usize>>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus for iteration-1 targets".into()));
    }
    let features: Vec<Tensor> = corpus
        .iter()
        .map(|u| compute_mfcc(&u.waveform).map(|f| f.frames().clone()))
        .collect::<Result<_>>()?;
    let subset = fit_subset(corpus.len(), fit_fraction, seed ^ 0xF17);
    let fit_rows: Vec<&Tensor> = subset.iter().map(|&i| &features[i]).collect();
    let fit_features = concat_rows(&fit_rows);
    let codebook = kmeans_fit(
        &fit_features,
        n_clusters,
        seed,
        KMEANS_MAX_ITERS,
        KMEANS_TOL,
        CodebookSource::Mfcc,
    )?;
    let labels = corpus
        .iter()
        .zip(&features)
        .map(|(u, f)| {
            let l10 = kmeans_assign(f, &codebook)?;
            Ok(align_labels_to_encoder(
                &l10,
                expected_output_length(u.waveform.len()),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((codebook, labels))
}

/// Extract layer-`layer` hidden states (mask-free) for every utterance.
pub fn extract_layer_states(
    store: &ParamStore<Real>,
    model: &ModelConfig,
    corpus: &[SyntheticUtterance],
    layer: usize,
) -> Result<Vec<Tensor>> {
    if layer == 0 || layer > model.encoder.n_layers {
        return Err(Error::LayerOutOfRange {
            layer,
            n_layers: model.encoder.n_layers,
        });
    }
    corpus
        .iter()
        .map(|u| {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape, &|_| true);
            let states = model.encode(&mut tape, &binding, u.waveform.samples(), None, None)?;
            Ok(tape.value(states[layer - 1]).clone())
        })
        .collect()
}

/// Second-iteration targets: k-means over a chosen transformer layer's
/// mask-free representations (already at the 20 ms rate).
pub fn build_iteration2_targets(
    corpus: &[SyntheticUtterance],
    store: &ParamStore<Real>,
    model: &ModelConfig,
    layer: usize,
    n_clusters: usize,
    seed: u64,
    fit_fraction: f64,
) -> Result<(Codebook<Real>, Vec<Vec<usize>>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus for iteration-2 targets".into()));
    }
    let features = extract_layer_states(store, model, corpus, layer)?;
    let subset = fit_subset(corpus.len(), fit_fraction, seed ^ 0xF27);
    let fit_rows: Vec<&Tensor> = subset.iter().map(|&i| &features[i]).collect();
    let fit_features = concat_rows(&fit_rows);
    let codebook = kmeans_fit(
        &fit_features,
        n_clusters,
        seed,
        KMEANS_MAX_ITERS,
        KMEANS_TOL,
        CodebookSource::Layer(layer),
    )?;
    let labels = features
        .iter()
        .map(|f| kmeans_assign(f, &codebook))
        .collect::<Result<Vec<_>>>()?;
    Ok((codebook, labels))
}
