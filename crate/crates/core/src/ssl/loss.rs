//! Masked-prediction loss summed over the supervised layer set: for each
//! supervised layer and masked frame, the negative log-probability of the
//! frame's discrete target under that layer's head. Unmasked frames never
//! contribute.

use crate::errors::{Error, Result};
use crate::scalar::Scalar;
use crate::ssl::heads::{codeword_logits, HeadConfig, SupervisedLayers};
use crate::ssl::mask::MaskSpec;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::Binding;

/// Build the loss node. `layer_states[l-1]` is the output of layer `l`;
/// `targets` has one class id per frame.
pub fn ils_loss<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &Binding,
    cfg: &HeadConfig,
    layers: &SupervisedLayers,
    layer_states: &[Var],
    spec: &MaskSpec,
    targets: &[usize],
) -> Result<Var> {
    let t = tape.value(layer_states[0]).shape()[0];
    if targets.len() != t {
        return Err(Error::LengthMismatch {
            what: "targets vs frames".into(),
            lhs: targets.len(),
            rhs: t,
        });
    }
    if let Some(&bad) = targets.iter().find(|&&z| z >= cfg.n_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: cfg.n_classes,
        });
    }
    if let Some(&bad) = spec.masked().iter().find(|&&m| m >= t) {
        return Err(Error::MaskOutOfRange { index: bad, len: t });
    }
    if spec.is_empty() {
        return Ok(tape.constant(Tensor::scalar(F::zero())));
    }
    let masked_targets: Vec<usize> = spec.masked().iter().map(|&m| targets[m]).collect();
    let mut total: Option<Var> = None;
    for &l in layers.ids() {
        if l == 0 || l > layer_states.len() {
            return Err(Error::LayerOutOfRange {
                layer: l,
                n_layers: layer_states.len(),
            });
        }
        let rows = tape.gather_rows(layer_states[l - 1], spec.masked().to_vec())?;
        let logits = codeword_logits(tape, binding, cfg, l, rows)?;
        let logp = tape.log_softmax(logits);
        let idx: Vec<usize> = masked_targets
            .iter()
            .enumerate()
            .map(|(i, &z)| i * cfg.n_classes + z)
            .collect();
        let n = idx.len();
        let picked = tape.gather(logp, idx, vec![n])?;
        let s = tape.sum_all(picked);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(tape.neg(total.expect("supervised layer set is non-empty")))
}

/// Per-frame-per-layer normalization used for logging only.
pub fn normalized_loss(raw: f64, layers: &SupervisedLayers, spec: &MaskSpec) -> f64 {
    let denom = (layers.len() * spec.len()) as f64;
    if denom == 0.0 {
        0.0
    } else {
        raw / denom
    }
}
