//! AdamW with decoupled weight decay.

use crate::scalar::Scalar;
use crate::train::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Slot<F> {
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

/// Optimizer with one moment slot per store entry, aligned by index.
pub struct AdamW<F> {
    cfg: AdamWConfig,
    slots: Vec<Slot<F>>,
}

/// Snapshot of the optimizer moments for checkpointing.
pub struct OptimizerState<F> {
    pub first_moments: Vec<Vec<F>>,
    pub second_moments: Vec<Vec<F>>,
    pub step_counts: Vec<u64>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<F>) -> Self {
        let slots = store
            .iter()
            .map(|(_, t)| Slot {
                m: vec![F::zero(); t.numel()],
                v: vec![F::zero(); t.numel()],
                t: 0,
            })
            .collect();
        AdamW { cfg, slots }
    }

    pub fn config(&self) -> AdamWConfig {
        self.cfg
    }

    /// One update. `grads[i] == None` leaves parameter `i` (and its moments)
    /// untouched — that is how freezing works.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Vec<F>>], lr: f64) {
        assert_eq!(grads.len(), self.slots.len());
        let b1 = F::cst(self.cfg.beta1);
        let b2 = F::cst(self.cfg.beta2);
        let eps = F::cst(self.cfg.eps);
        let wd = F::cst(self.cfg.weight_decay);
        let lr_f = F::cst(lr);
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let slot = &mut self.slots[i];
            slot.t += 1;
            let bc1 = F::one() - F::cst(self.cfg.beta1.powi(slot.t as i32));
            let bc2 = F::one() - F::cst(self.cfg.beta2.powi(slot.t as i32));
            let p = store.get_mut(&names[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let gj = g[j];
                slot.m[j] = b1 * slot.m[j] + (F::one() - b1) * gj;
                slot.v[j] = b2 * slot.v[j] + (F::one() - b2) * gj * gj;
                let m_hat = slot.m[j] / bc1;
                let v_hat = slot.v[j] / bc2;
                data[j] = data[j] - lr_f * (m_hat / (v_hat.sqrt() + eps) + wd * data[j]);
            }
        }
    }

    pub fn export_state(&self) -> OptimizerState<F> {
        OptimizerState {
            first_moments: self.slots.iter().map(|s| s.m.clone()).collect(),
            second_moments: self.slots.iter().map(|s| s.v.clone()).collect(),
            step_counts: self.slots.iter().map(|s| s.t).collect(),
        }
    }

    pub fn import_state(&mut self, state: OptimizerState<F>) {
        assert_eq!(state.first_moments.len(), self.slots.len());
        for (slot, ((m, v), t)) in self.slots.iter_mut().zip(
            state
                .first_moments
                .into_iter()
                .zip(state.second_moments)
                .zip(state.step_counts),
        ) {
            assert_eq!(slot.m.len(), m.len());
            slot.m = m;
            slot.v = v;
            slot.t = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::<f64>::new(0);
        store.add_full("x", vec![1], 5.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..300 {
            let x = store.get("x").data()[0];
            let grads = vec![Some(vec![2.0 * x])];
            opt.step(&mut store, &grads, 0.05);
        }
        assert!(store.get("x").data()[0].abs() < 0.1);
    }

    #[test]
    fn none_grad_freezes_parameter_and_moments() {
        let mut store = ParamStore::<f64>::new(0);
        store.add_full("x", vec![1], 5.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[None], 0.1);
        assert_eq!(store.get("x").data()[0], 5.0);
        assert_eq!(opt.export_state().step_counts, vec![0]);
    }
}
