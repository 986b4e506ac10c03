//! Named parameter store with deterministic initialization.

use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Ordered collection of named tensors. Iteration order is creation order,
/// which is fixed by model construction, so runs are reproducible.
pub struct ParamStore<F> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Register a tensor initialized from `U(-bound, bound)`.
    ///
    /// The RNG stream is derived from the store seed and the parameter name,
    /// so a parameter's initial value does not depend on what else exists in
    /// the model (ablation arms share encoder initializations).
    pub fn add_uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let dist = Uniform::new_inclusive(-bound, bound);
        let numel: usize = shape.iter().product();
        let data: Vec<F> = (0..numel).map(|_| F::cst(dist.sample(&mut rng))).collect();
        self.add(name, Tensor::new(shape, data).unwrap())
    }

    /// Xavier-uniform initialization for a `[fan_in, fan_out]` weight matrix.
    pub fn add_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> usize {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_uniform(name, vec![fan_in, fan_out], bound)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> usize {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, name: &str, shape: Vec<usize>, v: f64) -> usize {
        self.add(name, Tensor::full(shape, F::cst(v)))
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<F>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name:?}"
        );
        let id = self.entries.len();
        self.entries.push((name.to_string(), tensor));
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        let id = self.index[name];
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        let id = self.index[name];
        &mut self.entries[id].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Copy every parameter onto a tape. `frozen` names receive no gradient.
    pub fn bind(&self, tape: &mut Tape<F>, frozen: &dyn Fn(&str) -> bool) -> Binding {
        let mut by_name = HashMap::with_capacity(self.entries.len());
        let mut ordered = Vec::with_capacity(self.entries.len());
        let mut frozen_flags = Vec::with_capacity(self.entries.len());
        for (name, tensor) in &self.entries {
            let is_frozen = frozen(name);
            let var = tape.leaf(tensor.clone(), !is_frozen);
            by_name.insert(name.clone(), var);
            ordered.push(var);
            frozen_flags.push(is_frozen);
        }
        Binding {
            by_name,
            ordered,
            frozen: frozen_flags,
        }
    }

    /// Gradients for every parameter in store order: `None` for parameters
    /// bound frozen, zeros for trainable parameters the loss never reached.
    pub fn collect_grads(&self, tape: &Tape<F>, binding: &Binding) -> Vec<Option<Vec<F>>> {
        self.entries
            .iter()
            .zip(binding.ordered.iter().zip(&binding.frozen))
            .map(|((_, tensor), (&var, &is_frozen))| {
                if is_frozen {
                    None
                } else {
                    Some(match tape.grad(var) {
                        Some(g) => g.to_vec(),
                        None => vec![F::zero(); tensor.numel()],
                    })
                }
            })
            .collect()
    }
}

/// Tape handles for one forward pass over the store.
pub struct Binding {
    by_name: HashMap<String, Var>,
    ordered: Vec<Var>,
    frozen: Vec<bool>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    pub fn ordered(&self) -> &[Var] {
        &self.ordered
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_derived() {
        let mut a = ParamStore::<f64>::new(7);
        a.add_uniform("w.q", vec![4], 1.0);
        a.add_uniform("w.k", vec![4], 1.0);
        let mut b = ParamStore::<f64>::new(7);
        b.add_uniform("w.k", vec![4], 1.0);
        b.add_uniform("w.q", vec![4], 1.0);
        assert_eq!(a.get("w.q"), b.get("w.q"));
        assert_eq!(a.get("w.k"), b.get("w.k"));
        assert_ne!(a.get("w.q"), a.get("w.k"));
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut store = ParamStore::<f64>::new(1);
        store.add_full("a", vec![1], 3.0);
        store.add_full("b", vec![1], 4.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &|name| name == "b");
        let prod = tape.mul(bound.var("a"), bound.var("b")).unwrap();
        tape.backward(prod).unwrap();
        assert_eq!(tape.grad(bound.var("a")).unwrap(), &[4.0]);
        assert_eq!(tape.grad(bound.var("b")), None);
    }
}
