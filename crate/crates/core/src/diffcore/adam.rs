use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use super::DiffError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A parameter value together with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl ParamEntry {
    pub fn new(value: Tensor) -> Self {
        let (r, c) = (value.rows(), value.cols());
        Self {
            value,
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            step: 0,
        }
    }
}

/// Named trainable tensors. Iteration order is the lexicographic name order,
/// which keeps checkpoints and updates deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), ParamEntry::new(value));
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, entry: ParamEntry) -> Result<(), DiffError> {
        if !entry.m.same_shape(&entry.value) || !entry.v.same_shape(&entry.value) {
            return Err(DiffError::Shape("moment buffers must match the parameter shape".into()));
        }
        self.entries.insert(name.into(), entry);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry> {
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalars held by parameters whose name passes `filter`.
    pub fn count_scalars(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| filter(n))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    /// Adds every parameter to `graph`: trainable when `trainable(name)`,
    /// a constant otherwise. Returns the name → node binding.
    pub fn bind(
        &self,
        graph: &mut Graph,
        include: impl Fn(&str) -> bool,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<BTreeMap<String, Var>, DiffError> {
        let mut out = BTreeMap::new();
        for (name, e) in &self.entries {
            if !include(name) {
                continue;
            }
            let v = if trainable(name) {
                graph.parameter(name, e.value.clone())?
            } else {
                graph.constant(e.value.clone())
            };
            out.insert(name.clone(), v);
        }
        Ok(out)
    }

    /// One Adam update for every parameter present in `grads`. Parameters
    /// without a gradient entry are left untouched, moments included.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64, cfg: &AdamConfig) -> Result<(), DiffError> {
        for (name, g) in grads {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| DiffError::UnknownParameter(name.clone()))?;
            if !g.same_shape(&e.value) {
                return Err(DiffError::Shape(format!(
                    "adam_step: gradient {:?} for parameter {name} of shape {:?}",
                    g.shape(),
                    e.value.shape()
                )));
            }
            e.step += 1;
            let t = e.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let (value, m, v) = (e.value.data_mut(), e.m.data_mut(), e.v.data_mut());
            for i in 0..value.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(name: &str, t: Tensor) -> Gradients {
        let mut g = Gradients::new();
        g.insert(name.to_string(), t);
        g
    }

    #[test]
    fn zero_gradient_keeps_parameter_and_decays_moments() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::row(vec![1.5, -2.0]));
        let cfg = AdamConfig::default();
        s.adam_step(&grads_of("w", Tensor::row(vec![1.0, 1.0])), 0.1, &cfg).unwrap();
        let before = s.entry("w").unwrap().clone();
        s.adam_step(&grads_of("w", Tensor::zeros(1, 2)), 0.1, &cfg).unwrap();
        let after = s.entry("w").unwrap();
        // zero gradient still moves by the remaining first moment, so compare
        // against a store that never saw a gradient at all
        assert!(after.m.data()[0].abs() < before.m.data()[0].abs());
        assert!(after.v.data()[0] < before.v.data()[0]);

        let mut fresh = ParameterStore::new();
        fresh.insert("w", Tensor::row(vec![1.5, -2.0]));
        fresh.adam_step(&grads_of("w", Tensor::zeros(1, 2)), 0.1, &cfg).unwrap();
        assert_eq!(fresh.get("w").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn single_step_on_square() {
        // f(w) = w^2 at w = 1: gradient 2, bias-corrected step is exactly lr
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(1.0));
        s.adam_step(&grads_of("w", Tensor::scalar(2.0)), 0.1, &AdamConfig::default())
            .unwrap();
        assert!((s.get("w").unwrap().item() - 0.9).abs() < 1e-8);
        assert_eq!(s.entry("w").unwrap().step, 1);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(0.0));
        for _ in 0..50 {
            s.adam_step(&grads_of("w", Tensor::scalar(-3.0)), 0.01, &AdamConfig::default())
                .unwrap();
        }
        assert!(s.get("w").unwrap().item() > 0.4);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::zeros(2, 2));
        let err = s
            .adam_step(&grads_of("w", Tensor::zeros(1, 4)), 0.1, &AdamConfig::default())
            .unwrap_err();
        assert!(matches!(err, DiffError::Shape(_)));
    }
}
