//! Named trainable parameters.
//!
//! Initialization draws from the substream "init/{name}" of the store's
//! master seed, so a parameter's starting values depend only on (seed, name),
//! never on registration order.

use std::collections::HashMap;

use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Keep the provided values (used for tests and checkpoint restore).
    AsIs,
    Zeros,
    /// Uniform on [-bound, bound]; layer builders pass 1/sqrt(fan_in).
    Uniform { bound: f64 },
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    master_seed: u64,
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(master_seed: u64) -> ParamStore {
        ParamStore {
            master_seed,
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn add(&mut self, name: &str, template: Tensor, init: Init) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::usage(format!("duplicate parameter name {name:?}")));
        }
        let mut tensor = template;
        match init {
            Init::AsIs => {}
            Init::Zeros => tensor.values_mut().fill(0.0),
            Init::Uniform { bound } => {
                let mut rng = StreamRng::new(self.master_seed, &format!("init/{name}"));
                for v in tensor.values_mut() {
                    *v = rng.uniform_in(-bound, bound);
                }
            }
        }
        tensor.set_requires_grad(true);
        let idx = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
        });
        self.by_name.insert(name.to_string(), idx);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        self.params[id.0].tensor.grad().expect("parameter has grad")
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let g = self.params[id.0]
            .tensor
            .grad_mut()
            .expect("parameter has grad");
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::new(11);
        let mut b = ParamStore::new(11);
        b.add("other", Tensor::zeros(vec![4]), Init::Uniform { bound: 0.5 })
            .unwrap();
        let ia = a
            .add("w", Tensor::zeros(vec![6]), Init::Uniform { bound: 0.5 })
            .unwrap();
        let ib = b
            .add("w", Tensor::zeros(vec![6]), Init::Uniform { bound: 0.5 })
            .unwrap();
        assert_eq!(a.tensor(ia).values(), b.tensor(ib).values());
        assert!(a.tensor(ia).values().iter().any(|v| *v != 0.0));
        assert!(a.tensor(ia).values().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0);
        s.add("w", Tensor::zeros(vec![1]), Init::Zeros).unwrap();
        assert!(s.add("w", Tensor::zeros(vec![1]), Init::Zeros).is_err());
    }

    #[test]
    fn grad_accumulates_and_clears() {
        let mut s = ParamStore::new(0);
        let id = s
            .add("w", Tensor::vector(vec![1.0, 1.0]), Init::AsIs)
            .unwrap();
        s.accumulate_grad(id, &[0.5, 1.0]);
        s.accumulate_grad(id, &[0.5, 1.0]);
        assert_eq!(s.grad(id), &[1.0, 2.0]);
        s.zero_grad();
        assert_eq!(s.grad(id), &[0.0, 0.0]);
    }
}
