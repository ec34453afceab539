//! Plain fully connected networks: ReLU hidden layers, linear output.

use serde::{Deserialize, Serialize};

use crate::diff::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub name: String,
    pub dims: Vec<usize>,
    #[serde(skip)]
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers parameters "{name}.w{l}" / "{name}.b{l}" in the store,
    /// uniform on +-1/sqrt(fan_in).
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize]) -> Result<Mlp> {
        if dims.len() < 2 {
            return Err(Error::config(format!(
                "MLP {name:?} needs at least input and output dims, got {dims:?}"
            )));
        }
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let w = store.add(
                &format!("{name}.w{l}"),
                Tensor::zeros(vec![fan_in, fan_out]),
                Init::Uniform { bound },
            )?;
            let b = store.add(
                &format!("{name}.b{l}"),
                Tensor::zeros(vec![fan_out]),
                Init::Uniform { bound },
            )?;
            layers.push((w, b));
        }
        Ok(Mlp {
            name: name.to_string(),
            dims: dims.to_vec(),
            layers,
        })
    }

    /// Re-binds parameter ids after deserialization of the descriptor.
    pub fn rebind(&mut self, store: &ParamStore) -> Result<()> {
        self.layers.clear();
        for l in 0..self.dims.len() - 1 {
            let w = store
                .id_by_name(&format!("{}.w{l}", self.name))
                .ok_or_else(|| Error::checkpoint(format!("missing {}.w{l}", self.name)))?;
            let b = store
                .id_by_name(&format!("{}.b{l}", self.name))
                .ok_or_else(|| Error::checkpoint(format!("missing {}.b{l}", self.name)))?;
            self.layers.push((w, b));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, *w);
            let bv = tape.param(store, *b);
            h = tape.affine(h, wv, bv)?;
            if l + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Weights + biases over all layers.
    pub fn param_count(&self) -> usize {
        self.dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|(w, b)| [*w, *b])
    }
}
