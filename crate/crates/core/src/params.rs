//! Named parameter and buffer storage shared by all model components.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers (batch-norm running statistics) are stored but never optimized.
    pub trainable: bool,
}

/// Ordered collection of named tensors. Order of insertion is the
/// serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamKey {
        self.insert(name.into(), tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamKey {
        self.insert(name.into(), tensor, false)
    }

    fn insert(&mut self, name: String, tensor: Tensor, trainable: bool) -> ParamKey {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            tensor: tensor.with_requires_grad(trainable),
            trainable,
        });
        ParamKey(self.entries.len() - 1)
    }

    /// Uniform initialization in `±1/√fan_in`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamKey {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("positive shape");
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> {
        (0..self.entries.len()).map(ParamKey)
    }

    pub fn get(&self, key: ParamKey) -> &Tensor {
        &self.entries[key.0].tensor
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut Tensor {
        &mut self.entries[key.0].tensor
    }

    pub fn name(&self, key: ParamKey) -> &str {
        &self.entries[key.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamKey> {
        self.entries.iter().position(|e| e.name == name).map(ParamKey)
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Copies every entry onto `g`: trainable tensors as gradient-tracked leaves,
    /// buffers as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    g.leaf(e.tensor.clone())
                } else {
                    g.constant(e.tensor.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Adds the gradients of every bound trainable entry into its buffer.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (e, var) in self.entries.iter_mut().zip(&bound.vars) {
            if !e.trainable {
                continue;
            }
            if let Some(g) = grads.get(*var) {
                e.tensor.accumulate_grad(g);
            }
        }
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::config(format!("missing parameter {}", e.name)))?;
            if src.tensor.shape() != e.tensor.shape() {
                return Err(Error::dim(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    src.tensor.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// Graph handles for every entry of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles that were created outside [`ParamStore::bind`] (e.g. by a gradient check).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, key: ParamKey) -> Var {
        self.vars[key.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
