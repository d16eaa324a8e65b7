//! Named parameter registry.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    /// Dotted path; the first segment names the owning component.
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

impl<T> Parameter<T> {
    pub fn component(&self) -> &str {
        self.name.split('.').next().unwrap_or("")
    }
}

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot uniform for a `[fan_in, fan_out]` matrix.
    XavierUniform,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Panics on duplicate names: those are
    /// programming errors in model construction.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        let mut tensor = tensor;
        tensor.requires_grad = true;
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor, frozen: false });
        id
    }

    pub fn init<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| T::of(d.sample(rng))).collect()
            }
            Init::XavierUniform => {
                let (fan_in, fan_out) = match shape {
                    [a, b] => (*a, *b),
                    _ => (n, n),
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let d = Uniform::new_inclusive(-a, a).expect("valid range");
                (0..n).map(|_| T::of(d.sample(rng))).collect()
            }
        };
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches data"))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Freezes exactly the parameters whose component is in `components`.
    pub fn set_frozen_components(&mut self, components: &[&str]) {
        for p in &mut self.params {
            p.frozen = components.contains(&p.component());
        }
    }

    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Adds `grads` into the stored gradient buffers. Repeated calls without
    /// [`ParamStore::zero_grad`] accumulate.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            self.params[id.0].tensor.accumulate_grad(g);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Replaces every value with the one of the same name in `other`.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<(), String> {
        for p in &mut self.params {
            let src = other.by_name(&p.name).ok_or_else(|| format!("missing parameter {}", p.name))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.tensor.shape(),
                    src.tensor.shape()
                ));
            }
            p.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}
