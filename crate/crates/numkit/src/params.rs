//! Named trainable parameters and their seeded initialization.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::array::DenseArray;
use crate::error::{NumError, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct TrainableParam {
    pub name: String,
    pub value: DenseArray,
    pub gradient: DenseArray,
    /// Running average of squared gradients.
    pub sq_grad: DenseArray,
    /// Running average of squared updates.
    pub sq_update: DenseArray,
}

impl TrainableParam {
    pub fn new(name: impl Into<String>, value: DenseArray) -> Self {
        let zeros = DenseArray::zeros(value.shape());
        Self {
            name: name.into(),
            gradient: zeros.clone(),
            sq_grad: zeros.clone(),
            sq_update: zeros,
            value,
        }
    }
}

/// How a parameter should be initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±√(6/(fan_in+fan_out)); rank-1 shapes use fan_out = 1.
    Glorot,
    Zeros,
    Ones,
}

/// An ordered collection of named parameters.
///
/// Insertion order is the iteration order, which fixes the layout of
/// checkpoints and the order of optimizer updates.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<TrainableParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseArray) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(NumError::Validation(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(TrainableParam::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let value = init_array(shape, init, rng);
        self.add(name, value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| NumError::Validation(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &TrainableParam {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut TrainableParam {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseArray {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &TrainableParam)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut TrainableParam> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.gradient.values_mut().fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.gradient.values_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Copies values of every parameter in `other` whose name exists here.
    /// Returns the names that were copied; shape mismatches are errors.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for src in &other.params {
            if let Some(id) = self.find(&src.name) {
                let dst = &mut self.params[id.0];
                if dst.value.shape() != src.value.shape() {
                    return Err(NumError::dim(
                        "load_matching",
                        dst.value.shape(),
                        src.value.shape(),
                    ));
                }
                dst.value = src.value.clone();
                copied.push(src.name.clone());
            }
        }
        Ok(copied)
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// parameters, in store order.
    pub fn hash_where(&self, mut keep: impl FnMut(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| keep(&p.name)) {
            hasher.update(p.name.as_bytes());
            for d in p.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in p.value.values() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }

    /// Name of the first parameter holding a non-finite value or gradient.
    pub fn first_non_finite(&self) -> Option<String> {
        self.params
            .iter()
            .find(|p| !p.value.all_finite() || !p.gradient.all_finite())
            .map(|p| p.name.clone())
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

pub fn init_array<R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> DenseArray {
    match init {
        Init::Zeros => DenseArray::zeros(shape),
        Init::Ones => DenseArray::filled(shape, 1.0),
        Init::Glorot => {
            let (fan_in, fan_out) = match shape {
                [n] => (*n, 1),
                [r, c] => (*r, *c),
                _ => {
                    let last = *shape.last().unwrap_or(&1);
                    (shape.iter().product::<usize>() / last, last)
                }
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut out = DenseArray::zeros(shape);
            for v in out.values_mut() {
                *v = rng.random_range(-limit..limit);
            }
            out
        }
    }
}
