use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tensor};
use rand::Rng;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// How a parameter's values were produced at creation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Exactly zero; used for fusion and injection outputs that must start as no-ops.
    Zero,
    /// Exactly one; learnable scales.
    One,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    UniformFanIn,
    /// Fixed sinusoid table, never trained.
    SinusoidFixed,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub init: InitKind,
    pub trainable: bool,
}

/// Flat, ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, init: InitKind, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.params.push(Parameter { name: name.to_string(), value, grad: None, init, trainable });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            if p.init != InitKind::SinusoidFixed {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds parameter gradients from one backward pass onto the stored grads.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.param_grads() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => p.grad = Some(Tensor::new(p.value.shape().to_vec(), g.to_vec()).expect("grad shape")),
            }
        }
    }

    /// Same layout with values converted to another precision; grads dropped.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    init: p.init,
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copies values of every parameter under `from` onto the same suffix under `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) -> Result<()> {
        let pairs: Vec<(ParamId, ParamId)> = self
            .params
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let suffix = p.name.strip_prefix(from)?;
                Some((ParamId(i), self.id(&format!("{to}{suffix}"))?))
            })
            .collect();
        if pairs.is_empty() {
            return Err(Error::Contract(format!("no parameters under {from} to copy")));
        }
        for (src, dst) in pairs {
            let v = self.params[src.0].value.clone();
            self.set_value(dst, v)?;
        }
        Ok(())
    }
}

/// Scoped parameter factory threading a name prefix and the init RNG.
pub struct ParamBuilder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Real, R: Rng> ParamBuilder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        ParamBuilder { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T, R> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        self.uniform_gain(name, shape, fan_in, 1.0)
    }

    /// `U(±gain/√fan_in)`; `gain = √6` is He-uniform for ReLU-like layers.
    pub fn uniform_gain(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> ParamId {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        let value = Tensor::uniform(shape.to_vec(), -bound, bound, self.rng);
        let name = self.full_name(name);
        self.store.insert(&name, value, InitKind::UniformFanIn, true)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let name = self.full_name(name);
        self.store.insert(&name, Tensor::zeros(shape.to_vec()), InitKind::Zero, true)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let name = self.full_name(name);
        self.store.insert(&name, Tensor::ones(shape.to_vec()), InitKind::One, true)
    }

    pub fn fixed(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let name = self.full_name(name);
        self.store.insert(&name, value, InitKind::SinusoidFixed, false)
    }
}
