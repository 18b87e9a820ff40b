//! Named trainable parameters.
//!
//! Model construction goes through [`ParamSink`]: asking twice for the same
//! name yields the same [`ParamId`], which is how parameter sharing is wired.
//! [`ParamStore`] allocates and initialises values; [`Census`] only records
//! shapes so full-size models can be counted without allocating them.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::rng::{fnv1a, stream, Domain};
use crate::scalar::Scalar;
use crate::tensor::{assert_finite, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

impl Init {
    /// Glorot-uniform bound for the given fan-in and fan-out.
    pub fn glorot(fan_in: usize, fan_out: usize) -> Self {
        Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt())
    }
}

pub trait ParamSink {
    /// Returns the parameter called `name`, creating it on first request.
    /// Later requests must agree on the shape.
    fn declare(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId>;
}

#[derive(Clone, Debug)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Number of places in the model that reference this tensor.
    pub uses: usize,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn declare_in(
    infos: &mut Vec<ParamInfo>,
    index: &mut HashMap<String, ParamId>,
    name: &str,
    shape: &[usize],
) -> Result<(ParamId, bool)> {
    if let Some(&id) = index.get(name) {
        let info = &mut infos[id.0];
        if info.shape != shape {
            return Err(Error::Config(format!(
                "parameter {name} redeclared with shape {shape:?}, was {:?}",
                info.shape
            )));
        }
        info.uses += 1;
        return Ok((id, false));
    }
    let id = ParamId(infos.len());
    infos.push(ParamInfo {
        name: name.to_string(),
        shape: shape.to_vec(),
        uses: 1,
    });
    index.insert(name.to_string(), id);
    Ok((id, true))
}

/// Shape-only record of a model's parameters.
#[derive(Default, Debug, Clone)]
pub struct Census {
    infos: Vec<ParamInfo>,
    index: HashMap<String, ParamId>,
}

impl ParamSink for Census {
    fn declare(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<ParamId> {
        Ok(declare_in(&mut self.infos, &mut self.index, name, shape)?.0)
    }
}

impl Census {
    pub fn params(&self) -> &[ParamInfo] {
        &self.infos
    }

    /// Number of distinct trainable scalars.
    pub fn unique_count(&self) -> usize {
        self.infos.iter().map(ParamInfo::numel).sum()
    }

    /// Scalars counted once per use, i.e. the size without sharing.
    pub fn aliased_count(&self) -> usize {
        self.infos.iter().map(|p| p.numel() * p.uses).sum()
    }

    /// Unique count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.infos
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(ParamInfo::numel)
            .sum()
    }
}

/// Allocated parameters with gradient accumulators.
pub struct ParamStore<S> {
    seed: u64,
    infos: Vec<ParamInfo>,
    index: HashMap<String, ParamId>,
    values: Vec<Tensor<S>>,
    grads: Vec<Vec<S>>,
}

impl<S: Scalar> ParamSink for ParamStore<S> {
    fn declare(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let (id, fresh) = declare_in(&mut self.infos, &mut self.index, name, shape)?;
        if fresh {
            let n: usize = shape.iter().product();
            let mut rng = stream(self.seed, Domain::Init, fnv1a(name.as_bytes()));
            let data: Vec<S> = (0..n)
                .map(|_| match init {
                    Init::Zeros => S::zero(),
                    Init::Ones => S::one(),
                    Init::Uniform(b) => S::of(rng.random_range(-b..=b)),
                    Init::Normal(sd) => {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        S::of(z * sd)
                    }
                })
                .collect();
            self.values.push(Tensor::new(shape.to_vec(), data)?);
            self.grads.push(vec![S::zero(); n]);
        }
        Ok(id)
    }
}

impl<S: Scalar> ParamStore<S> {
    /// Empty store; initial values are keyed by `(seed, parameter name)`.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            infos: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.infos[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[S] {
        &self.grads[id.0]
    }

    pub fn unique_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    /// Adds the gradients of every parameter bound on `graph`.
    pub fn accumulate(&mut self, graph: &Graph<S>, grads: &Gradients<S>) {
        for (id, var) in graph.bound_params() {
            if let Some(g) = grads.get(var) {
                for (a, &b) in self.grads[id.0].iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    /// Fails on the first parameter whose gradient is not finite.
    pub fn check_grads(&self) -> Result<()> {
        for (info, g) in self.infos.iter().zip(&self.grads) {
            assert_finite(&format!("gradient of {}", info.name), g)?;
        }
        Ok(())
    }

    pub fn check_values(&self) -> Result<()> {
        for (info, v) in self.infos.iter().zip(&self.values) {
            v.assert_finite(&info.name)?;
        }
        Ok(())
    }

    /// Replaces values by name, e.g. from a checkpoint.
    pub fn load_values(&mut self, named: Vec<(String, Tensor<S>)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                named.len(),
                self.values.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if t.shape() != self.values[id.0].shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = t;
        }
        Ok(())
    }
}
