//! Parameterised building blocks shared by the front-end, blocks and heads.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamSink, ParamStore};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map over the last dimension.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn declare(sink: &mut impl ParamSink, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: sink.declare(&format!("{name}.weight"), &[input, output], Init::glorot(input, output))?,
            bias: sink.declare(&format!("{name}.bias"), &[output], Init::Zeros)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn declare(sink: &mut impl ParamSink, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: sink.declare(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: sink.declare(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LAYER_NORM_EPS);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.affine(n, gamma, beta)
    }
}
