use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, Params};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::Result;

/// Affine layer `x · W + b` with Xavier-initialised weights and zero bias.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(params: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let w = params.add_xavier(&format!("{name}.w"), &[fan_in, fan_out], fan_in, fan_out, rng)?;
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph<'_>, bound: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, bound.var(self.w))?;
        g.add_row(y, bound.var(self.b))
    }
}
