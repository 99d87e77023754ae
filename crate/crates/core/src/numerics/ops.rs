//! Graph-free convenience wrappers around the differentiable ops.

use super::graph::{softmax_in_place, Graph};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.borrowed(a, false), g.borrowed(b, false));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

/// Softmax along any axis of `x`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let n = shape[axis];
    if n == 0 {
        return Err(Error::shape(format!("softmax over empty axis {axis} of {shape:?}")));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut lane = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = out[at(j)];
            }
            softmax_in_place(&mut lane);
            for (j, l) in lane.iter().enumerate() {
                out[at(j)] = *l;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vx, vg, vb) = (g.borrowed(x, false), g.borrowed(gain, false), g.borrowed(bias, false));
    let out = g.layer_norm(vx, vg, vb, eps)?;
    Ok(g.value(out).clone())
}
