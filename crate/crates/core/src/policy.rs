//! Q-value head, softmax policy, greedy action selection and the critic.
//!
//! Actions are drawn from a finite vocabulary. Each entry decodes to a
//! 7-vector `(dx, dy, dz, droll, dpitch, dyaw, grasp)` with translations in
//! meters, rotations in radians and a grasp flag in `{0, 1}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Dense, Graph, Params, Rng, Var};

pub const ACTION_DIM: usize = 7;
pub const GRASP: usize = 6;

pub type ActionVec = [f64; ACTION_DIM];

/// Position of an entry in the action vocabulary.
pub type ActionIndex = usize;

/// Discrete action vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSpec {
    pub vocabulary: Vec<ActionVec>,
}

impl ActionSpec {
    pub fn new(vocabulary: Vec<ActionVec>) -> Result<Self> {
        let spec = Self { vocabulary };
        spec.validate()?;
        Ok(spec)
    }

    /// No-op, unit steps along ±x, ±y, ±z, a quarter turn either way about
    /// the vertical axis, and the grasp toggle.
    pub fn grid(step: f64, yaw_step: f64) -> Self {
        let mut vocabulary = vec![[0.0; ACTION_DIM]];
        for axis in 0..3 {
            for sign in [1.0, -1.0] {
                let mut a = [0.0; ACTION_DIM];
                a[axis] = sign * step;
                vocabulary.push(a);
            }
        }
        for sign in [1.0, -1.0] {
            let mut a = [0.0; ACTION_DIM];
            a[5] = sign * yaw_step;
            vocabulary.push(a);
        }
        let mut grasp = [0.0; ACTION_DIM];
        grasp[GRASP] = 1.0;
        vocabulary.push(grasp);
        Self { vocabulary }
    }

    pub fn len(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocabulary.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocabulary.len() < 2 {
            return Err(Error::Config("action vocabulary needs at least two entries".into()));
        }
        for (i, a) in self.vocabulary.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("action {i} is not finite")));
            }
            if a[GRASP] != 0.0 && a[GRASP] != 1.0 {
                return Err(Error::Config(format!("action {i} has grasp value {}", a[GRASP])));
            }
            if self.vocabulary[..i].contains(a) {
                return Err(Error::Config(format!("action {i} duplicates an earlier entry")));
            }
        }
        Ok(())
    }

    pub fn decode(&self, idx: ActionIndex) -> Result<ActionVec> {
        self.vocabulary.get(idx).copied().ok_or(Error::Index { index: idx, len: self.len() })
    }

    /// Entry closest to `a` in Euclidean distance; ties go to the lower index.
    pub fn nearest(&self, a: &ActionVec) -> ActionIndex {
        let dist = |v: &ActionVec| v.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, v) in self.vocabulary.iter().enumerate() {
            let d = dist(v);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// `[K, 7]` matrix of the vocabulary, for differentiable expectations.
    pub fn as_tensor(&self) -> crate::numerics::Tensor {
        let data = self.vocabulary.iter().flatten().copied().collect();
        crate::numerics::Tensor::new(vec![self.len(), ACTION_DIM], data).expect("vocabulary rows are 7 wide")
    }
}

/// Everything the policy emits for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub q: Vec<f64>,
    pub pi: Vec<f64>,
    pub value: f64,
    pub action_index: ActionIndex,
    pub action_vec: ActionVec,
}

impl PolicyOutput {
    pub fn from_heads(q: Vec<f64>, value: f64, spec: &ActionSpec) -> Result<Self> {
        let pi = policy_from_q(&q)?;
        let action_index = select_action(&q)?;
        let action_vec = spec.decode(action_index)?;
        Ok(Self { q, pi, value, action_index, action_vec })
    }
}

fn check_logits(q: &[f64]) -> Result<()> {
    if q.len() < 2 {
        return Err(Error::contract(format!("need at least 2 action values, got {}", q.len())));
    }
    if let Some(i) = q.iter().position(|v| !v.is_finite()) {
        return Err(Error::contract(format!("action value {i} is {}", q[i])));
    }
    Ok(())
}

/// Softmax of the Q-values.
pub fn policy_from_q(q: &[f64]) -> Result<Vec<f64>> {
    check_logits(q)?;
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = q.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Index of the largest Q-value; ties resolve to the lowest index.
pub fn select_action(q: &[f64]) -> Result<ActionIndex> {
    check_logits(q)?;
    let mut best = 0;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    Ok(best)
}

/// `Σ_a π(a) · decode(a)`.
pub fn expected_action(pi: &[f64], spec: &ActionSpec) -> Result<ActionVec> {
    if pi.len() != spec.len() {
        return Err(Error::contract(format!("policy over {} actions, vocabulary has {}", pi.len(), spec.len())));
    }
    if pi.iter().any(|p| !p.is_finite() || *p < 0.0) || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract("expected_action needs a probability vector"));
    }
    let mut out = [0.0; ACTION_DIM];
    for (p, v) in pi.iter().zip(&spec.vocabulary) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += p * x;
        }
    }
    Ok(out)
}

/// Two-layer head: linear, tanh, linear.
#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub hidden: Dense,
    pub out: Dense,
    d_in: usize,
}

impl Head {
    pub fn new(params: &mut Params, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            hidden: Dense::new(params, &format!("{name}.hidden"), d_in, hidden, rng)?,
            out: Dense::new(params, &format!("{name}.out"), hidden, d_out, rng)?,
            d_in,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, bound: &Bound, h: Var) -> Result<Var> {
        let w = g.value(h).cols();
        if w != self.d_in {
            return Err(Error::shape(format!("head expects width {}, got {:?}", self.d_in, g.value(h).shape())));
        }
        let x = self.hidden.forward(g, bound, h)?;
        let x = g.tanh(x);
        self.out.forward(g, bound, x)
    }

    /// Graph-free evaluation for a single encoded state.
    pub fn eval(&self, params: &Params, h: &[f64]) -> Result<Vec<f64>> {
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("encoded state is not finite"));
        }
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.constant(crate::numerics::Tensor::new(vec![1, h.len()], h.to_vec())?);
        let y = self.forward(&mut g, &bound, x)?;
        Ok(g.value(y).data().to_vec())
    }
}

/// Q-value head `Q(a, s_t) = f(H_t)`.
pub fn q_values(head: &Head, params: &Params, h_t: &[f64]) -> Result<Vec<f64>> {
    head.eval(params, h_t)
}

/// Critic head `V(s_t)`.
pub fn state_value(head: &Head, params: &Params, h_t: &[f64]) -> Result<f64> {
    Ok(head.eval(params, h_t)?[0])
}
