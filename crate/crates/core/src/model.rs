//! The full stack: fusion encoders, XL encoder, Q head and critic head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionEncoder, Observation};
use crate::numerics::{derive_seed, rng_from_seed, Bound, Graph, Params, Tensor, Var};
use crate::policy::{ActionSpec, Head, PolicyOutput};
use crate::xl::{XlConfig, XlEncoder, XlMemory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub xl: XlConfig,
    /// Hidden width of the Q and critic heads.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { fusion: FusionConfig::default(), xl: XlConfig::default(), head_hidden: 64 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.xl.validate()?;
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Batched forward result. Rows `offsets[i]..offsets[i + 1]` belong to episode `i`.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[N, K]` action values.
    pub q: Var,
    /// `[N, 1]` state values.
    pub v: Var,
    pub offsets: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    spec: ActionSpec,
    params: Params,
    fusion: FusionEncoder,
    encoder: XlEncoder,
    q_head: Head,
    v_head: Head,
}

impl Model {
    pub fn new(cfg: &ModelConfig, spec: ActionSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        let mut params = Params::new();
        let mut rng = rng_from_seed(derive_seed(seed, 0x6d6f64656c));
        let fusion = FusionEncoder::new(&cfg.fusion, &mut params, &mut rng)?;
        let encoder = XlEncoder::new(&cfg.xl, cfg.fusion.fused_width(), &mut params, &mut rng)?;
        let d = cfg.xl.d_model;
        let q_head = Head::new(&mut params, "head.q", d, cfg.head_hidden, spec.len(), &mut rng)?;
        let v_head = Head::new(&mut params, "head.value", d, cfg.head_hidden, 1, &mut rng)?;
        Ok(Self { cfg: cfg.clone(), spec, params, fusion, encoder, q_head, v_head })
    }

    /// Rebuilds a model from stored tensors. Names and shapes must match the
    /// architecture described by `cfg` and `spec` exactly.
    pub fn from_named(cfg: &ModelConfig, spec: ActionSpec, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(cfg, spec, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, architecture needs {}",
                named.len(),
                model.params.len()
            )));
        }
        for (name, t) in named {
            let id = model.params.id(&name).ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if model.params.get(id).shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, architecture needs {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            model.params.assign(id, t.data())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn action_spec(&self) -> &ActionSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn fusion(&self) -> &FusionEncoder {
        &self.fusion
    }

    pub fn encoder(&self) -> &XlEncoder {
        &self.encoder
    }

    pub fn q_head(&self) -> &Head {
        &self.q_head
    }

    pub fn value_head(&self) -> &Head {
        &self.v_head
    }

    /// Encodes each episode from empty memory and applies both heads.
    pub fn forward(&self, g: &mut Graph<'_>, bound: &Bound, episodes: &[Vec<&Observation>]) -> Result<Forward> {
        let mut offsets = vec![0];
        for ep in episodes {
            offsets.push(offsets.last().unwrap() + ep.len());
        }
        let flat: Vec<&Observation> = episodes.iter().flatten().copied().collect();
        let f = self.fusion.fuse_batch(g, bound, &flat)?;
        let mut hs = Vec::with_capacity(episodes.len());
        for w in offsets.windows(2) {
            if w[1] == w[0] {
                continue;
            }
            let x = g.slice_rows(f, w[0], w[1] - w[0])?;
            let (h, _) = self.encoder.encode_stream_graph(g, bound, x, &XlMemory::empty(&self.cfg.xl))?;
            hs.push(h);
        }
        let h = if hs.is_empty() {
            g.constant(Tensor::zeros(&[0, self.cfg.xl.d_model]))
        } else {
            g.concat_rows(&hs)?
        };
        let q = self.q_head.forward(g, bound, h)?;
        let v = self.v_head.forward(g, bound, h)?;
        Ok(Forward { q, v, offsets })
    }

    pub fn stream(&self) -> PolicyStream<'_> {
        PolicyStream::new(self)
    }
}

/// Closed-loop runner that feeds one observation at a time.
///
/// The current partial segment is re-encoded on each step against the memory
/// of completed segments, so every output equals the corresponding row of the
/// batched [`Model::forward`] over the same episode.
#[derive(Debug, Clone)]
pub struct PolicyStream<'m> {
    model: &'m Model,
    mem: XlMemory,
    segment: Vec<f64>,
}

impl<'m> PolicyStream<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self { model, mem: XlMemory::empty(&model.cfg.xl), segment: Vec::new() }
    }

    pub fn memory(&self) -> &XlMemory {
        &self.mem
    }

    pub fn step(&mut self, obs: &Observation) -> Result<PolicyOutput> {
        let m = self.model;
        let fused = m.fusion.fuse(&m.params, obs)?;
        let width = m.cfg.fusion.fused_width();
        self.segment.extend_from_slice(fused.vec.data());
        let t = self.segment.len() / width;
        let x = Tensor::new(vec![t, width], self.segment.clone())?;
        let (hidden, next) = m.encoder.encode_segment(&m.params, &x, &self.mem)?;
        if t == m.cfg.xl.seg_len {
            self.mem = next;
            self.segment.clear();
        }
        let h_t = hidden.h.row(t - 1);
        let q = m.q_head.eval(&m.params, h_t)?;
        let value = m.v_head.eval(&m.params, h_t)?[0];
        if !value.is_finite() || q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("policy output at step {t} of the current segment")));
        }
        PolicyOutput::from_heads(q, value, &m.spec)
    }
}
