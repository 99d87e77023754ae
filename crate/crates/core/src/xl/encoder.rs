use rand::Rng as _;

use super::mask::attention_mask;
use super::XlConfig;
use crate::error::{Error, Result};
use crate::numerics::{AttentionLayout, Bound, Dense, Graph, ParamId, Params, Rng, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Per-layer cache of hidden states from earlier segments.
///
/// Entry `l` holds the inputs to layer `l` for the most recent timesteps,
/// oldest first. These are plain values and never carry gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct XlMemory {
    layers: Vec<Tensor>,
}

impl XlMemory {
    pub fn empty(cfg: &XlConfig) -> Self {
        Self { layers: (0..cfg.n_layers).map(|_| Tensor::zeros(&[0, cfg.d_model])).collect() }
    }

    /// Number of cached timesteps.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    fn check(&self, cfg: &XlConfig) -> Result<()> {
        let len = self.len();
        if self.layers.len() != cfg.n_layers {
            return Err(Error::State(format!("memory has {} layers, encoder has {}", self.layers.len(), cfg.n_layers)));
        }
        for (l, t) in self.layers.iter().enumerate() {
            if t.shape().len() != 2 || t.cols() != cfg.d_model || t.rows() != len {
                return Err(Error::State(format!("memory layer {l} has shape {:?}", t.shape())));
            }
            if t.requires_grad() {
                return Err(Error::State(format!("memory layer {l} tracks gradients")));
            }
        }
        if len > cfg.mem_len {
            return Err(Error::State(format!("memory holds {len} steps, mem_len is {}", cfg.mem_len)));
        }
        Ok(())
    }
}

/// Encoded rows `{H_t}` of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence {
    pub h: Tensor,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    rel: ParamId,
    ln2: (ParamId, ParamId),
    ff_in: Dense,
    ff_out: Dense,
}

/// Parameter handles and structure of the encoder.
#[derive(Debug, Clone)]
pub struct XlEncoder {
    cfg: XlConfig,
    d_in: usize,
    proj: Dense,
    abs_pos: ParamId,
    blocks: Vec<Block>,
    ln_out: (ParamId, ParamId),
}

fn layer_norm_params(params: &mut Params, name: &str, d: usize) -> Result<(ParamId, ParamId)> {
    let g = params.add(format!("{name}.gain"), Tensor::full(&[d], 1.0))?;
    let b = params.add(format!("{name}.bias"), Tensor::zeros(&[d]))?;
    Ok((g, b))
}

impl XlEncoder {
    pub fn new(cfg: &XlConfig, d_in: usize, params: &mut Params, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let proj = Dense::new(params, "xl.proj", d_in, d, rng)?;
        let pos = (0..cfg.seg_len * d).map(|_| rng.random_range(-0.02..0.02)).collect();
        let abs_pos = params.add("xl.abs_pos", Tensor::new(vec![cfg.seg_len, d], pos)?)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("xl.layer{l}");
            let ln1 = layer_norm_params(params, &format!("{p}.ln1"), d)?;
            let wq = params.add_xavier(&format!("{p}.attn.wq"), &[d, d], d, d, rng)?;
            let wk = params.add_xavier(&format!("{p}.attn.wk"), &[d, d], d, d, rng)?;
            let wv = params.add_xavier(&format!("{p}.attn.wv"), &[d, d], d, d, rng)?;
            let wo = params.add_xavier(&format!("{p}.attn.wo"), &[d, d], d, d, rng)?;
            let rel = params.add(format!("{p}.attn.rel_bias"), Tensor::zeros(&[cfg.n_heads, cfg.rel_offsets()]))?;
            let ln2 = layer_norm_params(params, &format!("{p}.ln2"), d)?;
            let ff_in = Dense::new(params, &format!("{p}.ff.in"), d, d * cfg.ff_mult, rng)?;
            let ff_out = Dense::new(params, &format!("{p}.ff.out"), d * cfg.ff_mult, d, rng)?;
            blocks.push(Block { ln1, wq, wk, wv, wo, rel, ln2, ff_in, ff_out });
        }
        let ln_out = layer_norm_params(params, "xl.ln_out", d)?;
        Ok(Self { cfg: cfg.clone(), d_in, proj, abs_pos, blocks, ln_out })
    }

    pub fn config(&self) -> &XlConfig {
        &self.cfg
    }

    pub fn input_width(&self) -> usize {
        self.d_in
    }

    /// Affine map to `d_model` plus the absolute embedding of each
    /// segment-local position.
    pub fn project_input(&self, g: &mut Graph<'_>, bound: &Bound, x: Var) -> Result<Var> {
        let tx = g.value(x);
        if tx.shape().len() != 2 || tx.cols() != self.d_in {
            return Err(Error::shape(format!("encoder input {:?}, expected [T, {}]", tx.shape(), self.d_in)));
        }
        let t = tx.rows();
        if t > self.cfg.seg_len {
            return Err(Error::shape(format!("segment of {t} steps exceeds seg_len {}", self.cfg.seg_len)));
        }
        let h = self.proj.forward(g, bound, x)?;
        let pos = g.slice_rows(bound.var(self.abs_pos), 0, t)?;
        g.add(h, pos)
    }

    /// Encodes one segment `[T, d_in]` given the memory of earlier segments.
    ///
    /// Returns the `[T, d_model]` hidden rows and the updated memory.
    pub fn encode_segment_graph(&self, g: &mut Graph<'_>, bound: &Bound, x: Var, mem: &XlMemory) -> Result<(Var, XlMemory)> {
        mem.check(&self.cfg)?;
        let mut h = self.project_input(g, bound, x)?;
        let t = g.value(h).rows();
        if t == 0 {
            return Ok((h, mem.clone()));
        }
        let m = mem.len();
        let mask = attention_mask(t, m, self.cfg.window)?;
        let mut next = Vec::with_capacity(self.blocks.len());
        for (block, cached) in self.blocks.iter().zip(&mem.layers) {
            next.push(Self::roll_memory(cached, g.value(h), self.cfg.mem_len)?);
            let ctx = if m == 0 {
                h
            } else {
                let c = g.constant(cached.clone());
                g.concat_rows(&[c, h])?
            };
            let normed = g.layer_norm(ctx, bound.var(block.ln1.0), bound.var(block.ln1.1), LN_EPS)?;
            let qin = if m == 0 { normed } else { g.slice_rows(normed, m, t)? };
            let q = g.matmul(qin, bound.var(block.wq))?;
            let k = g.matmul(normed, bound.var(block.wk))?;
            let v = g.matmul(normed, bound.var(block.wv))?;
            let layout = AttentionLayout { n_heads: self.cfg.n_heads, query_offset: m, key_ranges: mask.ranges().to_vec() };
            let a = g.attention(q, k, v, bound.var(block.rel), layout)?;
            let a = g.matmul(a, bound.var(block.wo))?;
            h = g.add(h, a)?;

            let f = g.layer_norm(h, bound.var(block.ln2.0), bound.var(block.ln2.1), LN_EPS)?;
            let f = block.ff_in.forward(g, bound, f)?;
            let f = g.gelu(f);
            let f = block.ff_out.forward(g, bound, f)?;
            h = g.add(h, f)?;
        }
        let out = g.layer_norm(h, bound.var(self.ln_out.0), bound.var(self.ln_out.1), LN_EPS)?;
        Ok((out, XlMemory { layers: next }))
    }

    /// Appends `fresh` to `cached` and keeps the most recent `mem_len` rows.
    fn roll_memory(cached: &Tensor, fresh: &Tensor, mem_len: usize) -> Result<Tensor> {
        let d = fresh.cols();
        let total = cached.rows() + fresh.rows();
        let keep = total.min(mem_len);
        let mut data = Vec::with_capacity(keep * d);
        data.extend(cached.data().iter().chain(fresh.data()).skip((total - keep) * d).copied());
        Tensor::new(vec![keep, d], data)
    }

    /// Graph-free segment encoding.
    pub fn encode_segment(&self, params: &Params, features: &Tensor, mem: &XlMemory) -> Result<(HiddenSequence, XlMemory)> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.borrowed(features, false);
        let (h, mem) = self.encode_segment_graph(&mut g, &bound, x, mem)?;
        Ok((HiddenSequence { h: g.value(h).detached() }, mem))
    }

    /// Encodes an arbitrarily long stream by chunking it into `seg_len`
    /// segments and carrying memory across them, starting from `mem`.
    pub fn encode_stream_graph(&self, g: &mut Graph<'_>, bound: &Bound, x: Var, mem: &XlMemory) -> Result<(Var, XlMemory)> {
        let total = g.value(x).rows();
        if total <= self.cfg.seg_len {
            return self.encode_segment_graph(g, bound, x, mem);
        }
        let mut mem = mem.clone();
        let mut outs = Vec::new();
        let mut start = 0;
        while start < total {
            let len = self.cfg.seg_len.min(total - start);
            let seg = g.slice_rows(x, start, len)?;
            let (h, next) = self.encode_segment_graph(g, bound, seg, &mem)?;
            outs.push(h);
            mem = next;
            start += len;
        }
        Ok((g.concat_rows(&outs)?, mem))
    }
}
