//! Segment-recurrent Transformer-XL encoder.
//!
//! Positional information enters twice: a learned absolute embedding indexed
//! by position within the segment is added after the input projection, and a
//! learned per-head bias indexed by key-query offset is added to every
//! attention logit. Hidden states of earlier segments are cached per layer as
//! gradient-free memory.

mod encoder;
mod mask;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use encoder::{HiddenSequence, XlEncoder, XlMemory};
pub use mask::{attention_mask, AttentionMask};

/// Attention span: full causal range or the most recent `n` keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Dense,
    Local(usize),
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Dense => f.write_str("dense"),
            Window::Local(w) => write!(f, "{w}"),
        }
    }
}

impl Serialize for Window {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Window::Dense => s.serialize_str("dense"),
            Window::Local(w) => s.serialize_u64(*w as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            Size(u64),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) if w == "dense" => Ok(Window::Dense),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("window must be \"dense\" or a positive integer, got {w:?}"))),
            Raw::Size(n) => Ok(Window::Local(n as usize)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XlConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Cached timesteps per layer.
    pub mem_len: usize,
    pub window: Window,
    pub ff_mult: usize,
    /// Longest segment the encoder accepts; sizes the position tables.
    pub seg_len: usize,
}

impl Default for XlConfig {
    fn default() -> Self {
        Self { d_model: 64, n_heads: 4, n_layers: 2, mem_len: 32, window: Window::Dense, ff_mult: 4, seg_len: 16 }
    }
}

impl XlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ff_mult == 0 || self.seg_len == 0 {
            return Err(Error::Config(format!("encoder sizes must be positive: {self:?}")));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2 for layer normalisation".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.window == Window::Local(0) {
            return Err(Error::Config("attention window must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of distinct key-query offsets the bias table covers.
    pub fn rel_offsets(&self) -> usize {
        self.mem_len + self.seg_len
    }
}
