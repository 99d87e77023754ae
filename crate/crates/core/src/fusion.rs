//! Per-modality encoders and the fused feature vector.
//!
//! Each sensor stream is mapped to a fixed-width feature; the three features
//! are concatenated in the fixed order rgbd, lidar, touch. The RGB-D encoder
//! is a two-layer strided convolution stack followed by a linear projection;
//! LiDAR and touch use two-layer perceptrons.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, ConvGeometry, Dense, Graph, Params, Rng, Tensor, Var};

pub const RGBD_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgbd,
    Lidar,
    Touch,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Rgbd => "rgbd",
            Modality::Lidar => "lidar",
            Modality::Touch => "touch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub lidar_beams: usize,
    /// Ranges are clipped to this value (meters).
    pub lidar_max_range: f64,
    pub touch_channels: usize,
    pub d_rgbd: usize,
    pub d_lidar: usize,
    pub d_touch: usize,
    pub conv_channels: [usize; 2],
    pub mlp_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            image_height: 16,
            image_width: 16,
            lidar_beams: 32,
            lidar_max_range: 3.75,
            touch_channels: 8,
            d_rgbd: 32,
            d_lidar: 16,
            d_touch: 16,
            conv_channels: [16, 32],
            mlp_hidden: 32,
        }
    }
}

impl FusionConfig {
    pub fn fused_width(&self) -> usize {
        self.d_rgbd + self.d_lidar + self.d_touch
    }

    pub fn width(&self, m: Modality) -> usize {
        match m {
            Modality::Rgbd => self.d_rgbd,
            Modality::Lidar => self.d_lidar,
            Modality::Touch => self.d_touch,
        }
    }

    /// Column range of a modality inside the fused vector.
    pub fn slice(&self, m: Modality) -> std::ops::Range<usize> {
        match m {
            Modality::Rgbd => 0..self.d_rgbd,
            Modality::Lidar => self.d_rgbd..self.d_rgbd + self.d_lidar,
            Modality::Touch => self.d_rgbd + self.d_lidar..self.fused_width(),
        }
    }

    pub fn input_shape(&self, m: Modality) -> Vec<usize> {
        match m {
            Modality::Rgbd => vec![self.image_height, self.image_width, RGBD_CHANNELS],
            Modality::Lidar => vec![self.lidar_beams],
            Modality::Touch => vec![self.touch_channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.d_rgbd, self.d_lidar, self.d_touch, self.mlp_hidden];
        if widths.contains(&0) || self.conv_channels.contains(&0) {
            return Err(Error::Config("fusion widths must be positive".into()));
        }
        if self.image_height < 4 || self.image_width < 4 {
            return Err(Error::Config("images must be at least 4x4".into()));
        }
        if self.lidar_beams == 0 || self.touch_channels == 0 || !(self.lidar_max_range > 0.0) {
            return Err(Error::Config("lidar and touch need at least one channel and a positive range".into()));
        }
        Ok(())
    }
}

/// One multimodal sensor frame. A `None` field is a missing modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `[H, W, 4]`: RGB in `[0, 1]` and a rescaled depth channel in `[0, 1]`.
    pub rgbd: Option<Tensor>,
    /// `[B]` beam ranges in meters.
    pub lidar: Option<Tensor>,
    /// `[C]` contact values.
    pub touch: Option<Tensor>,
}

impl Observation {
    pub fn new(rgbd: Tensor, lidar: Tensor, touch: Tensor) -> Self {
        Self { rgbd: Some(rgbd), lidar: Some(lidar), touch: Some(touch) }
    }

    pub fn get(&self, m: Modality) -> Result<&Tensor> {
        let t = match m {
            Modality::Rgbd => &self.rgbd,
            Modality::Lidar => &self.lidar,
            Modality::Touch => &self.touch,
        };
        t.as_ref().ok_or_else(|| Error::contract(format!("observation is missing the {m} modality")))
    }

    /// Checks presence, shapes, finiteness and value ranges.
    pub fn validate(&self, cfg: &FusionConfig) -> Result<()> {
        for m in [Modality::Rgbd, Modality::Lidar, Modality::Touch] {
            let t = self.get(m)?;
            if t.shape() != cfg.input_shape(m).as_slice() {
                return Err(Error::shape(format!(
                    "{m} input has shape {:?}, config expects {:?}",
                    t.shape(),
                    cfg.input_shape(m)
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("{m} input")));
            }
        }
        if self.get(Modality::Rgbd)?.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("rgbd values must lie in [0, 1]"));
        }
        if self.get(Modality::Lidar)?.data().iter().any(|v| !(0.0..=cfg.lidar_max_range).contains(v)) {
            return Err(Error::contract("lidar ranges must lie in [0, max_range]"));
        }
        Ok(())
    }
}

/// The concatenated per-timestep feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub vec: Tensor,
}

impl FusedFeature {
    pub fn slice(&self, cfg: &FusionConfig, m: Modality) -> &[f64] {
        &self.vec.data()[cfg.slice(m)]
    }
}

/// Linear, GELU, linear.
#[derive(Debug, Clone, Copy)]
struct Perceptron {
    hidden: Dense,
    out: Dense,
}

impl Perceptron {
    fn forward(&self, g: &mut Graph<'_>, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, bound, x)?;
        let h = g.gelu(h);
        self.out.forward(g, bound, h)
    }
}

/// Parameter handles for the three modality encoders.
#[derive(Debug, Clone)]
pub struct FusionEncoder {
    cfg: FusionConfig,
    conv1: Dense,
    conv2: Dense,
    rgbd_out: Dense,
    lidar: Perceptron,
    touch: Perceptron,
}

impl FusionEncoder {
    pub fn new(cfg: &FusionConfig, params: &mut Params, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2] = cfg.conv_channels;
        let g1 = Self::geometry(1, cfg.image_height, cfg.image_width, RGBD_CHANNELS);
        let g2 = Self::geometry(1, g1.out_height(), g1.out_width(), c1);
        let flat = g2.out_height() * g2.out_width() * c2;
        let conv1 = Dense::new(params, "fusion.rgbd.conv1", g1.patch_len(), c1, rng)?;
        let conv2 = Dense::new(params, "fusion.rgbd.conv2", g2.patch_len(), c2, rng)?;
        let rgbd_out = Dense::new(params, "fusion.rgbd.out", flat, cfg.d_rgbd, rng)?;
        let h = cfg.mlp_hidden;
        let lidar = Perceptron {
            hidden: Dense::new(params, "fusion.lidar.hidden", cfg.lidar_beams, h, rng)?,
            out: Dense::new(params, "fusion.lidar.out", h, cfg.d_lidar, rng)?,
        };
        let touch = Perceptron {
            hidden: Dense::new(params, "fusion.touch.hidden", cfg.touch_channels, h, rng)?,
            out: Dense::new(params, "fusion.touch.out", h, cfg.d_touch, rng)?,
        };
        Ok(Self { cfg: cfg.clone(), conv1, conv2, rgbd_out, lidar, touch })
    }

    fn geometry(n: usize, height: usize, width: usize, channels: usize) -> ConvGeometry {
        ConvGeometry { n, height, width, channels, kernel: 3, stride: 2, pad: 1 }
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    /// Encodes one modality for a batch of raw inputs, giving `[n, d_modality]`.
    pub fn encode_modality_batch(&self, g: &mut Graph<'_>, bound: &Bound, m: Modality, raw: &[&Tensor]) -> Result<Var> {
        let expected = self.cfg.input_shape(m);
        for t in raw {
            if t.shape() != expected.as_slice() {
                return Err(Error::shape(format!("{m} input has shape {:?}, config expects {expected:?}", t.shape())));
            }
        }
        let n = raw.len();
        let width: usize = expected.iter().product();
        let mut data = Vec::with_capacity(n * width);
        for t in raw {
            data.extend_from_slice(t.data());
        }
        match m {
            Modality::Rgbd => {
                let cfg = &self.cfg;
                let x = g.constant(Tensor::new(vec![n * cfg.image_height * cfg.image_width, RGBD_CHANNELS], data)?);
                let g1 = Self::geometry(n, cfg.image_height, cfg.image_width, RGBD_CHANNELS);
                let p1 = g.im2col(x, g1)?;
                let h1 = self.conv1.forward(g, bound, p1)?;
                let h1 = g.gelu(h1);
                let g2 = Self::geometry(n, g1.out_height(), g1.out_width(), cfg.conv_channels[0]);
                let p2 = g.im2col(h1, g2)?;
                let h2 = self.conv2.forward(g, bound, p2)?;
                let h2 = g.gelu(h2);
                let flat = g2.out_height() * g2.out_width() * cfg.conv_channels[1];
                let h2 = g.reshape(h2, &[n, flat])?;
                self.rgbd_out.forward(g, bound, h2)
            }
            Modality::Lidar => {
                let scale = 1.0 / self.cfg.lidar_max_range;
                let data = data.into_iter().map(|v| v * scale).collect();
                let x = g.constant(Tensor::new(vec![n, width], data)?);
                self.lidar.forward(g, bound, x)
            }
            Modality::Touch => {
                let x = g.constant(Tensor::new(vec![n, width], data)?);
                self.touch.forward(g, bound, x)
            }
        }
    }

    /// Fuses a batch of observations into `[n, d_rgbd + d_lidar + d_touch]`.
    pub fn fuse_batch(&self, g: &mut Graph<'_>, bound: &Bound, obs: &[&Observation]) -> Result<Var> {
        let mut parts = Vec::with_capacity(3);
        for m in [Modality::Rgbd, Modality::Lidar, Modality::Touch] {
            let raw = obs.iter().map(|o| o.get(m)).collect::<Result<Vec<_>>>()?;
            parts.push(self.encode_modality_batch(g, bound, m, &raw)?);
        }
        g.concat_cols(&parts)
    }

    /// Graph-free encoding of a single input.
    pub fn encode_modality(&self, params: &Params, m: Modality, raw: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let out = self.encode_modality_batch(&mut g, &bound, m, &[raw])?;
        g.value(out).detached().reshape(vec![self.cfg.width(m)])
    }

    /// Graph-free fusion of a single observation.
    pub fn fuse(&self, params: &Params, obs: &Observation) -> Result<FusedFeature> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let out = self.fuse_batch(&mut g, &bound, &[obs])?;
        let vec = g.value(out).detached().reshape(vec![self.cfg.fused_width()])?;
        Ok(FusedFeature { vec })
    }
}
