//! FPN-style convolutional encoder shared by the frame and event branches
//! (same architecture, separate weights).
//!
//! A stride-2 stem is followed by residual stages that each halve the
//! resolution. The deepest stage is projected, upsampled and added to the
//! projection of the stage at the output stride, then smoothed to `C`
//! channels.

use fetap_tensor::{Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv, RELU_GAIN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Output stride, 4 or 8.
    pub stride: usize,
    /// Stem width followed by one width per residual stage; at least
    /// `log2(stride) + 1` entries are used.
    pub widths: Vec<usize>,
    /// Width of the lateral projections in the top-down path.
    pub fpn_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride, 4 | 8) {
            return Err(Error::Config(format!("encoder stride must be 4 or 8, got {}", self.stride)));
        }
        if self.out_channels == 0 || self.in_channels == 0 || self.fpn_dim == 0 {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        let need = self.levels() + 1;
        if self.widths.len() < need || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "stride {} needs {need} positive stage widths, got {:?}",
                self.stride, self.widths
            )));
        }
        Ok(())
    }

    /// Number of residual stages after the stem.
    fn levels(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }

    /// Output extents for an `h` × `w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv,
    a: Conv,
    b: Conv,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    stem: Conv,
    stages: Vec<Stage>,
    lateral_fine: Conv,
    lateral_coarse: Conv,
    smooth: Conv,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.widths;
        let stem = Conv::new(store, &format!("{name}.stem"), cfg.in_channels, w[0], 7, 2, RELU_GAIN, rng)?;
        let mut stages = Vec::new();
        for i in 1..=cfg.levels() {
            let n = format!("{name}.stage{i}");
            stages.push(Stage {
                down: Conv::new(store, &format!("{n}.down"), w[i - 1], w[i], 3, 2, RELU_GAIN, rng)?,
                a: Conv::new(store, &format!("{n}.a"), w[i], w[i], 3, 1, RELU_GAIN, rng)?,
                // the residual branch starts small so each stage is close to its shortcut
                b: Conv::new(store, &format!("{n}.b"), w[i], w[i], 3, 1, 0.5, rng)?,
            });
        }
        let l = cfg.levels();
        let lateral_fine = Conv::new(store, &format!("{name}.lat_fine"), w[l - 1], cfg.fpn_dim, 1, 1, 1.0, rng)?;
        let lateral_coarse = Conv::new(store, &format!("{name}.lat_coarse"), w[l], cfg.fpn_dim, 1, 1, 1.0, rng)?;
        let smooth = Conv::new(store, &format!("{name}.smooth"), cfg.fpn_dim, cfg.out_channels, 3, 1, 1.0, rng)?;
        Ok(Self { cfg, stem, stages, lateral_fine, lateral_coarse, smooth })
    }

    /// `input` is `[Cin, H, W]`; returns `[C, ceil(H/S), ceil(W/S)]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Result<Var> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "encoder expects [{}, H, W] input, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        if shape[1] < self.cfg.stride || shape[2] < self.cfg.stride {
            return Err(Error::Config(format!(
                "{}x{} input is smaller than one {}-pixel feature cell",
                shape[1], shape[2], self.cfg.stride
            )));
        }
        let x = self.stem.forward(g, store, input)?;
        let mut x = g.relu(x);
        let mut feats = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let d = s.down.forward(g, store, x)?;
            let d = g.relu(d);
            let h = s.a.forward(g, store, d)?;
            let h = g.relu(h);
            let h = s.b.forward(g, store, h)?;
            let sum = g.add(d, h)?;
            x = g.relu(sum);
            feats.push(x);
        }
        // levels() >= 2 for both supported strides
        let fine = feats[feats.len() - 2];
        let coarse = feats[feats.len() - 1];
        let lf = self.lateral_fine.forward(g, store, fine)?;
        let lc = self.lateral_coarse.forward(g, store, coarse)?;
        let (th, tw) = (g.shape(lf)[1], g.shape(lf)[2]);
        let up = g.upsample_nearest2(lc, th, tw)?;
        let top = g.add(lf, up)?;
        self.smooth.forward(g, store, top)
    }
}
