//! All trainable parts of the tracker behind one parameter store.

use std::collections::BTreeMap;
use std::path::Path;

use fetap_tensor::io::{read_tensors, write_tensors};
use fetap_tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionMode};
use crate::pipeline::TrackerConfig;
use crate::refine::{EncodingConfig, Refiner, RefinerConfig, TokenLayout};

/// Architecture choices not covered by [`TrackerConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// 1 for grayscale frames, 3 for color.
    pub frame_channels: usize,
    pub widths: Vec<usize>,
    pub fpn_dim: usize,
    /// Kernel of the per-branch fusion convolutions.
    pub fusion_kernel: usize,
    pub refiner: RefinerConfig,
    pub encoding: EncodingConfig,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            frame_channels: 1,
            widths: vec![32, 64, 96, 128],
            fpn_dim: 128,
            fusion_kernel: 3,
            refiner: RefinerConfig::default(),
            encoding: EncodingConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeTapModel {
    pub tracker: TrackerConfig,
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub frame_encoder: Encoder,
    pub event_encoder: Encoder,
    pub fusion: Fusion,
    pub refiner: Refiner,
}

impl FeTapModel {
    pub fn new(tracker: &TrackerConfig, arch: &ArchConfig) -> Result<Self> {
        tracker.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let mut store = ParamStore::new();
        let enc = |in_channels| EncoderConfig {
            in_channels,
            out_channels: tracker.channels,
            stride: tracker.stride,
            widths: arch.widths.clone(),
            fpn_dim: arch.fpn_dim,
        };
        let frame_encoder = Encoder::new(&mut store, "frame_encoder", enc(arch.frame_channels), &mut rng)?;
        let event_encoder = Encoder::new(&mut store, "event_encoder", enc(2 * tracker.bins), &mut rng)?;
        let fusion = Fusion::new(&mut store, "fusion", tracker.channels, arch.fusion_kernel, &mut rng)?;
        let layout = TokenLayout {
            channels: tracker.channels,
            levels: tracker.levels,
            radius: tracker.radius,
            frequencies: arch.encoding.frequencies,
        };
        let refiner = Refiner::new(&mut store, "refiner", arch.refiner.clone(), layout, arch.encoding.clone(), &mut rng)?;
        Ok(Self { tracker: tracker.clone(), arch: arch.clone(), store, frame_encoder, event_encoder, fusion, refiner })
    }

    pub fn fusion_mode(&self) -> FusionMode {
        self.tracker.fusion_mode()
    }

    /// Writes the weight blob and its manifest; the manifest metadata records
    /// both configurations so the model can be rebuilt from the file alone.
    pub fn save(&self, blob_path: &Path, extra: BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra;
        meta.insert("tracker".into(), serde_json::to_string(&self.tracker)?);
        meta.insert("arch".into(), serde_json::to_string(&self.arch)?);
        let params = self.store.params();
        write_tensors(blob_path, params.iter().map(|p| (p.name.as_str(), &p.value)), meta)?;
        Ok(())
    }

    /// Rebuilds a model from a weight file written by [`FeTapModel::save`].
    pub fn load(blob_path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let (manifest, tensors) = read_tensors(blob_path)?;
        let get = |key: &str| {
            manifest
                .metadata
                .get(key)
                .ok_or_else(|| Error::format(blob_path, format!("manifest lacks `{key}` metadata")))
        };
        let tracker: TrackerConfig = serde_json::from_str(get("tracker")?)?;
        let arch: ArchConfig = serde_json::from_str(get("arch")?)?;
        let mut model = Self::new(&tracker, &arch)?;
        model.store.assign(tensors)?;
        Ok((model, manifest.metadata))
    }

    /// Replaces runtime switches (ablation flags, slice rate, windowing) that
    /// do not change the parameter shapes.
    pub fn with_runtime(mut self, runtime: &TrackerConfig) -> Result<Self> {
        runtime.validate()?;
        let t = &self.tracker;
        if (runtime.bins, runtime.stride, runtime.channels, runtime.levels, runtime.radius)
            != (t.bins, t.stride, t.channels, t.levels, t.radius)
        {
            return Err(Error::Config(
                "bins, stride, channels, levels and radius are fixed by the weights".into(),
            ));
        }
        self.tracker = runtime.clone();
        Ok(self)
    }
}
