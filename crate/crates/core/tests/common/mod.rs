#![allow(dead_code)]

use fetap_core::dataset::Sequence;
use fetap_core::model::{ArchConfig, FeTapModel};
use fetap_core::pipeline::{Track, TrackerConfig};
use fetap_core::query::QuerySpec;
use fetap_core::refine::RefinerConfig;
use fetap_core::synth::{generate_sample, SynthConfig};

pub fn small_tracker() -> TrackerConfig {
    TrackerConfig { channels: 16, ..TrackerConfig::default() }
}

pub fn small_arch() -> ArchConfig {
    ArchConfig {
        widths: vec![8, 12, 16],
        fpn_dim: 16,
        fusion_kernel: 3,
        refiner: RefinerConfig { blocks: 1, heads: 2, dim: 32, mlp_ratio: 2 },
        seed: 5,
        ..ArchConfig::default()
    }
}

pub fn model(tracker: &TrackerConfig) -> FeTapModel {
    FeTapModel::new(tracker, &small_arch()).unwrap()
}

/// 48x40 scene, 24 Hz frames, 40 slices at 5 ms; one extra query is born at
/// the third frame.
pub fn fixture() -> Sequence {
    let cfg = SynthConfig {
        width: 48,
        height: 40,
        duration_us: 195_000,
        frame_rate_hz: 24.0,
        queries: 5,
        min_sprites: 2,
        max_sprites: 2,
        ..SynthConfig::default()
    };
    let mut seq = Sequence::from_sample("fixture", generate_sample(&cfg, 21).unwrap());
    let t_late = seq.frames[2].0;
    seq.queries.push(QuerySpec { id: 100, t_us: t_late, x: 20.0, y: 17.5 });
    seq
}

pub fn max_track_diff(a: &[Track], b: &[Track]) -> f32 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.samples.len(), y.samples.len());
        for (p, q) in x.samples.iter().zip(&y.samples) {
            assert_eq!(p.0, q.0);
            worst = worst.max((p.1 - q.1).abs()).max((p.2 - q.2).abs());
        }
    }
    worst
}
