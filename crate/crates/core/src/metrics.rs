//! Feature age and expected feature age.
//!
//! A track's age is the share of its ground-truth lifespan covered before
//! the first slice where the prediction is missing or off by more than `δ`.
//! A track that fails at its birth slice counts as never tracked: it adds 0
//! to the expected feature age and is left out of the feature age average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::Track;

#[derive(Clone, Debug, PartialEq)]
pub struct GtTrack {
    pub id: u64,
    /// `(t_us, x, y)`, one per slice time in the lifespan.
    pub samples: Vec<(u64, f32, f32)>,
    pub t_birth: u64,
    pub t_death: u64,
}

impl GtTrack {
    /// Lifespan spans the first to the last sample; empty input gives a
    /// zero lifespan at t = 0.
    pub fn new(id: u64, samples: Vec<(u64, f32, f32)>) -> Self {
        let t_birth = samples.first().map_or(0, |s| s.0);
        let t_death = samples.last().map_or(0, |s| s.0);
        Self { id, samples, t_birth, t_death }
    }

    pub fn lifespan_us(&self) -> u64 {
        self.t_death - self.t_birth
    }
}

/// Age of one track at threshold `delta_px`, in `[0, 1]`.
pub fn feature_age(pred: Option<&Track>, gt: &GtTrack, delta_px: f64) -> Result<f64> {
    if gt.t_death <= gt.t_birth || gt.samples.is_empty() {
        return Err(Error::UndefinedMetric(format!("ground-truth track {} has a zero lifespan", gt.id)));
    }
    let pred = pred.map_or(&[][..], |p| p.samples.as_slice());
    let t_fail = gt
        .samples
        .iter()
        .find(|&&(t, gx, gy)| match pred.binary_search_by_key(&t, |s| s.0) {
            Ok(i) => {
                let (_, px, py) = pred[i];
                let (dx, dy) = ((px - gx) as f64, (py - gy) as f64);
                !((dx * dx + dy * dy).sqrt() <= delta_px)
            }
            Err(_) => true,
        })
        .map_or(gt.t_death, |s| s.0);
    Ok((t_fail - gt.t_birth) as f64 / (gt.t_death - gt.t_birth) as f64)
}

/// Mean over every initialized query, never-tracked ones contributing 0.
pub fn expected_feature_age(ages: &[f64], tracked: &[bool]) -> Result<f64> {
    if ages.is_empty() || ages.len() != tracked.len() {
        return Err(Error::UndefinedMetric(format!(
            "expected feature age over {} ages and {} flags",
            ages.len(),
            tracked.len()
        )));
    }
    let total: f64 = ages.iter().zip(tracked).filter(|(_, &t)| t).map(|(a, _)| a).sum();
    Ok(total / ages.len() as f64)
}

/// Mean age over the tracked queries; 0 when none was tracked.
pub fn fa_avg(ages: &[f64], tracked: &[bool]) -> f64 {
    let kept: Vec<f64> = ages.iter().zip(tracked).filter(|(_, &t)| t).map(|(&a, _)| a).collect();
    if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackAge {
    pub id: u64,
    pub age: f64,
    pub tracked: bool,
    pub lifespan_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sequence: String,
    pub delta_px: f64,
    pub per_track: Vec<TrackAge>,
    pub fa_avg: f64,
    pub efa_avg: f64,
}

/// Scores every ground-truth track with a nonzero lifespan against the
/// prediction with the same id.
pub fn evaluate(sequence: &str, pred: &[Track], gt: &[GtTrack], delta_px: f64) -> Result<MetricReport> {
    let mut per_track = Vec::new();
    for g in gt.iter().filter(|g| g.t_death > g.t_birth) {
        let p = pred.iter().find(|p| p.id == g.id);
        let age = feature_age(p, g, delta_px)?;
        per_track.push(TrackAge { id: g.id, age, tracked: age > 0.0, lifespan_us: g.lifespan_us() });
    }
    let ages: Vec<f64> = per_track.iter().map(|t| t.age).collect();
    let tracked: Vec<bool> = per_track.iter().map(|t| t.tracked).collect();
    let efa_avg = expected_feature_age(&ages, &tracked)
        .map_err(|_| Error::UndefinedMetric(format!("sequence {sequence} has no ground-truth track to score")))?;
    Ok(MetricReport { sequence: sequence.into(), delta_px, per_track, fa_avg: fa_avg(&ages, &tracked), efa_avg })
}

/// Mean Euclidean distance over ground-truth samples that have a prediction
/// at the same timestamp.
pub fn mean_endpoint_error(pred: &[Track], gt: &[GtTrack]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for g in gt {
        let Some(p) = pred.iter().find(|p| p.id == g.id) else { continue };
        for &(t, gx, gy) in &g.samples {
            if let Ok(i) = p.samples.binary_search_by_key(&t, |s| s.0) {
                let (_, px, py) = p.samples[i];
                sum += ((px - gx) as f64).hypot((py - gy) as f64);
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}
