//! Iteration-weighted L1 trajectory loss.

use fetap_tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Base of the iteration weights `γ^(M−m)`.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 0.8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("loss gamma must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    /// Weights for snapshots `1..=M`; the last one is 1.
    pub fn weights(&self, iterations: usize) -> Vec<f64> {
        (1..=iterations).map(|m| self.gamma.powi((iterations - m) as i32)).collect()
    }
}

/// `Σ_m γ^(M−m) · mean |P̂⁽ᵐ⁾ − P_gt|₁`.
///
/// Every snapshot and `gt` are `[R, 2]` position rows; `mask[r]` selects the
/// rows that count (1) or not (0), and the mean runs over selected rows. A
/// mask with no selected row gives a zero loss.
pub fn window_loss<T: Scalar>(
    g: &mut Graph<T>,
    snapshots: &[Var],
    gt: &Tensor<T>,
    mask: &[bool],
    cfg: &LossConfig,
) -> Result<Var> {
    if snapshots.is_empty() {
        return Err(Error::Usage("window loss needs at least one snapshot".into()));
    }
    let rows = mask.len();
    if gt.shape() != [rows, 2] {
        return Err(Error::Usage(format!("ground truth shape {:?} does not match {rows} masked rows", gt.shape())));
    }
    if let Some(s) = snapshots.iter().find(|&&s| g.shape(s) != [rows, 2]) {
        return Err(Error::Usage(format!("snapshot shape {:?} does not match ground truth [{rows}, 2]", g.shape(*s))));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let norm = if count == 0 { 0.0 } else { 1.0 / count as f64 };
    let target = g.constant(gt.clone());
    let weights = mask.iter().flat_map(|&m| {
        let w = if m { T::of(norm) } else { T::zero() };
        [w, w]
    });
    let weights = g.constant(Tensor::new(vec![rows, 2], weights.collect())?);
    let mut total: Option<Var> = None;
    for (&s, w) in snapshots.iter().zip(cfg.weights(snapshots.len())) {
        let d = g.sub(s, target)?;
        let d = g.abs(d);
        let d = g.mul(d, weights)?;
        let term = g.sum(d);
        let term = g.scale(term, T::of(w));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty snapshots"))
}
