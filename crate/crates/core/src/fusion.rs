//! Evolution-aware fusion of frame features with the events that followed the
//! frame, gated by recent motion.
//!
//! ```text
//! F_e' = ReLU(Conv(F_e))          F_i' = ReLU(Conv(F_i))
//! β    = Sigmoid(Linear(ΔP_prev))
//! F    = ReLU(Conv(β·F_i' + (1 − β)·F_e') + Conv1x1(F_i'))
//! ```

use fetap_tensor::{Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv, Linear, RELU_GAIN};

/// Which inputs reach the fused map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Full,
    /// The fused map is the frame feature map itself.
    FramesOnly,
    /// Only the event branch: `ReLU(Conv(F_e'))`.
    EventsOnly,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    event_conv: Conv,
    frame_conv: Conv,
    fuse_conv: Conv,
    skip: Conv,
    gate: Linear,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("fusion kernel must be odd, got {kernel}")));
        }
        let c = channels;
        Ok(Self {
            event_conv: Conv::new(store, &format!("{name}.event"), c, c, kernel, 1, RELU_GAIN, rng)?,
            frame_conv: Conv::new(store, &format!("{name}.frame"), c, c, kernel, 1, RELU_GAIN, rng)?,
            fuse_conv: Conv::new(store, &format!("{name}.fuse"), c, c, 3, 1, 1.0, rng)?,
            skip: Conv::new(store, &format!("{name}.skip"), c, c, 1, 1, 1.0, rng)?,
            gate: Linear::zeros(store, &format!("{name}.gate"), 1, 1)?,
        })
    }

    /// `F_i'`, which only depends on the frame and can be cached per frame.
    pub fn frame_branch(&self, g: &mut Graph, store: &ParamStore, frame_features: Var) -> Result<Var> {
        let y = self.frame_conv.forward(g, store, frame_features)?;
        Ok(g.relu(y))
    }

    /// Gate value `β` for a mean flow magnitude, as a `[1]` graph value.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, mean_flow: f32) -> Result<Var> {
        let dp = g.constant(Tensor::new(vec![1], vec![mean_flow])?);
        let z = self.gate.forward(g, store, dp)?;
        Ok(g.sigmoid(z))
    }

    /// Fused map. `frame_branch` is the output of [`Fusion::frame_branch`]
    /// and may be omitted in events-only mode; `frame_features` is only read
    /// in frames-only mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mode: FusionMode,
        frame_features: Option<Var>,
        frame_branch: Option<Var>,
        event_features: Option<Var>,
        mean_flow: f32,
    ) -> Result<Var> {
        let missing = |what: &str| Error::Usage(format!("{what} required by fusion mode {mode:?}"));
        match mode {
            FusionMode::FramesOnly => frame_features.ok_or_else(|| missing("frame features")),
            FusionMode::EventsOnly => {
                let fe = event_features.ok_or_else(|| missing("event features"))?;
                let e = self.event_conv.forward(g, store, fe)?;
                let e = g.relu(e);
                let y = self.fuse_conv.forward(g, store, e)?;
                Ok(g.relu(y))
            }
            FusionMode::Full => {
                let fi = frame_branch.ok_or_else(|| missing("frame branch"))?;
                let fe = event_features.ok_or_else(|| missing("event features"))?;
                if g.shape(fi) != g.shape(fe) {
                    return Err(Error::Config(format!(
                        "frame features {:?} and event features {:?} differ in shape",
                        g.shape(fi),
                        g.shape(fe)
                    )));
                }
                let e = self.event_conv.forward(g, store, fe)?;
                let e = g.relu(e);
                let beta = self.gate(g, store, mean_flow)?;
                let a = g.scale_by(fi, beta)?;
                let one_minus = {
                    let nb = g.scale(beta, -1.0);
                    g.add_scalar(nb, 1.0)
                };
                let b = g.scale_by(e, one_minus)?;
                let mix = g.add(a, b)?;
                let y = self.fuse_conv.forward(g, store, mix)?;
                let s = self.skip.forward(g, store, fi)?;
                let sum = g.add(y, s)?;
                Ok(g.relu(sum))
            }
        }
    }
}

/// Mean Euclidean displacement between consecutive predictions of the active
/// queries; 0 when nothing is active.
pub fn mean_flow(previous: &[[f32; 2]], current: &[[f32; 2]]) -> f32 {
    let n = previous.len().min(current.len());
    if n == 0 {
        return 0.0;
    }
    let total: f64 = previous
        .iter()
        .zip(current)
        .map(|(a, b)| {
            let (dx, dy) = ((b[0] - a[0]) as f64, (b[1] - a[1]) as f64);
            (dx * dx + dy * dy).sqrt()
        })
        .sum();
    (total / n as f64) as f32
}
