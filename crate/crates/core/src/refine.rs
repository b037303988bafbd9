//! Window state and the transformer that refines every trajectory in a
//! window over M iterations.
//!
//! Each `(t, n)` token is the concatenation
//! `[P̂_t − P̂_0, f_t, corr_t, μ(P̂_t − P̂_0), μ'(P_init), μ'(T_t)]`, projected to
//! the model width. Blocks alternate attention along each track (over time)
//! and across tracks (within a slice). Heads emit `ΔP` and `Δf` per token;
//! both are applied before correlations are recomputed for the next
//! iteration. Positions are treated as constants inside each iteration, so
//! every snapshot receives gradient only through its own update.

use std::ops::Range;

use fetap_tensor::{Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{sincos_into, Band};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, RELU_GAIN};
use crate::query::{corr_len, correlate_graph};

/// Displacements enter the raw token scaled down to keep the residual stream
/// near unit scale.
const DISP_SCALE: f32 = 1.0 / 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodingConfig {
    /// Frequencies per encoded scalar.
    pub frequencies: usize,
    /// Wavelengths in pixels for displacements.
    pub displacement: Band,
    /// Wavelengths in pixels for initial positions.
    pub position: Band,
    /// Wavelengths in microseconds for accumulated event durations.
    pub duration: Band,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            frequencies: 16,
            displacement: Band::new(256.0, 2.0),
            position: Band::new(1024.0, 4.0),
            duration: Band::new(400_000.0, 1_000.0),
        }
    }
}

/// Where each component sits in a raw token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub channels: usize,
    pub levels: usize,
    pub radius: usize,
    pub frequencies: usize,
}

impl TokenLayout {
    pub fn corr_len(&self) -> usize {
        corr_len(self.levels, self.radius)
    }

    pub fn raw_len(&self) -> usize {
        self.time().end
    }

    pub fn displacement(&self) -> Range<usize> {
        0..2
    }

    pub fn feature(&self) -> Range<usize> {
        2..2 + self.channels
    }

    pub fn correlation(&self) -> Range<usize> {
        let s = self.feature().end;
        s..s + self.corr_len()
    }

    pub fn displacement_encoding(&self) -> Range<usize> {
        let s = self.correlation().end;
        s..s + 4 * self.frequencies
    }

    pub fn position_encoding(&self) -> Range<usize> {
        let s = self.displacement_encoding().end;
        s..s + 4 * self.frequencies
    }

    pub fn time(&self) -> Range<usize> {
        let s = self.position_encoding().end;
        s..s + 2 * self.frequencies
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    /// Temporal/spatial attention pairs.
    pub blocks: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self { blocks: 2, heads: 4, dim: 256, mlp_ratio: 4 }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("model width {} not divisible into {} heads", self.dim, self.heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Working feature of one `(t, n)` entry.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureRow {
    /// The query's persistent template.
    Template,
    /// A refined feature carried over from the previous window.
    Carried(Vec<f32>),
}

/// One query's column of a window.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryTrack {
    /// Index into the caller's query table.
    pub query: usize,
    pub positions: Vec<[f32; 2]>,
    pub features: Vec<FeatureRow>,
    /// First window slot at which the query exists.
    pub valid_from: usize,
    /// First slot whose position may move; the birth slot stays at `P_init`.
    pub update_from: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowState {
    /// Global index of the window's first slice.
    pub start: usize,
    pub slice_times: Vec<u64>,
    pub durations_us: Vec<u64>,
    pub tracks: Vec<QueryTrack>,
}

impl WindowState {
    pub fn len(&self) -> usize {
        self.slice_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slice_times.is_empty()
    }

    /// Appends a slice. Existing tracks extend by replicating their last
    /// position and the template.
    pub fn push_slice(&mut self, t_slice: u64, duration_us: u64) {
        self.slice_times.push(t_slice);
        self.durations_us.push(duration_us);
        for tr in &mut self.tracks {
            let last = *tr.positions.last().expect("tracks are never empty");
            tr.positions.push(last);
            tr.features.push(FeatureRow::Template);
        }
    }

    /// Adds a query born at the latest slice. Earlier slots hold `P_init` and
    /// the template but are masked out of updates.
    pub fn add_query(&mut self, query: usize, p_init: [f32; 2]) -> Result<()> {
        let len = self.len();
        if len == 0 {
            return Err(Error::Usage("query added to a window without slices".into()));
        }
        self.tracks.push(QueryTrack {
            query,
            positions: vec![p_init; len],
            features: vec![FeatureRow::Template; len],
            valid_from: len - 1,
            update_from: len,
        });
        Ok(())
    }

    /// Replicated initial state of `W` slots for queries present at slot 0.
    pub fn replicated(start: usize, slice_times: &[u64], durations_us: &[u64], queries: &[(usize, [f32; 2])]) -> Self {
        let len = slice_times.len();
        Self {
            start,
            slice_times: slice_times.to_vec(),
            durations_us: durations_us.to_vec(),
            tracks: queries
                .iter()
                .map(|&(query, p)| QueryTrack {
                    query,
                    positions: vec![p; len],
                    features: vec![FeatureRow::Template; len],
                    valid_from: 0,
                    update_from: 1,
                })
                .collect(),
        }
    }
}

/// Result of refining one window.
pub struct WindowOutput {
    /// `M` snapshots of `[len·N, 2]` positions, `(t, n)` row-major.
    pub snapshots: Vec<Var>,
    /// Final working features `[len·N, C]`.
    pub features: Var,
}

#[derive(Clone, Debug)]
struct AttnBlock {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl AttnBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &RefinerConfig, depth_gain: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, 1.0, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, depth_gain, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), d, cfg.mlp_ratio * d, RELU_GAIN, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.mlp_ratio * d, d, depth_gain, rng)?,
        })
    }

    /// Pre-norm attention over the middle axis of `x: [B, L, D]`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, heads: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, l, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let bh = b * heads;
        let h = self.ln1.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, h)?;
        let qkv = g.reshape(qkv, &[b, l, 3, heads, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3 * bh, l, dh])?;
        let q = g.narrow(qkv, 0, bh)?;
        let k = g.narrow(qkv, bh, bh)?;
        let v = g.narrow(qkv, 2 * bh, bh)?;
        let scores = g.matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
        let attn = g.softmax_lastdim(scores);
        let o = g.matmul(attn, v, false)?;
        let o = g.reshape(o, &[b, heads, l, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b, l, d])?;
        let o = self.out.forward(g, store, o)?;
        let x = g.add(x, o)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, store, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Lookup geometry and ablation switches used while refining.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefineOptions {
    pub iterations: usize,
    pub stride: usize,
    pub radius: usize,
    pub time_embed: bool,
}

#[derive(Clone, Debug)]
pub struct Refiner {
    pub cfg: RefinerConfig,
    pub layout: TokenLayout,
    pub encoding: EncodingConfig,
    proj: Linear,
    blocks: Vec<(AttnBlock, AttnBlock)>,
    norm: LayerNorm,
    head_dp: Linear,
    head_df: Linear,
}

impl Refiner {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: RefinerConfig,
        layout: TokenLayout,
        encoding: EncodingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if layout.frequencies != encoding.frequencies {
            return Err(Error::Config("token layout and encoding disagree on frequency count".into()));
        }
        let depth_gain = 1.0 / (2.0 * cfg.blocks.max(1) as f64).sqrt();
        let proj = Linear::new(store, &format!("{name}.proj"), layout.raw_len(), cfg.dim, 1.0, rng)?;
        let mut blocks = Vec::new();
        for i in 0..cfg.blocks {
            let t = AttnBlock::new(store, &format!("{name}.block{i}.time"), &cfg, depth_gain, rng)?;
            let s = AttnBlock::new(store, &format!("{name}.block{i}.space"), &cfg, depth_gain, rng)?;
            blocks.push((t, s));
        }
        let norm = LayerNorm::new(store, &format!("{name}.norm"), cfg.dim)?;
        let head_dp = Linear::new(store, &format!("{name}.head_dp"), cfg.dim, 2, 0.1, rng)?;
        let head_df = Linear::new(store, &format!("{name}.head_df"), cfg.dim, layout.channels, 0.1, rng)?;
        Ok(Self { cfg, layout, encoding, proj, blocks, norm, head_dp, head_df })
    }

    /// Host part of every token except the feature and correlation slices:
    /// `[len·N, 2]` scaled displacements and `[len·N, 10K]` encodings.
    fn static_parts(&self, state: &WindowState, positions: &[[f32; 2]], init: &[[f32; 2]], time_embed: bool) -> (Vec<f32>, Vec<f32>) {
        let (len, n) = (state.len(), state.tracks.len());
        let k = self.encoding.frequencies;
        let enc_len = 10 * k;
        let mut disp = Vec::with_capacity(len * n * 2);
        let mut enc = Vec::with_capacity(len * n * enc_len);
        for t in 0..len {
            for (j, tr) in state.tracks.iter().enumerate() {
                let p = positions[t * n + j];
                let p0 = positions[j];
                let d = [p[0] - p0[0], p[1] - p0[1]];
                disp.push(d[0] * DISP_SCALE);
                disp.push(d[1] * DISP_SCALE);
                sincos_into(d[0] as f64, k, self.encoding.displacement, &mut enc);
                sincos_into(d[1] as f64, k, self.encoding.displacement, &mut enc);
                let pi = init[tr.query];
                sincos_into(pi[0] as f64, k, self.encoding.position, &mut enc);
                sincos_into(pi[1] as f64, k, self.encoding.position, &mut enc);
                if time_embed {
                    sincos_into(state.durations_us[t] as f64, k, self.encoding.duration, &mut enc);
                } else {
                    enc.extend(std::iter::repeat_n(0.0, 2 * k));
                }
            }
        }
        (disp, enc)
    }

    /// Runs M iterations over `state`.
    ///
    /// `pyramids[t]` holds the correlation pyramid of window slot `t`;
    /// `templates[q]` and `init[q]` are indexed by the query numbers stored in
    /// the tracks. Rows are ordered `(t, n)` with `n` following
    /// `state.tracks`.
    #[allow(clippy::too_many_arguments)]
    pub fn refine(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &WindowState,
        pyramids: &[Vec<Var>],
        templates: &[Option<Var>],
        init: &[[f32; 2]],
        opts: RefineOptions,
    ) -> Result<WindowOutput> {
        let (len, n, c) = (state.len(), state.tracks.len(), self.layout.channels);
        if opts.iterations == 0 {
            return Err(Error::Config("at least one refinement iteration is required".into()));
        }
        if len == 0 || n == 0 {
            return Err(Error::Usage(format!("cannot refine a window of {len} slices and {n} queries")));
        }
        if pyramids.len() != len {
            return Err(Error::Usage(format!("{} pyramids for {len} window slices", pyramids.len())));
        }
        if pyramids[0].len() != self.layout.levels || opts.radius != self.layout.radius {
            return Err(Error::Config("pyramid depth or radius differs from the token layout".into()));
        }

        let mut positions = vec![[0.0f32; 2]; len * n];
        let mut rows = Vec::with_capacity(len * n);
        let mut mask = Vec::with_capacity(len * n);
        for t in 0..len {
            for (j, tr) in state.tracks.iter().enumerate() {
                positions[t * n + j] = tr.positions[t];
                rows.push(match &tr.features[t] {
                    FeatureRow::Template => templates
                        .get(tr.query)
                        .copied()
                        .flatten()
                        .ok_or_else(|| Error::Usage(format!("query {} has no template", tr.query)))?,
                    FeatureRow::Carried(v) => g.constant(Tensor::new(vec![1, c], v.clone())?),
                });
                mask.push(if t >= tr.update_from { 1.0f32 } else { 0.0 });
            }
        }
        let mut features = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
        let mask_dp = g.constant(Tensor::new(vec![len * n, 2], mask.iter().flat_map(|&m| [m, m]).collect())?);
        let mask_df = g.constant(Tensor::new(
            vec![len * n, c],
            mask.iter().flat_map(|&m| std::iter::repeat_n(m, c)).collect(),
        )?);
        let corr_scale = 1.0 / (c as f32).sqrt();

        let mut snapshots = Vec::with_capacity(opts.iterations);
        for iteration in 0..opts.iterations {
            let mut corr = Vec::with_capacity(len);
            for (t, pyr) in pyramids.iter().enumerate() {
                let f_t = g.narrow(features, t * n, n)?;
                let p_t = &positions[t * n..(t + 1) * n];
                corr.push(correlate_graph(g, f_t, pyr, p_t, opts.radius, opts.stride)?);
            }
            let corr = if corr.len() == 1 { corr[0] } else { g.concat(&corr, 0)? };
            let corr = g.scale(corr, corr_scale);
            let (disp, enc) = self.static_parts(state, &positions, init, opts.time_embed);
            let disp = g.constant(Tensor::new(vec![len * n, 2], disp)?);
            let enc = g.constant(Tensor::new(vec![len * n, 10 * self.encoding.frequencies], enc)?);
            let tokens = g.concat(&[disp, features, corr, enc], 1)?;

            let x = self.proj.forward(g, store, tokens)?;
            let mut x = g.reshape(x, &[len, n, self.cfg.dim])?;
            for (temporal, spatial) in &self.blocks {
                let xt = g.permute(x, &[1, 0, 2])?;
                let xt = temporal.forward(g, store, xt, self.cfg.heads)?;
                x = g.permute(xt, &[1, 0, 2])?;
                x = spatial.forward(g, store, x, self.cfg.heads)?;
            }
            let h = self.norm.forward(g, store, x)?;
            let h = g.reshape(h, &[len * n, self.cfg.dim])?;
            let dp = self.head_dp.forward(g, store, h)?;
            let dp = g.mul(dp, mask_dp)?;
            let df = self.head_df.forward(g, store, h)?;
            let df = g.mul(df, mask_df)?;

            let base = g.constant(Tensor::new(vec![len * n, 2], positions.iter().flatten().copied().collect())?);
            let next = g.add(base, dp)?;
            features = g.add(features, df)?;
            if !g.value(next).is_finite() || !g.value(features).is_finite() {
                return Err(Error::Refinement { iteration: iteration + 1 });
            }
            for (p, v) in positions.iter_mut().zip(g.value(next).data().chunks_exact(2)) {
                *p = [v[0], v[1]];
            }
            snapshots.push(next);
        }
        Ok(WindowOutput { snapshots, features })
    }
}

/// Writes the final snapshot and features of a refined window back into its
/// state.
pub fn absorb(g: &Graph, state: &mut WindowState, out: &WindowOutput) {
    let n = state.tracks.len();
    let pos = g.value(*out.snapshots.last().expect("at least one iteration")).data();
    let feats = g.value(out.features);
    let c = feats.shape()[1];
    for t in 0..state.len() {
        for (j, tr) in state.tracks.iter_mut().enumerate() {
            let row = t * n + j;
            tr.positions[t] = [pos[2 * row], pos[2 * row + 1]];
            tr.features[t] = FeatureRow::Carried(feats.data()[row * c..(row + 1) * c].to_vec());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_raw_token_length() {
        let l = TokenLayout { channels: 128, levels: 4, radius: 3, frequencies: 16 };
        assert_eq!(l.raw_len(), 486);
        assert_eq!(l.corr_len(), 196);
        assert_eq!(l.time(), 454..486);
    }

    #[test]
    fn push_slice_replicates_last_position_and_template() {
        let mut s = WindowState::replicated(0, &[0], &[0], &[(0, [1.0, 2.0])]);
        s.tracks[0].positions[0] = [3.0, 4.0];
        s.tracks[0].features[0] = FeatureRow::Carried(vec![1.0]);
        s.push_slice(5, 5);
        assert_eq!(s.tracks[0].positions, vec![[3.0, 4.0], [3.0, 4.0]]);
        assert_eq!(s.tracks[0].features[1], FeatureRow::Template);
        s.add_query(1, [9.0, 9.0]).unwrap();
        assert_eq!((s.tracks[1].valid_from, s.tracks[1].update_from), (1, 2));
    }
}
