//! Slicing, encoding, fusion and sliding-window refinement, driven either
//! incrementally ([`TrackSession`]) or over a whole recording
//! ([`run_offline`]).
//!
//! Slices sit on a fixed grid `t_begin + k·Δt`. A slice is processed once
//! every input up to its timestamp has arrived, i.e. once the stream has
//! moved past it. When the window holds `W` slices it is refined, its first
//! `T_step` slices are emitted, and the rest are handed to the next window.
//! Slices still in the window when the input ends are refined once more as
//! a shorter window and emitted.

use std::collections::{BTreeMap, VecDeque};

use fetap_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventStream};
use crate::fusion::FusionMode;
use crate::image::Image;
use crate::model::FeTapModel;
use crate::query::{build_pyramid, sample_templates, QuerySpec};
use crate::refine::{absorb, RefineOptions, WindowState};
use crate::sbt::{build_sbt_from, SbtStack};
use crate::schedule::{AccumulateMode, ScheduleEntry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Time bins per polarity.
    pub bins: usize,
    /// Window length W in slices.
    pub window: usize,
    /// Slices the window advances by.
    pub step: usize,
    /// Refinement iterations M.
    pub iterations: usize,
    /// Feature stride S.
    pub stride: usize,
    /// Feature channels C.
    pub channels: usize,
    /// Correlation radius r.
    pub radius: usize,
    /// Correlation pyramid depth L.
    pub levels: usize,
    /// Slice spacing in microseconds.
    pub dt_us: u64,
    pub accumulate: AccumulateMode,
    pub time_embed: bool,
    pub use_frames: bool,
    pub use_events: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            bins: 5,
            window: 16,
            step: 8,
            iterations: 4,
            stride: 4,
            channels: 128,
            radius: 3,
            levels: 4,
            dt_us: 5_000,
            accumulate: AccumulateMode::SinceFrame,
            time_embed: true,
            use_frames: true,
            use_events: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.bins == 0 {
            return bad("bins must be at least 1".into());
        }
        if self.step == 0 || self.step >= self.window {
            return bad(format!("need 1 <= step < window, got step {} window {}", self.step, self.window));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !matches!(self.stride, 4 | 8) {
            return bad(format!("stride must be 4 or 8, got {}", self.stride));
        }
        if self.channels == 0 || self.levels == 0 {
            return bad("channels and levels must be positive".into());
        }
        if self.dt_us == 0 {
            return bad("slice spacing must be positive".into());
        }
        if let AccumulateMode::Fixed { window_us: 0 } = self.accumulate {
            return bad("fixed accumulation window must be positive".into());
        }
        if !self.use_frames && !self.use_events {
            return bad("at least one of frames and events must be enabled".into());
        }
        Ok(())
    }

    pub fn fusion_mode(&self) -> FusionMode {
        match (self.use_frames, self.use_events) {
            (true, true) => FusionMode::Full,
            (true, false) => FusionMode::FramesOnly,
            _ => FusionMode::EventsOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Emission {
    pub id: u64,
    pub t_us: u64,
    pub x: f32,
    pub y: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    /// `(t_us, x, y)` with strictly increasing timestamps.
    pub samples: Vec<(u64, f32, f32)>,
}

/// Collects emissions into per-query tracks ordered by id.
pub fn assemble_tracks(emissions: &[Emission]) -> Vec<Track> {
    let mut by_id: BTreeMap<u64, Vec<(u64, f32, f32)>> = BTreeMap::new();
    for e in emissions {
        by_id.entry(e.id).or_default().push((e.t_us, e.x, e.y));
    }
    by_id.into_iter().map(|(id, samples)| Track { id, samples }).collect()
}

/// Snapshots of one refined window, kept for the training loss.
#[derive(Clone, Debug)]
pub struct WindowRecord {
    pub start: usize,
    pub slice_times: Vec<u64>,
    /// Query table index per track, in snapshot column order.
    pub queries: Vec<usize>,
    pub valid_from: Vec<usize>,
    pub snapshots: Vec<Var>,
}

struct FrameEntry {
    t_us: u64,
    image: Tensor<f32>,
    /// Frame features and their fusion branch, computed on first use.
    cache: Option<(Var, Option<Var>)>,
}

struct QuerySlot {
    spec: QuerySpec,
    template: Option<Var>,
}

/// Incremental tracker over one recording.
pub struct TrackSession<'m> {
    model: &'m FeTapModel,
    cfg: TrackerConfig,
    mode: FusionMode,
    training: bool,
    graph: Graph,
    width: usize,
    height: usize,
    t_begin: u64,
    t_end: Option<u64>,
    watermark: Option<u64>,
    frames: VecDeque<FrameEntry>,
    events: VecDeque<Event>,
    queries: Vec<QuerySlot>,
    init_positions: Vec<[f32; 2]>,
    next_slice: usize,
    window: WindowState,
    pyramids: VecDeque<Vec<Var>>,
    /// Global index one past the last slice covered by a refinement.
    refined_until: usize,
    mean_flow: f32,
    records: Vec<WindowRecord>,
    finished: bool,
}

impl<'m> TrackSession<'m> {
    /// `width` × `height` is the sensor size shared by frames and events.
    /// Slices start at `t_begin`; when `t_end` is given no slice after it is
    /// produced. In training mode the whole computation stays on one graph
    /// so a loss over [`TrackSession::records`] can be differentiated.
    pub fn new(
        model: &'m FeTapModel,
        queries: &[QuerySpec],
        width: usize,
        height: usize,
        t_begin: u64,
        t_end: Option<u64>,
        training: bool,
    ) -> Result<Self> {
        let cfg = model.tracker.clone();
        cfg.validate()?;
        if queries.is_empty() {
            return Err(Error::Usage("no queries to track".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(q) = queries.iter().find(|q| !seen.insert(q.id)) {
            return Err(Error::Usage(format!("duplicate query id {}", q.id)));
        }
        if let Some(q) = queries.iter().find(|q| !(q.x >= 0.0 && q.y >= 0.0 && q.x <= (width - 1) as f32 && q.y <= (height - 1) as f32)) {
            return Err(Error::Usage(format!("query {} at ({}, {}) is outside the {width}x{height} image", q.id, q.x, q.y)));
        }
        Ok(Self {
            model,
            mode: cfg.fusion_mode(),
            cfg,
            training,
            graph: if training { Graph::new() } else { Graph::no_grad() },
            width,
            height,
            t_begin,
            t_end,
            watermark: None,
            frames: VecDeque::new(),
            events: VecDeque::new(),
            queries: queries.iter().map(|&spec| QuerySlot { spec, template: None }).collect(),
            init_positions: queries.iter().map(|q| q.position()).collect(),
            next_slice: 0,
            window: WindowState::default(),
            pyramids: VecDeque::new(),
            refined_until: 0,
            mean_flow: 0.0,
            records: Vec::new(),
            finished: false,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn records(&self) -> &[WindowRecord] {
        &self.records
    }

    pub fn queries(&self) -> Vec<QuerySpec> {
        self.queries.iter().map(|q| q.spec).collect()
    }

    /// Persistent template of a query once it has been born.
    pub fn template(&self, query_index: usize) -> Option<&Tensor<f32>> {
        self.queries[query_index].template.map(|v| self.graph.value(v))
    }

    pub fn mean_flow(&self) -> f32 {
        self.mean_flow
    }

    fn slice_time(&self, index: usize) -> u64 {
        self.t_begin + index as u64 * self.cfg.dt_us
    }

    fn advance_watermark(&mut self, t: u64, what: &str) -> Result<()> {
        if self.finished {
            return Err(Error::Usage("session already finished".into()));
        }
        if let Some(w) = self.watermark {
            if t < w {
                return Err(Error::Ordering(format!("{what} at {t} us arrives after input at {w} us")));
            }
        }
        self.watermark = Some(t);
        Ok(())
    }

    pub fn push_frame(&mut self, t_us: u64, image: &Image) -> Result<Vec<Emission>> {
        self.advance_watermark(t_us, "frame")?;
        if image.height != self.height || image.width != self.width {
            return Err(Error::Usage(format!(
                "frame at {t_us} us is {}x{}, expected {}x{}",
                image.width, image.height, self.width, self.height
            )));
        }
        let want = self.model.arch.frame_channels;
        let image = match (image.channels, want) {
            (c, w) if c == w => image.to_tensor(),
            (3, 1) => image.to_gray().to_tensor(),
            (c, w) => return Err(Error::Usage(format!("frame has {c} channels, model expects {w}"))),
        };
        let mut out = self.process_ready(false)?;
        self.frames.push_back(FrameEntry { t_us, image, cache: None });
        out.extend(self.process_ready(false)?);
        Ok(out)
    }

    /// Appends a time-sorted batch of events.
    pub fn push_events(&mut self, batch: &[Event]) -> Result<Vec<Emission>> {
        let Some(last) = batch.last() else { return Ok(Vec::new()) };
        if let Some(i) = batch.windows(2).position(|w| w[1].t_us < w[0].t_us) {
            return Err(Error::Ordering(format!("event batch unsorted at index {}", i + 1)));
        }
        self.advance_watermark(batch[0].t_us, "event")?;
        if let Some(e) = batch.iter().find(|e| e.x as usize >= self.width || e.y as usize >= self.height) {
            return Err(Error::Usage(format!("event at ({}, {}) outside the sensor", e.x, e.y)));
        }
        self.watermark = Some(last.t_us);
        self.events.extend(batch.iter().copied());
        self.process_ready(false)
    }

    /// Ends the input: processes every remaining slice up to `t_end` (or the
    /// latest input), refines the trailing window and emits everything left.
    pub fn finish(&mut self) -> Result<Vec<Emission>> {
        if self.finished {
            return Ok(Vec::new());
        }
        let mut out = self.process_ready(true)?;
        if !self.window.is_empty() {
            let end = self.window.start + self.window.len();
            if self.refined_until < end && !self.window.tracks.is_empty() {
                self.refine().map_err(|e| e.at_slice(end - 1))?;
            }
            out.extend(self.emit(self.window.len()));
        }
        self.finished = true;
        Ok(out)
    }

    fn process_ready(&mut self, finishing: bool) -> Result<Vec<Emission>> {
        let mut out = Vec::new();
        loop {
            let t = self.slice_time(self.next_slice);
            if self.t_end.is_some_and(|end| t > end) {
                break;
            }
            let ready = match self.watermark {
                Some(w) => w > t || (finishing && (self.t_end.is_some() || w >= t)),
                None => false,
            };
            if !ready {
                break;
            }
            let index = self.next_slice;
            out.extend(self.process_slice(index, t).map_err(|e| e.at_slice(index))?);
            self.next_slice += 1;
        }
        Ok(out)
    }

    fn frame_features(&mut self, idx: usize) -> Result<(Var, Option<Var>)> {
        if let Some(c) = self.frames[idx].cache {
            return Ok(c);
        }
        let m = self.model;
        let img = self.graph.constant(self.frames[idx].image.clone());
        let feats = m.frame_encoder.forward(&mut self.graph, &m.store, img)?;
        let branch = match self.mode {
            FusionMode::Full => Some(m.fusion.frame_branch(&mut self.graph, &m.store, feats)?),
            _ => None,
        };
        self.frames[idx].cache = Some((feats, branch));
        Ok((feats, branch))
    }

    fn process_slice(&mut self, index: usize, t: u64) -> Result<Vec<Emission>> {
        while self.frames.len() > 1 && self.frames[1].t_us <= t {
            self.frames.pop_front();
        }
        let frame_t = match self.frames.front() {
            Some(f) if f.t_us <= t => f.t_us,
            _ => return Err(Error::Usage(format!("no frame at or before slice time {t} us"))),
        };
        let entry = ScheduleEntry { t_frame: frame_t, t_slice: t };
        let m = self.model;
        let (frame_feats, frame_branch) = match self.mode {
            FusionMode::EventsOnly => (None, None),
            _ => {
                let (f, b) = self.frame_features(0)?;
                (Some(f), b)
            }
        };
        let event_feats = if self.cfg.use_events {
            let (a, b) = self.cfg.accumulate.window(&entry);
            let sbt = if b > a {
                let (s0, s1) = self.events.as_slices();
                let evs: Vec<Event> = s0.iter().chain(s1).filter(|e| e.t_us >= a && e.t_us <= b).copied().collect();
                build_sbt_from(&evs, self.width, self.height, a, b, self.cfg.bins)?
            } else {
                SbtStack::zeros(self.width, self.height, self.cfg.bins, a, b)
            };
            let x = self.graph.constant(sbt.to_chw());
            Some(m.event_encoder.forward(&mut self.graph, &m.store, x)?)
        } else {
            None
        };
        let fused =
            m.fusion.forward(&mut self.graph, &m.store, self.mode, frame_feats, frame_branch, event_feats, self.mean_flow)?;
        let pyramid = build_pyramid(&mut self.graph, fused, self.cfg.levels)?;
        self.trim_events(&entry);

        if self.window.is_empty() {
            self.window.start = index;
        }
        self.window.push_slice(t, self.cfg.accumulate.duration(&entry));
        self.pyramids.push_back(pyramid);

        let source = match self.mode {
            FusionMode::EventsOnly => fused,
            _ => frame_feats.expect("frame features present outside events-only mode"),
        };
        for qi in 0..self.queries.len() {
            let q = &self.queries[qi];
            if q.template.is_none() && q.spec.t_us <= t {
                let p = q.spec.position();
                let tpl = sample_templates(&mut self.graph, source, &[p], self.cfg.stride)?;
                self.queries[qi].template = Some(tpl);
                self.window.add_query(qi, p)?;
            }
        }

        if self.window.len() < self.cfg.window {
            return Ok(Vec::new());
        }
        if !self.window.tracks.is_empty() {
            self.refine()?;
        }
        let out = self.emit(self.cfg.step);
        self.window = handoff(&self.window, self.cfg.step)?;
        for _ in 0..self.cfg.step {
            self.pyramids.pop_front();
        }
        Ok(out)
    }

    /// Drops buffered events no later slice can use.
    fn trim_events(&mut self, entry: &ScheduleEntry) {
        let next = entry.t_slice + self.cfg.dt_us;
        let keep_from = match self.cfg.accumulate {
            AccumulateMode::SinceFrame => entry.t_frame,
            AccumulateMode::Fixed { window_us } => next.saturating_sub(window_us),
        };
        while self.events.front().is_some_and(|e| e.t_us < keep_from) {
            self.events.pop_front();
        }
    }

    fn refine(&mut self) -> Result<()> {
        let m = self.model;
        let pyramids: Vec<Vec<Var>> = self.pyramids.iter().cloned().collect();
        let templates: Vec<Option<Var>> = self.queries.iter().map(|q| q.template).collect();
        let opts = RefineOptions {
            iterations: self.cfg.iterations,
            stride: self.cfg.stride,
            radius: self.cfg.radius,
            time_embed: self.cfg.time_embed,
        };
        let out = m.refiner.refine(&mut self.graph, &m.store, &self.window, &pyramids, &templates, &self.init_positions, opts)?;
        absorb(&self.graph, &mut self.window, &out);
        self.refined_until = self.window.start + self.window.len();
        self.mean_flow = window_mean_flow(&self.window);
        if self.training {
            self.records.push(WindowRecord {
                start: self.window.start,
                slice_times: self.window.slice_times.clone(),
                queries: self.window.tracks.iter().map(|t| t.query).collect(),
                valid_from: self.window.tracks.iter().map(|t| t.valid_from).collect(),
                snapshots: out.snapshots,
            });
        } else {
            self.rebase();
        }
        Ok(())
    }

    /// Emits the first `count` slots of the window.
    fn emit(&self, count: usize) -> Vec<Emission> {
        let mut out = Vec::new();
        for t in 0..count.min(self.window.len()) {
            for tr in &self.window.tracks {
                if t >= tr.valid_from {
                    let p = tr.positions[t];
                    let id = self.queries[tr.query].spec.id;
                    out.push(Emission { id, t_us: self.window.slice_times[t], x: p[0], y: p[1] });
                }
            }
        }
        out
    }

    /// Moves everything still needed onto a fresh graph so inference memory
    /// stays bounded by one window.
    fn rebase(&mut self) {
        let old = std::mem::replace(&mut self.graph, Graph::no_grad());
        let mut keep = |v: Var| self.graph.constant(old.value(v).clone());
        for pyr in self.pyramids.iter_mut() {
            for l in pyr.iter_mut() {
                *l = keep(*l);
            }
        }
        for q in self.queries.iter_mut() {
            if let Some(t) = q.template.as_mut() {
                *t = keep(*t);
            }
        }
        for f in self.frames.iter_mut() {
            if let Some((feats, branch)) = f.cache.as_mut() {
                *feats = keep(*feats);
                if let Some(b) = branch.as_mut() {
                    *b = keep(*b);
                }
            }
        }
    }
}

/// Mean displacement over the last two slots of a refined window, over
/// queries alive in both.
fn window_mean_flow(w: &WindowState) -> f32 {
    let len = w.len();
    if len < 2 {
        return 0.0;
    }
    let (prev, cur): (Vec<[f32; 2]>, Vec<[f32; 2]>) = w
        .tracks
        .iter()
        .filter(|t| t.valid_from + 2 <= len)
        .map(|t| (t.positions[len - 2], t.positions[len - 1]))
        .unzip();
    crate::fusion::mean_flow(&prev, &cur)
}

/// Next window after advancing by `step`: the overlapping slots keep their
/// refined positions and features. New slots are appended later with the
/// last refined position and the template.
pub fn handoff(prev: &WindowState, step: usize) -> Result<WindowState> {
    if step == 0 || step >= prev.len() {
        return Err(Error::Usage(format!("cannot advance a {}-slice window by {step}", prev.len())));
    }
    Ok(WindowState {
        start: prev.start + step,
        slice_times: prev.slice_times[step..].to_vec(),
        durations_us: prev.durations_us[step..].to_vec(),
        tracks: prev
            .tracks
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.positions.drain(..step);
                t.features.drain(..step);
                t.valid_from = t.valid_from.saturating_sub(step);
                t.update_from = t.update_from.saturating_sub(step);
                t
            })
            .collect(),
    })
}

/// A recording for [`run_offline`].
pub struct Recording<'a> {
    pub frames: &'a [(u64, Image)],
    pub events: &'a EventStream,
    pub t_begin: u64,
    pub t_end: u64,
}

/// Tracks every query over a complete recording.
pub fn run_offline(model: &FeTapModel, rec: &Recording, queries: &[QuerySpec]) -> Result<Vec<Track>> {
    let ev = rec.events;
    let mut session = TrackSession::new(model, queries, ev.width(), ev.height(), rec.t_begin, Some(rec.t_end), false)?;
    let mut out = Vec::new();
    let events = ev.events();
    let mut cursor = 0;
    for (t, img) in rec.frames {
        let upto = cursor + events[cursor..].partition_point(|e| e.t_us < *t);
        out.extend(session.push_events(&events[cursor..upto])?);
        cursor = upto;
        out.extend(session.push_frame(*t, img)?);
    }
    out.extend(session.push_events(&events[cursor..])?);
    out.extend(session.finish()?);
    Ok(assemble_tracks(&out))
}
