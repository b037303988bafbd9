//! Synthetic scenes of textured sprites over a textured background, with
//! exact point trajectories.
//!
//! Frames are rendered directly. Events come from a contrast-threshold model:
//! every pixel keeps a reference log intensity, and each time the
//! log intensity `log(I + ε)` crosses the reference by `±θ` an event is
//! emitted at the linearly interpolated crossing time.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Polarity};
use crate::image::Image;
use crate::metrics::GtTrack;
use crate::query::QuerySpec;

/// Periodic grayscale texture sampled bilinearly.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Texture {
    pub fn constant(size: usize, value: f32) -> Self {
        Self { size, data: vec![value; size * size] }
    }

    /// Smooth value noise: two octaves of bilinearly interpolated random
    /// lattices, scaled to `[lo, hi]`.
    pub fn noise(size: usize, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Self {
        let mut data = vec![0.0f32; size * size];
        for (cell, weight) in [(8usize, 0.65f32), (3, 0.35)] {
            let n = size.div_ceil(cell).max(1);
            let lattice: Vec<f32> = (0..n * n).map(|_| rng.gen::<f32>()).collect();
            let at = |i: usize, j: usize| lattice[(j % n) * n + (i % n)];
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f32 / cell as f32, y as f32 / cell as f32);
                    let (i, j) = (fx.floor() as usize, fy.floor() as usize);
                    let (ax, ay) = (fx - i as f32, fy - j as f32);
                    let v = (1.0 - ax) * (1.0 - ay) * at(i, j)
                        + ax * (1.0 - ay) * at(i + 1, j)
                        + (1.0 - ax) * ay * at(i, j + 1)
                        + ax * ay * at(i + 1, j + 1);
                    data[y * size + x] += weight * v;
                }
            }
        }
        for v in &mut data {
            *v = lo + (hi - lo) * *v;
        }
        Self { size, data }
    }

    pub fn sample(&self, u: f64, v: f64) -> f32 {
        let s = self.size as f64;
        let (u, v) = (u.rem_euclid(s), v.rem_euclid(s));
        let (x0, y0) = (u.floor(), v.floor());
        let (ax, ay) = ((u - x0) as f32, (v - y0) as f32);
        let n = self.size;
        let (x0, y0) = (x0 as usize % n, y0 as usize % n);
        let (x1, y1) = ((x0 + 1) % n, (y0 + 1) % n);
        let d = &self.data;
        (1.0 - ax) * (1.0 - ay) * d[y0 * n + x0]
            + ax * (1.0 - ay) * d[y0 * n + x1]
            + (1.0 - ax) * ay * d[y1 * n + x0]
            + ax * ay * d[y1 * n + x1]
    }
}

/// Square textured sprite moving with constant linear and angular velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    /// Center at t = 0, pixels.
    pub center: [f64; 2],
    /// Pixels per second.
    pub velocity: [f64; 2],
    /// Orientation at t = 0, radians.
    pub angle: f64,
    /// Radians per second.
    pub angular_velocity: f64,
    pub half_size: f64,
    pub texture: Texture,
}

impl Sprite {
    pub fn center_at(&self, t_s: f64) -> [f64; 2] {
        [self.center[0] + self.velocity[0] * t_s, self.center[1] + self.velocity[1] * t_s]
    }

    pub fn angle_at(&self, t_s: f64) -> f64 {
        self.angle + self.angular_velocity * t_s
    }

    /// Sprite-local coordinates of image point `p` at time `t_s`.
    pub fn to_local(&self, p: [f64; 2], t_s: f64) -> [f64; 2] {
        let c = self.center_at(t_s);
        let (s, co) = self.angle_at(t_s).sin_cos();
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        [co * dx + s * dy, -s * dx + co * dy]
    }

    pub fn to_image(&self, local: [f64; 2], t_s: f64) -> [f64; 2] {
        let c = self.center_at(t_s);
        let (s, co) = self.angle_at(t_s).sin_cos();
        [c[0] + co * local[0] - s * local[1], c[1] + s * local[0] + co * local[1]]
    }

    pub fn contains_local(&self, l: [f64; 2]) -> bool {
        l[0].abs() <= self.half_size && l[1].abs() <= self.half_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub width: usize,
    pub height: usize,
    pub background: Texture,
    /// Pixels per second.
    pub background_velocity: [f64; 2],
    /// Back to front.
    pub sprites: Vec<Sprite>,
    pub duration_us: u64,
}

impl SynthScene {
    /// Index of the front-most sprite covering `p` at `t_s`.
    pub fn top_sprite(&self, p: [f64; 2], t_s: f64) -> Option<usize> {
        (0..self.sprites.len()).rev().find(|&i| self.sprites[i].contains_local(self.sprites[i].to_local(p, t_s)))
    }
}

fn us_to_s(t_us: u64) -> f64 {
    t_us as f64 * 1e-6
}

/// Grayscale rendering at `t_us`, values in `[0, 1]`.
pub fn render(scene: &SynthScene, t_us: u64) -> Image {
    let t = us_to_s(t_us);
    let (w, h) = (scene.width, scene.height);
    let mut data = Vec::with_capacity(w * h);
    let bg_shift = [scene.background_velocity[0] * t, scene.background_velocity[1] * t];
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64, y as f64];
            let v = match scene.top_sprite(p, t) {
                Some(i) => {
                    let s = &scene.sprites[i];
                    let l = s.to_local(p, t);
                    s.texture.sample(l[0] + s.half_size, l[1] + s.half_size)
                }
                None => scene.background.sample(p[0] - bg_shift[0], p[1] - bg_shift[1]),
            };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Image::gray(h, w, data).expect("positive extents")
}

/// Threshold crossings when the log intensity moves from `l_prev` to
/// `l_new`: each entry is the crossing's fraction of the step and its sign.
/// `reference` follows the emitted events.
pub fn crossings(l_prev: f64, l_new: f64, reference: &mut f64, theta: f64) -> Vec<(f64, Polarity)> {
    let mut out = Vec::new();
    let span = l_new - l_prev;
    loop {
        let (next, pol) = if l_new - *reference >= theta {
            (*reference + theta, Polarity::Positive)
        } else if *reference - l_new >= theta {
            (*reference - theta, Polarity::Negative)
        } else {
            break;
        };
        *reference = next;
        let frac = if span == 0.0 { 1.0 } else { ((next - l_prev) / span).clamp(0.0, 1.0) };
        out.push((frac, pol));
    }
    out
}

/// Simulates the event stream over the whole scene duration.
pub fn generate_events(scene: &SynthScene, theta: f64, log_eps: f64, dt_sim_us: u64) -> Result<EventStream> {
    if !(theta > 0.0) || dt_sim_us == 0 {
        return Err(Error::Config(format!("threshold {theta} and step {dt_sim_us} us must be positive")));
    }
    let log = |img: &Image| img.data.iter().map(|&v| (v as f64 + log_eps).ln()).collect::<Vec<f64>>();
    let mut prev = log(&render(scene, 0));
    let mut reference = prev.clone();
    let mut events = Vec::new();
    let mut t_prev = 0u64;
    while t_prev < scene.duration_us {
        let t_new = (t_prev + dt_sim_us).min(scene.duration_us);
        let cur = log(&render(scene, t_new));
        let mut step = Vec::new();
        for (i, (&lp, &ln)) in prev.iter().zip(&cur).enumerate() {
            for (frac, pol) in crossings(lp, ln, &mut reference[i], theta) {
                let t = t_prev + (frac * (t_new - t_prev) as f64).round() as u64;
                let (x, y) = ((i % scene.width) as u16, (i / scene.width) as u16);
                step.push(Event::new(x, y, t.max(t_prev + 1).min(t_new), pol));
            }
        }
        step.sort_by_key(|e| (e.t_us, e.y, e.x));
        events.extend(step);
        prev = cur;
        t_prev = t_new;
    }
    EventStream::new(scene.width, scene.height, events)
}

/// What a ground-truth point is attached to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Anchor {
    Background { at: [f64; 2] },
    Sprite { index: usize, local: [f64; 2] },
}

pub fn anchor_position(scene: &SynthScene, anchor: &Anchor, t_us: u64) -> [f64; 2] {
    let t = us_to_s(t_us);
    match *anchor {
        Anchor::Background { at } => [at[0] + scene.background_velocity[0] * t, at[1] + scene.background_velocity[1] * t],
        Anchor::Sprite { index, local } => scene.sprites[index].to_image(local, t),
    }
}

/// Positions at every slice time from the first slice until the anchor
/// leaves the canvas; the track ends at its last in-canvas sample.
pub fn gt_tracks(scene: &SynthScene, anchors: &[Anchor], slice_times: &[u64]) -> Vec<GtTrack> {
    let (w, h) = ((scene.width - 1) as f64, (scene.height - 1) as f64);
    anchors
        .iter()
        .enumerate()
        .map(|(id, a)| {
            let samples: Vec<(u64, f32, f32)> = slice_times
                .iter()
                .map(|&t| (t, anchor_position(scene, a, t)))
                .take_while(|(_, p)| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= w && p[1] <= h)
                .map(|(t, p)| (t, p[0] as f32, p[1] as f32))
                .collect();
            GtTrack::new(id as u64, samples)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    /// Half side length range, pixels.
    pub half_size: [f64; 2],
    /// Sprite speed range, pixels per second.
    pub speed: [f64; 2],
    /// Largest sprite angular speed, radians per second.
    pub max_angular_speed: f64,
    /// Largest background speed, pixels per second.
    pub max_background_speed: f64,
    /// Sprites only translate and the background is static.
    pub translation_only: bool,
    pub duration_us: u64,
    pub frame_rate_hz: f64,
    pub dt_track_us: u64,
    pub queries: usize,
    /// Share of queries placed on sprites rather than the background.
    pub sprite_query_fraction: f64,
    pub theta: f64,
    pub log_eps: f64,
    pub dt_sim_us: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_sprites: 1,
            max_sprites: 3,
            half_size: [7.0, 12.0],
            speed: [30.0, 120.0],
            max_angular_speed: 1.5,
            max_background_speed: 20.0,
            translation_only: false,
            duration_us: 115_000,
            frame_rate_hz: 50.0,
            dt_track_us: 5_000,
            queries: 8,
            sprite_query_fraction: 0.75,
            theta: 0.2,
            log_eps: 1e-3,
            dt_sim_us: 1_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 8 || self.height < 8 {
            return bad(format!("canvas {}x{} too small", self.width, self.height));
        }
        if self.min_sprites > self.max_sprites {
            return bad("min_sprites exceeds max_sprites".into());
        }
        if !(self.half_size[0] > 0.0 && self.half_size[0] <= self.half_size[1]) || self.speed[0] > self.speed[1] {
            return bad("invalid sprite size or speed range".into());
        }
        if !(self.frame_rate_hz > 0.0) || self.dt_track_us == 0 || self.duration_us == 0 {
            return bad("frame rate, slice step and duration must be positive".into());
        }
        if self.dt_sim_us * 4 > self.dt_track_us {
            return bad(format!(
                "simulation step {} us must be at most a quarter of the slice step {} us",
                self.dt_sim_us, self.dt_track_us
            ));
        }
        if !(self.theta > 0.0) || !(self.log_eps > 0.0) {
            return bad("contrast threshold and log offset must be positive".into());
        }
        if self.queries == 0 {
            return bad("at least one query per sequence".into());
        }
        Ok(())
    }

    pub fn frame_times(&self) -> Vec<u64> {
        let period = 1e6 / self.frame_rate_hz;
        (0..)
            .map(|k| (k as f64 * period).round() as u64)
            .take_while(|&t| t <= self.duration_us)
            .collect()
    }

    pub fn slice_times(&self) -> Vec<u64> {
        (0..).map(|k| k * self.dt_track_us).take_while(|&t| t <= self.duration_us).collect()
    }
}

/// One generated sequence with its ground truth.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub scene: SynthScene,
    pub frames: Vec<(u64, Image)>,
    pub events: EventStream,
    pub queries: Vec<QuerySpec>,
    pub anchors: Vec<Anchor>,
    pub gt: Vec<GtTrack>,
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..range[1])
    } else {
        range[0]
    }
}

pub fn random_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SynthScene {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let background = Texture::noise(64, 0.15, 0.85, rng);
    let bg_speed = if cfg.translation_only { 0.0 } else { rng.gen_range(0.0..=cfg.max_background_speed) };
    let bg_dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let n = rng.gen_range(cfg.min_sprites..=cfg.max_sprites);
    let sprites = (0..n)
        .map(|_| {
            let half = uniform(rng, cfg.half_size);
            let speed = uniform(rng, cfg.speed);
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            let (lo, hi) = if rng.gen_bool(0.5) { (0.0, 0.55) } else { (0.45, 1.0) };
            let size = (2.0 * half).ceil() as usize + 1;
            Sprite {
                center: [rng.gen_range(half..w - half), rng.gen_range(half..h - half)],
                velocity: [speed * dir.cos(), speed * dir.sin()],
                angle: if cfg.translation_only { 0.0 } else { rng.gen_range(0.0..std::f64::consts::TAU) },
                angular_velocity: if cfg.translation_only {
                    0.0
                } else {
                    rng.gen_range(-cfg.max_angular_speed..=cfg.max_angular_speed)
                },
                half_size: half,
                texture: Texture::noise(size, lo, hi, rng),
            }
        })
        .collect();
    SynthScene {
        width: cfg.width,
        height: cfg.height,
        background,
        background_velocity: [bg_speed * bg_dir.cos(), bg_speed * bg_dir.sin()],
        sprites,
        duration_us: cfg.duration_us,
    }
}

/// Query anchors visible at t = 0: sprite points on the front-most sprite
/// at that pixel, and background points not covered by any sprite.
pub fn random_anchors(scene: &SynthScene, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Anchor> {
    let (w, h) = (scene.width as f64, scene.height as f64);
    let margin = 2.0;
    let mut out = Vec::with_capacity(cfg.queries);
    let mut attempts = 0;
    while out.len() < cfg.queries && attempts < 10_000 {
        attempts += 1;
        let want_sprite = !scene.sprites.is_empty() && rng.gen_bool(cfg.sprite_query_fraction.clamp(0.0, 1.0));
        if want_sprite {
            let index = rng.gen_range(0..scene.sprites.len());
            let s = &scene.sprites[index];
            let r = 0.7 * s.half_size;
            let local = [rng.gen_range(-r..=r), rng.gen_range(-r..=r)];
            let p = s.to_image(local, 0.0);
            let p = [p[0].round(), p[1].round()];
            let inside = p[0] >= margin && p[1] >= margin && p[0] <= w - 1.0 - margin && p[1] <= h - 1.0 - margin;
            if inside && scene.top_sprite(p, 0.0) == Some(index) {
                out.push(Anchor::Sprite { index, local: s.to_local(p, 0.0) });
            }
        } else {
            let p = [rng.gen_range(margin..w - 1.0 - margin).round(), rng.gen_range(margin..h - 1.0 - margin).round()];
            if scene.top_sprite(p, 0.0).is_none() {
                out.push(Anchor::Background { at: p });
            }
        }
    }
    out
}

/// Generates one sequence deterministically from `seed`.
pub fn generate_sample(cfg: &SynthConfig, seed: u64) -> Result<SynthSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = random_scene(cfg, &mut rng);
    let anchors = random_anchors(&scene, cfg, &mut rng);
    if anchors.is_empty() {
        return Err(Error::Config("could not place any query in the scene".into()));
    }
    let frames = cfg.frame_times().into_iter().map(|t| (t, render(&scene, t))).collect();
    let events = generate_events(&scene, cfg.theta, cfg.log_eps, cfg.dt_sim_us)?;
    let gt = gt_tracks(&scene, &anchors, &cfg.slice_times());
    let queries = anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let p = anchor_position(&scene, a, 0);
            QuerySpec { id: i as u64, t_us: 0, x: p[0] as f32, y: p[1] as f32 }
        })
        .collect();
    Ok(SynthSample { scene, frames, events, queries, anchors, gt })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_scene(sprites: Vec<Sprite>) -> SynthScene {
        SynthScene {
            width: 48,
            height: 40,
            background: Texture::constant(8, 0.5),
            background_velocity: [0.0, 0.0],
            sprites,
            duration_us: 100_000,
        }
    }

    fn sprite(center: [f64; 2], velocity: [f64; 2], angular_velocity: f64) -> Sprite {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Sprite { center, velocity, angle: 0.0, angular_velocity, half_size: 5.0, texture: Texture::noise(11, 0.1, 0.9, &mut rng) }
    }

    #[test]
    fn render_is_deterministic_and_background_only_when_empty() {
        let s = flat_scene(vec![]);
        assert_eq!(render(&s, 0), render(&s, 0));
        assert!(render(&s, 0).data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn translated_sprite_shifts_content() {
        let a = flat_scene(vec![sprite([20.0, 20.0], [0.0, 0.0], 0.0)]);
        let b = flat_scene(vec![sprite([25.0, 20.0], [0.0, 0.0], 0.0)]);
        let (ia, ib) = (render(&a, 0), render(&b, 0));
        for y in 15..=25 {
            for x in 15..=25 {
                assert_eq!(ia.at(0, y, x), ib.at(0, y, x + 5));
            }
        }
    }

    #[test]
    fn static_scene_has_no_events() {
        let s = flat_scene(vec![sprite([20.0, 20.0], [0.0, 0.0], 0.0)]);
        assert!(generate_events(&s, 0.2, 1e-3, 1000).unwrap().is_empty());
    }

    #[test]
    fn step_of_half_gives_two_events() {
        let mut r = 0.0;
        let c = crossings(0.0, 0.5, &mut r, 0.2);
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|(_, p)| *p == Polarity::Positive));
        assert!((r - 0.4).abs() < 1e-12);
        let mut r = 0.0;
        let c = crossings(0.0, -0.5, &mut r, 0.2);
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|(_, p)| *p == Polarity::Negative));
    }

    #[test]
    fn net_event_count_tracks_log_change() {
        let s = flat_scene(vec![sprite([10.0, 20.0], [150.0, 0.0], 0.0)]);
        let ev = generate_events(&s, 0.2, 1e-3, 1000).unwrap();
        let (a, b) = (render(&s, 0), render(&s, s.duration_us));
        let mut net = vec![0i64; 48 * 40];
        for e in ev.events() {
            net[e.y as usize * 48 + e.x as usize] += e.polarity.sign() as i64;
        }
        for i in 0..net.len() {
            let dl = ((b.data[i] as f64 + 1e-3).ln() - (a.data[i] as f64 + 1e-3).ln()) / 0.2;
            assert!((net[i] as f64 - dl).abs() <= 1.0 + 1e-9, "pixel {i}: {} vs {dl}", net[i]);
        }
    }

    #[test]
    fn gt_kinematics() {
        let s = flat_scene(vec![sprite([10.0, 20.0], [10.0, 0.0], 0.0), sprite([24.0, 20.0], [0.0, 0.0], 2.0)]);
        let anchors = [
            Anchor::Background { at: [3.0, 4.0] },
            Anchor::Sprite { index: 0, local: [1.0, 1.0] },
            Anchor::Sprite { index: 1, local: [3.0, 4.0] },
        ];
        let mut s = s;
        s.duration_us = 1_000_000;
        let tracks = gt_tracks(&s, &anchors, &[0, 250_000, 500_000]);
        assert!(tracks[0].samples.iter().all(|&(_, x, y)| x == 3.0 && y == 4.0));
        let (_, x0, _) = tracks[1].samples[0];
        let (_, x2, _) = tracks[1].samples[2];
        assert!((x2 - x0 - 5.0).abs() < 1e-5);
        for &(_, x, y) in &tracks[2].samples {
            let r = ((x as f64 - 24.0).powi(2) + (y as f64 - 20.0).powi(2)).sqrt();
            assert!((r - 5.0).abs() < 1e-5);
        }
    }

    #[test]
    fn leaving_anchor_is_truncated() {
        let s = flat_scene(vec![sprite([40.0, 20.0], [200.0, 0.0], 0.0)]);
        let t = gt_tracks(&s, &[Anchor::Sprite { index: 0, local: [0.0, 0.0] }], &[0, 50_000, 100_000]);
        assert_eq!(t[0].samples.len(), 1);
        assert_eq!((t[0].t_birth, t[0].t_death), (0, 0));
    }

    #[test]
    fn sample_generation_is_reproducible() {
        let cfg = SynthConfig { duration_us: 20_000, ..SynthConfig::default() };
        let a = generate_sample(&cfg, 5).unwrap();
        let b = generate_sample(&cfg, 5).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.frames.len(), 2);
        assert!(!a.events.is_empty());
    }
}
