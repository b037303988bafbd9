//! Acceptance gate: prints one `A<n> PASS|FAIL` line per criterion and exits
//! nonzero if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fetap_core::dataset::{generate_dataset, Sequence};
use fetap_core::events::{Event, EventStream, Polarity};
use fetap_core::loss::{window_loss, LossConfig};
use fetap_core::metrics::{evaluate, expected_feature_age, fa_avg, feature_age, mean_endpoint_error, GtTrack};
use fetap_core::model::{ArchConfig, FeTapModel};
use fetap_core::pipeline::{assemble_tracks, run_offline, Emission, Recording, Track, TrackSession, TrackerConfig};
use fetap_core::query::{correlate, correlate_oracle, CorrelationPyramid, QuerySpec};
use fetap_core::refine::RefinerConfig;
use fetap_core::sbt::{build_sbt, sbt_oracle};
use fetap_core::schedule::AccumulateMode;
use fetap_core::synth::{generate_sample, SynthConfig};
use fetap_core::train::{TrainConfig, Trainer};
use fetap_tensor::gradcheck::{check, random_tensor, suite};
use fetap_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {:.0}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64()));
    }
    Ok(())
}

fn a1() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (name, err) in suite::run(50, 2024).map_err(|e| e.to_string())? {
        ensure!(err <= 1e-4, "{name}: relative error {err:.3e}");
        worst = worst.max(err);
        cases += 50;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let rows = rng.gen_range(1..9);
        let m = rng.gen_range(1..6);
        let gt = random_tensor(&[rows, 2], -8.0, 8.0, 0.0, &mut rng);
        let snaps: Vec<Tensor<f64>> = (0..m)
            .map(|_| {
                let off = random_tensor(&[rows, 2], -3.0, 3.0, 0.05, &mut rng);
                Tensor::new(vec![rows, 2], gt.data().iter().zip(off.data()).map(|(a, b)| a + b).collect()).unwrap()
            })
            .collect();
        let mask: Vec<bool> = (0..rows).map(|r| r == 0 || rng.gen_bool(0.6)).collect();
        let cfg = LossConfig { gamma: rng.gen_range(0.3..1.0) };
        let rep = check(&snaps, &vec![true; m], |g, v| Ok(window_loss(g, v, &gt, &mask, &cfg).unwrap()))
            .map_err(|e| e.to_string())?;
        ensure!(rep.max_rel_error() <= 1e-4, "window_loss: relative error {:.3e}", rep.max_rel_error());
        worst = worst.max(rep.max_rel_error());
        cases += 1;
    }
    within(t0, Duration::from_secs(120))?;
    Ok(format!("{cases} instances, worst relative error {worst:.2e}, {:.1}s", t0.elapsed().as_secs_f64()))
}

fn a2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let bins = [1, 3, 5][i % 3];
        let t_start = rng.gen_range(0..1000);
        let t_end = t_start + rng.gen_range(1..20_000);
        let (w, h) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let mut events: Vec<Event> = (0..rng.gen_range(0..80))
            .map(|_| {
                let p = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                Event::new(rng.gen_range(0..w) as u16, rng.gen_range(0..h) as u16, rng.gen_range(0..t_end + 500), p)
            })
            .collect();
        events.sort_by_key(|e| e.t_us);
        let s = EventStream::new(w, h, events).map_err(|e| e.to_string())?;
        let got = build_sbt(&s, t_start, t_end, bins).map_err(|e| e.to_string())?;
        ensure!(got == sbt_oracle(&s, t_start, t_end, bins).unwrap(), "stream {i} differs from the oracle");
    }
    let s = EventStream::new(8, 6, vec![Event::new(3, 4, 500, Polarity::Positive)]).unwrap();
    let single = build_sbt(&s, 0, 1000, 5).unwrap();
    ensure!(single == sbt_oracle(&s, 0, 1000, 5).unwrap(), "single event differs from the oracle");
    ensure!(single.get(3, 4, 2) == 2.0, "single event gives {} in bin 2", single.get(3, 4, 2));
    Ok("1000 streams and the single-event fixture match exactly".into())
}

fn a3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut outside = 0;
    for i in 0..200 {
        let c = rng.gen_range(1..12);
        let (h, w) = (rng.gen_range(4..14), rng.gen_range(4..14));
        let map = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0));
        let pyr = CorrelationPyramid::build(&map, rng.gen_range(1..4)).map_err(|e| e.to_string())?;
        let stride = [4, 8][i % 2];
        let radius = rng.gen_range(0..4);
        let f: Vec<f32> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let span = (w.max(h) * stride) as f32;
        // every fourth position lies far beyond the border
        let p = if i % 4 == 0 {
            [-20.0 * span, rng.gen_range(-span..2.0 * span)]
        } else {
            [rng.gen_range(-0.5 * span..1.5 * span), rng.gen_range(-0.5 * span..1.5 * span)]
        };
        let got = correlate(&f, &pyr, p, radius, stride).map_err(|e| e.to_string())?;
        let want = correlate_oracle(&f, &pyr, p, radius, stride);
        ensure!(got.len() == want.len(), "triple {i}: length {} vs {}", got.len(), want.len());
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        ensure!(err <= 1e-5, "triple {i}: deviation {err:e}");
        if i % 4 == 0 {
            ensure!(got.iter().all(|&v| v == 0.0), "triple {i}: nonzero outside the border");
            outside += 1;
        }
    }
    Ok(format!("200 triples within 1e-5, {outside} out-of-border lookups return 0"))
}

fn small_tracker() -> TrackerConfig {
    TrackerConfig { channels: 16, ..TrackerConfig::default() }
}

fn small_model(tracker: &TrackerConfig) -> FeTapModel {
    let arch = ArchConfig {
        widths: vec![8, 12, 16],
        fpn_dim: 16,
        fusion_kernel: 3,
        refiner: RefinerConfig { blocks: 1, heads: 2, dim: 32, mlp_ratio: 2 },
        seed: 9,
        ..ArchConfig::default()
    };
    FeTapModel::new(tracker, &arch).unwrap()
}

/// 24 Hz frames, 40 slices of 5 ms, one late-born query.
fn invariant_fixture() -> Sequence {
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
    let mut seq = Sequence::from_sample("invariants", generate_sample(&cfg, 8).unwrap());
    let t_late = seq.frames[2].0;
    seq.queries.push(QuerySpec { id: 50, t_us: t_late, x: 30.0, y: 12.5 });
    seq
}

fn max_diff(a: &[Track], b: &[Track]) -> f32 {
    let mut worst = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        assert_eq!((x.id, x.samples.len()), (y.id, y.samples.len()));
        for (p, q) in x.samples.iter().zip(&y.samples) {
            assert_eq!(p.0, q.0);
            worst = worst.max((p.1 - q.1).abs()).max((p.2 - q.2).abs());
        }
    }
    worst
}

fn a4() -> Outcome {
    let t0 = Instant::now();
    let seq = invariant_fixture();
    let m = small_model(&small_tracker());
    let reference = run_offline(&m, &seq.recording(), &seq.queries).map_err(|e| e.to_string())?;

    // streaming in random chunks while watching the templates
    let mut s = TrackSession::new(&m, &seq.queries, seq.width(), seq.height(), 0, Some(seq.t_end), true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ev = seq.events.events();
    let mut out: Vec<Emission> = Vec::new();
    let mut templates: Vec<Option<Vec<f32>>> = vec![None; seq.queries.len()];
    let mut compared = 0usize;
    let mut watch = |s: &TrackSession| -> Result<(), String> {
        for (i, slot) in templates.iter_mut().enumerate() {
            match (s.template(i), slot.as_ref()) {
                (Some(t), None) => *slot = Some(t.data().to_vec()),
                (Some(t), Some(v)) => {
                    ensure!(v.as_slice() == t.data(), "template of query {i} changed");
                    compared += 1;
                }
                (None, Some(_)) => return Err(format!("template of query {i} vanished")),
                (None, None) => {}
            }
        }
        Ok(())
    };
    let mut cursor = 0;
    for (t, img) in seq.frames.iter().map(|(t, i)| (Some(*t), Some(i))).chain([(None, None)]) {
        let limit = t.map_or(ev.len(), |t| ev.partition_point(|e| e.t_us < t));
        while cursor < limit {
            let n = rng.gen_range(1..=50).min(limit - cursor);
            out.extend(s.push_events(&ev[cursor..cursor + n]).map_err(|e| e.to_string())?);
            cursor += n;
            watch(&s)?;
        }
        if let (Some(t), Some(img)) = (t, img) {
            out.extend(s.push_frame(t, img).map_err(|e| e.to_string())?);
            watch(&s)?;
        }
    }
    out.extend(s.finish().map_err(|e| e.to_string())?);
    watch(&s)?;
    let handoffs = s.records().len() - 1;
    ensure!(handoffs >= 3, "only {handoffs} hand-offs");
    ensure!(compared > 0, "templates never observed twice");
    // training mode keeps everything on one graph; the outputs still agree
    let streamed = assemble_tracks(&out);
    let d_stream = max_diff(&streamed, &reference);
    ensure!(d_stream <= 1e-5, "streaming deviates from offline by {d_stream}");
    let streamed_inference = stream_inference(&m, &seq, 2)?;
    ensure!(streamed_inference == reference, "inference streaming is not bitwise equal to offline");

    // query permutation
    let mut rev = seq.queries.clone();
    rev.reverse();
    let permuted = run_offline(&m, &seq.recording(), &rev).map_err(|e| e.to_string())?;
    let d_perm = max_diff(&reference, &permuted);
    ensure!(d_perm <= 1e-4, "permutation changes outputs by {d_perm}");

    // 200 Hz output from 24 Hz frames, with and without dropped frames
    let sparse: Vec<_> = seq.frames.iter().step_by(2).cloned().collect();
    let rec = Recording { frames: &sparse, events: &seq.events, t_begin: 0, t_end: seq.t_end };
    let dropped = run_offline(&m, &rec, &seq.queries).map_err(|e| e.to_string())?;
    for (q, (a, b)) in seq.queries.iter().zip(reference.iter().zip(&dropped)) {
        let birth = q.t_us.div_ceil(5000) * 5000;
        let grid: Vec<u64> = (0..40).map(|k| k * 5000).filter(|&t| t >= birth).collect();
        ensure!(a.samples.iter().map(|s| s.0).eq(grid.iter().copied()), "query {} not on the 200 Hz grid", q.id);
        ensure!(b.samples.iter().map(|s| s.0).eq(grid.iter().copied()), "query {} loses slices with fewer frames", q.id);
    }

    // ablations
    let base = small_tracker();
    let ablations = [
        ("fixed-window", TrackerConfig { accumulate: AccumulateMode::Fixed { window_us: 10_000 }, ..base.clone() }),
        ("no-time-embed", TrackerConfig { time_embed: false, ..base.clone() }),
        ("frames-only", TrackerConfig { use_events: false, ..base.clone() }),
        ("events-only", TrackerConfig { use_frames: false, ..base.clone() }),
    ];
    for (name, cfg) in ablations {
        let am = m.clone().with_runtime(&cfg).map_err(|e| e.to_string())?;
        let got = run_offline(&am, &seq.recording(), &seq.queries).map_err(|e| format!("{name}: {e}"))?;
        let d = max_diff(&reference, &got);
        ensure!(d > 1e-3, "{name} output equals the full model (diff {d})");
    }
    within(t0, Duration::from_secs(300))?;
    Ok(format!(
        "templates bitwise over {handoffs} hand-offs, streaming equal, permutation {d_perm:.1e}, 200 Hz from {} frames, 4 ablations distinct, {:.1}s",
        seq.frames.len(),
        t0.elapsed().as_secs_f64()
    ))
}

fn stream_inference(m: &FeTapModel, seq: &Sequence, seed: u64) -> Result<Vec<Track>, String> {
    let mut s = TrackSession::new(m, &seq.queries, seq.width(), seq.height(), 0, Some(seq.t_end), false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ev = seq.events.events();
    let mut out = Vec::new();
    let mut cursor = 0;
    for (t, img) in seq.frames.iter().map(|(t, i)| (Some(*t), Some(i))).chain([(None, None)]) {
        let limit = t.map_or(ev.len(), |t| ev.partition_point(|e| e.t_us < t));
        while cursor < limit {
            let n = rng.gen_range(1..=50).min(limit - cursor);
            out.extend(s.push_events(&ev[cursor..cursor + n]).map_err(|e| e.to_string())?);
            cursor += n;
        }
        if let (Some(t), Some(img)) = (t, img) {
            out.extend(s.push_frame(t, img).map_err(|e| e.to_string())?);
        }
    }
    out.extend(s.finish().map_err(|e| e.to_string())?);
    Ok(assemble_tracks(&out))
}

fn toy_tracker() -> TrackerConfig {
    TrackerConfig { window: 16, step: 8, iterations: 4, channels: 64, stride: 4, ..TrackerConfig::default() }
}

fn toy_arch() -> ArchConfig {
    ArchConfig {
        widths: vec![16, 24, 32],
        fpn_dim: 32,
        fusion_kernel: 1,
        refiner: RefinerConfig { blocks: 2, heads: 4, dim: 128, mlp_ratio: 2 },
        ..ArchConfig::default()
    }
}

fn a5() -> Outcome {
    let t0 = Instant::now();
    let synth = SynthConfig { width: 64, height: 64, min_sprites: 2, max_sprites: 2, queries: 4, sprite_query_fraction: 1.0, ..SynthConfig::default() };
    let seq = Sequence::from_sample("toy", generate_sample(&synth, 11).map_err(|e| e.to_string())?);
    ensure!(seq.queries.len() == 4, "{} queries", seq.queries.len());
    let cfg = TrainConfig { steps: 800, warmup_steps: 40, ..TrainConfig::default() };
    let mut trainer = Trainer::new(&toy_tracker(), &toy_arch(), cfg).map_err(|e| e.to_string())?;
    let data = [seq.clone()];
    let first = trainer.step(&data).map_err(|e| e.to_string())?.loss;
    let mut last = first;
    while trainer.step < trainer.cfg.steps {
        last = trainer.step(&data).map_err(|e| e.to_string())?.loss;
    }
    let drop = 1.0 - last / first;
    let tracks = run_offline(&trainer.model, &seq.recording(), &seq.queries).map_err(|e| e.to_string())?;
    let epe = mean_endpoint_error(&tracks, &seq.gt).ok_or("no overlap with ground truth")?;
    let summary = format!("loss {first:.3} -> {last:.3} ({:.1}% lower) in {} steps, EPE {epe:.3} px, {:.0}s", 100.0 * drop, trainer.step, t0.elapsed().as_secs_f64());
    ensure!(drop >= 0.9, "{summary}");
    ensure!(epe <= 1.5, "{summary}");
    within(t0, Duration::from_secs(30 * 60))?;
    Ok(summary)
}

fn still_tracks(gt: &[GtTrack]) -> Vec<Track> {
    gt.iter().map(|g| Track { id: g.id, samples: g.samples.iter().map(|&(t, _, _)| (t, g.samples[0].1, g.samples[0].2)).collect() }).collect()
}

fn a6() -> Outcome {
    let t0 = Instant::now();
    let synth = SynthConfig { width: 64, height: 64, ..SynthConfig::default() };
    let (_, train) = generate_dataset(&synth, 1, 50).map_err(|e| e.to_string())?;
    let (_, test) = generate_dataset(&SynthConfig { translation_only: true, ..synth }, 2, 10).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { steps: 1500, warmup_steps: 75, ..TrainConfig::default() };
    let mut trainer = Trainer::new(&toy_tracker(), &toy_arch(), cfg).map_err(|e| e.to_string())?;
    while trainer.step < trainer.cfg.steps {
        trainer.step(&train).map_err(|e| e.to_string())?;
    }
    let (mut fa, mut still) = (0.0, 0.0);
    for s in &test {
        let tracks = run_offline(&trainer.model, &s.recording(), &s.queries).map_err(|e| e.to_string())?;
        fa += evaluate(&s.name, &tracks, &s.gt, 8.0).map_err(|e| e.to_string())?.fa_avg;
        still += evaluate(&s.name, &still_tracks(&s.gt), &s.gt, 8.0).unwrap().fa_avg;
    }
    let (fa, still) = (fa / test.len() as f64, still / test.len() as f64);
    let summary = format!("FA(8) {fa:.3} over 10 held-out sequences (zero-motion baseline {still:.3}), {:.0}s", t0.elapsed().as_secs_f64());
    ensure!(fa >= 0.5, "{summary}");
    within(t0, Duration::from_secs(2 * 3600))?;
    Ok(summary)
}

fn a7() -> Outcome {
    let gt = GtTrack::new(0, (0..11).map(|k| (k * 10_000, k as f32, 0.0)).collect());
    // within 5 px for six samples, then 6 px off
    let pred = Track { id: 0, samples: gt.samples.iter().enumerate().map(|(k, &(t, x, y))| (t, x + if k < 6 { 2.0 } else { 6.0 }, y)).collect() };
    let fa = feature_age(Some(&pred), &gt, 5.0).map_err(|e| e.to_string())?;
    ensure!((fa - 0.6).abs() < 1e-12, "FA {fa}, want 0.6");
    let efa = expected_feature_age(&[0.8, 0.0], &[true, false]).map_err(|e| e.to_string())?;
    ensure!((efa - 0.4).abs() < 1e-12, "EFA {efa}, want 0.4");
    let perfect = Track { id: 0, samples: gt.samples.clone() };
    let r = evaluate("fixture", &[perfect], &[gt], 5.0).map_err(|e| e.to_string())?;
    ensure!(r.fa_avg == 1.0 && r.efa_avg == 1.0, "perfect predictions give FA {} EFA {}", r.fa_avg, r.efa_avg);
    ensure!(fa_avg(&[0.8, 0.0], &[true, false]) == 0.8, "FA average over tracked tracks");
    Ok("FA 0.6, EFA 0.4, perfect 1.0".into())
}

fn fetap(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fetap")).args(args).output().map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "fetap {}: {}", args[0], String::from_utf8_lossy(&out.stderr).trim());
    Ok(())
}

fn pipeline_run(root: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let p = |name: &str| -> PathBuf { root.join(name) };
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, weights, tracks, report) = (p("data"), p("w.bin"), p("tracks.csv"), p("metrics.json"));
    fetap(&["gen-synth", "--out", &s(&data), "--seed", "42", "--scenes", "4", "--config", &s(&config)])?;
    fetap(&["train", "--data", &s(&data), "--config", &s(&config), "--out", &s(&weights), "--steps", "100", "--seed", "42"])?;
    let seq = data.join("seq_000");
    fetap(&["track", "--data", &s(&seq), "--weights", &s(&weights), "--out", &s(&tracks)])?;
    fetap(&["eval", "--pred", &s(&tracks), "--gt", &s(&seq), "--out", &s(&report)])?;
    Ok((fs::read(&tracks).map_err(|e| e.to_string())?, fs::read(&report).map_err(|e| e.to_string())?))
}

fn a8() -> Outcome {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (t1, m1) = pipeline_run(d1.path())?;
    let (t2, m2) = pipeline_run(d2.path())?;
    ensure!(t1 == t2, "track CSVs differ");
    ensure!(m1 == m2, "metric JSONs differ");
    ensure!(!t1.is_empty() && !m1.is_empty(), "empty outputs");
    Ok(format!("two runs: {} byte track CSV and {} byte metric JSON identical", t1.len(), m1.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [("A1", a1), ("A2", a2), ("A3", a3), ("A4", a4), ("A5", a5), ("A6", a6), ("A7", a7), ("A8", a8)];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("{name} PASS {detail}"),
            Err(detail) => {
                println!("{name} FAIL {detail}");
                failed += 1;
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
