mod common;

use common::{small_arch, small_tracker};
use fetap_core::dataset::Sequence;
use fetap_core::error::Error;
use fetap_core::loss::LossConfig;
use fetap_core::model::FeTapModel;
use fetap_core::synth::{generate_sample, SynthConfig};
use fetap_core::train::{sequence_loss, TrainConfig, Trainer};
use fetap_tensor::Tensor;

fn short_sequence(seed: u64) -> Sequence {
    let cfg = SynthConfig { width: 40, height: 32, duration_us: 100_000, queries: 3, ..SynthConfig::default() };
    Sequence::from_sample(format!("s{seed}"), generate_sample(&cfg, seed).unwrap())
}

fn train_cfg() -> TrainConfig {
    TrainConfig { steps: 20, warmup_steps: 2, ..TrainConfig::default() }
}

#[test]
fn zero_model_loss_matches_hand_computation() {
    let seq = short_sequence(1);
    let tracker = small_tracker();
    let mut m = FeTapModel::new(&tracker, &small_arch()).unwrap();
    m.store.zero_all();
    let (loss, _) = sequence_loss(&m, &seq, &LossConfig::default()).unwrap();
    // 21 slices: one full window at slice 0 and one trailing window at 8..20
    let weight_sum: f64 = [0.512, 0.64, 0.8, 1.0].iter().sum();
    let mut want = 0.0;
    for (start, len) in [(0usize, 16usize), (8, 13)] {
        let (mut total, mut count) = (0.0f64, 0usize);
        for k in start..start + len {
            let t = k as u64 * 5000;
            for q in &seq.queries {
                let g = seq.gt.iter().find(|g| g.id == q.id).unwrap();
                if let Some(&(_, x, y)) = g.samples.iter().find(|s| s.0 == t) {
                    total += (x - q.x).abs() as f64 + (y - q.y).abs() as f64;
                    count += 1;
                }
            }
        }
        want += weight_sum * total / count as f64;
    }
    assert!(((loss as f64) - want).abs() < 1e-3 * want.max(1.0), "{loss} vs {want}");
}

#[test]
fn fixed_seed_reproduces_the_loss_curve() {
    let data = [short_sequence(2), short_sequence(3)];
    let run = || {
        let mut t = Trainer::new(&small_tracker(), &small_arch(), train_cfg()).unwrap();
        (0..4).map(|_| t.step(&data).unwrap().loss).collect::<Vec<f32>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().all(|l| l.is_finite() && *l > 0.0));
}

#[test]
fn resume_reproduces_the_next_step() {
    let data = [short_sequence(4), short_sequence(5)];
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt.bin");
    let mut t = Trainer::new(&small_tracker(), &small_arch(), train_cfg()).unwrap();
    for _ in 0..3 {
        t.step(&data).unwrap();
    }
    t.save_checkpoint(&ckpt).unwrap();
    let next = t.step(&data).unwrap();
    let mut resumed = Trainer::resume(&ckpt).unwrap();
    assert_eq!(resumed.step, 3);
    let again = resumed.step(&data).unwrap();
    assert_eq!(next, again);
    for (a, b) in t.model.store.params().iter().zip(resumed.model.store.params()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn exported_weights_load_for_tracking() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let t = Trainer::new(&small_tracker(), &small_arch(), train_cfg()).unwrap();
    t.export(&path).unwrap();
    let (m, meta) = FeTapModel::load(&path).unwrap();
    assert_eq!(meta["steps_trained"], "0");
    assert_eq!(m.tracker, small_tracker());
    for (a, b) in t.model.store.params().iter().zip(m.store.params()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn non_finite_weights_abort_with_the_step() {
    let data = [short_sequence(6)];
    let mut t = Trainer::new(&small_tracker(), &small_arch(), train_cfg()).unwrap();
    t.step(&data).unwrap();
    let id = t.model.store.ids().last().unwrap();
    let shape = t.model.store.get(id).shape().to_vec();
    t.model.store.set(id, Tensor::full(&shape, f32::NAN)).unwrap();
    match t.step(&data) {
        Err(Error::Training { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected a training error, got {other:?}"),
    }
}
