//! Toy training: one sequence per step, the loss summed over every refined
//! window of that sequence, AdamW with linear warm-up and cosine decay.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use fetap_tensor::io::{read_tensors, write_tensors};
use fetap_tensor::{adamw_step, clip_grad_norm, AdamW, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::loss::{window_loss, LossConfig};
use crate::model::{ArchConfig, FeTapModel};
use crate::pipeline::{TrackSession, TrackerConfig, WindowRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Peak learning rate, reached at the end of warm-up.
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
    /// Seed of the sequence order.
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final state.
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 5e-4,
            warmup_steps: 100,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config("lr must be positive, weight decay and clip norm non-negative".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!("warm-up {} exceeds {} steps", self.warmup_steps, self.steps)));
        }
        Ok(())
    }

    /// Linear warm-up from 0 to `lr`, then half-cosine decay to 0 at `steps`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Ground-truth rows and mask for one window record, `(t, n)` row-major
/// like the snapshots. A row counts when its slot is live and the query's
/// ground truth has a sample at that slice time.
pub fn record_targets(record: &WindowRecord, seq: &Sequence) -> (Tensor<f32>, Vec<bool>) {
    let n = record.queries.len();
    let mut gt = Vec::with_capacity(record.slice_times.len() * n * 2);
    let mut mask = Vec::with_capacity(record.slice_times.len() * n);
    for (t, &ts) in record.slice_times.iter().enumerate() {
        for (col, &qi) in record.queries.iter().enumerate() {
            let id = seq.queries[qi].id;
            let sample = seq
                .gt
                .iter()
                .find(|g| g.id == id)
                .and_then(|g| g.samples.binary_search_by_key(&ts, |s| s.0).ok().map(|i| g.samples[i]));
            match sample {
                Some((_, x, y)) if t >= record.valid_from[col] => {
                    gt.extend([x, y]);
                    mask.push(true);
                }
                _ => {
                    gt.extend([0.0, 0.0]);
                    mask.push(false);
                }
            }
        }
    }
    (Tensor::new(vec![mask.len(), 2], gt).expect("row count matches"), mask)
}

/// Loss over one sequence and its gradients in parameter store order.
pub fn sequence_loss(model: &FeTapModel, seq: &Sequence, loss: &LossConfig) -> Result<(f32, Vec<Tensor<f32>>)> {
    let mut session = TrackSession::new(model, &seq.queries, seq.width(), seq.height(), seq.t_begin, Some(seq.t_end), true)?;
    let events = seq.events.events();
    let mut cursor = 0;
    for (t, img) in &seq.frames {
        let upto = cursor + events[cursor..].partition_point(|e| e.t_us < *t);
        session.push_events(&events[cursor..upto])?;
        cursor = upto;
        session.push_frame(*t, img)?;
    }
    session.push_events(&events[cursor..])?;
    session.finish()?;
    let records = session.records().to_vec();
    let g = session.graph_mut();
    let mut total = None;
    for rec in &records {
        let (gt, mask) = record_targets(rec, seq);
        let l = window_loss(g, &rec.snapshots, &gt, &mask, loss)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let Some(total) = total else {
        return Err(Error::Usage(format!("sequence {} produced no refined window", seq.name)));
    };
    let value = g.value(total).item();
    let grads = g.backward(total)?.for_params(g, &model.store);
    Ok((value, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
}

/// Sequence used at `step`: a fresh seeded permutation every epoch, so the
/// order depends only on the seed and the step index.
pub fn sequence_for_step(seed: u64, step: usize, count: usize) -> usize {
    let epoch = step / count;
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    order.shuffle(&mut rng);
    order[step % count]
}

pub struct Trainer {
    pub model: FeTapModel,
    pub cfg: TrainConfig,
    /// Next step to run.
    pub step: usize,
    pub log: Vec<StepLog>,
}

impl Trainer {
    pub fn new(tracker: &TrackerConfig, arch: &ArchConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { model: FeTapModel::new(tracker, arch)?, cfg, step: 0, log: Vec::new() })
    }

    /// Runs one optimization step and returns its log entry.
    pub fn step(&mut self, data: &[Sequence]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::Usage("training needs at least one sequence".into()));
        }
        let step = self.step;
        let seq = &data[sequence_for_step(self.cfg.seed, step, data.len())];
        let diverged = |detail: String| Error::Training { step, detail };
        let (loss, mut grads) = sequence_loss(&self.model, seq, &self.cfg.loss).map_err(|e| match e {
            Error::Slice { source, .. } if matches!(*source, Error::Refinement { .. }) => diverged(source.to_string()),
            e => e,
        })?;
        if !loss.is_finite() {
            return Err(diverged(format!("loss is {loss} on sequence {}", seq.name)));
        }
        if self.cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, self.cfg.clip_norm);
        }
        let lr = self.cfg.learning_rate(step);
        let opt = AdamW { lr, weight_decay: self.cfg.weight_decay, ..AdamW::default() };
        adamw_step(&mut self.model.store, &grads, &opt).map_err(|e| diverged(e.to_string()))?;
        let entry = StepLog { step, loss, lr };
        self.log.push(entry);
        self.step += 1;
        Ok(entry)
    }

    /// Writes weights, optimizer moments and the step counter. The weight
    /// part alone is loadable with [`FeTapModel::load`] after
    /// [`Trainer::export`]; the checkpoint is read back by [`Trainer::resume`].
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let params = self.model.store.params();
        let moments: Vec<(String, Tensor<f32>)> = params
            .iter()
            .flat_map(|p| {
                let shape = p.value.shape().to_vec();
                [
                    (format!("adam_m/{}", p.name), Tensor::new(shape.clone(), p.m.clone()).expect("moment shape")),
                    (format!("adam_v/{}", p.name), Tensor::new(shape, p.v.clone()).expect("moment shape")),
                ]
            })
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("tracker".into(), serde_json::to_string(&self.model.tracker)?);
        meta.insert("arch".into(), serde_json::to_string(&self.model.arch)?);
        meta.insert("train".into(), serde_json::to_string(&self.cfg)?);
        meta.insert("step".into(), self.step.to_string());
        let adam_step = params.first().map_or(0, |p| p.step);
        meta.insert("adam_step".into(), adam_step.to_string());
        let tensors = params.iter().map(|p| (p.name.as_str(), &p.value)).chain(moments.iter().map(|(n, t)| (n.as_str(), t)));
        write_tensors(path, tensors, meta)?;
        Ok(())
    }

    pub fn resume(path: &Path) -> Result<Self> {
        let (manifest, tensors) = read_tensors(path)?;
        let meta = &manifest.metadata;
        let get = |key: &str| meta.get(key).ok_or_else(|| Error::format(path, format!("checkpoint lacks `{key}`")));
        let tracker: TrackerConfig = serde_json::from_str(get("tracker")?)?;
        let arch: ArchConfig = serde_json::from_str(get("arch")?)?;
        let cfg: TrainConfig = serde_json::from_str(get("train")?)?;
        let parse = |key: &str| get(key)?.parse::<u64>().map_err(|_| Error::format(path, format!("bad `{key}`")));
        let (step, adam_step) = (parse("step")? as usize, parse("adam_step")?);
        let mut model = FeTapModel::new(&tracker, &arch)?;
        let mut values = Vec::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("adam_m/") {
                m.insert(n.to_string(), t.into_data());
            } else if let Some(n) = name.strip_prefix("adam_v/") {
                v.insert(n.to_string(), t.into_data());
            } else {
                values.push((name, t));
            }
        }
        model.store.assign(values)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let (Some(mi), Some(vi)) = (m.remove(&name), v.remove(&name)) else {
                return Err(Error::format(path, format!("checkpoint lacks moments for `{name}`")));
            };
            model.store.set_state(id, mi, vi, adam_step)?;
        }
        Ok(Self { model, cfg, step, log: Vec::new() })
    }

    /// Writes the trained weights in the format read by [`FeTapModel::load`].
    pub fn export(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("steps_trained".into(), self.step.to_string());
        self.model.save(path, meta)
    }
}

/// Appends `step,loss,lr` rows, writing the header when the file is new.
pub fn append_loss_log(path: &Path, rows: &[StepLog]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "step,loss,lr")?;
    }
    for r in rows {
        writeln!(f, "{},{:.6},{:.8}", r.step, r.loss, r.lr)?;
    }
    Ok(())
}
