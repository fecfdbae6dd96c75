//! Clip sampling, momentum SGD with a cosine schedule, and the epoch loop
//! with its fusion-start bypass, metrics log and checkpoints.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{Optimizer, TrainConfig};
use super::loss::LossBreakdown;
use super::network::Detector;
use crate::dataset::{augment_clip, Sample};
use crate::error::{Error, Result};
use crate::mstf::Checkpoint;
use crate::numerics::{Grads, Tensor};

const MOMENTUM_PREFIX: &str = "momentum.";
const SECOND_MOMENT_PREFIX: &str = "second_moment.";

/// Fixed-length clips of consecutive frames, never crossing a video boundary.
#[derive(Debug, Clone, Default)]
pub struct ClipDataset {
    clips: Vec<Vec<Sample>>,
}

impl ClipDataset {
    /// Cut each video into non-overlapping clips of `clip_len` frames; a
    /// shorter tail is dropped.
    pub fn from_videos(videos: impl IntoIterator<Item = Vec<Sample>>, clip_len: usize) -> Self {
        let clip_len = clip_len.max(1);
        let clips = videos
            .into_iter()
            .flat_map(|v| v.chunks_exact(clip_len).map(<[Sample]>::to_vec).collect::<Vec<_>>())
            .collect();
        Self { clips }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clip(&self, i: usize) -> &[Sample] {
        &self.clips[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub classification: f64,
    pub box_iou: f64,
    pub fused: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    pub steps: usize,
}

/// splitmix64 finaliser over two words, for per-epoch and per-clip seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Linear warm-up then cosine decay to `min_lr_fraction * lr`.
pub fn learning_rate(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let warm = cfg.warmup_steps.min(total_steps);
    if step < warm {
        return cfg.lr * (step + 1) as f64 / warm as f64;
    }
    let span = (total_steps - warm).max(1) as f64;
    let t = ((step - warm) as f64 / span).min(1.0);
    let floor = cfg.lr * cfg.min_lr_fraction;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Training state: model, momentum buffers and progress counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Detector<f32>,
    config: TrainConfig,
    velocity: Vec<Tensor<f32>>,
    /// Adam only: running squared gradients and per-tensor update counts.
    second: Vec<Tensor<f32>>,
    updates: Vec<u64>,
    epoch: usize,
    step: usize,
    history: Vec<EpochSummary>,
}

impl Trainer {
    pub fn new(model: Detector<f32>, config: TrainConfig) -> Result<Self> {
        config.validate(model.config())?;
        let velocity: Vec<Tensor<f32>> = model.params().iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        let second = match config.optimizer {
            Optimizer::Adam => velocity.clone(),
            Optimizer::Sgd => Vec::new(),
        };
        Ok(Self {
            updates: vec![0; velocity.len()],
            model,
            config,
            velocity,
            second,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochSummary] {
        &self.history
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.model.to_checkpoint(json!({
            "epoch": self.epoch,
            "step": self.step,
            "train": self.config,
            "history": self.history,
            "updates": self.updates,
        }));
        for ((_, name, _), v) in self.model.params().iter().zip(&self.velocity) {
            c.push(format!("{MOMENTUM_PREFIX}{name}"), v);
        }
        for ((_, name, _), v) in self.model.params().iter().zip(&self.second) {
            c.push(format!("{SECOND_MOMENT_PREFIX}{name}"), v);
        }
        c
    }

    /// Restore a run saved by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = Detector::from_checkpoint(ckpt)?;
        let meta = &ckpt.metadata;
        let config: TrainConfig = serde_json::from_value(meta["train"].clone())?;
        let mut t = Self::new(model, config)?;
        let count = |k: &str| {
            meta.get(k)
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k:?}")))
        };
        t.epoch = count("epoch")?;
        t.step = count("step")?;
        t.history = serde_json::from_value(meta["history"].clone())?;
        let names: Vec<String> = t.model.params().iter().map(|(_, n, _)| n.to_string()).collect();
        for (v, name) in t.velocity.iter_mut().zip(&names) {
            *v = ckpt.tensor(&format!("{MOMENTUM_PREFIX}{name}"))?;
        }
        for (v, name) in t.second.iter_mut().zip(&names) {
            *v = ckpt.tensor(&format!("{SECOND_MOMENT_PREFIX}{name}"))?;
        }
        t.updates = serde_json::from_value(meta["updates"].clone())?;
        Ok(t)
    }

    fn total_steps(&self, data: &ClipDataset) -> usize {
        self.config.epochs * data.len().div_ceil(self.config.batch_clips)
    }

    /// One pass over the data. The neck is bypassed, and its parameters
    /// left untouched, before `fusion_start_epoch`.
    pub fn run_epoch(&mut self, data: &ClipDataset, mut metrics: Option<&mut (dyn Write + '_)>) -> Result<EpochSummary> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training data holds no complete clip".into()));
        }
        let start = Instant::now();
        let cfg = self.config.clone();
        let epoch = self.epoch;
        let fuse = self.model.is_temporal() && epoch >= self.model.config().fusion_start_epoch;
        let aug = self.model.config().augmentation;
        let total_steps = self.total_steps(data);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64)));

        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_clips) {
            let t0 = Instant::now();
            let model = &self.model;
            let results: Vec<Result<(LossBreakdown, Grads<f32>)>> = batch
                .par_iter()
                .map(|&ci| {
                    let seed = mix(mix(cfg.seed, epoch as u64), ci as u64 + 1);
                    let clip = augment_clip(data.clip(ci), &aug, seed)?;
                    let mut g = Grads::new(model.params());
                    let loss = model.clip_loss(&clip, fuse, Some(&mut g))?;
                    Ok((loss, g))
                })
                .collect();
            let mut grads = Grads::new(self.model.params());
            let mut loss = LossBreakdown::default();
            for r in results {
                let (l, g) = match r {
                    Ok(v) => v,
                    Err(Error::NonFinite(_)) => return Err(self.diverged()),
                    Err(e) => return Err(e),
                };
                loss.accumulate(&l);
                grads.merge(&g)?;
            }
            let inv = 1.0 / batch.len() as f64;
            loss.scale(inv);
            grads.scale(inv as f32);
            if !loss.total.is_finite() || !grads.all_finite() {
                return Err(self.diverged());
            }
            let norm = grads.global_norm();
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                grads.scale((cfg.grad_clip / norm) as f32);
            }
            let lr = learning_rate(&cfg, self.step, total_steps);
            self.apply(&grads, lr, fuse);
            if let Some(w) = metrics.as_deref_mut() {
                let line = json!({
                    "kind": "step",
                    "epoch": epoch,
                    "step": self.step,
                    "loss": loss.total,
                    "classification": loss.classification,
                    "box_iou": loss.box_iou,
                    "positives": loss.positives,
                    "lr": lr,
                    "grad_norm": norm,
                    "fused": fuse,
                    "ms": t0.elapsed().as_secs_f64() * 1e3,
                });
                writeln!(w, "{line}")?;
            }
            sum.accumulate(&loss);
            steps += 1;
            self.step += 1;
        }
        sum.scale(1.0 / steps as f64);
        let summary = EpochSummary {
            epoch,
            steps,
            loss: sum.total,
            classification: sum.classification,
            box_iou: sum.box_iou,
            fused: fuse,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = metrics {
            let mut v = serde_json::to_value(&summary)?;
            v["kind"] = json!("epoch");
            writeln!(w, "{v}")?;
        }
        self.history.push(summary.clone());
        self.epoch += 1;
        Ok(summary)
    }

    fn diverged(&self) -> Error {
        Error::Diverged {
            epoch: self.epoch,
            step: self.step,
        }
    }

    fn apply(&mut self, grads: &Grads<f32>, lr: f64, fuse: bool) {
        let cfg = &self.config;
        let mu = cfg.momentum as f32;
        let wd = cfg.weight_decay as f32;
        let lr = lr as f32;
        let ids: Vec<_> = self.model.params().iter().map(|(id, _, _)| id).collect();
        for (n, id) in ids.into_iter().enumerate() {
            if !fuse && self.model.is_neck_param(id) {
                continue;
            }
            self.updates[n] += 1;
            let w = self.model.params_mut().get_mut(id);
            let decay = if w.rank() >= 2 { wd } else { 0.0 };
            let g = grads.get(id);
            let grad = |k: usize| g.map_or(0.0, |g| g.data()[k]);
            let v = self.velocity[n].data_mut();
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (k, (vk, wk)) in v.iter_mut().zip(w.data_mut()).enumerate() {
                        *vk = mu * *vk + grad(k) + decay * *wk;
                        *wk -= lr * *vk;
                    }
                }
                Optimizer::Adam => {
                    let b2 = cfg.adam_beta2 as f32;
                    let t = self.updates[n] as i32;
                    let c1 = 1.0 - mu.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    let s = self.second[n].data_mut();
                    for (k, ((vk, sk), wk)) in v.iter_mut().zip(s.iter_mut()).zip(w.data_mut()).enumerate() {
                        let gk = grad(k);
                        *vk = mu * *vk + (1.0 - mu) * gk;
                        *sk = b2 * *sk + (1.0 - b2) * gk * gk;
                        let step = (*vk / c1) / ((*sk / c2).sqrt() + 1e-8);
                        *wk -= lr * (step + decay * *wk);
                    }
                }
            }
        }
    }

    /// Train until `epochs` (or `stop_after` epochs in total) have run,
    /// saving a checkpoint after every epoch when a path is given. A
    /// divergence aborts with the previous epoch's checkpoint left intact.
    pub fn run(
        &mut self,
        data: &ClipDataset,
        checkpoint: Option<&Path>,
        mut metrics: Option<&mut dyn Write>,
        stop_after: Option<usize>,
    ) -> Result<TrainReport> {
        let end = stop_after.map_or(self.config.epochs, |s| s.min(self.config.epochs));
        while self.epoch < end {
            let s = self.run_epoch(data, metrics.as_deref_mut())?;
            log::info!(
                "epoch {} loss {:.4} (cls {:.4}, box {:.4}) fused={} {:.1}s",
                s.epoch,
                s.loss,
                s.classification,
                s.box_iou,
                s.fused,
                s.seconds
            );
            if let Some(p) = checkpoint {
                self.checkpoint().save(p)?;
            }
        }
        Ok(TrainReport {
            epochs: self.history.clone(),
            steps: self.step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AugmentParams;
    use crate::dataset::{synthesize, SynthPreset, SynthSpec};
    use crate::detector::DetectorConfig;

    fn tiny() -> DetectorConfig {
        let mut c = DetectorConfig {
            input_size: 64,
            stem_widths: [16, 16],
            widths: [32, 32, 32],
            head_width: 32,
            fusion_start_epoch: 1,
            augmentation: AugmentParams::NONE,
            ..Default::default()
        };
        c.mstf.corr_dim = 8;
        c.mstf.lookup.radii = vec![2, 2, 2];
        c
    }

    fn data(videos: usize) -> ClipDataset {
        let mut spec = SynthSpec::preset(SynthPreset::Bench);
        spec.videos = videos;
        let out = synthesize(&spec, 3).unwrap();
        let ids: Vec<u32> = out.set.videos.iter().map(|v| v.id).collect();
        ClipDataset::from_videos(ids.into_iter().map(|id| out.samples(id)), 4)
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 10,
            min_lr_fraction: 0.1,
            ..Default::default()
        };
        assert!((learning_rate(&cfg, 0, 100) - 0.1).abs() < 1e-12);
        assert!((learning_rate(&cfg, 9, 100) - 1.0).abs() < 1e-12);
        assert!((learning_rate(&cfg, 10, 100) - 1.0).abs() < 1e-12);
        assert!((learning_rate(&cfg, 100, 100) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn clips_never_cross_videos() {
        let d = data(2);
        assert_eq!(d.len(), 4); // 2 videos x 8 frames
        assert!(d.clips.iter().all(|c| c.len() == 4));
    }

    #[test]
    fn neck_frozen_before_fusion_start() {
        let d = data(2);
        let model = Detector::new(tiny(), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_clips: 2,
            ..Default::default()
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        let neck_before: Vec<Tensor<f32>> = t
            .model
            .params()
            .iter()
            .filter(|(id, _, _)| t.model.is_neck_param(*id))
            .map(|(_, _, v)| v.clone())
            .collect();
        assert!(!neck_before.is_empty());
        let s = t.run_epoch(&d, None).unwrap();
        assert!(!s.fused);
        let after: Vec<Tensor<f32>> = t
            .model
            .params()
            .iter()
            .filter(|(id, _, _)| t.model.is_neck_param(*id))
            .map(|(_, _, v)| v.clone())
            .collect();
        assert_eq!(neck_before, after);
        assert!(t.run_epoch(&d, None).unwrap().fused);
        let changed: Vec<Tensor<f32>> = t
            .model
            .params()
            .iter()
            .filter(|(id, _, _)| t.model.is_neck_param(*id))
            .map(|(_, _, v)| v.clone())
            .collect();
        assert_ne!(after, changed);
    }

    #[test]
    fn metrics_lines_are_json() {
        let d = data(1);
        let cfg = TrainConfig {
            epochs: 1,
            batch_clips: 1,
            ..Default::default()
        };
        let mut t = Trainer::new(Detector::new(tiny(), 0).unwrap(), cfg).unwrap();
        let mut buf = Vec::new();
        t.run(&d, None, Some(&mut buf), None).unwrap();
        let lines: Vec<Value> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["kind"], "step");
        assert_eq!(lines[2]["kind"], "epoch");
        assert!(lines[0]["loss"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn divergence_keeps_the_last_good_checkpoint() {
        let d = data(1);
        let cfg = TrainConfig {
            epochs: 3,
            batch_clips: 1,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut t = Trainer::new(Detector::new(tiny(), 0).unwrap(), cfg).unwrap();
        t.run(&d, Some(&path), None, Some(1)).unwrap();
        let good = std::fs::read(&path).unwrap();
        let id = t.model.params().iter().next().unwrap().0;
        t.model.params_mut().get_mut(id).data_mut()[0] = f32::NAN;
        let err = t.run(&d, Some(&path), None, None).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
        assert_eq!(std::fs::read(&path).unwrap(), good);
        assert_eq!(Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap().epochs_done(), 1);
    }

    #[test]
    fn resume_continues_the_same_trajectory() {
        let d = data(2);
        for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
            let cfg = TrainConfig {
                epochs: 3,
                batch_clips: 2,
                optimizer,
                lr: if optimizer == Optimizer::Adam { 1e-3 } else { 0.02 },
                ..Default::default()
            };
            let mut full = Trainer::new(Detector::new(tiny(), 1).unwrap(), cfg.clone()).unwrap();
            let full_report = full.run(&d, None, None, None).unwrap();

            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ckpt.bin");
            let mut first = Trainer::new(Detector::new(tiny(), 1).unwrap(), cfg).unwrap();
            first.run(&d, Some(&path), None, Some(2)).unwrap();
            let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
            assert_eq!(resumed.epochs_done(), 2);
            let report = resumed.run(&d, Some(&path), None, None).unwrap();
            let (a, b) = (full_report.epochs[2].loss, report.epochs[2].loss);
            assert!((a - b).abs() <= 0.01 * a.abs(), "{optimizer:?}: {a} vs {b}");
            assert_eq!(report.steps, full_report.steps);
        }
    }

    #[test]
    fn overfits_a_small_fixture() {
        // ten clean clips, no augmentation, default optimiser: the loss
        // must fall below 5% of its starting value within 500 steps
        let mut spec = SynthSpec::preset(SynthPreset::Mixed);
        spec.videos = 5;
        spec.frames = 8;
        spec.width = 64;
        spec.height = 64;
        spec.size_mix.remove("m");
        spec.contrast = 0.8;
        spec.noise_std = 0.0;
        let out = synthesize(&spec, 8).unwrap();
        let ids: Vec<u32> = out.set.videos.iter().map(|v| v.id).collect();
        let d = ClipDataset::from_videos(ids.into_iter().map(|id| out.samples(id)), 4);
        assert_eq!(d.len(), 10);
        let mut c = tiny();
        c.fusion_start_epoch = 0;
        c.mstf.lookup.split_ratio = crate::mstf::SplitRatio::new(1, 0);
        let cfg = TrainConfig {
            epochs: 50,
            batch_clips: 1,
            warmup_steps: 10,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut t = Trainer::new(Detector::new(c, 2).unwrap(), cfg).unwrap();
        let initial = t.model.clip_loss(d.clip(0), false, None).unwrap().total
            + (1..d.len()).map(|i| t.model.clip_loss(d.clip(i), false, None).unwrap().total).sum::<f64>();
        let initial = initial / d.len() as f64;
        let report = t.run(&d, None, None, None).unwrap();
        assert_eq!(report.steps, 500);
        let fin = (0..d.len()).map(|i| t.model.clip_loss(d.clip(i), false, None).unwrap().total).sum::<f64>()
            / d.len() as f64;
        assert!(fin < 0.05 * initial, "initial {initial}, final {fin}");
    }
}
