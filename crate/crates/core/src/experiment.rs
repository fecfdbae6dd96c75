//! Desk-scale ablation harness: the same small detector trained with and
//! without the fusion neck on synthetic moving-object video, over several
//! seeds, scored by size-bucketed AP on held-out videos.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{synthesize, AugmentParams, SynthOutput, SynthPreset, SynthSpec};
use crate::detector::{infer_videos, ClipDataset, DecodeConfig, Detector, DetectorConfig, TrainConfig, Trainer};
use crate::error::{invalid, Result};
use crate::evaluation::{evaluate, EvalConfig};
use crate::mstf::SplitRatio;

/// One configuration under comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub split_ratio: SplitRatio,
    pub fusion_start_epoch: usize,
}

impl Arm {
    pub fn new(name: &str, split_ratio: SplitRatio, fusion_start_epoch: usize) -> Self {
        Self {
            name: name.into(),
            split_ratio,
            fusion_start_epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Training videos; each is cut into clips of `train.clip_len` frames.
    pub train_data: SynthSpec,
    pub train_data_seed: u64,
    pub test_videos: usize,
    pub test_data_seed: u64,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// Model-initialisation and shuffling seeds, one run per seed and arm.
    pub seeds: Vec<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut detector = DetectorConfig {
            input_size: 64,
            stem_widths: [16, 24],
            widths: [32, 32, 32],
            head_width: 32,
            fusion_start_epoch: 2,
            augmentation: AugmentParams::NONE,
            ..Default::default()
        };
        detector.mstf.corr_dim = 16;
        detector.mstf.lookup.radii = vec![2, 2, 1];
        Self {
            train_data: SynthSpec {
                videos: 200,
                ..SynthSpec::preset(SynthPreset::Bench)
            },
            train_data_seed: 1000,
            test_videos: 40,
            test_data_seed: 2000,
            detector,
            train: TrainConfig {
                epochs: 10,
                batch_clips: 4,
                lr: 0.05,
                warmup_steps: 20,
                ..Default::default()
            },
            decode: DecodeConfig {
                score_threshold: 0.01,
                ..Default::default()
            },
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Generated training clips and held-out videos.
pub struct BenchData {
    pub train: ClipDataset,
    pub test: SynthOutput,
}

impl BenchData {
    pub fn generate(cfg: &BenchConfig) -> Result<Self> {
        let train_out = synthesize(&cfg.train_data, cfg.train_data_seed)?;
        let train = ClipDataset::from_videos(
            train_out.frames.keys().map(|&v| train_out.samples(v)),
            cfg.train.clip_len,
        );
        let test_spec = SynthSpec {
            videos: cfg.test_videos,
            ..cfg.train_data.clone()
        };
        let test = synthesize(&test_spec, cfg.test_data_seed)?;
        Ok(Self { train, test })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: String,
    pub seed: u64,
    pub ap: f64,
    pub ap_es: f64,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: Vec<RunResult>,
    pub median_ap: f64,
    pub median_ap_es: f64,
    /// Sample standard deviation of overall AP across seeds.
    pub std_ap: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample (n - 1) standard deviation; zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Train one arm from `seed` and score it on the held-out videos.
pub fn run_arm(cfg: &BenchConfig, data: &BenchData, arm: &Arm, seed: u64) -> Result<RunResult> {
    let t0 = Instant::now();
    let mut detector = cfg.detector.clone();
    detector.mstf.lookup.split_ratio = arm.split_ratio;
    detector.fusion_start_epoch = arm.fusion_start_epoch;
    let model = Detector::new(detector, seed)?;
    let mut trainer = Trainer::new(model, TrainConfig { seed, ..cfg.train.clone() })?;
    let report = trainer.run(&data.train, None, None, None)?;
    let losses = report.epochs.iter().map(|e| e.loss).collect();

    let test = &data.test;
    let ids: Vec<u32> = test.frames.keys().copied().collect();
    let load = |v: u32| -> Result<_> {
        let frames = test.frames.get(&v).ok_or_else(|| invalid(format!("no frames for video {v}")))?;
        Ok(frames.iter().enumerate().map(|(i, f)| (i as u32, f.clone())).collect())
    };
    let (preds, _) = infer_videos(&trainer.model, &ids, load, &cfg.decode, true)?;
    let result = evaluate(&preds, &test.set, &EvalConfig::default())?;
    let ap_es = result.bucket("es").and_then(|b| b.ap).unwrap_or(0.0);
    Ok(RunResult {
        arm: arm.name.clone(),
        seed,
        ap: result.ap.unwrap_or(0.0),
        ap_es,
        losses,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Every arm over every seed, with `progress` called after each run.
pub fn run_benchmark(
    cfg: &BenchConfig,
    data: &BenchData,
    arms: &[Arm],
    mut progress: impl FnMut(&RunResult),
) -> Result<Vec<ArmSummary>> {
    let mut out = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut runs = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let r = run_arm(cfg, data, arm, seed)?;
            progress(&r);
            runs.push(r);
        }
        let ap: Vec<f64> = runs.iter().map(|r| r.ap).collect();
        let ap_es: Vec<f64> = runs.iter().map(|r| r.ap_es).collect();
        out.push(ArmSummary {
            arm: arm.name.clone(),
            median_ap: median(&ap),
            median_ap_es: median(&ap_es),
            std_ap: std_dev(&ap),
            runs,
        });
    }
    Ok(out)
}
