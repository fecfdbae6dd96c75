//! Streaming inference over videos with per-frame latency.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::DecodeConfig;
use super::decode::{decode_and_nms, Detection};
use super::network::Detector;
use crate::dataset::Category;
use crate::error::{invalid, Result};
use crate::evaluation::Prediction;
use crate::mstf::FlowState;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub frames: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl LatencyReport {
    pub fn from_samples(ms: &[f64]) -> Self {
        if ms.is_empty() {
            return Self::default();
        }
        let mut v = ms.to_vec();
        v.sort_by(f64::total_cmp);
        let pct = |p: f64| v[(((v.len() - 1) as f64) * p).round() as usize];
        Self {
            frames: v.len(),
            mean_ms: v.iter().sum::<f64>() / v.len() as f64,
            median_ms: pct(0.5),
            p95_ms: pct(0.95),
        }
    }
}

/// Detections of one stream, frame by frame, and the wall time of each frame.
#[derive(Debug, Clone)]
pub struct StreamOutput {
    pub detections: Vec<Vec<Detection>>,
    pub latencies_ms: Vec<f64>,
}

/// Run frames of one stream in order, carrying `state` across them.
pub fn run_stream(
    model: &Detector<f32>,
    frames: &[(u32, Tensor<f32>)],
    cfg: &DecodeConfig,
    state: &mut FlowState<f32>,
) -> Result<StreamOutput> {
    cfg.validate()?;
    if frames.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(invalid("run_stream: frame indices must increase"));
    }
    let size = model.config().input_size;
    let mut detections = Vec::with_capacity(frames.len());
    let mut latencies_ms = Vec::with_capacity(frames.len());
    for (index, image) in frames {
        let t0 = Instant::now();
        let out = model.forward_frame(image, state)?;
        let d = decode_and_nms(&out, model.config().num_classes, (size, size), cfg, *index)?;
        latencies_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        detections.push(d);
    }
    Ok(StreamOutput {
        detections,
        latencies_ms,
    })
}

/// Detections of one video in the evaluation format.
pub fn to_predictions(video_id: u32, detections: &[Vec<Detection>]) -> Vec<Prediction> {
    detections
        .iter()
        .flatten()
        .filter_map(|d| {
            let cat = Category::from_class_index(d.class)?;
            Some(Prediction {
                video_id,
                frame_index: d.frame,
                category_id: cat.id(),
                bbox: d.bbox.to_xywh(),
                score: d.score,
            })
        })
        .collect()
}

/// Streaming inference over several videos. With `reset_per_video` each
/// video starts from a fresh state and videos run in parallel; otherwise
/// one state flows through them in the given order.
pub fn infer_videos<F>(
    model: &Detector<f32>,
    video_ids: &[u32],
    load: F,
    cfg: &DecodeConfig,
    reset_per_video: bool,
) -> Result<(Vec<Prediction>, LatencyReport)>
where
    F: Fn(u32) -> Result<Vec<(u32, Tensor<f32>)>> + Sync,
{
    let run = |vid: u32, state: &mut FlowState<f32>| -> Result<(Vec<Prediction>, Vec<f64>)> {
        let frames = load(vid)?;
        let out = run_stream(model, &frames, cfg, state)?;
        Ok((to_predictions(vid, &out.detections), out.latencies_ms))
    };
    let per_video: Vec<(Vec<Prediction>, Vec<f64>)> = if reset_per_video {
        video_ids
            .par_iter()
            .map(|&v| run(v, &mut FlowState::new()))
            .collect::<Result<_>>()?
    } else {
        let mut state = FlowState::new();
        video_ids.iter().map(|&v| run(v, &mut state)).collect::<Result<_>>()?
    };
    let mut preds = Vec::new();
    let mut ms = Vec::new();
    for (p, l) in per_video {
        preds.extend(p);
        ms.extend(l);
    }
    Ok((preds, LatencyReport::from_samples(&ms)))
}
