//! Decoding raw head outputs to boxes and per-class non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::config::{DecodeConfig, STRIDES};
use super::loss::box_from_distances;
use crate::error::{invalid, Result};
use crate::geometry::BBox;
use crate::numerics::{sigmoid, softplus, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: u32,
    pub class: usize,
    /// Corner box in pixels, clipped to the image.
    pub bbox: BBox,
    pub score: f64,
}

/// Descending score; ties by class then corners so the order is total.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class.cmp(&b.class))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// Every (cell, class) whose probability reaches `score_threshold`, as a
/// clipped corner box. Boxes that clip to nothing are dropped.
pub fn decode<T: Real>(
    outputs: &[Tensor<T>],
    num_classes: usize,
    image_size: (usize, usize),
    score_threshold: f64,
    frame: u32,
) -> Result<Vec<Detection>> {
    if outputs.len() != STRIDES.len() {
        return Err(invalid(format!("decode: {} levels, expected {}", outputs.len(), STRIDES.len())));
    }
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let mut dets = Vec::new();
    for (out, &stride) in outputs.iter().zip(&STRIDES) {
        let (h, w, c) = out.hwc()?;
        if c != num_classes + 4 {
            return Err(invalid(format!("decode: {c} channels for {num_classes} classes")));
        }
        let s = stride as f64;
        for i in 0..h {
            for j in 0..w {
                let px = out.pixel(i, j);
                let mut boxed: Option<Option<BBox>> = None;
                for k in 0..num_classes {
                    let score = sigmoid(px[k].as_f64());
                    if score < score_threshold || !score.is_finite() {
                        continue;
                    }
                    let bbox = *boxed.get_or_insert_with(|| {
                        let d: [f64; 4] = std::array::from_fn(|e| softplus(px[num_classes + e].as_f64()) * s);
                        let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                        box_from_distances(cx, cy, d).clip(0.0, 0.0, iw, ih)
                    });
                    if let Some(bbox) = bbox {
                        dets.push(Detection {
                            frame,
                            class: k,
                            bbox,
                            score,
                        });
                    }
                }
            }
        }
    }
    Ok(dets)
}

/// Greedy per-class suppression: a box is dropped when its IoU with a
/// kept, higher-ranked box of the same class exceeds `iou_threshold`.
/// Output is in descending score order.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for d in dets {
        if by_class.len() <= d.class {
            by_class.resize(d.class + 1, Vec::new());
        }
        let suppressed = by_class[d.class]
            .iter()
            .any(|&k| kept[k].bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            by_class[d.class].push(kept.len());
            kept.push(d);
        }
    }
    kept
}

/// Reference suppression: repeatedly take the best remaining box and
/// delete every same-class box overlapping it too much.
pub fn nms_reference(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut remaining = dets.to_vec();
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if rank(&remaining[i], &remaining[best]) == Ordering::Less {
                best = i;
            }
        }
        let b = remaining.swap_remove(best);
        remaining.retain(|d| d.class != b.class || d.bbox.iou(&b.bbox) <= iou_threshold);
        out.push(b);
    }
    out
}

/// Decode, suppress and cap one frame's outputs.
pub fn decode_and_nms<T: Real>(
    outputs: &[Tensor<T>],
    num_classes: usize,
    image_size: (usize, usize),
    cfg: &DecodeConfig,
    frame: u32,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut d = nms(
        decode(outputs, num_classes, image_size, cfg.score_threshold, frame)?,
        cfg.iou_threshold,
    );
    d.truncate(cfg.max_detections);
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(b: BBox, score: f64, class: usize) -> Detection {
        Detection {
            frame: 0,
            class,
            bbox: b,
            score,
        }
    }

    #[test]
    fn identical_boxes_keep_the_best() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let out = nms(vec![det(b, 0.8, 0), det(b, 0.9, 0)], 0.5);
        assert_eq!(out, vec![det(b, 0.9, 0)]);
    }

    #[test]
    fn disjoint_boxes_and_other_classes_survive() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(20.0, 0.0, 30.0, 10.0);
        assert_eq!(nms(vec![det(a, 0.9, 0), det(b, 0.8, 0)], 0.5).len(), 2);
        assert_eq!(nms(vec![det(a, 0.9, 0), det(a, 0.8, 1)], 0.5).len(), 2);
    }

    #[test]
    fn matches_reference_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let dets: Vec<Detection> = (0..50)
                .map(|_| {
                    let x = rng.random_range(0.0..40.0);
                    let y = rng.random_range(0.0..40.0);
                    let w = rng.random_range(2.0..20.0);
                    let h = rng.random_range(2.0..20.0);
                    // coarse scores force ties
                    let score = (rng.random_range(0..20) as f64) / 20.0;
                    det(BBox::new(x, y, x + w, y + h), score, rng.random_range(0..3))
                })
                .collect();
            let thr = rng.random_range(0.1..0.9);
            let fast = nms(dets.clone(), thr);
            assert_eq!(fast, nms_reference(&dets, thr));
            assert_eq!(nms(fast.clone(), thr), fast);
            assert!(fast.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }

    #[test]
    fn decode_places_boxes_on_cells() {
        let c = 1;
        let mut outs: Vec<Tensor<f64>> = [(4, 4), (2, 2), (1, 1)]
            .iter()
            .map(|&(h, w)| Tensor::full(&[h, w, c + 4], -20.0))
            .collect();
        let px = outs[0].pixel_mut(2, 1);
        px[0] = 20.0;
        let r = (0.5f64.exp() - 1.0).ln(); // distance 4 at stride 8
        px[1..].iter_mut().for_each(|v| *v = r);
        let d = decode(&outs, c, (32, 32), 0.5, 7).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].frame, 7);
        let b = d[0].bbox;
        assert!((b.x1 - 8.0).abs() < 1e-9 && (b.y1 - 16.0).abs() < 1e-9 && (b.x2 - 16.0).abs() < 1e-9);
        // boxes leaving the image are clipped
        let px = outs[2].pixel_mut(0, 0);
        px[0] = 20.0;
        px[1..].iter_mut().for_each(|v| *v = 5.0);
        let d = decode_and_nms(&outs, c, (32, 32), &DecodeConfig::default(), 0).unwrap();
        assert!(d.iter().all(|d| d.bbox.x1 >= 0.0 && d.bbox.x2 <= 32.0 && d.bbox.y2 <= 32.0));
    }
}
