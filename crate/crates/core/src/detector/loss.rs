//! Target assignment and the detection loss.
//!
//! A scored box claims the cell containing its centre at the coarsest
//! level whose stride does not exceed the box's longer side (stride 8 for
//! anything smaller). When two boxes claim one cell the smaller box wins.
//! Cells whose centre lies inside an ignore region contribute nothing.
//!
//! The loss is binary cross-entropy over every class logit of every
//! non-ignored cell plus `1 - IoU` over positive cells, both divided by the
//! number of positives (or 1).

use serde::{Deserialize, Serialize};

use super::config::STRIDES;
use crate::dataset::LabeledBox;
use crate::error::{invalid, Result};
use crate::geometry::BBox;
use crate::numerics::{sigmoid, softplus, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellTarget {
    Negative,
    Ignore,
    Positive { class: usize, bbox: BBox },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major cell targets.
    pub cells: Vec<CellTarget>,
}

impl LevelTargets {
    pub fn positives(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c, CellTarget::Positive { .. }))
            .count()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub box_iou: f64,
    pub positives: usize,
    /// No cell was positive, so only the classification term is present.
    pub no_positives: bool,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, o: &Self) {
        self.total += o.total;
        self.classification += o.classification;
        self.box_iou += o.box_iou;
        self.positives += o.positives;
        self.no_positives = self.positives == 0;
    }

    pub fn scale(&mut self, s: f64) {
        self.total *= s;
        self.classification *= s;
        self.box_iou *= s;
    }
}

/// Level index a box of this size is assigned to.
pub fn level_for_box(b: &BBox) -> usize {
    let extent = b.width().max(b.height());
    STRIDES.iter().rposition(|&s| s as f64 <= extent).unwrap_or(0)
}

/// Targets for every level given `(height, width)` of each head grid.
pub fn assign_targets(boxes: &[LabeledBox], grids: &[(usize, usize)]) -> Vec<LevelTargets> {
    let mut levels: Vec<LevelTargets> = grids
        .iter()
        .zip(STRIDES)
        .map(|(&(h, w), s)| LevelTargets {
            stride: s,
            height: h,
            width: w,
            cells: vec![CellTarget::Negative; h * w],
        })
        .collect();
    for b in boxes {
        let Some(class) = b.class else { continue };
        let l = level_for_box(&b.bbox).min(levels.len() - 1);
        let lt = &mut levels[l];
        let s = lt.stride as f64;
        let (cx, cy) = b.bbox.center();
        let j = ((cx / s).floor().max(0.0) as usize).min(lt.width - 1);
        let i = ((cy / s).floor().max(0.0) as usize).min(lt.height - 1);
        let cell = &mut lt.cells[i * lt.width + j];
        let take = match cell {
            CellTarget::Positive { bbox, .. } => b.bbox.area() < bbox.area(),
            _ => true,
        };
        if take {
            *cell = CellTarget::Positive { class, bbox: b.bbox };
        }
    }
    let regions: Vec<&BBox> = boxes.iter().filter(|b| b.class.is_none()).map(|b| &b.bbox).collect();
    if !regions.is_empty() {
        for lt in &mut levels {
            let s = lt.stride as f64;
            for i in 0..lt.height {
                for j in 0..lt.width {
                    let cell = &mut lt.cells[i * lt.width + j];
                    if matches!(cell, CellTarget::Positive { .. }) {
                        continue;
                    }
                    let (x, y) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                    if regions.iter().any(|r| r.x1 <= x && x <= r.x2 && r.y1 <= y && y <= r.y2) {
                        *cell = CellTarget::Ignore;
                    }
                }
            }
        }
    }
    levels
}

/// `log(1 + e^x) - x*y`, stable for large |x|.
fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

/// Corner box from a cell centre and four edge distances (left, top,
/// right, bottom).
pub fn box_from_distances(cx: f64, cy: f64, d: [f64; 4]) -> BBox {
    BBox::new(cx - d[0], cy - d[1], cx + d[2], cy + d[3])
}

/// IoU of `p` with `g` and its gradient with respect to p's corners.
fn iou_with_grad(p: &BBox, g: &BBox) -> (f64, [f64; 4]) {
    let iw = p.x2.min(g.x2) - p.x1.max(g.x1);
    let ih = p.y2.min(g.y2) - p.y1.max(g.y1);
    let (pw, ph) = (p.width(), p.height());
    let ap = pw * ph;
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = ap + g.area() - inter;
    let iou = inter / union;
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    let di = [
        if p.x1 > g.x1 { -ih } else { 0.0 },
        if p.y1 > g.y1 { -iw } else { 0.0 },
        if p.x2 < g.x2 { ih } else { 0.0 },
        if p.y2 < g.y2 { iw } else { 0.0 },
    ];
    let da = [-ph, -pw, ph, pw];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = d_inter * di[k] + d_area * da[k];
    }
    (iou, grad)
}

/// Loss of one frame's raw head outputs and its gradient with respect to them.
pub fn frame_loss<T: Real>(
    outputs: &[Tensor<T>],
    boxes: &[LabeledBox],
    num_classes: usize,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    if outputs.len() != STRIDES.len() {
        return Err(invalid(format!("frame_loss: {} levels, expected {}", outputs.len(), STRIDES.len())));
    }
    let mut grids = Vec::with_capacity(outputs.len());
    for o in outputs {
        let (h, w, c) = o.hwc()?;
        if c != num_classes + 4 {
            return Err(invalid(format!("frame_loss: {c} output channels for {num_classes} classes")));
        }
        grids.push((h, w));
    }
    let targets = assign_targets(boxes, &grids);
    let positives: usize = targets.iter().map(LevelTargets::positives).sum();
    let norm = positives.max(1) as f64;
    let mut cls = 0.0;
    let mut iou_loss = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    for (out, lt) in outputs.iter().zip(&targets) {
        let c = num_classes + 4;
        let s = lt.stride as f64;
        let x = out.data();
        let mut g = Tensor::zeros(out.shape());
        let gd = g.data_mut();
        for (cell, t) in lt.cells.iter().enumerate() {
            let base = cell * c;
            let (class, bbox) = match *t {
                CellTarget::Ignore => continue,
                CellTarget::Negative => (None, None),
                CellTarget::Positive { class, bbox } => (Some(class), Some(bbox)),
            };
            for k in 0..num_classes {
                let logit = x[base + k].as_f64();
                let y = if class == Some(k) { 1.0 } else { 0.0 };
                cls += bce_with_logits(logit, y);
                gd[base + k] = T::lit((sigmoid(logit) - y) / norm);
            }
            if let Some(gt) = bbox {
                let (i, j) = (cell / lt.width, cell % lt.width);
                let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                let raw: [f64; 4] = std::array::from_fn(|k| x[base + num_classes + k].as_f64());
                let d = raw.map(|r| softplus(r) * s);
                let (iou, dp) = iou_with_grad(&box_from_distances(cx, cy, d), &gt);
                iou_loss += 1.0 - iou;
                let sign = [-1.0, -1.0, 1.0, 1.0];
                for k in 0..4 {
                    let dd = sign[k] * dp[k] * sigmoid(raw[k]) * s;
                    gd[base + num_classes + k] = T::lit(-dd / norm);
                }
            }
        }
        grads.push(g);
    }
    let classification = cls / norm;
    let box_iou = iou_loss / norm;
    Ok((
        LossBreakdown {
            total: classification + box_iou,
            classification,
            box_iou,
            positives,
            no_positives: positives == 0,
        },
        grads,
    ))
}
