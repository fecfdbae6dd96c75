//! Greedy score-ordered matching of detections to ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Diagnostic, Error, Result};
use crate::geometry::BBox;

/// Ground-truth box as seen by one matching pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    /// Matches against this box are neither TP nor FP.
    pub ignore: bool,
    /// Crowd and ignore regions: overlap is intersection over detection
    /// area, and the region may absorb any number of detections.
    pub crowd: bool,
}

impl GtBox {
    pub fn scored(bbox: BBox) -> Self {
        Self {
            bbox,
            ignore: false,
            crowd: false,
        }
    }

    pub fn region(bbox: BBox) -> Self {
        Self {
            bbox,
            ignore: true,
            crowd: true,
        }
    }

    /// Overlap used for matching a detection against this box.
    pub fn overlap(&self, det: &BBox) -> f64 {
        if self.crowd {
            let a = det.area();
            if a <= 0.0 {
                0.0
            } else {
                det.intersection(&self.bbox) / a
            }
        } else {
            det.iou(&self.bbox)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetOutcome {
    TruePositive { gt: usize },
    FalsePositive,
    /// Matched an ignored box; excluded from both counts.
    Ignored { gt: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameAssignment {
    pub detections: Vec<DetOutcome>,
    /// Per ground-truth box: taken by some detection.
    pub gt_matched: Vec<bool>,
    /// Per ground-truth box: copied from the input.
    pub gt_ignored: Vec<bool>,
}

impl FrameAssignment {
    pub fn true_positives(&self) -> usize {
        self.detections
            .iter()
            .filter(|d| matches!(d, DetOutcome::TruePositive { .. }))
            .count()
    }

    pub fn false_positives(&self) -> usize {
        self.detections.iter().filter(|d| **d == DetOutcome::FalsePositive).count()
    }

    pub fn false_negatives(&self) -> usize {
        self.gt_matched
            .iter()
            .zip(&self.gt_ignored)
            .filter(|(m, ig)| !**m && !**ig)
            .count()
    }
}

fn check_inputs(dets: &[DetBox], gts: &[GtBox], iou_threshold: f64) -> Result<()> {
    let mut diags = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        if !d.bbox.is_valid() || !d.score.is_finite() {
            diags.push(Diagnostic::new(format!("detection {i}"), format!("malformed box {:?} or score {}", d.bbox, d.score)));
        }
    }
    for (i, g) in gts.iter().enumerate() {
        if !g.bbox.is_valid() {
            diags.push(Diagnostic::new(format!("ground truth {i}"), format!("malformed box {:?}", g.bbox)));
        }
    }
    if !diags.is_empty() {
        return Err(Error::Validation(diags));
    }
    if dets.windows(2).any(|w| w[0].score < w[1].score) {
        return Err(invalid("match_frame: detections must be sorted by descending score"));
    }
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(invalid(format!("match_frame: IoU threshold {iou_threshold} outside [0, 1]")));
    }
    Ok(())
}

/// Greedy matching in score order.
///
/// Each detection takes the unmatched scored box with the highest overlap
/// at or above the threshold (the later box on exact ties). Only when none
/// qualifies may it fall back to an ignored box, which discards it. Crowd
/// regions stay available after being matched.
pub fn match_frame(dets: &[DetBox], gts: &[GtBox], iou_threshold: f64) -> Result<FrameAssignment> {
    check_inputs(dets, gts, iou_threshold)?;
    // scored boxes first, each group in input order
    let order: Vec<usize> = (0..gts.len())
        .filter(|&g| !gts[g].ignore)
        .chain((0..gts.len()).filter(|&g| gts[g].ignore))
        .collect();
    let floor = iou_threshold.min(1.0 - 1e-10);
    let mut gt_matched = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best = floor;
        let mut m: Option<usize> = None;
        for &g in &order {
            let gt = &gts[g];
            if gt_matched[g] && !gt.crowd {
                continue;
            }
            if m.is_some_and(|m| !gts[m].ignore) && gt.ignore {
                break;
            }
            let o = gt.overlap(&d.bbox);
            if o < best {
                continue;
            }
            best = o;
            m = Some(g);
        }
        outcomes.push(match m {
            None => DetOutcome::FalsePositive,
            Some(g) => {
                gt_matched[g] = true;
                if gts[g].ignore {
                    DetOutcome::Ignored { gt: g }
                } else {
                    DetOutcome::TruePositive { gt: g }
                }
            }
        });
    }
    Ok(FrameAssignment {
        detections: outcomes,
        gt_matched,
        gt_ignored: gts.iter().map(|g| g.ignore).collect(),
    })
}

/// Reference matcher: materialises the whole overlap matrix and, per
/// detection, scans every box in two explicit passes.
pub fn match_frame_brute_force(dets: &[DetBox], gts: &[GtBox], iou_threshold: f64) -> Result<FrameAssignment> {
    check_inputs(dets, gts, iou_threshold)?;
    let floor = iou_threshold.min(1.0 - 1e-10);
    let overlaps: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| gts.iter().map(|g| g.overlap(&d.bbox)).collect())
        .collect();
    let mut taken = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(dets.len());
    for row in &overlaps {
        let available = |g: usize, taken: &[bool]| !taken[g] || gts[g].crowd;
        let pick = |want_ignored: bool, taken: &[bool]| -> Option<usize> {
            let mut cands: Vec<usize> = (0..gts.len())
                .filter(|&g| gts[g].ignore == want_ignored && available(g, taken) && row[g] >= floor)
                .collect();
            // highest overlap, later index on ties
            cands.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            cands.last().copied()
        };
        let outcome = if let Some(g) = pick(false, &taken) {
            taken[g] = true;
            DetOutcome::TruePositive { gt: g }
        } else if let Some(g) = pick(true, &taken) {
            taken[g] = true;
            DetOutcome::Ignored { gt: g }
        } else {
            DetOutcome::FalsePositive
        };
        outcomes.push(outcome);
    }
    Ok(FrameAssignment {
        detections: outcomes,
        gt_matched: taken,
        gt_ignored: gts.iter().map(|g| g.ignore).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, s: f64) -> DetBox {
        DetBox {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            score: s,
        }
    }

    #[test]
    fn exact_overlap_is_tp() {
        let a = match_frame(&[det(0.0, 0.9)], &[GtBox::scored(BBox::new(0.0, 0.0, 10.0, 10.0))], 0.5).unwrap();
        assert_eq!(a.detections, vec![DetOutcome::TruePositive { gt: 0 }]);
        assert_eq!((a.true_positives(), a.false_positives(), a.false_negatives()), (1, 0, 0));
    }

    #[test]
    fn low_overlap_is_fp_and_fn() {
        // IoU 0.4 with the box shifted by 4.2857 px
        let shift = 10.0 * (1.0 - 0.4) / 1.4;
        let a = match_frame(&[det(shift, 0.9)], &[GtBox::scored(BBox::new(0.0, 0.0, 10.0, 10.0))], 0.5).unwrap();
        assert_eq!((a.true_positives(), a.false_positives(), a.false_negatives()), (0, 1, 1));
    }

    #[test]
    fn crowd_absorbs_many_detections() {
        let region = GtBox::region(BBox::new(0.0, 0.0, 100.0, 10.0));
        let a = match_frame(&[det(0.0, 0.9), det(20.0, 0.8), det(40.0, 0.7)], &[region], 0.5).unwrap();
        assert!(a.detections.iter().all(|d| matches!(d, DetOutcome::Ignored { .. })));
        assert_eq!(a.false_negatives(), 0);
    }

    #[test]
    fn scored_box_preferred_over_ignored() {
        let gts = [
            GtBox::region(BBox::new(0.0, 0.0, 10.0, 10.0)),
            GtBox::scored(BBox::new(2.0, 0.0, 12.0, 10.0)),
        ];
        let a = match_frame(&[det(0.0, 0.9)], &gts, 0.5).unwrap();
        assert_eq!(a.detections, vec![DetOutcome::TruePositive { gt: 1 }]);
    }

    #[test]
    fn one_gt_matched_once() {
        let gts = [GtBox::scored(BBox::new(0.0, 0.0, 10.0, 10.0))];
        let a = match_frame(&[det(0.0, 0.9), det(0.0, 0.8)], &gts, 0.5).unwrap();
        assert_eq!(a.detections[1], DetOutcome::FalsePositive);
    }

    #[test]
    fn unsorted_and_malformed_rejected() {
        let gts = [GtBox::scored(BBox::new(0.0, 0.0, 10.0, 10.0))];
        assert!(match_frame(&[det(0.0, 0.1), det(0.0, 0.8)], &gts, 0.5).is_err());
        let bad = DetBox {
            bbox: BBox::new(5.0, 0.0, 1.0, 10.0),
            score: 0.5,
        };
        assert!(matches!(match_frame(&[bad], &gts, 0.5), Err(Error::Validation(_))));
    }
}
