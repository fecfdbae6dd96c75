//! Dataset-level evaluation producing per-bucket and per-category AP.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ap::{iou_thresholds, mean, precision_at_recall};
use super::buckets::SizeBuckets;
use super::matching::{match_frame, DetBox, DetOutcome, GtBox};
use crate::dataset::schema::{Category, VideoAnnotationSet};
use crate::error::{path_err, Diagnostic, Error, Result};
use crate::geometry::{round_half_up, BBox};

pub const EVAL_FORMAT_VERSION: &str = "1.0";

/// Upper area limit of the unbounded "all" range.
const ALL_AREA: f64 = 1e10;

/// One scored detection in the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub video_id: u32,
    pub frame_index: u32,
    pub category_id: u32,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

impl Prediction {
    pub fn to_bbox(&self) -> BBox {
        BBox::from_xywh(self.bbox)
    }

    pub fn area(&self) -> f64 {
        self.bbox[2] * self.bbox[3]
    }
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| path_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Validation(vec![Diagnostic::new(
            format!("{} line {} column {}", path.display(), e.line(), e.column()),
            e.to_string(),
        )])
    })
}

pub fn save_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let text = serde_json::to_string(preds)?;
    std::fs::write(path, text).map_err(|e| path_err(path, e))
}

/// How size buckets restrict scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AreaMode {
    /// Out-of-bucket ground truth is ignored rather than removed, and
    /// unmatched detections outside the bucket are ignored.
    #[default]
    Coco,
    /// Ground truth and detections outside the bucket are removed before
    /// matching.
    HardFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub buckets: SizeBuckets,
    /// Detections kept per frame and category, highest scores first.
    pub max_dets: usize,
    pub area_mode: AreaMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            buckets: SizeBuckets::default(),
            max_dets: 100,
            area_mode: AreaMode::Coco,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketResult {
    pub name: String,
    /// `None` when the bucket holds no scored ground truth.
    pub ap: Option<f64>,
    pub gt: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category: String,
    pub ap: Option<f64>,
    pub gt: usize,
}

/// APs are percentages rounded half-up to four decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub format_version: String,
    pub area_mode: AreaMode,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub buckets: Vec<BucketResult>,
    pub categories: Vec<CategoryResult>,
    pub gt: usize,
    pub detections: usize,
}

impl EvalResult {
    pub fn bucket(&self, name: &str) -> Option<&BucketResult> {
        self.buckets.iter().find(|b| b.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table: AP, AP50, AP75, then one column per bucket.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
        let mut head = vec!["AP".to_string(), "AP50".into(), "AP75".into()];
        let mut row = vec![fmt(self.ap), fmt(self.ap50), fmt(self.ap75)];
        for b in &self.buckets {
            head.push(format!("AP_{}", b.name));
            row.push(fmt(b.ap));
        }
        let widths: Vec<usize> = head.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut s = String::new();
        let _ = writeln!(s, "{}", line(&head));
        let _ = writeln!(s, "{}", line(&row));
        s
    }
}

#[derive(Debug, Clone)]
struct GtRec {
    id: u64,
    bbox: BBox,
    area: f64,
}

#[derive(Debug, Clone)]
struct Frame {
    /// Scored ground truth per class index.
    gts: Vec<Vec<GtRec>>,
    /// Crowd and ignore regions, shared by every class.
    regions: Vec<GtRec>,
    /// Detections per class index, canonical order, capped at `max_dets`.
    dets: Vec<Vec<DetBox>>,
}

fn in_range(area: f64, lo: f64, hi: f64) -> bool {
    area >= lo && area <= hi
}

/// Closed area interval equivalent to a half-open bucket.
fn closed_range(buckets: &SizeBuckets, i: Option<usize>) -> (f64, f64) {
    match i {
        None => (0.0, ALL_AREA),
        Some(i) => {
            let b = &buckets.buckets()[i];
            (b.lo, b.hi.map_or(ALL_AREA, |h| h.next_down()))
        }
    }
}

fn check_predictions(preds: &[Prediction], frames: &BTreeMap<(u32, u32), usize>) -> Result<()> {
    let mut diags = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        let rec = format!("prediction {i}");
        match Category::from_id(p.category_id) {
            Some(c) if c.is_scorable() => {}
            _ => diags.push(Diagnostic::new(&rec, format!("unknown or unscorable category id {}", p.category_id))),
        }
        if !p.bbox.iter().all(|v| v.is_finite()) || p.bbox[2] <= 0.0 || p.bbox[3] <= 0.0 || !p.score.is_finite() {
            diags.push(Diagnostic::new(&rec, format!("malformed bbox {:?} or score {}", p.bbox, p.score)));
        }
        if !frames.contains_key(&(p.video_id, p.frame_index)) {
            diags.push(Diagnostic::new(
                &rec,
                format!("video {} frame {} is not in the annotations", p.video_id, p.frame_index),
            ));
        }
    }
    if diags.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(diags))
    }
}

fn score_order(a: &DetBox, b: &DetBox) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

fn build_frames(preds: &[Prediction], set: &VideoAnnotationSet, cfg: &EvalConfig) -> Result<Vec<Frame>> {
    let mut keys: Vec<(u32, u32)> = set
        .images
        .iter()
        .map(|i| (i.video_id, i.frame_index))
        .chain(set.annotations.iter().map(|a| (a.video_id, a.frame_index)))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let index: BTreeMap<(u32, u32), usize> = keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    check_predictions(preds, &index)?;
    let k = Category::NUM_SCORABLE;
    let mut frames = vec![
        Frame {
            gts: vec![Vec::new(); k],
            regions: Vec::new(),
            dets: vec![Vec::new(); k],
        };
        keys.len()
    ];
    let mut anns: Vec<_> = set.annotations.iter().collect();
    anns.sort_by_key(|a| a.id);
    for a in anns {
        let Some(cat) = a.category() else {
            return Err(Error::Validation(vec![Diagnostic::new(
                format!("annotation {}", a.id),
                format!("unknown category id {}", a.category_id),
            )]));
        };
        let f = &mut frames[index[&(a.video_id, a.frame_index)]];
        let rec = GtRec {
            id: a.id,
            bbox: a.to_bbox(),
            area: a.area,
        };
        match cat.class_index() {
            Some(c) => f.gts[c].push(rec),
            None => f.regions.push(rec),
        }
    }
    for p in preds {
        let c = Category::from_id(p.category_id).and_then(Category::class_index).expect("checked above");
        frames[index[&(p.video_id, p.frame_index)]].dets[c].push(DetBox {
            bbox: p.to_bbox(),
            score: p.score,
        });
    }
    for f in &mut frames {
        for d in &mut f.dets {
            d.sort_by(score_order);
            d.truncate(cfg.max_dets);
        }
    }
    Ok(frames)
}

/// Per IoU threshold, the 101-point precision of one (class, range) cell,
/// or `None` without scored ground truth.
fn class_range_precision(frames: &[Frame], class: usize, range: (f64, f64), mode: AreaMode) -> Result<Option<Vec<[f64; 101]>>> {
    let (lo, hi) = range;
    let thresholds = iou_thresholds();
    // detections over all frames: (score, outcome per threshold)
    let mut scored: Vec<(f64, Vec<Option<bool>>)> = Vec::new();
    let mut num_gt = 0usize;
    for f in frames {
        let dets: Vec<DetBox> = match mode {
            AreaMode::Coco => f.dets[class].clone(),
            AreaMode::HardFilter => f.dets[class]
                .iter()
                .filter(|d| in_range(d.bbox.area(), lo, hi))
                .copied()
                .collect(),
        };
        // ignored boxes interleaved by id, after the scored ones
        let mut ignored: Vec<(u64, GtBox)> = f.regions.iter().map(|r| (r.id, GtBox::region(r.bbox))).collect();
        let mut gts = Vec::new();
        for g in &f.gts[class] {
            if in_range(g.area, lo, hi) {
                gts.push(GtBox::scored(g.bbox));
            } else if mode == AreaMode::Coco {
                ignored.push((
                    g.id,
                    GtBox {
                        bbox: g.bbox,
                        ignore: true,
                        crowd: false,
                    },
                ));
            }
        }
        num_gt += gts.len();
        if dets.is_empty() {
            continue;
        }
        ignored.sort_by_key(|(id, _)| *id);
        gts.extend(ignored.into_iter().map(|(_, g)| g));
        let mut outcomes = vec![Vec::with_capacity(thresholds.len()); dets.len()];
        for &t in &thresholds {
            let a = match_frame(&dets, &gts, t)?;
            for (i, (d, o)) in dets.iter().zip(&a.detections).enumerate() {
                outcomes[i].push(match o {
                    DetOutcome::TruePositive { .. } => Some(true),
                    DetOutcome::Ignored { .. } => None,
                    DetOutcome::FalsePositive => {
                        let out_of_range = !in_range(d.bbox.area(), lo, hi);
                        (!out_of_range).then_some(false)
                    }
                });
            }
        }
        scored.extend(dets.iter().map(|d| d.score).zip(outcomes));
    }
    if num_gt == 0 {
        return Ok(None);
    }
    // stable: ties keep frame order, then within-frame order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let curves = (0..thresholds.len())
        .map(|t| {
            let tps: Vec<bool> = scored.iter().filter_map(|(_, o)| o[t]).collect();
            precision_at_recall(&tps, num_gt).expect("num_gt > 0")
        })
        .collect();
    Ok(Some(curves))
}

fn pct(v: Option<f64>) -> Option<f64> {
    v.map(|v| round_half_up(v * 100.0, 4))
}

/// Evaluate predictions against annotations; deterministic and independent
/// of input order and thread count.
pub fn evaluate(preds: &[Prediction], set: &VideoAnnotationSet, cfg: &EvalConfig) -> Result<EvalResult> {
    cfg.buckets.validate()?;
    if cfg.max_dets == 0 {
        return Err(Error::Config("max_dets must be positive".into()));
    }
    let frames = build_frames(preds, set, cfg)?;
    let k = Category::NUM_SCORABLE;
    let ranges: Vec<Option<usize>> = std::iter::once(None).chain((0..cfg.buckets.len()).map(Some)).collect();
    let cells: Vec<(usize, usize)> = (0..ranges.len()).flat_map(|r| (0..k).map(move |c| (r, c))).collect();
    let curves: Vec<Option<Vec<[f64; 101]>>> = cells
        .par_iter()
        .map(|&(r, c)| class_range_precision(&frames, c, closed_range(&cfg.buckets, ranges[r]), cfg.area_mode))
        .collect::<Result<_>>()?;

    // mean over (threshold, recall point, class), in that nesting order, of
    // classes with ground truth
    let range_ap = |r: usize, thresholds: &[usize]| -> Option<f64> {
        let present: Vec<&Vec<[f64; 101]>> = (0..k).filter_map(|c| curves[r * k + c].as_ref()).collect();
        let mut vals = Vec::with_capacity(thresholds.len() * 101 * present.len());
        for &t in thresholds {
            for p in 0..101 {
                vals.extend(present.iter().map(|cv| cv[t][p]));
            }
        }
        mean(&vals)
    };
    let all_t: Vec<usize> = (0..10).collect();

    let mut bucket_gt = vec![0usize; cfg.buckets.len()];
    let mut bucket_dets = vec![0usize; cfg.buckets.len()];
    let mut cat_gt = vec![0usize; k];
    for f in &frames {
        for c in 0..k {
            for g in &f.gts[c] {
                bucket_gt[cfg.buckets.bucket_of(g.area)] += 1;
                cat_gt[c] += 1;
            }
        }
    }
    for p in preds {
        bucket_dets[cfg.buckets.bucket_of(p.area())] += 1;
    }
    let buckets = (0..cfg.buckets.len())
        .map(|b| BucketResult {
            name: cfg.buckets.name(b).to_string(),
            ap: pct(range_ap(b + 1, &all_t)),
            gt: bucket_gt[b],
            detections: bucket_dets[b],
        })
        .collect();
    let categories = (0..k)
        .map(|c| {
            let vals: Vec<f64> = curves[c].iter().flatten().flat_map(|q| q.iter().copied()).collect();
            CategoryResult {
                category: Category::from_class_index(c).expect("scorable").name().to_string(),
                ap: pct(mean(&vals)),
                gt: cat_gt[c],
            }
        })
        .collect();
    Ok(EvalResult {
        format_version: EVAL_FORMAT_VERSION.to_string(),
        area_mode: cfg.area_mode,
        ap: pct(range_ap(0, &all_t)),
        ap50: pct(range_ap(0, &[0])),
        ap75: pct(range_ap(0, &[5])),
        buckets,
        categories,
        gt: cat_gt.iter().sum(),
        detections: preds.len(),
    })
}

/// Ground truth restated as predictions with score 1.
pub fn ground_truth_as_predictions(set: &VideoAnnotationSet) -> Vec<Prediction> {
    set.annotations
        .iter()
        .filter(|a| a.category().is_some_and(Category::is_scorable))
        .map(|a| Prediction {
            video_id: a.video_id,
            frame_index: a.frame_index,
            category_id: a.category_id,
            bbox: a.bbox,
            score: 1.0,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::schema::{Annotation, Video};

    fn ann(id: u64, frame: u32, cat: u32, bbox: [f64; 4]) -> Annotation {
        Annotation {
            id,
            video_id: 1,
            frame_index: frame,
            track_id: id,
            category_id: cat,
            bbox,
            area: bbox[2] * bbox[3],
            is_moving: false,
        }
    }

    fn set() -> VideoAnnotationSet {
        let mut s = VideoAnnotationSet::empty();
        s.videos.push(Video {
            id: 1,
            name: "v".into(),
            width: 200,
            height: 200,
            frame_count: 3,
        });
        s.annotations = vec![
            ann(1, 0, 1, [10.0, 10.0, 8.0, 8.0]),
            ann(2, 0, 2, [50.0, 50.0, 15.0, 15.0]),
            ann(3, 1, 1, [20.0, 20.0, 25.0, 25.0]),
            ann(4, 2, 5, [100.0, 100.0, 50.0, 50.0]),
        ];
        s
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let s = set();
        let r = evaluate(&ground_truth_as_predictions(&s), &s, &EvalConfig::default()).unwrap();
        assert_eq!(r.ap, Some(100.0));
        for b in &r.buckets {
            assert_eq!(b.ap.is_some(), b.gt > 0);
            if let Some(ap) = b.ap {
                assert_eq!(ap, 100.0, "{}", b.name);
            }
        }
        assert_eq!(r.bucket("l").unwrap().ap, None);
        assert_eq!(r.gt, 3);
    }

    #[test]
    fn empty_predictions_give_zero() {
        let s = set();
        let r = evaluate(&[], &s, &EvalConfig::default()).unwrap();
        assert_eq!(r.ap, Some(0.0));
        assert_eq!(r.bucket("es").unwrap().gt, 1);
    }

    #[test]
    fn crowd_region_absorbs_detections() {
        let s = set();
        let mut p = ground_truth_as_predictions(&s);
        for i in 0..3 {
            p.push(Prediction {
                video_id: 1,
                frame_index: 2,
                category_id: 1,
                bbox: [100.0 + 10.0 * i as f64, 110.0, 10.0, 10.0],
                score: 0.9,
            });
        }
        assert_eq!(evaluate(&p, &s, &EvalConfig::default()).unwrap().ap, Some(100.0));
    }

    #[test]
    fn unknown_category_and_frame_rejected() {
        let s = set();
        let mut p = ground_truth_as_predictions(&s);
        p[0].category_id = 9;
        p[1].frame_index = 77;
        match evaluate(&p, &s, &EvalConfig::default()) {
            Err(Error::Validation(d)) => assert_eq!(d.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn permutation_invariant() {
        let s = set();
        let mut p = ground_truth_as_predictions(&s);
        p.push(Prediction {
            video_id: 1,
            frame_index: 0,
            category_id: 1,
            bbox: [12.0, 10.0, 8.0, 8.0],
            score: 1.0,
        });
        let a = evaluate(&p, &s, &EvalConfig::default()).unwrap();
        p.reverse();
        let mut s2 = s.clone();
        s2.annotations.reverse();
        assert_eq!(evaluate(&p, &s2, &EvalConfig::default()).unwrap(), a);
    }

    #[test]
    fn table_has_bucket_columns() {
        let s = set();
        let t = evaluate(&[], &s, &EvalConfig::default()).unwrap().table();
        assert!(t.contains("AP_es") && t.contains("AP_l"));
    }
}
