//! Keyframe interpolation and movement-interval merging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::schema::{Annotation, VideoAnnotationSet};
use crate::error::{Diagnostic, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpolationConfig {
    /// Largest keyframe spacing that is filled in.
    pub max_gap: u32,
    /// Round interpolated corners to whole pixels.
    pub round: bool,
}

impl Default for InterpolationConfig {
    fn default() -> Self {
        Self {
            max_gap: 10,
            round: true,
        }
    }
}

/// Linear interpolation of corners between two keyframes at fraction `t`.
pub fn lerp_box(a: [f64; 4], b: [f64; 4], t: f64) -> [f64; 4] {
    let ca = [a[0], a[1], a[0] + a[2], a[1] + a[3]];
    let cb = [b[0], b[1], b[0] + b[2], b[1] + b[3]];
    let c: Vec<f64> = ca.iter().zip(&cb).map(|(p, q)| p + (q - p) * t).collect();
    [c[0], c[1], c[2] - c[0], c[3] - c[1]]
}

fn round_box(b: [f64; 4]) -> [f64; 4] {
    let x1 = b[0].round();
    let y1 = b[1].round();
    let x2 = (b[0] + b[2]).round();
    let y2 = (b[1] + b[3]).round();
    [x1, y1, x2 - x1, y2 - y1]
}

/// Fill every frame between consecutive keyframes of each track.
///
/// Keyframes are copied unchanged; nothing is extrapolated beyond a track's
/// first or last keyframe. Gaps wider than `max_gap` and single-keyframe
/// tracks are passed through and reported as warnings.
pub fn interpolate_tracks(
    set: &VideoAnnotationSet,
    cfg: &InterpolationConfig,
) -> Result<(VideoAnnotationSet, Vec<Diagnostic>)> {
    let mut tracks: BTreeMap<(u32, u64), Vec<&Annotation>> = BTreeMap::new();
    for a in &set.annotations {
        tracks.entry((a.video_id, a.track_id)).or_default().push(a);
    }
    let mut next_id = set.annotations.iter().map(|a| a.id).max().unwrap_or(0) + 1;
    let mut warnings = Vec::new();
    let mut out = Vec::with_capacity(set.annotations.len());
    for ((video, track), mut keys) in tracks {
        keys.sort_by_key(|a| a.frame_index);
        if keys.windows(2).any(|w| w[0].frame_index == w[1].frame_index) {
            return Err(Error::Validation(vec![Diagnostic::new(
                format!("track {track} in video {video}"),
                "two keyframes share a frame index",
            )]));
        }
        if keys.len() == 1 {
            warnings.push(Diagnostic::new(
                format!("track {track} in video {video}"),
                "single keyframe; passed through without interpolation",
            ));
        }
        for pair in keys.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            out.push(a.clone());
            let gap = b.frame_index - a.frame_index;
            if gap > cfg.max_gap {
                warnings.push(Diagnostic::new(
                    format!("track {track} in video {video}"),
                    format!(
                        "keyframes {} and {} are {gap} frames apart (max {}); gap left empty",
                        a.frame_index, b.frame_index, cfg.max_gap
                    ),
                ));
                continue;
            }
            for f in a.frame_index + 1..b.frame_index {
                let t = (f - a.frame_index) as f64 / gap as f64;
                let mut bbox = lerp_box(a.bbox, b.bbox, t);
                if cfg.round {
                    bbox = round_box(bbox);
                }
                if bbox[2] <= 0.0 || bbox[3] <= 0.0 {
                    continue;
                }
                out.push(Annotation {
                    id: next_id,
                    frame_index: f,
                    bbox,
                    area: bbox[2] * bbox[3],
                    is_moving: a.is_moving,
                    ..a.clone()
                });
                next_id += 1;
            }
        }
        if let Some(last) = keys.last() {
            out.push((*last).clone());
        }
    }
    out.sort_by_key(|a| (a.video_id, a.frame_index, a.track_id));
    Ok((
        VideoAnnotationSet {
            annotations: out,
            ..set.clone()
        },
        warnings,
    ))
}

/// Merge two annotators' movement intervals (inclusive frame ranges).
///
/// Overlapping pairs are replaced by their midpoint interval, so `(0, 10)`
/// and `(4, 16)` become `(2, 13)`; a half frame rounds up. Intervals without
/// an overlapping partner are kept as they are.
pub fn merge_movement_intervals(a: &[(u32, u32)], b: &[(u32, u32)]) -> Vec<(u32, u32)> {
    let overlap = |x: (u32, u32), y: (u32, u32)| {
        let lo = x.0.max(y.0);
        let hi = x.1.min(y.1);
        (hi >= lo).then(|| hi - lo + 1)
    };
    let mut b_used = vec![false; b.len()];
    let mut out = Vec::new();
    for &x in a {
        let best = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !b_used[*j])
            .filter_map(|(j, &y)| overlap(x, y).map(|o| (o, std::cmp::Reverse(j), j)))
            .max()
            .map(|(_, _, j)| j);
        match best {
            Some(j) => {
                b_used[j] = true;
                let y = b[j];
                out.push(((x.0 + y.0).div_ceil(2), (x.1 + y.1).div_ceil(2)));
            }
            None => out.push(x),
        }
    }
    out.extend(b.iter().zip(&b_used).filter(|(_, &u)| !u).map(|(&y, _)| y));
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::schema::Video;

    fn key(id: u64, frame: u32, bbox: [f64; 4]) -> Annotation {
        Annotation {
            id,
            video_id: 1,
            frame_index: frame,
            track_id: 3,
            category_id: 2,
            bbox,
            area: bbox[2] * bbox[3],
            is_moving: true,
        }
    }

    fn set_with(keys: Vec<Annotation>) -> VideoAnnotationSet {
        let mut s = VideoAnnotationSet::empty();
        s.videos.push(Video {
            id: 1,
            name: "v".into(),
            width: 100,
            height: 100,
            frame_count: 30,
        });
        s.annotations = keys;
        s
    }

    #[test]
    fn midpoint() {
        let s = set_with(vec![key(1, 0, [0.0, 0.0, 10.0, 10.0]), key(2, 10, [10.0, 0.0, 10.0, 10.0])]);
        let (out, warn) = interpolate_tracks(&s, &InterpolationConfig::default()).unwrap();
        assert!(warn.is_empty());
        assert_eq!(out.annotations.len(), 11);
        let mid = out.annotations.iter().find(|a| a.frame_index == 5).unwrap();
        assert_eq!(mid.bbox, [5.0, 0.0, 10.0, 10.0]);
        assert_eq!(mid.track_id, 3);
        assert_eq!(mid.category_id, 2);
    }

    #[test]
    fn identical_keyframes_give_identical_boxes() {
        let b = [3.0, 4.0, 5.0, 6.0];
        let s = set_with(vec![key(1, 2, b), key(2, 9, b)]);
        let (out, _) = interpolate_tracks(&s, &InterpolationConfig::default()).unwrap();
        assert!(out.annotations.iter().all(|a| a.bbox == b));
    }

    #[test]
    fn no_extrapolation_and_wide_gaps_reported() {
        let s = set_with(vec![key(1, 2, [0.0; 4]), key(2, 20, [1.0; 4]), key(3, 25, [1.0, 1.0, 2.0, 2.0])]);
        let (out, warn) = interpolate_tracks(&s, &InterpolationConfig::default()).unwrap();
        assert_eq!(warn.len(), 1);
        assert!(out.annotations.iter().all(|a| (2..=25).contains(&a.frame_index)));
        assert_eq!(out.annotations.len(), 3 + 4);
    }

    #[test]
    fn single_keyframe_passes_through() {
        let s = set_with(vec![key(1, 4, [1.0, 1.0, 2.0, 2.0])]);
        let (out, warn) = interpolate_tracks(&s, &InterpolationConfig::default()).unwrap();
        assert_eq!(out.annotations, s.annotations);
        assert_eq!(warn.len(), 1);
    }

    #[test]
    fn movement_merge() {
        assert_eq!(merge_movement_intervals(&[(0, 10)], &[(4, 16)]), vec![(2, 13)]);
        assert_eq!(
            merge_movement_intervals(&[(0, 10), (40, 50)], &[(4, 16), (100, 120)]),
            vec![(2, 13), (40, 50), (100, 120)]
        );
        assert_eq!(merge_movement_intervals(&[], &[]), vec![]);
    }
}
