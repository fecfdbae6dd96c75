//! Dataset statistics: size-bucket shares, density, aspect ratios and
//! movement fractions.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::schema::{Category, VideoAnnotationSet};
use crate::error::Result;
use crate::evaluation::SizeBuckets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub name: String,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStat {
    pub category: String,
    pub count: usize,
    pub moving: usize,
    pub moving_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoCdfPoint {
    pub video_id: u32,
    pub objects: usize,
    /// Fraction of videos with at most `objects` objects.
    pub cumulative_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Aggregate statistics over every non-ignore annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub videos: usize,
    pub frames: usize,
    pub objects: usize,
    pub tracks: usize,
    pub buckets: Vec<BucketStat>,
    pub median_area: f64,
    /// Square root of the median area.
    pub median_side: f64,
    pub mean_objects_per_frame: f64,
    /// Objects-per-frame value -> number of frames.
    pub objects_per_frame_histogram: BTreeMap<usize, usize>,
    pub per_video_cdf: Vec<VideoCdfPoint>,
    /// Histogram of log2(w / h) in half-octave bins over [-3, 3); the two
    /// outermost bins also collect values beyond their edges.
    pub aspect_ratio_histogram: Vec<HistogramBin>,
    pub categories: Vec<CategoryStat>,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

pub fn stats(set: &VideoAnnotationSet, buckets: &SizeBuckets) -> StatsReport {
    let objects: Vec<_> = set
        .annotations
        .iter()
        .filter(|a| a.category() != Some(Category::Ignore))
        .collect();
    let total = objects.len();

    let mut bucket_counts = vec![0usize; buckets.len()];
    for a in &objects {
        bucket_counts[buckets.bucket_of(a.area)] += 1;
    }
    let bucket_stats = bucket_counts
        .iter()
        .enumerate()
        .map(|(i, &count)| BucketStat {
            name: buckets.name(i).to_string(),
            count,
            percent: percent(count, total),
        })
        .collect();

    let mut areas: Vec<f64> = objects.iter().map(|a| a.area).collect();
    let median_area = median(&mut areas);

    // Frames: every listed image, plus any annotated frame without one.
    let mut per_frame: BTreeMap<(u32, u32), usize> = set
        .images
        .iter()
        .map(|im| ((im.video_id, im.frame_index), 0))
        .collect();
    for a in &objects {
        *per_frame.entry((a.video_id, a.frame_index)).or_default() += 1;
    }
    let frames = per_frame.len();
    let mut hist = BTreeMap::new();
    for &c in per_frame.values() {
        *hist.entry(c).or_default() += 1;
    }

    let mut per_video: BTreeMap<u32, usize> = set.videos.iter().map(|v| (v.id, 0)).collect();
    for a in &objects {
        *per_video.entry(a.video_id).or_default() += 1;
    }
    let mut vids: Vec<(u32, usize)> = per_video.into_iter().collect();
    vids.sort_by_key(|&(id, n)| (n, id));
    let nv = vids.len();
    let per_video_cdf = vids
        .iter()
        .enumerate()
        .map(|(i, &(video_id, objects))| VideoCdfPoint {
            video_id,
            objects,
            cumulative_fraction: (i + 1) as f64 / nv as f64,
        })
        .collect();

    const ASPECT_BINS: i32 = 6;
    let mut aspect = vec![0usize; 2 * ASPECT_BINS as usize];
    for a in &objects {
        let r = (a.bbox[2] / a.bbox[3]).log2();
        let bin = ((r * 2.0).floor() as i32).clamp(-ASPECT_BINS, ASPECT_BINS - 1) + ASPECT_BINS;
        aspect[bin as usize] += 1;
    }
    let aspect_ratio_histogram = aspect
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            let lo = (i as i32 - ASPECT_BINS) as f64 / 2.0;
            HistogramBin { lo, hi: lo + 0.5, count }
        })
        .collect();

    let mut cats: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
    for a in &objects {
        if let Some(c) = a.category() {
            let e = cats.entry(c).or_default();
            e.0 += 1;
            e.1 += a.is_moving as usize;
        }
    }
    let categories = cats
        .into_iter()
        .map(|(c, (count, moving))| CategoryStat {
            category: c.name().to_string(),
            count,
            moving,
            moving_fraction: if count == 0 { 0.0 } else { moving as f64 / count as f64 },
        })
        .collect();

    let mut tracks: Vec<(u32, u64)> = objects.iter().map(|a| (a.video_id, a.track_id)).collect();
    tracks.sort_unstable();
    tracks.dedup();

    StatsReport {
        videos: set.videos.len(),
        frames,
        objects: total,
        tracks: tracks.len(),
        buckets: bucket_stats,
        median_area,
        median_side: median_area.sqrt(),
        mean_objects_per_frame: if frames == 0 { 0.0 } else { total as f64 / frames as f64 },
        objects_per_frame_histogram: hist,
        per_video_cdf,
        aspect_ratio_histogram,
        categories,
    }
}

impl StatsReport {
    /// Long-form CSV (`section,key,field,value`) carrying the same numbers as
    /// the JSON report.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut row = |section: &str, key: &str, field: &str, value: String| -> Result<()> {
            out.write_record([section, key, field, &value])
                .map_err(|e| crate::Error::Format(e.to_string()))
        };
        row("section", "key", "field", "value".into())?;
        row("summary", "videos", "count", self.videos.to_string())?;
        row("summary", "frames", "count", self.frames.to_string())?;
        row("summary", "objects", "count", self.objects.to_string())?;
        row("summary", "tracks", "count", self.tracks.to_string())?;
        row("summary", "median_area", "value", self.median_area.to_string())?;
        row("summary", "median_side", "value", self.median_side.to_string())?;
        row("summary", "mean_objects_per_frame", "value", self.mean_objects_per_frame.to_string())?;
        for b in &self.buckets {
            row("bucket", &b.name, "count", b.count.to_string())?;
            row("bucket", &b.name, "percent", b.percent.to_string())?;
        }
        for (k, v) in &self.objects_per_frame_histogram {
            row("objects_per_frame", &k.to_string(), "frames", v.to_string())?;
        }
        for p in &self.per_video_cdf {
            row("video_cdf", &p.video_id.to_string(), "objects", p.objects.to_string())?;
            row("video_cdf", &p.video_id.to_string(), "cumulative_fraction", p.cumulative_fraction.to_string())?;
        }
        for b in &self.aspect_ratio_histogram {
            row("aspect_log2", &format!("{}..{}", b.lo, b.hi), "count", b.count.to_string())?;
        }
        for c in &self.categories {
            row("category", &c.category, "count", c.count.to_string())?;
            row("category", &c.category, "moving", c.moving.to_string())?;
            row("category", &c.category, "moving_fraction", c.moving_fraction.to_string())?;
        }
        out.flush()?;
        Ok(())
    }
}
