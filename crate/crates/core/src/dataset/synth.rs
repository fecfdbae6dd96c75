//! Procedural small-object videos with exact ground truth.
//!
//! Objects are flat low-contrast rectangles over a value-noise texture,
//! rendered with exact per-pixel area coverage so sub-pixel motion shows up.
//! Optional distractors share the object appearance but never move and are
//! never annotated, so only motion tells them apart.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::clip::{LabeledBox, Sample};
use super::io::{quantize, write_frame};
use super::schema::{Annotation, Category, CategoryRecord, DatasetInfo, ImageRecord, Video, VideoAnnotationSet};
use crate::error::{invalid, path_err, Result};
use crate::evaluation::SizeBuckets;
use crate::geometry::{round_half_up, BBox};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub name: String,
    pub videos: usize,
    pub frames: u32,
    pub width: u32,
    pub height: u32,
    /// Inclusive range of annotated objects per video.
    pub objects: [usize; 2],
    /// Relative weight per size-bucket name.
    pub size_mix: BTreeMap<String, f64>,
    pub categories: Vec<Category>,
    /// Fraction of annotated tracks that move.
    pub moving_fraction: f64,
    /// Speed range of moving tracks in pixels per frame.
    pub speed: [f64; 2],
    /// Background drift in pixels per frame plus per-frame jitter std.
    pub background_drift: f64,
    pub background_jitter: f64,
    pub texture_amplitude: f64,
    /// Object intensity offset from the background.
    pub contrast: f64,
    /// Fraction by which object contrast is pulled toward the background.
    pub degrade: f64,
    /// Per-frame Gaussian sensor noise.
    pub noise_std: f64,
    /// Static, unannotated copies of the object appearance per video.
    pub distractors: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::preset(SynthPreset::Mixed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthPreset {
    Mixed,
    EsOnly,
    Static,
    /// Texture-degraded moving objects among static look-alikes.
    Bench,
}

impl std::str::FromStr for SynthPreset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Self::Mixed),
            "es-only" => Ok(Self::EsOnly),
            "static" => Ok(Self::Static),
            "bench" => Ok(Self::Bench),
            _ => Err(invalid(format!(
                "unknown synth preset {s:?} (expected mixed, es-only, static or bench)"
            ))),
        }
    }
}

fn mix(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

impl SynthSpec {
    pub fn preset(p: SynthPreset) -> Self {
        let mixed = Self {
            name: "mixed".into(),
            videos: 4,
            frames: 12,
            width: 128,
            height: 128,
            objects: [3, 6],
            size_mix: mix(&[("es", 0.35), ("rs", 0.35), ("gs", 0.2), ("m", 0.1)]),
            categories: vec![Category::Person, Category::Car, Category::Bicycle, Category::Cyclist],
            moving_fraction: 0.7,
            speed: [1.0, 3.0],
            background_drift: 0.0,
            background_jitter: 0.0,
            texture_amplitude: 0.12,
            contrast: 0.25,
            degrade: 0.0,
            noise_std: 0.01,
            distractors: 0,
        };
        match p {
            SynthPreset::Mixed => mixed,
            SynthPreset::EsOnly => Self {
                name: "es-only".into(),
                size_mix: mix(&[("es", 1.0)]),
                ..mixed
            },
            SynthPreset::Static => Self {
                name: "static".into(),
                moving_fraction: 0.0,
                ..mixed
            },
            SynthPreset::Bench => Self {
                name: "bench".into(),
                videos: 100,
                frames: 8,
                width: 64,
                height: 64,
                objects: [2, 3],
                size_mix: mix(&[("es", 1.0)]),
                categories: vec![Category::Person],
                moving_fraction: 1.0,
                speed: [3.0, 6.0],
                texture_amplitude: 0.12,
                contrast: 0.3,
                degrade: 0.5,
                noise_std: 0.02,
                distractors: 3,
                ..mixed
            },
        }
    }

    pub fn validate(&self, buckets: &SizeBuckets) -> Result<()> {
        if self.videos == 0 || self.frames == 0 || self.width < 16 || self.height < 16 {
            return Err(invalid("synth: need at least one video, one frame and 16x16 pixels"));
        }
        if self.objects[0] > self.objects[1] {
            return Err(invalid("synth: objects range is inverted"));
        }
        if self.categories.iter().any(|c| !c.is_scorable()) || self.categories.is_empty() {
            return Err(invalid("synth: categories must be a non-empty list of scorable categories"));
        }
        if self.size_mix.is_empty() || self.size_mix.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("synth: size_mix needs non-negative weights"));
        }
        for name in self.size_mix.keys() {
            let i = (0..buckets.len())
                .find(|&i| buckets.name(i) == name)
                .ok_or_else(|| invalid(format!("synth: size_mix names unknown bucket {name:?}")))?;
            area_range(buckets, i, self.width, self.height)?;
        }
        if !(0.0..=1.0).contains(&self.moving_fraction) || !(0.0..1.0).contains(&self.degrade) {
            return Err(invalid("synth: moving_fraction must lie in [0, 1] and degrade in [0, 1)"));
        }
        if self.speed[0] < 0.0 || self.speed[0] > self.speed[1] {
            return Err(invalid("synth: speed range must be non-negative and ordered"));
        }
        Ok(())
    }
}

/// Area interval actually sampled for a bucket: kept a little inside the
/// bucket so that rounding cannot move a box across a boundary, and capped
/// so objects fit comfortably in the frame.
fn area_range(buckets: &SizeBuckets, i: usize, width: u32, height: u32) -> Result<(f64, f64)> {
    let b = &buckets.buckets()[i];
    let side_cap = width.min(height) as f64 / 2.0;
    let lo = (b.lo * 1.03).max(16.0);
    let hi = b.hi.map_or(side_cap * side_cap, |h| (h * 0.97).min(side_cap * side_cap));
    if lo >= hi {
        return Err(invalid(format!(
            "synth: bucket {:?} does not fit a {width}x{height} frame",
            b.name
        )));
    }
    Ok((lo, hi))
}

/// Height over width of a category's boxes.
fn aspect(c: Category) -> f64 {
    match c {
        Category::Person => 2.0,
        Category::Car => 0.55,
        Category::Bicycle => 0.75,
        Category::Cyclist => 1.6,
        _ => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBucket {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCategory {
    pub category: String,
    pub count: usize,
    pub moving: usize,
}

/// Ground-truth counts recorded while generating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub seed: u64,
    pub videos: usize,
    pub frames: usize,
    pub objects: usize,
    pub tracks: usize,
    pub buckets: Vec<ManifestBucket>,
    pub categories: Vec<ManifestCategory>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub set: VideoAnnotationSet,
    /// Frames per video id, already quantised to 8 bits.
    pub frames: BTreeMap<u32, Vec<Tensor<f32>>>,
    pub manifest: SynthManifest,
}

struct Track {
    category: Category,
    w: f64,
    h: f64,
    bucket: usize,
    moving: bool,
    positions: Vec<(f64, f64)>,
}

const TEXTURE_GRID: usize = 48;

/// Value noise summed over a few octaves, as `(cell size, weight, lattice)`.
struct Texture {
    layers: Vec<(f64, f64, Vec<f64>)>,
}

impl Texture {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let layers = [(12.0, 0.6), (5.0, 0.3), (2.0, 0.1)]
            .into_iter()
            .map(|(cell, weight)| {
                let grid = (0..TEXTURE_GRID * TEXTURE_GRID)
                    .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                    .collect();
                (cell, weight, grid)
            })
            .collect();
        Self { layers }
    }

    /// Smooth noise in roughly `[-1, 1]`.
    fn at(&self, x: f64, y: f64) -> f64 {
        let n = TEXTURE_GRID as i64;
        self.layers
            .iter()
            .map(|(cell, weight, grid)| {
                let (u, v) = (x / cell, y / cell);
                let (x0, y0) = (u.floor(), v.floor());
                let (fx, fy) = (u - x0, v - y0);
                let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
                let (i0, j0) = (x0 as i64, y0 as i64);
                let g = |i: i64, j: i64| grid[(j.rem_euclid(n) * n + i.rem_euclid(n)) as usize];
                let top = g(i0, j0) * (1.0 - sx) + g(i0 + 1, j0) * sx;
                let bot = g(i0, j0 + 1) * (1.0 - sx) + g(i0 + 1, j0 + 1) * sx;
                weight * (top * (1.0 - sy) + bot * sy)
            })
            .sum()
    }
}

/// Reflect a 1-D trajectory inside `[0, limit]`.
fn bounce(p: f64, v: f64, limit: f64) -> (f64, f64) {
    let q = p + v;
    if q < 0.0 {
        (-q, -v)
    } else if q > limit {
        (2.0 * limit - q, -v)
    } else {
        (q, v)
    }
}

fn add_rect(frame: &mut [f32], w: usize, h: usize, b: &BBox, delta: f64) {
    let xs = b.x1.floor().max(0.0) as usize;
    let xe = (b.x2.ceil() as usize).min(w);
    let ys = b.y1.floor().max(0.0) as usize;
    let ye = (b.y2.ceil() as usize).min(h);
    for y in ys..ye {
        let oy = (b.y2.min(y as f64 + 1.0) - b.y1.max(y as f64)).max(0.0);
        for x in xs..xe {
            let ox = (b.x2.min(x as f64 + 1.0) - b.x1.max(x as f64)).max(0.0);
            frame[y * w + x] += (delta * ox * oy) as f32;
        }
    }
}

fn sample_size<R: Rng>(
    spec: &SynthSpec,
    buckets: &SizeBuckets,
    category: Category,
    mix: &[(usize, f64)],
    rng: &mut R,
) -> Result<(f64, f64, usize)> {
    let total: f64 = mix.iter().map(|m| m.1).sum();
    let mut pick = rng.random::<f64>() * total;
    let mut bucket = mix[mix.len() - 1].0;
    for &(i, wgt) in mix {
        if pick < wgt {
            bucket = i;
            break;
        }
        pick -= wgt;
    }
    let (lo, hi) = area_range(buckets, bucket, spec.width, spec.height)?;
    for _ in 0..64 {
        let area = rng.random_range(lo..hi);
        let ar = aspect(category) * rng.random_range(0.9..1.1);
        let w = round_half_up((area / ar).sqrt(), 2);
        let h = round_half_up((area * ar).sqrt(), 2);
        let fits = w < spec.width as f64 / 2.0 && h < spec.height as f64 / 2.0;
        if fits && buckets.bucket_of(w * h) == bucket {
            return Ok((w, h, bucket));
        }
    }
    Err(invalid(format!("synth: could not place a {:?} box in bucket {}", category, buckets.name(bucket))))
}

fn video_seed(seed: u64, video: usize) -> u64 {
    seed ^ (video as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct RenderedVideo {
    tracks: Vec<Track>,
    frames: Vec<Tensor<f32>>,
}

fn render_video(spec: &SynthSpec, buckets: &SizeBuckets, seed: u64, video: usize) -> Result<RenderedVideo> {
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(seed, video));
    let mix: Vec<(usize, f64)> = (0..buckets.len())
        .filter_map(|i| spec.size_mix.get(buckets.name(i)).map(|&w| (i, w)))
        .filter(|m| m.1 > 0.0)
        .collect();
    if mix.is_empty() {
        return Err(invalid("synth: size_mix has no positive weight"));
    }
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let n_obj = rng.random_range(spec.objects[0]..=spec.objects[1]);
    let n_frames = spec.frames as usize;
    let mut tracks = Vec::with_capacity(n_obj);
    let mut statics = Vec::new();
    for k in 0..n_obj + spec.distractors {
        let category = spec.categories[rng.random_range(0..spec.categories.len())];
        let (w, h, bucket) = sample_size(spec, buckets, category, &mix, &mut rng)?;
        let distractor = k >= n_obj;
        let moving = !distractor && rng.random::<f64>() < spec.moving_fraction;
        let (mut x, mut y) = (rng.random_range(0.0..fw - w), rng.random_range(0.0..fh - h));
        let (mut vx, mut vy) = if moving {
            let speed = if spec.speed[1] > spec.speed[0] {
                rng.random_range(spec.speed[0]..spec.speed[1])
            } else {
                spec.speed[0]
            };
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            (speed * ang.cos(), speed * ang.sin())
        } else {
            (0.0, 0.0)
        };
        let mut positions = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            positions.push((round_half_up(x, 2), round_half_up(y, 2)));
            (x, vx) = bounce(x, vx, fw - w);
            (y, vy) = bounce(y, vy, fh - h);
        }
        let t = Track {
            category,
            w,
            h,
            bucket,
            moving,
            positions,
        };
        if distractor {
            statics.push(t);
        } else {
            tracks.push(t);
        }
    }
    let texture = Texture::new(&mut rng);
    let polarity: Vec<f64> = (0..tracks.len() + statics.len())
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let delta = spec.contrast * (1.0 - spec.degrade);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let drift_dir = rng.random_range(0.0..std::f64::consts::TAU);
    let (w, h) = (spec.width as usize, spec.height as usize);
    let mut frames = Vec::with_capacity(n_frames);
    let (mut ox, mut oy) = (0.0, 0.0);
    for t in 0..n_frames {
        let jx = spec.background_jitter * (rng.random::<f64>() * 2.0 - 1.0);
        let jy = spec.background_jitter * (rng.random::<f64>() * 2.0 - 1.0);
        let mut data = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = 0.5 + spec.texture_amplitude * texture.at(x as f64 + ox + jx, y as f64 + oy + jy);
                data[y * w + x] = v as f32;
            }
        }
        for (tr, pol) in tracks.iter().chain(&statics).zip(&polarity) {
            let (px, py) = tr.positions[t];
            add_rect(&mut data, w, h, &BBox::new(px, py, px + tr.w, py + tr.h), pol * delta);
        }
        if spec.noise_std > 0.0 {
            for v in data.iter_mut() {
                *v += noise.sample(&mut rng) as f32;
            }
        }
        frames.push(quantize(&Tensor::from_vec(&[h, w, 1], data)?));
        ox += spec.background_drift * drift_dir.cos();
        oy += spec.background_drift * drift_dir.sin();
    }
    Ok(RenderedVideo { tracks, frames })
}

/// Generate a dataset; identical for identical `(spec, seed)` whatever the
/// thread count.
pub fn synthesize(spec: &SynthSpec, seed: u64) -> Result<SynthOutput> {
    let buckets = SizeBuckets::default();
    spec.validate(&buckets)?;
    let rendered: Vec<RenderedVideo> = (0..spec.videos)
        .into_par_iter()
        .map(|v| render_video(spec, &buckets, seed, v))
        .collect::<Result<_>>()?;

    let mut set = VideoAnnotationSet {
        info: DatasetInfo {
            description: format!("synthetic {} (seed {seed})", spec.name),
            ..DatasetInfo::default()
        },
        categories: Category::ALL
            .iter()
            .map(|c| CategoryRecord {
                id: c.id(),
                name: c.name().to_string(),
            })
            .collect(),
        ..VideoAnnotationSet::empty()
    };
    let mut bucket_counts = vec![0usize; buckets.len()];
    let mut cat_counts: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
    let mut frames_out = BTreeMap::new();
    let (mut next_image, mut next_ann, mut tracks_total) = (1u64, 1u64, 0usize);
    for (v, rv) in rendered.into_iter().enumerate() {
        let video_id = v as u32 + 1;
        let name = format!("{}_{:04}", spec.name, v);
        set.videos.push(Video {
            id: video_id,
            name: name.clone(),
            width: spec.width,
            height: spec.height,
            frame_count: spec.frames,
        });
        for f in 0..spec.frames {
            set.images.push(ImageRecord {
                id: next_image,
                video_id,
                frame_index: f,
                file_name: format!("{name}/{f:06}.png"),
            });
            next_image += 1;
        }
        tracks_total += rv.tracks.len();
        for f in 0..spec.frames as usize {
            for (ti, tr) in rv.tracks.iter().enumerate() {
                let (x, y) = tr.positions[f];
                set.annotations.push(Annotation {
                    id: next_ann,
                    video_id,
                    frame_index: f as u32,
                    track_id: ti as u64 + 1,
                    category_id: tr.category.id(),
                    bbox: [x, y, tr.w, tr.h],
                    area: tr.w * tr.h,
                    is_moving: tr.moving,
                });
                next_ann += 1;
                bucket_counts[tr.bucket] += 1;
                let e = cat_counts.entry(tr.category).or_default();
                e.0 += 1;
                e.1 += tr.moving as usize;
            }
        }
        frames_out.insert(video_id, rv.frames);
    }
    let manifest = SynthManifest {
        spec: spec.clone(),
        seed,
        videos: spec.videos,
        frames: spec.videos * spec.frames as usize,
        objects: set.annotations.len(),
        tracks: tracks_total,
        buckets: bucket_counts
            .iter()
            .enumerate()
            .map(|(i, &count)| ManifestBucket {
                name: buckets.name(i).to_string(),
                count,
            })
            .collect(),
        categories: cat_counts
            .into_iter()
            .map(|(c, (count, moving))| ManifestCategory {
                category: c.name().to_string(),
                count,
                moving,
            })
            .collect(),
    };
    Ok(SynthOutput {
        set,
        frames: frames_out,
        manifest,
    })
}

impl SynthOutput {
    /// Writes `manifest.json`, `annotations.json` and `frames/<video>/<index>.png`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| path_err(dir, e))?;
        let manifest = dir.join("manifest.json");
        std::fs::write(&manifest, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| path_err(&manifest, e))?;
        self.set.save(&dir.join("annotations.json"))?;
        let frames_root = dir.join("frames");
        self.set.images.par_iter().try_for_each(|im| {
            let frame = &self.frames[&im.video_id][im.frame_index as usize];
            write_frame(&frames_root.join(&im.file_name), frame)
        })
    }

    /// In-memory samples of one video.
    pub fn samples(&self, video_id: u32) -> Vec<Sample> {
        let by_frame = self.set.by_frame();
        self.frames
            .get(&video_id)
            .map(|frames| {
                frames
                    .iter()
                    .enumerate()
                    .map(|(f, image)| Sample {
                        image: image.clone(),
                        boxes: by_frame
                            .get(&(video_id, f as u32))
                            .into_iter()
                            .flatten()
                            .filter_map(|a| LabeledBox::from_annotation(a))
                            .collect(),
                    })
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::stats::stats;

    fn small(p: SynthPreset) -> SynthSpec {
        SynthSpec {
            videos: 2,
            frames: 4,
            ..SynthSpec::preset(p)
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let s = small(SynthPreset::Mixed);
        let a = synthesize(&s, 7).unwrap();
        let b = synthesize(&s, 7).unwrap();
        assert_eq!(a.set, b.set);
        assert_eq!(a.frames, b.frames);
        assert!(a.set.validate().is_empty(), "{:?}", a.set.validate());
        assert_ne!(synthesize(&s, 8).unwrap().set, a.set);
    }

    #[test]
    fn manifest_matches_stats() {
        let out = synthesize(&small(SynthPreset::Mixed), 7).unwrap();
        let r = stats(&out.set, &SizeBuckets::default());
        let m = &out.manifest;
        assert_eq!((r.videos, r.frames, r.objects, r.tracks), (m.videos, m.frames, m.objects, m.tracks));
        let counts: Vec<usize> = r.buckets.iter().map(|b| b.count).collect();
        assert_eq!(counts, m.buckets.iter().map(|b| b.count).collect::<Vec<_>>());
    }

    #[test]
    fn es_only_and_static_presets() {
        let out = synthesize(&small(SynthPreset::EsOnly), 1).unwrap();
        assert!(out.set.annotations.iter().all(|a| a.area < 144.0));
        let out = synthesize(&small(SynthPreset::Static), 1).unwrap();
        assert!(out.set.annotations.iter().all(|a| !a.is_moving));
    }

    #[test]
    fn bench_objects_move_and_distractors_are_unannotated() {
        let out = synthesize(&small(SynthPreset::Bench), 3).unwrap();
        assert!(out.set.annotations.iter().all(|a| a.is_moving));
        let first: Vec<_> = out.set.annotations.iter().filter(|a| a.frame_index == 0).collect();
        let later: Vec<_> = out.set.annotations.iter().filter(|a| a.frame_index == 1).collect();
        assert!(first.iter().zip(&later).all(|(a, b)| a.bbox != b.bbox));
    }

    #[test]
    fn bounce_stays_inside() {
        assert_eq!(bounce(1.0, -3.0, 10.0), (2.0, 3.0));
        assert_eq!(bounce(9.0, 3.0, 10.0), (8.0, -3.0));
    }

    #[test]
    fn coverage_is_exact_area() {
        let mut f = vec![0f32; 100];
        add_rect(&mut f, 10, 10, &BBox::new(1.25, 2.5, 4.75, 3.5), 1.0);
        let total: f32 = f.iter().sum();
        assert!((total - 3.5).abs() < 1e-6);
    }
}
