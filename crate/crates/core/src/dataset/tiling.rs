//! Split wide frames into two overlapping square crops and downsample them.

use std::collections::BTreeMap;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schema::{Annotation, ImageRecord, Video, VideoAnnotationSet};
use crate::error::{invalid, path_err, Diagnostic, Result};
use crate::geometry::{round_half_up, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileSpec {
    /// Side of the square crops in source pixels.
    pub crop: u32,
    /// Side of the downsampled output.
    pub output: u32,
    /// Clipped boxes keeping less than this fraction of their area are dropped.
    pub min_retained: f64,
    /// Decimal places kept in output coordinates.
    pub decimals: u32,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self {
            crop: 2160,
            output: 1024,
            min_retained: 0.25,
            decimals: 2,
        }
    }
}

/// One crop window in source coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub x0: u32,
    pub y0: u32,
    pub side: u32,
}

impl CropWindow {
    pub fn scale(&self, spec: &TileSpec) -> f64 {
        spec.output as f64 / self.side as f64
    }

    /// Map a derived box back into source coordinates.
    pub fn back_project(&self, b: &BBox, spec: &TileSpec) -> BBox {
        b.scale(1.0 / self.scale(spec)).translate(self.x0 as f64, self.y0 as f64)
    }
}

/// Crop windows for a `width x height` frame, plus a warning when the frame
/// is too small for two full crops.
pub fn crop_windows(width: u32, height: u32, spec: &TileSpec) -> (Vec<CropWindow>, Option<String>) {
    if width >= spec.crop && height >= spec.crop {
        let y0 = (height - spec.crop) / 2;
        let left = CropWindow {
            x0: 0,
            y0,
            side: spec.crop,
        };
        let right = CropWindow {
            x0: width - spec.crop,
            y0,
            side: spec.crop,
        };
        (vec![left, right], None)
    } else {
        let side = width.min(height);
        let w = CropWindow {
            x0: (width - side) / 2,
            y0: (height - side) / 2,
            side,
        };
        let msg = format!(
            "{width}x{height} frame is smaller than the {0}x{0} crop; using one centred {side}x{side} crop",
            spec.crop
        );
        (vec![w], Some(msg))
    }
}

/// Result of tiling a whole annotation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileOutput {
    pub set: VideoAnnotationSet,
    /// Derived annotation id -> source annotation id.
    pub provenance: BTreeMap<u64, u64>,
    /// Derived video id -> (source video id, crop window).
    pub windows: BTreeMap<u32, (u32, CropWindow)>,
    pub warnings: Vec<Diagnostic>,
}

/// Clip, scale and round one box into a crop; `None` when too little of it
/// survives or it collapses after rounding.
pub fn derive_box(source: &BBox, window: &CropWindow, spec: &TileSpec) -> Option<BBox> {
    let x0 = window.x0 as f64;
    let y0 = window.y0 as f64;
    let side = window.side as f64;
    let clipped = source.clip(x0, y0, x0 + side, y0 + side)?;
    if clipped.area() < spec.min_retained * source.area() {
        return None;
    }
    let s = window.scale(spec);
    let r = |v: f64| round_half_up(v, spec.decimals);
    let b = clipped.translate(-x0, -y0).scale(s);
    let b = BBox::new(r(b.x1), r(b.y1), r(b.x2), r(b.y2));
    b.is_valid().then_some(b)
}

pub fn tile_and_downsample(set: &VideoAnnotationSet, spec: &TileSpec) -> Result<TileOutput> {
    let mut out = VideoAnnotationSet {
        info: set.info.clone(),
        categories: set.categories.clone(),
        ..VideoAnnotationSet::empty()
    };
    let mut provenance = BTreeMap::new();
    let mut windows_out = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut next_video = 1u32;
    let mut next_image = 1u64;
    let mut next_ann = 1u64;
    let by_video: BTreeMap<u32, Vec<&Annotation>> = set.annotations.iter().fold(BTreeMap::new(), |mut m, a| {
        m.entry(a.video_id).or_insert_with(Vec::new).push(a);
        m
    });
    for v in &set.videos {
        let (windows, warn) = crop_windows(v.width, v.height, spec);
        if let Some(w) = warn {
            warnings.push(Diagnostic::new(format!("video {}", v.id), w));
        }
        let suffixes: &[&str] = if windows.len() == 2 { &["left", "right"] } else { &["center"] };
        for (w, suffix) in windows.iter().zip(suffixes) {
            let vid = next_video;
            next_video += 1;
            windows_out.insert(vid, (v.id, *w));
            let name = format!("{}_{suffix}", v.name);
            out.videos.push(Video {
                id: vid,
                name: name.clone(),
                width: spec.output,
                height: spec.output,
                frame_count: v.frame_count,
            });
            for im in set.images.iter().filter(|i| i.video_id == v.id) {
                out.images.push(ImageRecord {
                    id: next_image,
                    video_id: vid,
                    frame_index: im.frame_index,
                    file_name: format!("{name}/{:06}.png", im.frame_index),
                });
                next_image += 1;
            }
            for a in by_video.get(&v.id).into_iter().flatten() {
                let Some(b) = derive_box(&a.to_bbox(), w, spec) else { continue };
                let xywh = b.to_xywh();
                let id = next_ann;
                next_ann += 1;
                provenance.insert(id, a.id);
                out.annotations.push(Annotation {
                    id,
                    video_id: vid,
                    frame_index: a.frame_index,
                    track_id: a.track_id,
                    category_id: a.category_id,
                    bbox: xywh,
                    area: xywh[2] * xywh[3],
                    is_moving: a.is_moving,
                });
            }
        }
    }
    Ok(TileOutput {
        set: out,
        provenance,
        windows: windows_out,
        warnings,
    })
}

/// Crop and resize one grayscale frame.
pub fn tile_image(img: &GrayImage, window: &CropWindow, spec: &TileSpec) -> GrayImage {
    let crop = imageops::crop_imm(img, window.x0, window.y0, window.side, window.side).to_image();
    imageops::resize(&crop, spec.output, spec.output, FilterType::Triangle)
}

/// Write the crops of every derived frame of `tiled` under `out_root`,
/// reading source frames from `frames_root`.
pub fn tile_frames(
    source: &VideoAnnotationSet,
    frames_root: &Path,
    tiled: &TileOutput,
    spec: &TileSpec,
    out_root: &Path,
) -> Result<()> {
    let files: BTreeMap<(u32, u32), &str> = source
        .images
        .iter()
        .map(|im| ((im.video_id, im.frame_index), im.file_name.as_str()))
        .collect();
    tiled.set.images.par_iter().try_for_each(|im| {
        let (src_video, window) = &tiled.windows[&im.video_id];
        let name = files.get(&(*src_video, im.frame_index)).ok_or_else(|| {
            invalid(format!("no source frame for video {src_video} frame {}", im.frame_index))
        })?;
        let path = frames_root.join(name);
        let img = image::open(&path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => path_err(&path, io),
                other => other.into(),
            })?
            .to_luma8();
        let out = out_root.join(&im.file_name);
        if let Some(dir) = out.parent() {
            std::fs::create_dir_all(dir).map_err(|e| path_err(dir, e))?;
        }
        tile_image(&img, window, spec).save(&out)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uhd_crop_arithmetic() {
        let spec = TileSpec::default();
        let (w, warn) = crop_windows(3840, 2160, &spec);
        assert!(warn.is_none());
        assert_eq!(w[1].x0, 1680);
        // overlap between [0, 2160) and [1680, 3840)
        assert_eq!(w[0].x0 + w[0].side - w[1].x0, 480);
    }

    #[test]
    fn narrow_input_uses_single_crop() {
        let (w, warn) = crop_windows(1920, 1080, &TileSpec::default());
        assert_eq!(w.len(), 1);
        assert_eq!(w[0], CropWindow { x0: 420, y0: 0, side: 1080 });
        assert!(warn.is_some());
    }

    #[test]
    fn inside_box_keeps_coordinates_before_scaling() {
        let spec = TileSpec {
            output: 2160,
            ..TileSpec::default()
        };
        let w = CropWindow { x0: 0, y0: 0, side: 2160 };
        let b = BBox::new(100.0, 200.0, 121.0, 215.0);
        assert_eq!(derive_box(&b, &w, &spec), Some(b));
    }

    #[test]
    fn downsampling_shrinks_boxes() {
        let spec = TileSpec::default();
        let w = CropWindow { x0: 0, y0: 0, side: 2160 };
        let b = derive_box(&BBox::new(0.0, 0.0, 21.0, 21.0), &w, &spec).unwrap();
        assert_eq!(b.x2, 9.96);
        assert!(b.area() < 144.0);
    }

    #[test]
    fn mostly_clipped_box_dropped() {
        let spec = TileSpec::default();
        let w = CropWindow { x0: 1680, y0: 0, side: 2160 };
        assert!(derive_box(&BBox::new(1670.0, 0.0, 1690.0, 10.0), &w, &spec).is_some());
        assert!(derive_box(&BBox::new(1660.0, 0.0, 1684.0, 10.0), &w, &spec).is_none());
    }
}
