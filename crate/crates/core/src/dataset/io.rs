//! PNG frames on disk and their mapping to training samples.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};

use super::clip::{LabeledBox, Sample};
use super::schema::{ImageRecord, VideoAnnotationSet};
use crate::error::{invalid, path_err, Result};
use crate::numerics::Tensor;

/// Round to the nearest of 256 levels, as a PNG round trip would.
pub fn quantize(frame: &Tensor<f32>) -> Tensor<f32> {
    frame.map(|v| quantize_value(v) as f32 / 255.0)
}

fn quantize_value(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Load a grayscale or RGB PNG as `[h, w, 1]` or `[h, w, 3]` in `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => path_err(path, io),
        other => other.into(),
    })?;
    let (shape, bytes) = match img {
        DynamicImage::ImageLuma8(g) => ([g.height() as usize, g.width() as usize, 1], g.into_raw()),
        other => {
            let rgb = other.to_rgb8();
            ([rgb.height() as usize, rgb.width() as usize, 3], rgb.into_raw())
        }
    };
    Tensor::from_vec(&shape, bytes.into_iter().map(|b| b as f32 / 255.0).collect())
}

pub fn write_frame(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (h, w, c) = frame.hwc()?;
    let bytes: Vec<u8> = frame.data().iter().map(|&v| quantize_value(v)).collect();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| path_err(dir, e))?;
    }
    let (w, h) = (w as u32, h as u32);
    match c {
        1 => {
            let img: GrayImage = ImageBuffer::from_raw(w, h, bytes).expect("buffer size matches shape");
            img.save(path)?;
        }
        3 => {
            let img: RgbImage = ImageBuffer::from_raw(w, h, bytes).expect("buffer size matches shape");
            img.save(path)?;
        }
        _ => return Err(invalid(format!("write_frame: {c} channels; expected 1 or 3"))),
    }
    Ok(())
}

pub fn frame_path(frames_root: &Path, image: &ImageRecord) -> PathBuf {
    frames_root.join(&image.file_name)
}

/// Boxes of one frame as detector targets.
pub fn frame_targets(set: &VideoAnnotationSet, video_id: u32, frame_index: u32) -> Vec<LabeledBox> {
    set.annotations
        .iter()
        .filter(|a| a.video_id == video_id && a.frame_index == frame_index)
        .filter_map(LabeledBox::from_annotation)
        .collect()
}

/// Every listed frame of one video in frame order, with its targets.
pub fn load_video_samples(set: &VideoAnnotationSet, frames_root: &Path, video_id: u32) -> Result<Vec<Sample>> {
    let by_frame = set.by_frame();
    let mut images: Vec<&ImageRecord> = set.images.iter().filter(|i| i.video_id == video_id).collect();
    images.sort_by_key(|i| i.frame_index);
    images
        .into_iter()
        .map(|im| {
            let boxes = by_frame
                .get(&(video_id, im.frame_index))
                .into_iter()
                .flatten()
                .filter_map(|a| LabeledBox::from_annotation(a))
                .collect();
            Ok(Sample {
                image: read_frame(&frame_path(frames_root, im))?,
                boxes,
            })
        })
        .collect()
}
