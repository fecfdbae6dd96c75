//! Import of generic COCO-VID style annotation files.
//!
//! The source layout has `videos`, `images` (with `video_id` and
//! `frame_id`) and `annotations` keyed by `image_id` with an `instance_id`
//! per object. Unknown fields are ignored; category names are mapped onto
//! the canonical categories by name or through an explicit table.

use std::collections::{BTreeMap, HashMap};

use serde::Deserialize;

use super::schema::{Annotation, Category, DatasetInfo, ImageRecord, Video, VideoAnnotationSet};
use crate::error::{Diagnostic, Error, Result};

#[derive(Debug, Deserialize)]
struct SourceVideo {
    id: u32,
    #[serde(default, alias = "file_name")]
    name: String,
    width: Option<u32>,
    height: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct SourceImage {
    id: u64,
    video_id: u32,
    #[serde(alias = "frame_index")]
    frame_id: u32,
    file_name: String,
    width: Option<u32>,
    height: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct SourceAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    #[serde(alias = "track_id")]
    instance_id: Option<u64>,
    bbox: [f64; 4],
    #[serde(default)]
    is_moving: bool,
}

#[derive(Debug, Deserialize)]
struct SourceCategory {
    id: u32,
    name: String,
}

#[derive(Debug, Deserialize)]
struct Source {
    videos: Vec<SourceVideo>,
    images: Vec<SourceImage>,
    annotations: Vec<SourceAnnotation>,
    categories: Vec<SourceCategory>,
}

fn canonical(name: &str) -> String {
    name.trim().to_lowercase().replace(['_', ' '], "-")
}

fn category_by_name(name: &str) -> Option<Category> {
    let n = canonical(name);
    Category::ALL.into_iter().find(|c| c.name() == n)
}

/// Convert a COCO-VID document. `category_map` maps source category names
/// to canonical names and takes precedence over name matching. Areas are
/// recomputed from the boxes and objects without an instance id get a track
/// of their own. The result is validated; violations come back as
/// diagnostics.
pub fn convert_coco_vid(
    text: &str,
    category_map: &BTreeMap<String, String>,
) -> Result<(VideoAnnotationSet, Vec<Diagnostic>)> {
    let src: Source = serde_json::from_str(text)?;
    let mut categories = HashMap::new();
    let mut unknown = Vec::new();
    for c in &src.categories {
        let target = match category_map.get(&c.name) {
            Some(t) => category_by_name(t).ok_or_else(|| {
                Error::Config(format!("category map target {t:?} is not a known category"))
            })?,
            None => match category_by_name(&c.name) {
                Some(k) => k,
                None => {
                    unknown.push(c.name.clone());
                    continue;
                }
            },
        };
        categories.insert(c.id, target);
    }
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "source categories {unknown:?} have no canonical counterpart; map them explicitly"
        )));
    }

    let images: HashMap<u64, &SourceImage> = src.images.iter().map(|im| (im.id, im)).collect();
    let mut videos = Vec::with_capacity(src.videos.len());
    for v in &src.videos {
        let frames: Vec<&SourceImage> = src.images.iter().filter(|im| im.video_id == v.id).collect();
        let first = frames.first();
        let width = v.width.or_else(|| first.and_then(|f| f.width)).unwrap_or(0);
        let height = v.height.or_else(|| first.and_then(|f| f.height)).unwrap_or(0);
        videos.push(Video {
            id: v.id,
            name: if v.name.is_empty() { format!("video_{}", v.id) } else { v.name.clone() },
            width,
            height,
            frame_count: frames.iter().map(|f| f.frame_id + 1).max().unwrap_or(0),
        });
    }
    let mut next_track = src.annotations.iter().filter_map(|a| a.instance_id).max().unwrap_or(0) + 1;
    let mut annotations = Vec::with_capacity(src.annotations.len());
    for a in &src.annotations {
        let im = images
            .get(&a.image_id)
            .ok_or_else(|| Error::Format(format!("annotation {} refers to unknown image {}", a.id, a.image_id)))?;
        let cat = categories
            .get(&a.category_id)
            .ok_or_else(|| Error::Format(format!("annotation {} has unknown category {}", a.id, a.category_id)))?;
        let track_id = a.instance_id.unwrap_or_else(|| {
            next_track += 1;
            next_track - 1
        });
        annotations.push(Annotation {
            id: a.id,
            video_id: im.video_id,
            frame_index: im.frame_id,
            track_id,
            category_id: cat.id(),
            bbox: a.bbox,
            area: a.bbox[2] * a.bbox[3],
            is_moving: a.is_moving,
        });
    }
    let set = VideoAnnotationSet {
        info: DatasetInfo {
            description: "converted from COCO-VID".into(),
            ..Default::default()
        },
        videos,
        images: src
            .images
            .iter()
            .map(|im| ImageRecord {
                id: im.id,
                video_id: im.video_id,
                frame_index: im.frame_id,
                file_name: im.file_name.clone(),
            })
            .collect(),
        annotations,
        ..VideoAnnotationSet::empty()
    };
    let diags = set.validate();
    Ok((set, diags))
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"{
        "videos": [{"id": 1, "file_name": "seq1", "width": 64, "height": 48}],
        "images": [
            {"id": 10, "video_id": 1, "frame_id": 0, "file_name": "seq1/0.png"},
            {"id": 11, "video_id": 1, "frame_id": 1, "file_name": "seq1/1.png", "extra": true}
        ],
        "annotations": [
            {"id": 1, "image_id": 10, "category_id": 3, "instance_id": 5, "bbox": [1, 2, 4, 5], "area": 0},
            {"id": 2, "image_id": 11, "category_id": 3, "instance_id": 5, "bbox": [2, 2, 4, 5]},
            {"id": 3, "image_id": 11, "category_id": 7, "bbox": [20, 20, 6, 3]}
        ],
        "categories": [{"id": 3, "name": "Person"}, {"id": 7, "name": "pedestrian"}]
    }"#;

    #[test]
    fn maps_fields_and_categories() {
        let map = BTreeMap::from([("pedestrian".to_string(), "person".to_string())]);
        let (set, diags) = convert_coco_vid(DOC, &map).unwrap();
        assert!(diags.is_empty(), "{diags:?}");
        assert_eq!(set.videos[0].frame_count, 2);
        assert_eq!(set.videos[0].name, "seq1");
        assert_eq!(set.annotations[0].area, 20.0);
        assert_eq!(set.annotations[1].frame_index, 1);
        assert_eq!(set.annotations[2].category_id, Category::Person.id());
        assert_eq!(set.annotations[2].track_id, 6);
    }

    #[test]
    fn unmapped_category_is_a_config_error() {
        let err = convert_coco_vid(DOC, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("pedestrian")));
    }
}
