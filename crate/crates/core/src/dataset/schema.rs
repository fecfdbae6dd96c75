//! COCO-VID-style annotation schema with validation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{path_err, Diagnostic, Error, Result};
use crate::geometry::BBox;

/// Version string written to `info.version`.
pub const ANNOTATION_FORMAT_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Person,
    Car,
    Bicycle,
    Cyclist,
    CrowdPerson,
    CrowdCar,
    CrowdBicycle,
    Ignore,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Person,
        Category::Car,
        Category::Bicycle,
        Category::Cyclist,
        Category::CrowdPerson,
        Category::CrowdCar,
        Category::CrowdBicycle,
        Category::Ignore,
    ];

    /// Number of categories that are scored and predicted.
    pub const NUM_SCORABLE: usize = 4;

    pub fn id(self) -> u32 {
        self as u32 + 1
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get((id as usize).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Person => "person",
            Category::Car => "car",
            Category::Bicycle => "bicycle",
            Category::Cyclist => "cyclist",
            Category::CrowdPerson => "crowd-person",
            Category::CrowdCar => "crowd-car",
            Category::CrowdBicycle => "crowd-bicycle",
            Category::Ignore => "ignore",
        }
    }

    /// Crowd and ignore labels are unpenalised regions, not instances.
    pub fn is_scorable(self) -> bool {
        self.class_index().is_some()
    }

    /// Detector class index for scorable categories.
    pub fn class_index(self) -> Option<usize> {
        let i = self as usize;
        (i < Self::NUM_SCORABLE).then_some(i)
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        (i < Self::NUM_SCORABLE).then(|| Self::ALL[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub version: String,
    #[serde(default)]
    pub description: String,
}

impl Default for DatasetInfo {
    fn default() -> Self {
        Self {
            version: ANNOTATION_FORMAT_VERSION.to_string(),
            description: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryRecord {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Video {
    pub id: u32,
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: u64,
    pub video_id: u32,
    pub frame_index: u32,
    /// Path relative to the frames root.
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub id: u64,
    pub video_id: u32,
    pub frame_index: u32,
    pub track_id: u64,
    pub category_id: u32,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default)]
    pub is_moving: bool,
}

impl Annotation {
    pub fn category(&self) -> Option<Category> {
        Category::from_id(self.category_id)
    }

    pub fn to_bbox(&self) -> BBox {
        BBox::from_xywh(self.bbox)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoAnnotationSet {
    pub info: DatasetInfo,
    pub categories: Vec<CategoryRecord>,
    pub videos: Vec<Video>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
}

impl Default for VideoAnnotationSet {
    fn default() -> Self {
        Self::empty()
    }
}

/// How invariant violations are treated on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValidationMode {
    /// Any violation rejects the file.
    #[default]
    Strict,
    /// Violations are returned as warnings.
    Lenient,
}

impl ValidationMode {
    pub fn from_strict(strict: bool) -> Self {
        if strict {
            Self::Strict
        } else {
            Self::Lenient
        }
    }
}

/// Relative tolerance for `area == w * h`.
const AREA_TOLERANCE: f64 = 1e-6;
/// Absolute slack allowed when checking boxes against frame bounds.
const BOUNDS_SLACK: f64 = 1e-6;

impl VideoAnnotationSet {
    /// An empty set listing the canonical categories.
    pub fn empty() -> Self {
        Self {
            info: DatasetInfo::default(),
            categories: Category::ALL
                .iter()
                .map(|c| CategoryRecord {
                    id: c.id(),
                    name: c.name().to_string(),
                })
                .collect(),
            videos: Vec::new(),
            images: Vec::new(),
            annotations: Vec::new(),
        }
    }

    pub fn video(&self, id: u32) -> Option<&Video> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Annotations grouped by `(video_id, frame_index)`.
    pub fn by_frame(&self) -> BTreeMap<(u32, u32), Vec<&Annotation>> {
        let mut m: BTreeMap<(u32, u32), Vec<&Annotation>> = BTreeMap::new();
        for a in &self.annotations {
            m.entry((a.video_id, a.frame_index)).or_default().push(a);
        }
        m
    }

    /// Check every invariant, collecting all violations.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut d = Vec::new();
        if self.info.version != ANNOTATION_FORMAT_VERSION {
            d.push(Diagnostic::new(
                "info",
                format!(
                    "format version {:?} differs from supported {ANNOTATION_FORMAT_VERSION:?}",
                    self.info.version
                ),
            ));
        }
        for c in &self.categories {
            match Category::from_id(c.id) {
                Some(k) if k.name() == c.name => {}
                _ => d.push(Diagnostic::new(
                    format!("category {}", c.id),
                    format!("unknown category {:?} with id {}", c.name, c.id),
                )),
            }
        }
        let mut videos = HashMap::new();
        for v in &self.videos {
            if videos.insert(v.id, v).is_some() {
                d.push(Diagnostic::new(format!("video {}", v.id), "duplicate video id"));
            }
            if v.width == 0 || v.height == 0 {
                d.push(Diagnostic::new(format!("video {}", v.id), "zero resolution"));
            }
        }
        let mut image_ids = HashSet::new();
        let mut frames = HashSet::new();
        for im in &self.images {
            let rec = format!("image {}", im.id);
            if !image_ids.insert(im.id) {
                d.push(Diagnostic::new(&rec, "duplicate image id"));
            }
            match videos.get(&im.video_id) {
                None => d.push(Diagnostic::new(&rec, format!("unknown video {}", im.video_id))),
                Some(v) if im.frame_index >= v.frame_count => d.push(Diagnostic::new(
                    &rec,
                    format!("frame index {} beyond frame count {}", im.frame_index, v.frame_count),
                )),
                _ => {}
            }
            if !frames.insert((im.video_id, im.frame_index)) {
                d.push(Diagnostic::new(&rec, "duplicate (video, frame) image"));
            }
        }
        let mut ann_ids = HashSet::new();
        let mut track_category: HashMap<(u32, u64), u32> = HashMap::new();
        let mut track_frames = HashSet::new();
        for a in &self.annotations {
            let rec = format!("annotation {}", a.id);
            if !ann_ids.insert(a.id) {
                d.push(Diagnostic::new(&rec, "duplicate annotation id"));
            }
            if Category::from_id(a.category_id).is_none() {
                d.push(Diagnostic::new(&rec, format!("unknown category id {}", a.category_id)));
            }
            let [x, y, w, h] = a.bbox;
            if !a.bbox.iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
                d.push(Diagnostic::new(&rec, format!("malformed bbox {:?}", a.bbox)));
            } else {
                if (a.area - w * h).abs() > AREA_TOLERANCE * (w * h).max(1.0) {
                    d.push(Diagnostic::new(&rec, format!("area {} differs from w*h = {}", a.area, w * h)));
                }
                if let Some(v) = videos.get(&a.video_id) {
                    if x < -BOUNDS_SLACK
                        || y < -BOUNDS_SLACK
                        || x + w > v.width as f64 + BOUNDS_SLACK
                        || y + h > v.height as f64 + BOUNDS_SLACK
                    {
                        d.push(Diagnostic::new(
                            &rec,
                            format!("bbox {:?} exceeds {}x{} frame", a.bbox, v.width, v.height),
                        ));
                    }
                }
            }
            match videos.get(&a.video_id) {
                None => d.push(Diagnostic::new(&rec, format!("unknown video {}", a.video_id))),
                Some(v) if a.frame_index >= v.frame_count => d.push(Diagnostic::new(
                    &rec,
                    format!("frame index {} beyond frame count {}", a.frame_index, v.frame_count),
                )),
                _ => {}
            }
            match track_category.insert((a.video_id, a.track_id), a.category_id) {
                Some(prev) if prev != a.category_id => d.push(Diagnostic::new(
                    &rec,
                    format!(
                        "track {} in video {} changes category ({prev} -> {})",
                        a.track_id, a.video_id, a.category_id
                    ),
                )),
                _ => {}
            }
            if !track_frames.insert((a.video_id, a.track_id, a.frame_index)) {
                d.push(Diagnostic::new(
                    &rec,
                    format!(
                        "track {} appears twice in video {} frame {}",
                        a.track_id, a.video_id, a.frame_index
                    ),
                ));
            }
        }
        d
    }

    pub fn from_json(text: &str, mode: ValidationMode) -> Result<(Self, Vec<Diagnostic>)> {
        let set: Self = serde_json::from_str(text).map_err(|e| {
            Error::Validation(vec![Diagnostic::new(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )])
        })?;
        let diags = set.validate();
        if mode == ValidationMode::Strict && !diags.is_empty() {
            return Err(Error::Validation(diags));
        }
        Ok((set, diags))
    }

    /// Load and validate. In lenient mode invariant violations come back as
    /// warnings alongside the set.
    pub fn load(path: &Path, mode: ValidationMode) -> Result<(Self, Vec<Diagnostic>)> {
        let text = fs::read_to_string(path).map_err(|e| path_err(path, e))?;
        Self::from_json(&text, mode).map_err(|e| match e {
            Error::Validation(mut d) => {
                for x in &mut d {
                    x.record = format!("{}: {}", path.display(), x.record);
                }
                Error::Validation(d)
            }
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| path_err(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| path_err(path, e))
    }
}

/// Named, disjoint video-id lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct SplitSpec {
    pub splits: BTreeMap<String, Vec<u32>>,
}

impl SplitSpec {
    pub fn validate(&self, set: Option<&VideoAnnotationSet>) -> Vec<Diagnostic> {
        let mut d = Vec::new();
        let mut owner: HashMap<u32, &str> = HashMap::new();
        for (name, ids) in &self.splits {
            for &id in ids {
                if let Some(prev) = owner.insert(id, name) {
                    d.push(Diagnostic::new(
                        format!("split {name}"),
                        format!("video {id} also appears in split {prev}"),
                    ));
                }
                if let Some(s) = set {
                    if s.video(id).is_none() {
                        d.push(Diagnostic::new(format!("split {name}"), format!("unknown video {id}")));
                    }
                }
            }
        }
        d
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| path_err(path, e))?;
        let s: Self = serde_json::from_str(&text)?;
        let d = s.validate(None);
        if !d.is_empty() {
            return Err(Error::Validation(d));
        }
        Ok(s)
    }

    /// Restrict `set` to the videos of split `name`.
    pub fn subset(&self, set: &VideoAnnotationSet, name: &str) -> Result<VideoAnnotationSet> {
        let ids: HashSet<u32> = self
            .splits
            .get(name)
            .ok_or_else(|| Error::Config(format!("no split named {name:?}")))?
            .iter()
            .copied()
            .collect();
        Ok(VideoAnnotationSet {
            info: set.info.clone(),
            categories: set.categories.clone(),
            videos: set.videos.iter().filter(|v| ids.contains(&v.id)).cloned().collect(),
            images: set.images.iter().filter(|i| ids.contains(&i.video_id)).cloned().collect(),
            annotations: set
                .annotations
                .iter()
                .filter(|a| ids.contains(&a.video_id))
                .cloned()
                .collect(),
        })
    }
}
