//! Annotation schema, statistics, tiling, track interpolation, augmentation
//! and the synthetic clip generator.

pub mod augment;
pub mod clip;
pub mod convert;
pub mod io;
pub mod schema;
pub mod stats;
pub mod synth;
pub mod tiling;
pub mod tracks;

pub use augment::{augment_clip, AugmentParams, Homography};
pub use clip::{LabeledBox, Sample};
pub use convert::convert_coco_vid;
pub use io::{load_video_samples, quantize, read_frame, write_frame};
pub use schema::{
    Annotation, Category, CategoryRecord, DatasetInfo, ImageRecord, SplitSpec, ValidationMode, Video,
    VideoAnnotationSet, ANNOTATION_FORMAT_VERSION,
};
pub use stats::{stats, StatsReport};
pub use synth::{synthesize, SynthManifest, SynthOutput, SynthPreset, SynthSpec};
pub use tiling::{crop_windows, derive_box, tile_and_downsample, tile_frames, tile_image, CropWindow, TileOutput, TileSpec};
pub use tracks::{interpolate_tracks, lerp_box, merge_movement_intervals, InterpolationConfig};
