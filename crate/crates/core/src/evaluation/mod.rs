//! Per-bucket COCO-style average precision.

pub mod ap;
pub mod buckets;
pub mod evaluate;
pub mod matching;

pub use buckets::{SizeBucket, SizeBuckets};
pub use evaluate::{
    evaluate, ground_truth_as_predictions, load_predictions, save_predictions, AreaMode, BucketResult, CategoryResult,
    EvalConfig, EvalResult, Prediction, EVAL_FORMAT_VERSION,
};
pub use matching::{match_frame, match_frame_brute_force, DetBox, DetOutcome, FrameAssignment, GtBox};
