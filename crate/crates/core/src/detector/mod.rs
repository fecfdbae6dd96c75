//! Anchor-free three-scale detector hosting the fusion neck.
//!
//! A small convolutional backbone produces features at strides 8, 16 and
//! 32; the optional [`Mstf`](crate::mstf::Mstf) neck fuses them with the
//! previous frame; per-level heads predict class logits and four edge
//! distances per cell.

pub mod config;
pub mod decode;
pub mod infer;
pub mod loss;
pub mod network;
pub mod train;

pub use config::{DecodeConfig, DetectorConfig, Optimizer, TrainConfig, STRIDES};
pub use decode::{decode, decode_and_nms, nms, nms_reference, Detection};
pub use infer::{infer_videos, run_stream, to_predictions, LatencyReport, StreamOutput};
pub use loss::{assign_targets, frame_loss, level_for_box, CellTarget, LevelTargets, LossBreakdown};
pub use network::{head_grids, Detector, FrameRef};
pub use train::{learning_rate, ClipDataset, EpochSummary, TrainReport, Trainer};
