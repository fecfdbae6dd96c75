//! Multi-scale spatio-temporal fusion.
//!
//! Each level's channels are split into a static slice (passed through
//! unchanged) and a motion slice refined by a convolutional GRU driven by
//! flow-guided lookups into an all-pairs correlation pyramid between the
//! current and previous frame.

pub mod checkpoint;
pub mod config;
pub mod lookup;
pub mod neck;
pub mod state;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{InterpSource, LookupConfig, MstfConfig, SplitRatio};
pub use lookup::{lookup, lookup_backward, lookup_channels, MotionFeatureMap};
pub use neck::{FlowUpdate, Mstf, StepCache, StepGrads, StepOutput};
pub use state::{FlowState, StepStats};
