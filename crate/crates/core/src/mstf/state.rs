use serde::{Deserialize, Serialize};

use crate::correlation::FeaturePyramid;
use crate::error::{invalid, Result};
use crate::numerics::{Real, Tensor};

/// Recurrent state carried between consecutive frames of one stream.
///
/// Flow fields are stored per level in that level's pixel units. A fresh or
/// reset state has no previous features and zero flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState<T> {
    flows: Vec<Tensor<T>>,
    previous: Option<FeaturePyramid<T>>,
    frames_seen: u64,
}

impl<T: Real> Default for FlowState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> FlowState<T> {
    pub fn new() -> Self {
        Self {
            flows: Vec::new(),
            previous: None,
            frames_seen: 0,
        }
    }

    /// Rebuild a state from its parts, e.g. after reading a checkpoint.
    pub fn from_parts(
        flows: Vec<Tensor<T>>,
        previous: Option<FeaturePyramid<T>>,
        frames_seen: u64,
    ) -> Result<Self> {
        if let Some(p) = &previous {
            if !flows.is_empty() && flows.len() != p.num_levels() {
                return Err(invalid(format!(
                    "flow state: {} flow fields for {} feature levels",
                    flows.len(),
                    p.num_levels()
                )));
            }
            for (f, g) in flows.iter().zip(p.levels()) {
                let (h, w, _) = g.hwc()?;
                if f.shape() != [h, w, 2] {
                    return Err(invalid(format!(
                        "flow state: flow {:?} does not match level {:?}",
                        f.shape(),
                        g.shape()
                    )));
                }
            }
        }
        Ok(Self {
            flows,
            previous,
            frames_seen,
        })
    }

    /// Zero the flow, drop the previous features and the frame counter.
    pub fn reset(&mut self) {
        *self = Self::new();
    }

    pub fn is_fresh(&self) -> bool {
        self.previous.is_none()
    }

    /// Per-level flow fields; empty before the first frame.
    pub fn flows(&self) -> &[Tensor<T>] {
        &self.flows
    }

    pub fn previous(&self) -> Option<&FeaturePyramid<T>> {
        self.previous.as_ref()
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    /// Flow at level `l`, or zeros shaped for `like` when none is stored.
    pub fn flow_or_zero(&self, l: usize, like: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, _) = like.hwc()?;
        Ok(self
            .flows
            .get(l)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[h, w, 2])))
    }

    pub fn cast<U: Real>(&self) -> FlowState<U> {
        FlowState {
            flows: self.flows.iter().map(|t| t.cast()).collect(),
            previous: self.previous.as_ref().map(|p| p.cast()),
            frames_seen: self.frames_seen,
        }
    }

    pub(crate) fn advance(&mut self, flows: Vec<Tensor<T>>, current: FeaturePyramid<T>) {
        self.flows = flows;
        self.previous = Some(current);
        self.frames_seen += 1;
    }
}

/// Work counters for one fusion step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepStats {
    /// Window lookups performed (one per level per iteration).
    pub lookups: usize,
    /// Recurrent updates applied (one per level per iteration).
    pub updates: usize,
    /// Total correlation elements built.
    pub correlation_elements: usize,
}
