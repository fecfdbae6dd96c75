use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::correlation::CorrelationConfig;
use crate::error::{Error, Result};
use crate::numerics::UpsampleMode;

/// Static:motion channel split, e.g. `3:1`.
///
/// The static share comes first in channel order; the motion share is the
/// trailing contiguous slice that the recurrent update transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatio {
    pub static_share: u32,
    pub motion_share: u32,
}

impl SplitRatio {
    pub const fn new(static_share: u32, motion_share: u32) -> Self {
        Self {
            static_share,
            motion_share,
        }
    }

    /// `1:0`: every channel is static and the neck is a no-op.
    pub fn is_static_only(&self) -> bool {
        self.motion_share == 0
    }

    /// Number of motion channels for a level with `channels` channels.
    pub fn motion_channels(&self, channels: usize) -> Result<usize> {
        let total = (self.static_share + self.motion_share) as usize;
        if total == 0 {
            return Err(Error::Config("split ratio 0:0 is meaningless".into()));
        }
        if self.motion_share == 0 {
            return Ok(0);
        }
        if self.static_share == 0 {
            return Err(Error::Config(format!(
                "split ratio {self} leaves no static channels"
            )));
        }
        let scaled = channels * self.motion_share as usize;
        if scaled % total != 0 {
            return Err(Error::Config(format!(
                "split ratio {self} does not divide {channels} channels evenly"
            )));
        }
        Ok(scaled / total)
    }
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self::new(3, 1)
    }
}

impl fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.static_share, self.motion_share)
    }
}

impl FromStr for SplitRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("split ratio {s:?} is not of the form S:M")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("split ratio {s:?}: {v:?} is not a count")))
        };
        Ok(Self::new(parse(a)?, parse(b)?))
    }
}

impl Serialize for SplitRatio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SplitRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where the cross-scale motion term of a level's update comes from.
///
/// All lookups of an iteration run before its updates, so either source is
/// available regardless of the order in which levels are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InterpSource {
    /// 2x average pooling of the next finer level's motion features.
    #[default]
    Finer,
    /// 2x upsampling of the next coarser level's motion features.
    Coarser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LookupConfig {
    /// Sampling radius per previous-frame level `k`; the window is `(2r+1)^2`.
    pub radii: Vec<usize>,
    pub flow_iterations: usize,
    /// Strides (subset of the pyramid strides) that receive flow-guided fusion.
    pub flow_levels: Vec<usize>,
    pub split_ratio: SplitRatio,
}

impl Default for LookupConfig {
    fn default() -> Self {
        Self {
            radii: vec![4, 4, 4],
            flow_iterations: 1,
            flow_levels: vec![8, 16, 32],
            split_ratio: SplitRatio::default(),
        }
    }
}

impl LookupConfig {
    pub fn window(&self, k: usize) -> usize {
        let r = self.radii[k];
        (2 * r + 1) * (2 * r + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MstfConfig {
    pub lookup: LookupConfig,
    /// Common correlation width every level is projected to.
    pub corr_dim: usize,
    pub correlation: CorrelationConfig,
    pub gru_kernel: usize,
    pub head_kernel: usize,
    pub interp_source: InterpSource,
    pub interp_mode: UpsampleMode,
    /// Stride of pyramid level 0.
    pub base_stride: usize,
}

impl Default for MstfConfig {
    fn default() -> Self {
        Self {
            lookup: LookupConfig::default(),
            corr_dim: 64,
            correlation: CorrelationConfig::default(),
            gru_kernel: 3,
            head_kernel: 3,
            interp_source: InterpSource::Finer,
            interp_mode: UpsampleMode::Bilinear,
            base_stride: 8,
        }
    }
}

impl MstfConfig {
    /// Pyramid level index of a stride.
    pub fn level_of_stride(&self, stride: usize) -> Option<usize> {
        if stride < self.base_stride || stride % self.base_stride != 0 {
            return None;
        }
        let ratio = stride / self.base_stride;
        ratio.is_power_of_two().then(|| ratio.trailing_zeros() as usize)
    }

    pub fn validate(&self, num_levels: usize) -> Result<()> {
        let lk = &self.lookup;
        if lk.radii.len() != num_levels {
            return Err(Error::Config(format!(
                "lookup radii {:?} must list one radius per level ({num_levels})",
                lk.radii
            )));
        }
        if lk.flow_iterations == 0 {
            return Err(Error::Config("flow_iterations must be positive".into()));
        }
        for &s in &lk.flow_levels {
            match self.level_of_stride(s) {
                Some(l) if l < num_levels => {}
                _ => {
                    return Err(Error::Config(format!(
                        "flow level stride {s} is not one of the pyramid strides"
                    )))
                }
            }
        }
        if self.corr_dim == 0 {
            return Err(Error::Config("corr_dim must be positive".into()));
        }
        if self.gru_kernel % 2 == 0 || self.head_kernel % 2 == 0 {
            return Err(Error::Config("gru/head kernels must be odd".into()));
        }
        Ok(())
    }

    /// Sorted level indices receiving fusion.
    pub fn flow_level_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .lookup
            .flow_levels
            .iter()
            .filter_map(|&s| self.level_of_stride(s))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        let r: SplitRatio = "3:1".parse().unwrap();
        assert_eq!(r.motion_channels(64).unwrap(), 16);
        assert_eq!("1:0".parse::<SplitRatio>().unwrap().motion_channels(64).unwrap(), 0);
        assert_eq!("1:3".parse::<SplitRatio>().unwrap().motion_channels(64).unwrap(), 48);
        assert!("3:1".parse::<SplitRatio>().unwrap().motion_channels(6).is_err());
        assert!("0:1".parse::<SplitRatio>().unwrap().motion_channels(8).is_err());
        assert!("x".parse::<SplitRatio>().is_err());
    }

    #[test]
    fn strides_map_to_levels() {
        let c = MstfConfig::default();
        assert_eq!(c.level_of_stride(8), Some(0));
        assert_eq!(c.level_of_stride(32), Some(2));
        assert_eq!(c.level_of_stride(24), None);
        assert!(c.validate(3).is_ok());
        let mut bad = c.clone();
        bad.lookup.flow_levels = vec![64];
        assert!(bad.validate(3).is_err());
    }

    #[test]
    fn window_sizes() {
        let c = LookupConfig::default();
        assert_eq!((0..3).map(|k| c.window(k)).sum::<usize>(), 243);
    }
}
