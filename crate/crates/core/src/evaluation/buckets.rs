use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open area interval `[lo, hi)` in squared pixels; `hi = None` is unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeBucket {
    pub name: String,
    pub lo: f64,
    #[serde(default)]
    pub hi: Option<f64>,
}

impl SizeBucket {
    pub fn new(name: &str, lo: f64, hi: Option<f64>) -> Self {
        Self {
            name: name.to_string(),
            lo,
            hi,
        }
    }

    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && self.hi.is_none_or(|h| area < h)
    }
}

/// Named partition of `[0, inf)` into area buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SizeBuckets {
    buckets: Vec<SizeBucket>,
}

impl Default for SizeBuckets {
    fn default() -> Self {
        Self {
            buckets: vec![
                SizeBucket::new("es", 0.0, Some(144.0)),
                SizeBucket::new("rs", 144.0, Some(400.0)),
                SizeBucket::new("gs", 400.0, Some(1024.0)),
                SizeBucket::new("m", 1024.0, Some(9216.0)),
                SizeBucket::new("l", 9216.0, None),
            ],
        }
    }
}

impl SizeBuckets {
    /// Build and check that the intervals tile `[0, inf)` without gaps.
    pub fn new(buckets: Vec<SizeBucket>) -> Result<Self> {
        let b = Self { buckets };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .buckets
            .first()
            .ok_or_else(|| Error::Config("size buckets: at least one bucket is required".into()))?;
        if first.lo != 0.0 {
            return Err(Error::Config(format!("size bucket {:?} must start at 0", first.name)));
        }
        for pair in self.buckets.windows(2) {
            match pair[0].hi {
                Some(h) if h == pair[1].lo && h > pair[0].lo => {}
                _ => {
                    return Err(Error::Config(format!(
                        "size buckets {:?} and {:?} are not contiguous",
                        pair[0].name, pair[1].name
                    )))
                }
            }
        }
        let last = self.buckets.last().expect("non-empty");
        if last.hi.is_some() {
            return Err(Error::Config(format!("last size bucket {:?} must be unbounded", last.name)));
        }
        let mut names: Vec<&str> = self.buckets.iter().map(|b| b.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.buckets.len() || names.contains(&"all") {
            return Err(Error::Config("size bucket names must be unique and not \"all\"".into()));
        }
        Ok(())
    }

    pub fn buckets(&self) -> &[SizeBucket] {
        &self.buckets
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    /// Index of the bucket holding `area`.
    pub fn bucket_of(&self, area: f64) -> usize {
        self.buckets
            .iter()
            .position(|b| b.contains(area))
            .unwrap_or(self.buckets.len() - 1)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.buckets[i].name
    }
}
