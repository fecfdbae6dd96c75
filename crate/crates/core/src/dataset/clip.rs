use serde::{Deserialize, Serialize};

use super::schema::{Annotation, Category};
use crate::geometry::BBox;
use crate::numerics::Tensor;

/// A box the detector trains on; `class = None` marks an ignore region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub class: Option<usize>,
}

impl LabeledBox {
    /// Scorable categories map to a class index; crowd and ignore become
    /// ignore regions.
    pub fn from_annotation(a: &Annotation) -> Option<Self> {
        let cat = a.category()?;
        Some(Self {
            bbox: a.to_bbox(),
            class: cat.class_index(),
        })
    }

    pub fn category(&self) -> Option<Category> {
        self.class.and_then(Category::from_class_index)
    }
}

/// One frame with its boxes; pixel values are in `[0, 1]`, shape `[h, w, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub boxes: Vec<LabeledBox>,
}
