//! Domain types shared by all pipeline stages.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A detector bounding box in one video frame.
///
/// `x`, `y` are the top-left corner in pixels; `w`, `h` must be positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameBox {
    pub box_id: u64,
    pub frame: u32,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl FrameBox {
    pub fn new(box_id: u64, frame: u32, x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0) || !(h > 0.0) {
            return Err(Error::Invalid(format!(
                "box {box_id}: width and height must be positive (got w={w}, h={h})"
            )));
        }
        Ok(FrameBox {
            box_id,
            frame,
            x,
            y,
            w,
            h,
        })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Train/test split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A labeled image: pixels in `[0,1]`, shape `(H, W, C)`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub sample_id: u64,
    pub identity: u32,
    pub pixels: Array3<f64>,
    pub split: Split,
    /// Set when this sample was produced by augmenting another sample.
    pub augmented_from: Option<u64>,
}

impl Sample {
    /// Shape as `(H, W, C)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[0], s[1], s[2])
    }

    /// True when every pixel lies in `[0,1]`.
    pub fn pixels_in_range(&self) -> bool {
        self.pixels.iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

/// One line of a dataset manifest (JSONL).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: u64,
    pub identity: u32,
    /// Tensor file path, relative to the manifest's directory.
    pub path: String,
    pub split: Split,
    pub augmented_from: Option<u64>,
}

/// A dataset loaded into memory.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A unit-norm embedding vector tied to its source sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub sample_id: u64,
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn new(sample_id: u64, values: Vec<f64>) -> Self {
        Embedding { sample_id, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// An (anchor, positive, negative) triple of sample ids.
///
/// Anchor and positive share an identity; the negative has a different one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: u64,
    pub positive: u64,
    pub negative: u64,
}
