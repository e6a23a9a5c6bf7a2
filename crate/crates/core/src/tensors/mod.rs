//! Dense activation types, the `FVT1` tensor container and image manifests.

mod format;
mod manifest;

pub use format::{
    decode, encode, read_map, read_tensor, read_vector, write_tensor, HEADER_FIXED_LEN, MAGIC,
    VERSION,
};
pub use manifest::{load_manifest, Manifest, ManifestEntry, Split, Stream, ViewFile};

use crate::error::{Error, Result};

/// Read access shared by every flat real-valued representation, so pooling
/// and normalization can be written once.
pub trait DenseVector: Sized {
    fn values(&self) -> &[f64];
    /// A copy of `self` carrying `values` instead (same length).
    fn with_values(&self, values: Vec<f64>) -> Self;

    fn dim(&self) -> usize {
        self.values().len()
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Data(format!(
            "{what} holds a non-finite value at index {i}"
        ))),
        None => Ok(()),
    }
}

/// Convolutional activations for one view, stored row-major in
/// (height, width, channels) order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    nonnegative: bool,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::Shape("feature map dims overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "feature map {height}x{width}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        check_finite(&data, "feature map")?;
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
            nonnegative: false,
        })
    }

    /// Marks the map as post-ReLU. Fails if any value is negative.
    pub fn declare_nonnegative(mut self) -> Result<Self> {
        if let Some(i) = self.data.iter().position(|&v| v < 0.0) {
            return Err(Error::Data(format!(
                "map declared nonnegative has {} at index {i}",
                self.data[i]
            )));
        }
        self.nonnegative = true;
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn is_nonnegative(&self) -> bool {
        self.nonnegative
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// The channel vector at spatial position (row, col).
    pub fn position(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Same shape with new values; the nonnegative flag is dropped.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> FeatureMap {
        debug_assert_eq!(data.len(), self.data.len());
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
            nonnegative: false,
        }
    }
}

/// A fully-connected layer activation (or any rank-1 payload).
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalVector {
    data: Vec<f64>,
    source_tag: String,
    nonnegative: bool,
}

impl GlobalVector {
    pub fn new(data: Vec<f64>, source_tag: impl Into<String>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Shape("vector dim must be positive".into()));
        }
        check_finite(&data, "vector")?;
        Ok(GlobalVector {
            data,
            source_tag: source_tag.into(),
            nonnegative: false,
        })
    }

    pub fn declare_nonnegative(mut self) -> Result<Self> {
        if let Some(i) = self.data.iter().position(|&v| v < 0.0) {
            return Err(Error::Data(format!(
                "vector declared nonnegative has {} at index {i}",
                self.data[i]
            )));
        }
        self.nonnegative = true;
        Ok(self)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }
    pub fn set_source_tag(&mut self, tag: impl Into<String>) {
        self.source_tag = tag.into();
    }
    pub fn is_nonnegative(&self) -> bool {
        self.nonnegative
    }
}

impl DenseVector for GlobalVector {
    fn values(&self) -> &[f64] {
        &self.data
    }
    fn with_values(&self, values: Vec<f64>) -> Self {
        GlobalVector {
            data: values,
            source_tag: self.source_tag.clone(),
            nonnegative: false,
        }
    }
}

/// Per-class scores for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    scores: Vec<f64>,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Shape("score vector needs at least one class".into()));
        }
        check_finite(&scores, "score vector")?;
        Ok(ScoreVector { scores })
    }

    pub fn class_count(&self) -> usize {
        self.scores.len()
    }
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
    pub fn into_scores(self) -> Vec<f64> {
        self.scores
    }

    /// Index of the highest score, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.scores)
    }
}

impl DenseVector for ScoreVector {
    fn values(&self) -> &[f64] {
        &self.scores
    }
    fn with_values(&self, values: Vec<f64>) -> Self {
        ScoreVector { scores: values }
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Anything the tensor container can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Vector(GlobalVector),
    Map(FeatureMap),
}

impl From<GlobalVector> for Tensor {
    fn from(v: GlobalVector) -> Self {
        Tensor::Vector(v)
    }
}

impl From<FeatureMap> for Tensor {
    fn from(m: FeatureMap) -> Self {
        Tensor::Map(m)
    }
}

/// Rounds every value through `f32`, i.e. what a write/read cycle does.
pub fn round_to_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}
