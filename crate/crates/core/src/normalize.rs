//! Channel and spatial max-normalization of convolutional maps, and
//! flattening a map into a bag of per-position descriptors.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensors::FeatureMap;

/// Floor applied to every max-magnitude divisor.
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    ChannelNorm,
    SpatialNorm,
    Raw,
}

/// Which normalized descriptor sets to produce from a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TddMode {
    Channel,
    Spatial,
    Both,
}

impl TddMode {
    /// Variants in concatenation order (channel first).
    pub fn provenances(self) -> &'static [Provenance] {
        match self {
            TddMode::Channel => &[Provenance::ChannelNorm],
            TddMode::Spatial => &[Provenance::SpatialNorm],
            TddMode::Both => &[Provenance::ChannelNorm, Provenance::SpatialNorm],
        }
    }
}

impl FromStr for TddMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(TddMode::Channel),
            "spatial" => Ok(TddMode::Spatial),
            "both" => Ok(TddMode::Both),
            other => Err(Error::Parameter(format!("unknown tdd mode `{other}`"))),
        }
    }
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::ChannelNorm => "channel",
            Provenance::SpatialNorm => "spatial",
            Provenance::Raw => "raw",
        }
    }
}

/// A bag of equal-length local descriptors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    data: Vec<f64>,
    provenance: Provenance,
}

impl DescriptorSet {
    pub fn new(dim: usize, data: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("descriptor dim must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} values do not split into descriptors of dim {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("descriptor values must be finite".into()));
        }
        Ok(DescriptorSet {
            dim,
            data,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    /// Concatenates sets of equal dim; the provenance of the first is kept.
    pub fn concat(sets: &[DescriptorSet]) -> Result<DescriptorSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Parameter("no descriptor sets to concatenate".into()))?;
        let mut data = Vec::with_capacity(sets.iter().map(|s| s.data.len()).sum());
        for s in sets {
            if s.dim != first.dim {
                return Err(Error::Shape(format!(
                    "descriptor dims differ: {} vs {}",
                    s.dim, first.dim
                )));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(DescriptorSet {
            dim: first.dim,
            data,
            provenance: first.provenance,
        })
    }

    /// Descriptor file layout: a rank-3 map with height = count, width = 1.
    pub fn to_map(&self) -> Result<FeatureMap> {
        FeatureMap::new(self.len(), 1, self.dim, self.data.clone())
    }

    pub fn from_map(map: FeatureMap, provenance: Provenance) -> DescriptorSet {
        DescriptorSet {
            dim: map.channels(),
            data: map.into_data(),
            provenance,
        }
    }
}

/// Divides every channel by its largest magnitude over all positions.
pub fn spatial_normalize(map: &FeatureMap, epsilon: f64) -> Result<FeatureMap> {
    check_epsilon(epsilon)?;
    let c = map.channels();
    let mut max_abs = vec![0.0f64; c];
    for pos in map.data().chunks_exact(c) {
        for (m, v) in max_abs.iter_mut().zip(pos) {
            *m = m.max(v.abs());
        }
    }
    for m in &mut max_abs {
        *m = m.max(epsilon);
    }
    let mut out = map.data().to_vec();
    for pos in out.chunks_exact_mut(c) {
        for (v, m) in pos.iter_mut().zip(&max_abs) {
            *v /= m;
        }
    }
    Ok(map.with_data(out))
}

/// Divides every position's channel vector by its largest-magnitude entry.
pub fn channel_normalize(map: &FeatureMap, epsilon: f64) -> Result<FeatureMap> {
    check_epsilon(epsilon)?;
    let mut out = map.data().to_vec();
    for pos in out.chunks_exact_mut(map.channels()) {
        let m = pos.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(epsilon);
        for v in pos.iter_mut() {
            *v /= m;
        }
    }
    Ok(map.with_data(out))
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "epsilon must be positive, got {epsilon}"
        )))
    }
}

/// Descriptor `row * width + col` is the channel vector at (row, col).
pub fn extract_descriptors(map: &FeatureMap, provenance: Provenance) -> DescriptorSet {
    DescriptorSet {
        dim: map.channels(),
        data: map.data().to_vec(),
        provenance,
    }
}

/// Normalizes `map` as `provenance` asks and flattens it.
pub fn tdd(map: &FeatureMap, provenance: Provenance, epsilon: f64) -> Result<DescriptorSet> {
    let normalized = match provenance {
        Provenance::ChannelNorm => channel_normalize(map, epsilon)?,
        Provenance::SpatialNorm => spatial_normalize(map, epsilon)?,
        Provenance::Raw => map.clone(),
    };
    Ok(extract_descriptors(&normalized, provenance))
}
