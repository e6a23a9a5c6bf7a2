//! Object/scene combination: weighted score sums and weighted feature
//! concatenation.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensors::{DenseVector, ScoreVector};

#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct FusionWeights {
    object: f64,
    scene: f64,
}

impl FusionWeights {
    pub const EQUAL: FusionWeights = FusionWeights {
        object: 1.0,
        scene: 1.0,
    };

    pub fn new(object: f64, scene: f64) -> Result<Self> {
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if !ok(object) || !ok(scene) {
            return Err(Error::Parameter(format!(
                "fusion weights must be nonnegative, got ({object}, {scene})"
            )));
        }
        if object == 0.0 && scene == 0.0 {
            return Err(Error::Parameter("fusion weights cannot both be zero".into()));
        }
        Ok(FusionWeights { object, scene })
    }

    pub fn object(&self) -> f64 {
        self.object
    }
    pub fn scene(&self) -> f64 {
        self.scene
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights::EQUAL
    }
}

impl TryFrom<[f64; 2]> for FusionWeights {
    type Error = Error;
    fn try_from(w: [f64; 2]) -> Result<Self> {
        FusionWeights::new(w[0], w[1])
    }
}

impl From<FusionWeights> for [f64; 2] {
    fn from(w: FusionWeights) -> Self {
        [w.object, w.scene]
    }
}

/// Parses `a,b`.
impl FromStr for FusionWeights {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(Error::Parameter(format!("expected two weights, got `{s}`")));
        }
        let parse = |p: &str| {
            p.parse::<f64>()
                .map_err(|_| Error::Parameter(format!("bad weight `{p}`")))
        };
        FusionWeights::new(parse(parts[0])?, parse(parts[1])?)
    }
}

/// `α_o·s_o + α_s·s_s`, elementwise.
pub fn fuse_scores(
    object_scores: &ScoreVector,
    scene_scores: &ScoreVector,
    w: FusionWeights,
) -> Result<ScoreVector> {
    if object_scores.class_count() != scene_scores.class_count() {
        return Err(Error::Shape(format!(
            "object stream has {} classes, scene stream {}",
            object_scores.class_count(),
            scene_scores.class_count()
        )));
    }
    ScoreVector::new(
        object_scores
            .scores()
            .iter()
            .zip(scene_scores.scores())
            .map(|(o, s)| w.object * o + w.scene * s)
            .collect(),
    )
}

/// A concatenation of two weighted blocks; `split` is where the second begins.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    data: Vec<f64>,
    split: usize,
}

impl FusedFeature {
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn split(&self) -> usize {
        self.split
    }
    pub fn object_block(&self) -> &[f64] {
        &self.data[..self.split]
    }
    pub fn scene_block(&self) -> &[f64] {
        &self.data[self.split..]
    }
}

impl DenseVector for FusedFeature {
    fn values(&self) -> &[f64] {
        &self.data
    }
    fn with_values(&self, values: Vec<f64>) -> Self {
        FusedFeature {
            data: values,
            split: self.split,
        }
    }
}

/// `[β_o·object, β_s·scene]`.
pub fn concat_features(object: &[f64], scene: &[f64], w: FusionWeights) -> Result<FusedFeature> {
    if object.iter().chain(scene).any(|v| !v.is_finite()) {
        return Err(Error::Data("fusion inputs must be finite".into()));
    }
    let mut data = Vec::with_capacity(object.len() + scene.len());
    data.extend(object.iter().map(|v| w.object * v));
    data.extend(scene.iter().map(|v| w.scene * v));
    Ok(FusedFeature {
        data,
        split: object.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn equal_weight_score_sum() {
        let out = fuse_scores(&sv(&[0.2, 0.8]), &sv(&[0.6, 0.4]), FusionWeights::EQUAL).unwrap();
        assert!((out.scores()[0] - 0.8).abs() < 1e-15);
        assert!((out.scores()[1] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn object_only_weights_return_object_scores() {
        let o = sv(&[0.1, -3.0, 2.5]);
        let out = fuse_scores(&o, &sv(&[9.0, 9.0, 9.0]), FusionWeights::new(1.0, 0.0).unwrap())
            .unwrap();
        assert_eq!(out, o);
    }

    #[test]
    fn class_count_mismatch() {
        assert!(matches!(
            fuse_scores(&sv(&[1.0]), &sv(&[1.0, 2.0]), FusionWeights::EQUAL),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn weight_validation_and_parsing() {
        assert!(FusionWeights::new(0.0, 0.0).is_err());
        assert!(FusionWeights::new(-1.0, 1.0).is_err());
        assert_eq!("2, 1".parse::<FusionWeights>().unwrap(), FusionWeights::new(2.0, 1.0).unwrap());
        assert!("1".parse::<FusionWeights>().is_err());
    }

    #[test]
    fn concatenation_examples() {
        let f = concat_features(&[1.0, 2.0], &[3.0], FusionWeights::EQUAL).unwrap();
        assert_eq!(f.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(f.split(), 2);
        let f = concat_features(&[1.0, 0.0], &[0.0, 1.0], FusionWeights::new(2.0, 1.0).unwrap())
            .unwrap();
        assert_eq!(f.data(), &[2.0, 0.0, 0.0, 1.0]);
        assert_eq!(f.scene_block(), &[0.0, 1.0]);
    }

    #[test]
    fn linear_kernel_decomposes_over_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut r = |n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a1, b1, a2, b2) = (r(8), r(8), r(8), r(8));
        let w = FusionWeights::EQUAL;
        let f1 = concat_features(&a1, &b1, w).unwrap();
        let f2 = concat_features(&a2, &b2, w).unwrap();
        let lhs = dot(f1.data(), f2.data());
        let rhs = dot(&a1, &a2) + dot(&b1, &b2);
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
