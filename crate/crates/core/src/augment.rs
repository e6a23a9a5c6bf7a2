//! Test-time view geometry (five crops per scale, optional horizontal flips)
//! and sum pooling of per-view representations.

use std::collections::HashSet;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensors::DenseVector;

/// Which of the five crops a view is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CropPosition {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl CropPosition {
    pub const ALL: [CropPosition; 5] = [
        CropPosition::TopLeft,
        CropPosition::TopRight,
        CropPosition::BottomLeft,
        CropPosition::BottomRight,
        CropPosition::Center,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CropPosition::TopLeft => "top_left",
            CropPosition::TopRight => "top_right",
            CropPosition::BottomLeft => "bottom_left",
            CropPosition::BottomRight => "bottom_right",
            CropPosition::Center => "center",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct View {
    pub scale_smallest_side: u32,
    /// Size of the image after the aspect-preserving resize.
    pub scaled_width: u32,
    pub scaled_height: u32,
    pub position: CropPosition,
    pub crop_x: u32,
    pub crop_y: u32,
    pub crop_size: u32,
    pub flipped: bool,
}

impl View {
    pub fn in_bounds(&self) -> bool {
        self.crop_x as u64 + self.crop_size as u64 <= self.scaled_width as u64
            && self.crop_y as u64 + self.crop_size as u64 <= self.scaled_height as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewPlan {
    pub views: Vec<View>,
}

impl ViewPlan {
    pub const CSV_HEADER: &'static str =
        "scale,scaled_width,scaled_height,position,crop_x,crop_y,crop_size,flipped";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for v in &self.views {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                v.scale_smallest_side,
                v.scaled_width,
                v.scaled_height,
                v.position.as_str(),
                v.crop_x,
                v.crop_y,
                v.crop_size,
                v.flipped
            ));
        }
        out
    }
}

/// Resizes so the shorter side equals `smallest_side`; the long side is
/// rounded half away from zero.
pub fn scaled_size(width: u32, height: u32, smallest_side: u32) -> (u32, u32) {
    // round(long * s / short) for positive integers == (2*long*s + short) / (2*short)
    let round = |long: u32, short: u32| -> u32 {
        let (l, s, sh) = (long as u64, smallest_side as u64, short as u64);
        ((2 * l * s + sh) / (2 * sh)) as u32
    };
    if width <= height {
        (smallest_side, round(height, width))
    } else {
        (round(width, height), smallest_side)
    }
}

/// Enumerates, per scale, the four corner crops and the center crop, each
/// followed by its flipped twin when `include_flips` is set.
pub fn plan_views(
    image_width: u32,
    image_height: u32,
    scales: &[u32],
    crop_size: u32,
    include_flips: bool,
) -> Result<ViewPlan> {
    if image_width == 0 || image_height == 0 {
        return Err(Error::Parameter("image dimensions must be positive".into()));
    }
    if crop_size == 0 {
        return Err(Error::Parameter("crop size must be positive".into()));
    }
    if scales.is_empty() {
        return Err(Error::Parameter("at least one scale is required".into()));
    }
    let mut seen = HashSet::new();
    for &s in scales {
        if s < crop_size {
            return Err(Error::Parameter(format!(
                "crop size {crop_size} exceeds scale {s}"
            )));
        }
        if !seen.insert(s) {
            return Err(Error::Parameter(format!("scale {s} listed twice")));
        }
    }

    let flips: &[bool] = if include_flips { &[false, true] } else { &[false] };
    let mut views = Vec::with_capacity(scales.len() * 5 * flips.len());
    for &s in scales {
        let (w, h) = scaled_size(image_width, image_height, s);
        let (max_x, max_y) = (w - crop_size, h - crop_size);
        for position in CropPosition::ALL {
            let (crop_x, crop_y) = match position {
                CropPosition::TopLeft => (0, 0),
                CropPosition::TopRight => (max_x, 0),
                CropPosition::BottomLeft => (0, max_y),
                CropPosition::BottomRight => (max_x, max_y),
                CropPosition::Center => (max_x / 2, max_y / 2),
            };
            for &flipped in flips {
                views.push(View {
                    scale_smallest_side: s,
                    scaled_width: w,
                    scaled_height: h,
                    position,
                    crop_x,
                    crop_y,
                    crop_size,
                    flipped,
                });
            }
        }
    }
    Ok(ViewPlan { views })
}

/// Where sum pooling sits relative to a representation's normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolOrder {
    /// Sum raw per-view representations, then normalize once.
    #[default]
    SumThenNormalize,
    /// Normalize each view, sum, then ℓ2-normalize the sum.
    NormalizeThenSum,
}

impl PoolOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolOrder::SumThenNormalize => "sum_then_normalize",
            PoolOrder::NormalizeThenSum => "normalize_then_sum",
        }
    }
}

impl FromStr for PoolOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum_then_normalize" => Ok(PoolOrder::SumThenNormalize),
            "normalize_then_sum" => Ok(PoolOrder::NormalizeThenSum),
            other => Err(Error::Parameter(format!("unknown pooling order `{other}`"))),
        }
    }
}

/// Elementwise sum over views. Any normalization is the caller's job.
pub fn sum_pool<T: DenseVector>(views: &[T]) -> Result<T> {
    let first = views
        .first()
        .ok_or_else(|| Error::Parameter("cannot pool an empty view list".into()))?;
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    for (i, v) in views.iter().enumerate() {
        if v.dim() != dim {
            return Err(Error::Shape(format!(
                "view {i} has dim {}, expected {dim}",
                v.dim()
            )));
        }
        for (a, x) in acc.iter_mut().zip(v.values()) {
            *a += x;
        }
    }
    Ok(first.with_values(acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::GlobalVector;
    use proptest::prelude::*;

    #[test]
    fn thirty_views_for_three_scales_with_flips() {
        let plan = plan_views(512, 512, &[256, 384, 512], 224, true).unwrap();
        assert_eq!(plan.views.len(), 30);
        let unique: HashSet<_> = plan.views.iter().collect();
        assert_eq!(unique.len(), 30);
    }

    #[test]
    fn center_crop_of_256_square() {
        let plan = plan_views(256, 256, &[256], 224, false).unwrap();
        assert_eq!(plan.views.len(), 5);
        let center = plan
            .views
            .iter()
            .find(|v| v.position == CropPosition::Center)
            .unwrap();
        assert_eq!((center.crop_x, center.crop_y), (16, 16));
    }

    #[test]
    fn landscape_rescale_and_corner_origins() {
        // 512 * 256 / 341 = 384.37 -> 384; corners at {0, 384-224} x {0, 256-224}
        let plan = plan_views(512, 341, &[256], 224, false).unwrap();
        let v = &plan.views[0];
        assert_eq!((v.scaled_width, v.scaled_height), (384, 256));
        let origins: Vec<_> = plan.views[..4].iter().map(|v| (v.crop_x, v.crop_y)).collect();
        assert_eq!(origins, [(0, 0), (160, 0), (0, 32), (160, 32)]);
        assert_eq!((plan.views[4].crop_x, plan.views[4].crop_y), (80, 16));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        // 3 * 5 / 2 = 7.5 -> 8
        assert_eq!(scaled_size(3, 2, 5), (8, 5));
        assert_eq!(scaled_size(2, 3, 5), (5, 8));
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(plan_views(512, 512, &[200], 224, true).is_err());
        assert!(plan_views(512, 512, &[256, 256], 224, true).is_err());
        assert!(plan_views(0, 512, &[256], 224, true).is_err());
        assert!(plan_views(512, 512, &[], 224, true).is_err());
    }

    #[test]
    fn pooling_sums_views() {
        let v = GlobalVector::new(vec![1.0, -2.0, 0.5], "fc7").unwrap();
        let pooled = sum_pool(&[v.clone(), v.clone(), v.clone()]).unwrap();
        assert_eq!(pooled.data(), &[3.0, -6.0, 1.5]);
        assert_eq!(pooled.source_tag(), "fc7");
        assert_eq!(sum_pool(std::slice::from_ref(&v)).unwrap(), v);
    }

    #[test]
    fn pooling_matches_scalar_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut expected = [0.0; 8];
        for i in 0..8 {
            expected[i] = a[i] + b[i];
        }
        let pooled = sum_pool(&[
            GlobalVector::new(a, "").unwrap(),
            GlobalVector::new(b, "").unwrap(),
        ])
        .unwrap();
        assert_eq!(pooled.data(), &expected);
    }

    #[test]
    fn pooling_errors() {
        let empty: [GlobalVector; 0] = [];
        assert!(matches!(sum_pool(&empty), Err(Error::Parameter(_))));
        let a = GlobalVector::new(vec![1.0], "").unwrap();
        let b = GlobalVector::new(vec![1.0, 2.0], "").unwrap();
        assert!(matches!(sum_pool(&[a, b]), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn view_count_and_bounds_hold(
            w in 1u32..4000, h in 1u32..4000,
            crop in 1u32..300,
            extra in proptest::collection::btree_set(0u32..600, 1..4),
            flips in any::<bool>(),
        ) {
            let scales: Vec<u32> = extra.iter().map(|e| crop + e).collect();
            let plan = plan_views(w, h, &scales, crop, flips).unwrap();
            prop_assert_eq!(plan.views.len(), scales.len() * 5 * (1 + flips as usize));
            prop_assert!(plan.views.iter().all(View::in_bounds));
            let unique: HashSet<_> = plan.views.iter().collect();
            prop_assert_eq!(unique.len(), plan.views.len());
        }

        #[test]
        fn pooling_is_permutation_invariant(
            vals in proptest::collection::vec(proptest::collection::vec(-100i32..100, 4), 1..6),
            rot in 0usize..6,
        ) {
            let views: Vec<GlobalVector> = vals
                .iter()
                .map(|v| GlobalVector::new(v.iter().map(|&x| x as f64).collect(), "").unwrap())
                .collect();
            let mut permuted = views.clone();
            let r = rot % permuted.len();
            permuted.rotate_left(r);
            permuted.reverse();
            prop_assert_eq!(sum_pool(&views).unwrap(), sum_pool(&permuted).unwrap());
        }
    }
}
