//! Fisher-vector encoding of a descriptor bag against a diagonal GMM, and the
//! post-normalizations applied before classification.
//!
//! For N descriptors, responsibilities γ_k(x) and σ_k = √σ²_k:
//!
//! ```text
//! u_k = 1/(N √π_k)   Σ_x γ_k(x) (x − μ_k)/σ_k
//! v_k = 1/(N √(2π_k)) Σ_x γ_k(x) [((x − μ_k)/σ_k)² − 1]
//! ```
//!
//! laid out as `[u_1, v_1, …, u_K, v_K]`.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gmm::{ComponentCache, GmmModel};
use crate::normalize::DescriptorSet;
use crate::numeric::{chunked_reduce, l2_norm, REDUCE_CHUNK};
use crate::tensors::{DenseVector, GlobalVector};

/// Norm floor for ℓ2 normalization; smaller vectors are left as they are.
pub const L2_EPSILON: f64 = 1e-12;

/// Post-normalizations applied so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NormFlags {
    pub intra: bool,
    pub power: bool,
    pub l2: bool,
}

/// Granularity of intra-normalization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraBlocks {
    /// Each u_k and each v_k separately (2K blocks of length d).
    #[default]
    PerOrder,
    /// Each [u_k, v_k] pair (K blocks of length 2d).
    PerGaussian,
}

impl FromStr for IntraBlocks {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_order" => Ok(IntraBlocks::PerOrder),
            "per_gaussian" => Ok(IntraBlocks::PerGaussian),
            other => Err(Error::Parameter(format!("unknown intra block mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    k: usize,
    d: usize,
    data: Vec<f64>,
    normalized: NormFlags,
}

impl FisherVector {
    pub fn new(k: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || d == 0 || data.len() != 2 * k * d {
            return Err(Error::Shape(format!(
                "fisher vector with k = {k}, d = {d} needs {} values, got {}",
                2 * k * d,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("fisher vector values must be finite".into()));
        }
        Ok(FisherVector {
            k,
            d,
            data,
            normalized: NormFlags::default(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn normalized(&self) -> NormFlags {
        self.normalized
    }

    /// First-order block of component `k`.
    pub fn u(&self, k: usize) -> &[f64] {
        let start = 2 * k * self.d;
        &self.data[start..start + self.d]
    }

    /// Second-order block of component `k`.
    pub fn v(&self, k: usize) -> &[f64] {
        let start = (2 * k + 1) * self.d;
        &self.data[start..start + self.d]
    }

    pub fn to_global(&self, tag: &str) -> Result<GlobalVector> {
        GlobalVector::new(self.data.clone(), tag)
    }
}

impl DenseVector for FisherVector {
    fn values(&self) -> &[f64] {
        &self.data
    }
    /// Pooled or otherwise rewritten values no longer carry earlier
    /// normalizations, so the flags reset.
    fn with_values(&self, values: Vec<f64>) -> Self {
        FisherVector {
            k: self.k,
            d: self.d,
            data: values,
            normalized: NormFlags::default(),
        }
    }
}

pub fn encode_fv(model: &GmmModel, descriptors: &DescriptorSet) -> Result<FisherVector> {
    let (k, d) = (model.k(), model.dim());
    if descriptors.dim() != d {
        return Err(Error::Shape(format!(
            "descriptors have dim {}, gmm expects {d}",
            descriptors.dim()
        )));
    }
    let n = descriptors.len();
    if n == 0 {
        return Err(Error::Parameter("cannot encode an empty descriptor set".into()));
    }
    let cache = ComponentCache::new(model);
    let inv_sigma: Vec<Vec<f64>> = (0..k)
        .map(|c| model.variance(c).iter().map(|v| 1.0 / v.sqrt()).collect())
        .collect();

    // raw sums Σ γ z and Σ γ (z² − 1) with z = (x − μ)/σ
    let sums = chunked_reduce(
        n,
        REDUCE_CHUNK,
        |r| {
            let mut acc = vec![0.0; 2 * k * d];
            let mut gamma = vec![0.0; k];
            for i in r {
                let x = descriptors.get(i);
                cache.posterior(x, &mut gamma);
                for (c, &g) in gamma.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let mu = model.mean(c);
                    let is = &inv_sigma[c];
                    let (u, v) = acc[2 * c * d..(2 * c + 2) * d].split_at_mut(d);
                    for j in 0..d {
                        let z = (x[j] - mu[j]) * is[j];
                        u[j] += g * z;
                        v[j] += g * (z * z - 1.0);
                    }
                }
            }
            acc
        },
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            a
        },
    )
    .expect("n > 0");

    let mut data = sums;
    for c in 0..k {
        let pi = model.weights()[c];
        let su = 1.0 / (n as f64 * pi.sqrt());
        let sv = 1.0 / (n as f64 * (2.0 * pi).sqrt());
        let (u, v) = data[2 * c * d..(2 * c + 2) * d].split_at_mut(d);
        u.iter_mut().for_each(|e| *e *= su);
        v.iter_mut().for_each(|e| *e *= sv);
    }
    FisherVector::new(k, d, data)
}

fn l2_in_place(block: &mut [f64]) {
    let norm = l2_norm(block);
    if norm > L2_EPSILON {
        block.iter_mut().for_each(|v| *v /= norm);
    }
}

/// ℓ2-normalizes each block independently; zero blocks stay zero.
pub fn intra_normalize(fv: &FisherVector, blocks: IntraBlocks) -> Result<FisherVector> {
    if fv.normalized.intra {
        return Err(Error::Parameter("intra-normalization already applied".into()));
    }
    let len = match blocks {
        IntraBlocks::PerOrder => fv.d,
        IntraBlocks::PerGaussian => 2 * fv.d,
    };
    let mut data = fv.data.clone();
    data.chunks_exact_mut(len).for_each(l2_in_place);
    Ok(FisherVector {
        data,
        normalized: NormFlags {
            intra: true,
            ..fv.normalized
        },
        k: fv.k,
        d: fv.d,
    })
}

/// Signed square root of every entry followed by global ℓ2 normalization.
pub fn power_l2_normalize<T: PowerNormalizable>(vec: &T) -> T {
    let mut data: Vec<f64> = vec
        .values()
        .iter()
        .map(|&z| z.signum() * z.abs().sqrt())
        .collect();
    l2_in_place(&mut data);
    vec.after_power(data)
}

/// `vec / max(‖vec‖₂, ε)`.
pub fn l2_normalize<T: PowerNormalizable>(vec: &T) -> T {
    let mut data = vec.values().to_vec();
    l2_in_place(&mut data);
    vec.after_l2(data)
}

/// Representations the power and ℓ2 normalizations apply to.
pub trait PowerNormalizable: DenseVector {
    fn after_power(&self, values: Vec<f64>) -> Self {
        self.with_values(values)
    }
    fn after_l2(&self, values: Vec<f64>) -> Self {
        self.with_values(values)
    }
}

impl PowerNormalizable for GlobalVector {}

impl PowerNormalizable for FisherVector {
    fn after_power(&self, values: Vec<f64>) -> Self {
        FisherVector {
            data: values,
            normalized: NormFlags {
                power: true,
                l2: true,
                ..self.normalized
            },
            k: self.k,
            d: self.d,
        }
    }
    fn after_l2(&self, values: Vec<f64>) -> Self {
        FisherVector {
            data: values,
            normalized: NormFlags {
                l2: true,
                ..self.normalized
            },
            k: self.k,
            d: self.d,
        }
    }
}

/// Which post-normalizations to apply to a freshly encoded vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FvNorm {
    pub intra: bool,
    pub power: bool,
    pub blocks: IntraBlocks,
}

impl Default for FvNorm {
    fn default() -> Self {
        FvNorm {
            intra: true,
            power: true,
            blocks: IntraBlocks::PerOrder,
        }
    }
}

impl FvNorm {
    /// Parses a comma list such as `intra,power`, `power`, `l2` or `none`.
    /// `l2` means a plain ℓ2 step when `power` is absent.
    pub fn parse_list(s: &str, blocks: IntraBlocks) -> Result<Self> {
        let mut norm = FvNorm {
            intra: false,
            power: false,
            blocks,
        };
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match item {
                "intra" => norm.intra = true,
                "power" => norm.power = true,
                "l2" | "none" => {}
                other => {
                    return Err(Error::Parameter(format!(
                        "unknown normalization `{other}`"
                    )))
                }
            }
        }
        Ok(norm)
    }

    /// intra → signed sqrt → global ℓ2 (plain ℓ2 when power is off).
    pub fn apply(&self, fv: &FisherVector) -> Result<FisherVector> {
        let fv = if self.intra {
            intra_normalize(fv, self.blocks)?
        } else {
            fv.clone()
        };
        Ok(if self.power {
            power_l2_normalize(&fv)
        } else {
            l2_normalize(&fv)
        })
    }
}
