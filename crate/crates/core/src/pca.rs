//! Unwhitened PCA fitted on the ML (1/N) covariance of a descriptor bag.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::io::{write_dir_atomic, Header, MODEL_HEADER};
use crate::normalize::DescriptorSet;
use crate::numeric::{chunked_reduce, REDUCE_CHUNK};
use crate::tensors::{read_map, read_vector, write_tensor, FeatureMap, GlobalVector};

/// Default reduced TDD dimension.
pub const DEFAULT_OUTPUT_DIM: usize = 64;
const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    input_dim: usize,
    output_dim: usize,
    mean: Vec<f64>,
    /// output_dim rows of length input_dim.
    basis: Vec<f64>,
    eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        mean: Vec<f64>,
        basis: Vec<f64>,
        eigenvalues: Vec<f64>,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || output_dim > input_dim {
            return Err(Error::Validation(format!(
                "pca dims {output_dim} <- {input_dim} are invalid"
            )));
        }
        if mean.len() != input_dim
            || basis.len() != input_dim * output_dim
            || eigenvalues.len() != output_dim
        {
            return Err(Error::Validation("pca payload sizes disagree".into()));
        }
        if eigenvalues.iter().any(|&e| e < 0.0 || !e.is_finite())
            || eigenvalues.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::Validation(
                "pca eigenvalues must be nonnegative and nonincreasing".into(),
            ));
        }
        let model = PcaModel {
            input_dim,
            output_dim,
            mean,
            basis,
            eigenvalues,
        };
        let err = model.orthonormality_error();
        if err > ORTHONORMAL_TOL {
            return Err(Error::Validation(format!(
                "pca basis is not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn output_dim(&self) -> usize {
        self.output_dim
    }
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
    pub fn basis_row(&self, i: usize) -> &[f64] {
        &self.basis[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// max |B·Bᵀ − I| over all entries.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.output_dim {
            for j in i..self.output_dim {
                let d: f64 = self
                    .basis_row(i)
                    .iter()
                    .zip(self.basis_row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
        worst
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_dir_atomic(dir, |staging| {
            write_tensor(
                &GlobalVector::new(self.mean.clone(), "pca_mean")?.into(),
                &staging.join("mean.fvt"),
            )?;
            write_tensor(
                &FeatureMap::new(self.output_dim, 1, self.input_dim, self.basis.clone())?.into(),
                &staging.join("basis.fvt"),
            )?;
            write_tensor(
                &GlobalVector::new(self.eigenvalues.clone(), "pca_eigenvalues")?.into(),
                &staging.join("eigenvalues.fvt"),
            )?;
            let mut h = Header::new("pca");
            h.push("input_dim", self.input_dim);
            h.push("output_dim", self.output_dim);
            h.push("mean", "mean.fvt");
            h.push("basis", "basis.fvt");
            h.push("eigenvalues", "eigenvalues.fvt");
            h.write(&staging.join(MODEL_HEADER))
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let h = Header::read(&dir.join(MODEL_HEADER))?;
        h.expect_kind("pca")?;
        let input_dim: usize = h.require_parsed("input_dim")?;
        let output_dim: usize = h.require_parsed("output_dim")?;
        let mean = read_vector(&dir.join(h.require("mean")?))?.into_data();
        let basis = read_map(&dir.join(h.require("basis")?))?;
        if basis.height() != output_dim || basis.width() != 1 || basis.channels() != input_dim {
            return Err(Error::Validation("pca basis shape disagrees with header".into()));
        }
        let eigenvalues = read_vector(&dir.join(h.require("eigenvalues")?))?.into_data();
        PcaModel::new(input_dim, output_dim, mean, basis.into_data(), eigenvalues)
    }
}

/// Sample mean and ML covariance (row-major d×d) in a deterministic order.
pub(crate) fn mean_and_covariance(descriptors: &DescriptorSet) -> (Vec<f64>, Vec<f64>) {
    let d = descriptors.dim();
    let n = descriptors.len();
    // at most 64 partial d×d buffers alive at once
    let chunk = REDUCE_CHUNK.max(n.div_ceil(64));
    let sum = chunked_reduce(
        n,
        chunk,
        |r| {
            let mut s = vec![0.0; d];
            for i in r {
                for (a, x) in s.iter_mut().zip(descriptors.get(i)) {
                    *a += x;
                }
            }
            s
        },
        add_into,
    )
    .unwrap_or_else(|| vec![0.0; d]);
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();

    let scatter = chunked_reduce(
        n,
        chunk,
        |r| {
            let mut s = vec![0.0; d * d];
            let mut centered = vec![0.0; d];
            for i in r {
                for ((c, x), m) in centered.iter_mut().zip(descriptors.get(i)).zip(&mean) {
                    *c = x - m;
                }
                for a in 0..d {
                    let ca = centered[a];
                    let row = &mut s[a * d..(a + 1) * d];
                    for b in a..d {
                        row[b] += ca * centered[b];
                    }
                }
            }
            s
        },
        add_into,
    )
    .unwrap_or_else(|| vec![0.0; d * d]);
    let mut cov = vec![0.0; d * d];
    for a in 0..d {
        for b in a..d {
            let v = scatter[a * d + b] / n as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    (mean, cov)
}

fn add_into(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}

pub fn fit_pca(descriptors: &DescriptorSet, output_dim: usize) -> Result<PcaModel> {
    let d = descriptors.dim();
    let n = descriptors.len();
    if output_dim == 0 || output_dim > d {
        return Err(Error::Parameter(format!(
            "pca output dim {output_dim} must be in 1..={d}"
        )));
    }
    if n < output_dim {
        return Err(Error::Parameter(format!(
            "pca needs at least {output_dim} descriptors, got {n}"
        )));
    }
    let (mean, cov) = mean_and_covariance(descriptors);
    let eig = SymmetricEigen::try_new(DMatrix::from_row_slice(d, d, &cov), 1e-14, 0)
        .ok_or_else(|| Error::Numeric("covariance eigen-solve did not converge".into()))?;

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut basis = Vec::with_capacity(output_dim * d);
    let mut eigenvalues = Vec::with_capacity(output_dim);
    for &col in order.iter().take(output_dim) {
        let mut row: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Numeric("degenerate eigenvector".into()));
        }
        row.iter_mut().for_each(|v| *v /= norm);
        // largest-magnitude entry nonnegative, first index wins ties
        let mut pivot = 0;
        for (i, v) in row.iter().enumerate() {
            if v.abs() > row[pivot].abs() {
                pivot = i;
            }
        }
        if row[pivot] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        basis.extend(row);
        eigenvalues.push(eig.eigenvalues[col].max(0.0));
    }
    PcaModel::new(d, output_dim, mean, basis, eigenvalues)
        .map_err(|e| Error::Numeric(format!("pca fit produced an invalid model: {e}")))
}

/// `basis · (x − mean)` for every descriptor.
pub fn project(model: &PcaModel, descriptors: &DescriptorSet) -> Result<DescriptorSet> {
    if descriptors.dim() != model.input_dim {
        return Err(Error::Shape(format!(
            "descriptors have dim {}, pca expects {}",
            descriptors.dim(),
            model.input_dim
        )));
    }
    let mut out = Vec::with_capacity(descriptors.len() * model.output_dim);
    let mut centered = vec![0.0; model.input_dim];
    for x in descriptors.iter() {
        for ((c, v), m) in centered.iter_mut().zip(x).zip(&model.mean) {
            *c = v - m;
        }
        for k in 0..model.output_dim {
            out.push(
                model
                    .basis_row(k)
                    .iter()
                    .zip(&centered)
                    .map(|(b, c)| b * c)
                    .sum(),
            );
        }
    }
    DescriptorSet::new(model.output_dim, out, descriptors.provenance())
}
