//! Diagonal-covariance Gaussian mixtures trained by EM in log space.
//!
//! Initialization is seeded k-means++ followed by a few Lloyd iterations.
//! Every density is handled as a log-density; responsibilities come out of a
//! log-sum-exp over components. Variance and weight floors keep components
//! from going singular; a component whose weight falls below the floor is
//! re-seeded on a random descriptor.

use std::path::Path;

use log::{info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{write_dir_atomic, Header, MODEL_HEADER};
use crate::normalize::DescriptorSet;
use crate::numeric::{chunked_reduce, log_sum_exp};
use crate::tensors::{read_map, read_vector, write_tensor, FeatureMap, GlobalVector};

pub const DEFAULT_COMPONENTS: usize = 256;
pub const DEFAULT_SEED: u64 = 7;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Descriptors per E-step work unit.
const ESTEP_CHUNK: usize = 4096;
/// Absolute lower bound under the relative variance floor.
const MIN_VARIANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub variance_floor: f64,
    pub weight_floor: f64,
    /// Cap on descriptors used for fitting; a seeded subsample is drawn above it.
    pub max_descriptors: usize,
    pub kmeans_iters: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            k: DEFAULT_COMPONENTS,
            seed: DEFAULT_SEED,
            max_iters: 100,
            tol: 1e-5,
            variance_floor: 1e-4,
            weight_floor: 1e-6,
            max_descriptors: 500_000,
            kmeans_iters: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    k: usize,
    dim: usize,
    weights: Vec<f64>,
    /// k rows of length dim.
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl GmmModel {
    pub fn new(
        k: usize,
        dim: usize,
        weights: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Validation("gmm needs k > 0 and dim > 0".into()));
        }
        if weights.len() != k || means.len() != k * dim || variances.len() != k * dim {
            return Err(Error::Validation("gmm payload sizes disagree".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Validation("gmm weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "gmm weights sum to {total}, not 1"
            )));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Validation("gmm means must be finite".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Validation("gmm variances must be positive".into()));
        }
        Ok(GmmModel {
            k,
            dim,
            weights,
            means,
            variances,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }
    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.dim..(k + 1) * self.dim]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_dir_atomic(dir, |staging| {
            write_tensor(
                &GlobalVector::new(self.weights.clone(), "gmm_weights")?.into(),
                &staging.join("weights.fvt"),
            )?;
            write_tensor(
                &FeatureMap::new(self.k, 1, self.dim, self.means.clone())?.into(),
                &staging.join("means.fvt"),
            )?;
            write_tensor(
                &FeatureMap::new(self.k, 1, self.dim, self.variances.clone())?.into(),
                &staging.join("variances.fvt"),
            )?;
            let mut h = Header::new("gmm");
            h.push("k", self.k);
            h.push("dim", self.dim);
            h.push("weights", "weights.fvt");
            h.push("means", "means.fvt");
            h.push("variances", "variances.fvt");
            h.write(&staging.join(MODEL_HEADER))
        })
    }

    /// Loads a saved model. Weights are renormalized in `f64` since the
    /// `f32` payload only sums to one within single precision.
    pub fn load(dir: &Path) -> Result<Self> {
        let h = Header::read(&dir.join(MODEL_HEADER))?;
        h.expect_kind("gmm")?;
        let k: usize = h.require_parsed("k")?;
        let dim: usize = h.require_parsed("dim")?;
        let mut weights = read_vector(&dir.join(h.require("weights")?))?.into_data();
        let means = read_map(&dir.join(h.require("means")?))?;
        let variances = read_map(&dir.join(h.require("variances")?))?;
        for m in [&means, &variances] {
            if m.height() != k || m.width() != 1 || m.channels() != dim {
                return Err(Error::Validation("gmm payload shape disagrees with header".into()));
            }
        }
        let total: f64 = weights.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(Error::Validation("gmm weights do not sum to a positive value".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        GmmModel::new(k, dim, weights, means.into_data(), variances.into_data())
    }
}

/// Per-component constants for evaluating log-densities quickly.
pub(crate) struct ComponentCache<'a> {
    model: &'a GmmModel,
    /// log π_k − ½ (d ln 2π + Σ ln σ²)
    log_norm: Vec<f64>,
    inv_var: Vec<f64>,
}

impl<'a> ComponentCache<'a> {
    pub(crate) fn new(model: &'a GmmModel) -> Self {
        let d = model.dim;
        let log_norm = (0..model.k)
            .map(|k| {
                let log_det: f64 = model.variance(k).iter().map(|v| v.ln()).sum();
                model.weights[k].ln() - 0.5 * (d as f64 * LN_2PI + log_det)
            })
            .collect();
        let inv_var = model.variances.iter().map(|v| 1.0 / v).collect();
        ComponentCache {
            model,
            log_norm,
            inv_var,
        }
    }

    /// Fills `out[k] = log π_k + log N(x; μ_k, σ²_k)`.
    pub(crate) fn joint_log_density(&self, x: &[f64], out: &mut [f64]) {
        let d = self.model.dim;
        for (k, o) in out.iter_mut().enumerate() {
            let mu = self.model.mean(k);
            let iv = &self.inv_var[k * d..(k + 1) * d];
            let mut q = 0.0;
            for j in 0..d {
                let diff = x[j] - mu[j];
                q += diff * diff * iv[j];
            }
            *o = self.log_norm[k] - 0.5 * q;
        }
    }

    /// Turns `x` into responsibilities in `out`, returning log p(x).
    pub(crate) fn posterior(&self, x: &[f64], out: &mut [f64]) -> f64 {
        self.joint_log_density(x, out);
        let lse = log_sum_exp(out);
        for o in out.iter_mut() {
            *o = (*o - lse).exp();
        }
        lse
    }
}

/// Soft assignments γ_k(x); each row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    n: usize,
    k: usize,
    gamma: Vec<f64>,
}

impl Responsibilities {
    pub fn len(&self) -> usize {
        self.n
    }
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
    pub fn components(&self) -> usize {
        self.k
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.gamma[i * self.k..(i + 1) * self.k]
    }
}

fn check_dim(model: &GmmModel, descriptors: &DescriptorSet) -> Result<()> {
    if descriptors.dim() != model.dim {
        return Err(Error::Shape(format!(
            "descriptors have dim {}, gmm expects {}",
            descriptors.dim(),
            model.dim
        )));
    }
    Ok(())
}

pub fn responsibilities(model: &GmmModel, descriptors: &DescriptorSet) -> Result<Responsibilities> {
    check_dim(model, descriptors)?;
    let cache = ComponentCache::new(model);
    let mut gamma = vec![0.0; descriptors.len() * model.k];
    for (x, row) in descriptors.iter().zip(gamma.chunks_exact_mut(model.k)) {
        cache.posterior(x, row);
    }
    Ok(Responsibilities {
        n: descriptors.len(),
        k: model.k,
        gamma,
    })
}

/// Σ_x log Σ_k π_k N(x; μ_k, σ²_k).
pub fn log_likelihood(model: &GmmModel, descriptors: &DescriptorSet) -> Result<f64> {
    check_dim(model, descriptors)?;
    let cache = ComponentCache::new(model);
    let total = chunked_reduce(
        descriptors.len(),
        ESTEP_CHUNK,
        |r| {
            let mut buf = vec![0.0; model.k];
            r.map(|i| {
                cache.joint_log_density(descriptors.get(i), &mut buf);
                log_sum_exp(&buf)
            })
            .sum::<f64>()
        },
        |a, b| a + b,
    )
    .unwrap_or(0.0);
    Ok(total)
}

/// A fitted model plus what happened during EM.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Per-descriptor average log-likelihood, one entry per evaluated iterate.
    pub trace: Vec<f64>,
    /// Indices into `trace` of iterates produced by a step that re-seeded a
    /// collapsed component (EM monotonicity does not apply across those).
    pub reset_steps: Vec<usize>,
    pub converged: bool,
    pub descriptors_used: usize,
}

struct Stats {
    nk: Vec<f64>,
    /// Σ γ (x − μ_old)
    s1: Vec<f64>,
    /// Σ γ (x − μ_old)²
    s2: Vec<f64>,
    log_lik: f64,
}

impl Stats {
    fn zeros(k: usize, d: usize) -> Self {
        Stats {
            nk: vec![0.0; k],
            s1: vec![0.0; k * d],
            s2: vec![0.0; k * d],
            log_lik: 0.0,
        }
    }

    fn merge(mut self, other: Stats) -> Stats {
        for (a, b) in self.nk.iter_mut().zip(other.nk) {
            *a += b;
        }
        for (a, b) in self.s1.iter_mut().zip(other.s1) {
            *a += b;
        }
        for (a, b) in self.s2.iter_mut().zip(other.s2) {
            *a += b;
        }
        self.log_lik += other.log_lik;
        self
    }
}

fn e_step(model: &GmmModel, data: &DescriptorSet) -> Stats {
    let (k, d) = (model.k, model.dim);
    let cache = ComponentCache::new(model);
    chunked_reduce(
        data.len(),
        ESTEP_CHUNK,
        |r| {
            let mut st = Stats::zeros(k, d);
            let mut gamma = vec![0.0; k];
            for i in r {
                let x = data.get(i);
                st.log_lik += cache.posterior(x, &mut gamma);
                for (c, &g) in gamma.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    st.nk[c] += g;
                    let mu = model.mean(c);
                    let s1 = &mut st.s1[c * d..(c + 1) * d];
                    let s2 = &mut st.s2[c * d..(c + 1) * d];
                    for j in 0..d {
                        let diff = x[j] - mu[j];
                        s1[j] += g * diff;
                        s2[j] += g * diff * diff;
                    }
                }
            }
            st
        },
        Stats::merge,
    )
    .unwrap_or_else(|| Stats::zeros(k, d))
}

/// Per-dimension ML variance of the whole set.
fn global_variance(data: &DescriptorSet) -> Vec<f64> {
    let (mean, cov) = crate::pca::mean_and_covariance(data);
    let d = mean.len();
    (0..d).map(|j| cov[j * d + j]).collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means++ seeding followed by Lloyd iterations. Returns centers and
/// the final assignment.
fn kmeans(
    data: &DescriptorSet,
    k: usize,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<usize>) {
    let (n, d) = (data.len(), data.dim());
    let mut centers = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(data.get(first));
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| squared_distance(data.get(i), data.get(first)))
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let mut target = rng.random::<f64>() * total;
            // fallback for rounding at the tail: the last point with weight
            let mut chosen = nearest.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.extend_from_slice(data.get(pick));
        let new_center = &centers[c * d..(c + 1) * d];
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(squared_distance(data.get(i), new_center));
        }
    }

    let mut assignment = vec![0usize; n];
    for it in 0..=iters {
        for (i, a) in assignment.iter_mut().enumerate() {
            let x = data.get(i);
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dist = squared_distance(x, &centers[c * d..(c + 1) * d]);
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            *a = best.1;
        }
        if it == iters {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(data.get(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            // an empty cluster keeps its previous center
            if counts[c] > 0 {
                for j in 0..d {
                    centers[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }
    (centers, assignment)
}

fn validate_config(cfg: &GmmConfig) -> Result<()> {
    if cfg.k == 0 {
        return Err(Error::Parameter("gmm needs k >= 1".into()));
    }
    if cfg.max_iters == 0 {
        return Err(Error::Parameter("gmm max_iters must be positive".into()));
    }
    if cfg.tol.is_nan() || cfg.tol <= 0.0 {
        return Err(Error::Parameter("gmm tol must be positive".into()));
    }
    if cfg.variance_floor.is_nan() || cfg.variance_floor <= 0.0 {
        return Err(Error::Parameter("gmm variance floor must be positive".into()));
    }
    if !(cfg.weight_floor > 0.0 && cfg.weight_floor * cfg.k as f64 <= 1.0) {
        return Err(Error::Parameter(format!(
            "gmm weight floor {} is infeasible for k = {}",
            cfg.weight_floor, cfg.k
        )));
    }
    if cfg.max_descriptors < cfg.k {
        return Err(Error::Parameter("gmm max_descriptors must be at least k".into()));
    }
    Ok(())
}

pub fn fit_gmm(descriptors: &DescriptorSet, cfg: &GmmConfig) -> Result<GmmFit> {
    validate_config(cfg)?;
    let n_all = descriptors.len();
    let k = cfg.k;
    if n_all < k {
        return Err(Error::Parameter(format!(
            "gmm with k = {k} needs at least {k} descriptors, got {n_all}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let subsampled;
    let data = if n_all > cfg.max_descriptors {
        let mut idx = sample(&mut rng, n_all, cfg.max_descriptors).into_vec();
        idx.sort_unstable();
        let mut flat = Vec::with_capacity(idx.len() * descriptors.dim());
        for i in idx {
            flat.extend_from_slice(descriptors.get(i));
        }
        subsampled = DescriptorSet::new(descriptors.dim(), flat, descriptors.provenance())?;
        &subsampled
    } else {
        descriptors
    };
    let n = data.len();
    let d = data.dim();

    let global_var = global_variance(data);
    let var_floor: Vec<f64> = global_var
        .iter()
        .map(|v| (cfg.variance_floor * v).max(MIN_VARIANCE))
        .collect();
    let reset_var = (global_var.iter().sum::<f64>() / d as f64).max(MIN_VARIANCE);

    let (centers, assignment) = kmeans(data, k, cfg.kmeans_iters, &mut rng);
    let mut counts = vec![0usize; k];
    let mut sq = vec![0.0; k * d];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        let x = data.get(i);
        for j in 0..d {
            let diff = x[j] - centers[a * d + j];
            sq[a * d + j] += diff * diff;
        }
    }
    let mut weights: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / n as f64).max(cfg.weight_floor))
        .collect();
    normalize_weights(&mut weights);
    let mut variances = vec![0.0; k * d];
    for c in 0..k {
        for j in 0..d {
            variances[c * d + j] = if counts[c] > 0 {
                (sq[c * d + j] / counts[c] as f64).max(var_floor[j])
            } else {
                reset_var.max(var_floor[j])
            };
        }
    }
    let mut model = GmmModel::new(k, d, weights, centers, variances)
        .map_err(|e| Error::Numeric(format!("gmm initialization failed: {e}")))?;

    let mut trace = Vec::new();
    let mut reset_steps = Vec::new();
    let mut last_step_reset = false;
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let stats = e_step(&model, data);
        let avg = stats.log_lik / n as f64;
        if !avg.is_finite() {
            return Err(Error::Numeric("gmm log-likelihood is not finite".into()));
        }
        if let Some(&prev) = trace.last() {
            check_monotone(prev, avg, last_step_reset)?;
            if !last_step_reset && avg - prev < cfg.tol {
                trace.push(avg);
                converged = true;
                break;
            }
        }
        trace.push(avg);
        let (next, resets) = m_step(&model, &stats, n, &var_floor, reset_var, cfg, data, &mut rng)?;
        last_step_reset = resets > 0;
        if last_step_reset {
            reset_steps.push(trace.len());
        }
        model = next;
    }
    if !converged {
        let final_avg = log_likelihood(&model, data)? / n as f64;
        if let Some(&prev) = trace.last() {
            check_monotone(prev, final_avg, last_step_reset)?;
        }
        trace.push(final_avg);
    }
    info!(
        "stage=fit_gmm k={k} dim={d} descriptors={n} iterations={} converged={converged} avg_log_likelihood={:.6}",
        trace.len() - 1,
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(GmmFit {
        model,
        trace,
        reset_steps,
        converged,
        descriptors_used: n,
    })
}

fn check_monotone(prev: f64, next: f64, after_reset: bool) -> Result<()> {
    if !after_reset && next < prev - 1e-10 * prev.abs().max(1.0) {
        return Err(Error::Numeric(format!(
            "EM decreased the average log-likelihood from {prev} to {next}"
        )));
    }
    Ok(())
}

fn normalize_weights(w: &mut [f64]) {
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
}

#[allow(clippy::too_many_arguments)]
fn m_step(
    model: &GmmModel,
    stats: &Stats,
    n: usize,
    var_floor: &[f64],
    reset_var: f64,
    cfg: &GmmConfig,
    data: &DescriptorSet,
    rng: &mut ChaCha8Rng,
) -> Result<(GmmModel, usize)> {
    let (k, d) = (model.k, model.dim);
    let mut weights = vec![0.0; k];
    let mut means = vec![0.0; k * d];
    let mut variances = vec![0.0; k * d];
    let mut resets = 0;
    for c in 0..k {
        let nk = stats.nk[c];
        if nk / (n as f64) < cfg.weight_floor || nk <= 0.0 {
            let pick = rng.random_range(0..n);
            means[c * d..(c + 1) * d].copy_from_slice(data.get(pick));
            for j in 0..d {
                variances[c * d + j] = reset_var.max(var_floor[j]);
            }
            weights[c] = 1.0 / k as f64;
            resets += 1;
            warn!("stage=fit_gmm event=component_reset component={c} weight={:e}", nk / n as f64);
            continue;
        }
        weights[c] = nk / n as f64;
        let old = model.mean(c);
        for j in 0..d {
            let shift = stats.s1[c * d + j] / nk;
            means[c * d + j] = old[j] + shift;
            let var = stats.s2[c * d + j] / nk - shift * shift;
            variances[c * d + j] = var.max(var_floor[j]);
        }
    }
    normalize_weights(&mut weights);
    let next = GmmModel::new(k, d, weights, means, variances)
        .map_err(|e| Error::Numeric(format!("gmm M-step produced an invalid model: {e}")))?;
    Ok((next, resets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalize::Provenance;
    use rand_distr::{Distribution, Normal};

    fn set(dim: usize, data: Vec<f64>) -> DescriptorSet {
        DescriptorSet::new(dim, data, Provenance::Raw).unwrap()
    }

    fn two_blobs(seed: u64) -> DescriptorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        for center in [-5.0, 5.0] {
            for _ in 0..500 {
                data.push(center + noise.sample(&mut rng));
                data.push(center + noise.sample(&mut rng));
            }
        }
        set(2, data)
    }

    fn cfg(k: usize) -> GmmConfig {
        GmmConfig {
            k,
            ..GmmConfig::default()
        }
    }

    #[test]
    fn single_component_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..3.0)).collect();
        let s = set(3, data);
        let fit = fit_gmm(&s, &cfg(1)).unwrap();
        let (mean, cov) = crate::pca::mean_and_covariance(&s);
        assert_eq!(fit.model.weights(), &[1.0]);
        for j in 0..3 {
            assert!((fit.model.mean(0)[j] - mean[j]).abs() < 1e-12);
            assert!((fit.model.variance(0)[j] - cov[j * 3 + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_two_blobs() {
        let fit = fit_gmm(&two_blobs(2), &cfg(2)).unwrap();
        let m = &fit.model;
        let mut order = [0, 1];
        order.sort_by(|&a, &b| m.mean(a)[0].total_cmp(&m.mean(b)[0]));
        for (&c, truth) in order.iter().zip([-5.0, 5.0]) {
            for j in 0..2 {
                assert!((m.mean(c)[j] - truth).abs() < 0.2);
            }
            assert!((m.weights()[c] - 0.5).abs() < 0.05);
        }
        assert!(fit.converged);
    }

    #[test]
    fn one_point_per_component() {
        let s = set(2, vec![0.0, 0.0, 3.0, 1.0, -2.0, 4.0, 5.0, -5.0]);
        let fit = fit_gmm(&s, &cfg(4)).unwrap();
        let m = &fit.model;
        let mut found = vec![false; 4];
        for c in 0..4 {
            let i = (0..4)
                .find(|&i| squared_distance(m.mean(c), s.get(i)) < 1e-9)
                .expect("each mean sits on a data point");
            found[i] = true;
        }
        assert!(found.iter().all(|&f| f));
        // variance floor: 1e-4 * global variance per dim
        let gv = global_variance(&s);
        for c in 0..4 {
            for j in 0..2 {
                assert!((m.variance(c)[j] - 1e-4 * gv[j]).abs() < 1e-12 * gv[j]);
            }
        }
    }

    #[test]
    fn em_trace_never_decreases_and_is_deterministic() {
        let s = two_blobs(3);
        let a = fit_gmm(&s, &cfg(3)).unwrap();
        for w in a.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10);
        }
        let b = fit_gmm(&s, &cfg(3)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn k_larger_than_n_rejected() {
        let s = set(1, vec![1.0, 2.0]);
        assert!(matches!(fit_gmm(&s, &cfg(3)), Err(Error::Parameter(_))));
    }

    #[test]
    fn subsampling_respects_cap() {
        let s = two_blobs(4);
        let fit = fit_gmm(
            &s,
            &GmmConfig {
                k: 2,
                max_descriptors: 200,
                ..GmmConfig::default()
            },
        )
        .unwrap();
        assert_eq!(fit.descriptors_used, 200);
    }

    fn toy_model() -> GmmModel {
        GmmModel::new(
            3,
            2,
            vec![0.2, 0.5, 0.3],
            vec![0.0, 0.0, 1.0, -1.0, -2.0, 0.5],
            vec![1.0, 0.5, 2.0, 1.0, 0.3, 0.7],
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_mode() {
        let m = GmmModel::new(1, 1, vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let ll = log_likelihood(&m, &set(1, vec![0.0])).unwrap();
        assert!((ll - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_is_additive() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
        let once = log_likelihood(&m, &set(2, data.clone())).unwrap();
        let twice = log_likelihood(&m, &set(2, [data.clone(), data].concat())).unwrap();
        assert!((twice - 2.0 * once).abs() < 1e-12 * once.abs());
    }

    #[test]
    fn responsibilities_rows_sum_to_one() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
        let r = responsibilities(&m, &set(2, data)).unwrap();
        for i in 0..r.len() {
            let row = r.row(i);
            assert!(row.iter().all(|&g| (0.0..=1.0).contains(&g)));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let single = GmmModel::new(1, 2, vec![1.0], vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let r = responsibilities(&single, &set(2, vec![5.0, -7.0, 0.0, 0.0])).unwrap();
        assert_eq!((r.row(0), r.row(1)), (&[1.0][..], &[1.0][..]));
    }

    #[test]
    fn far_component_dominates_at_its_mean() {
        let m = GmmModel::new(2, 1, vec![0.5, 0.5], vec![-50.0, 50.0], vec![1.0, 1.0]).unwrap();
        let r = responsibilities(&m, &set(1, vec![50.0])).unwrap();
        assert!(r.row(0)[1] > 0.999);
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let m = toy_model();
        assert!(matches!(
            responsibilities(&m, &set(3, vec![0.0; 3])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            log_likelihood(&m, &set(1, vec![0.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn model_invariants_enforced() {
        assert!(GmmModel::new(2, 1, vec![0.5, 0.6], vec![0.0; 2], vec![1.0; 2]).is_err());
        assert!(GmmModel::new(2, 1, vec![0.5, 0.5], vec![0.0; 2], vec![1.0, 0.0]).is_err());
        assert!(GmmModel::new(2, 1, vec![1.0, 0.0], vec![0.0; 2], vec![1.0; 2]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let m = toy_model();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("gmm");
        m.save(&dir).unwrap();
        let back = GmmModel::load(&dir).unwrap();
        assert_eq!((back.k(), back.dim()), (3, 2));
        assert!((back.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(back.mean(2), m.mean(2));
        // re-saving a loaded model is a fixed point
        let dir2 = tmp.path().join("gmm2");
        back.save(&dir2).unwrap();
        for f in ["means.fvt", "variances.fvt"] {
            assert_eq!(
                std::fs::read(dir.join(f)).unwrap(),
                std::fs::read(dir2.join(f)).unwrap()
            );
        }
    }
}
