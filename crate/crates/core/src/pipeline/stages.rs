//! The individual pipeline steps. Each returns exactly what a write/read
//! cycle through the tensor container would give back, so running a step
//! in memory and running it through files agree bit for bit.

use std::path::Path;

use log::info;

use crate::augment::{sum_pool, PoolOrder};
use crate::classify::{predict_scores, train_ovr, LinearModel, SvmConfig};
use crate::error::{Error, Result};
use crate::eval::ScoreTable;
use crate::fisher::{encode_fv, l2_normalize, FvNorm};
use crate::fusion::{concat_features, fuse_scores, FusionWeights};
use crate::gmm::{fit_gmm, GmmConfig, GmmModel};
use crate::normalize::{tdd, DescriptorSet, TddMode};
use crate::pca::{fit_pca, project, PcaModel};
use crate::tensors::{round_to_f32, FeatureMap, GlobalVector, ScoreVector};

fn f32_exact(mut values: Vec<f64>) -> Result<Vec<f64>> {
    round_to_f32(&mut values);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("value does not fit in f32".into()));
    }
    Ok(values)
}

fn rounded_set(set: DescriptorSet) -> Result<DescriptorSet> {
    let (dim, provenance) = (set.dim(), set.provenance());
    DescriptorSet::new(dim, f32_exact(set.as_flat().to_vec())?, provenance)
}

fn rounded_vector(v: GlobalVector) -> Result<GlobalVector> {
    let tag = v.source_tag().to_string();
    GlobalVector::new(f32_exact(v.into_data())?, tag)
}

/// TDD descriptors of one map; `Both` stacks the channel set over the
/// spatial set.
pub fn tdd_descriptors(map: &FeatureMap, mode: TddMode, epsilon: f64) -> Result<DescriptorSet> {
    let sets = mode
        .provenances()
        .iter()
        .map(|&p| tdd(map, p, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let set = if sets.len() == 1 {
        sets.into_iter().next().unwrap()
    } else {
        DescriptorSet::concat(&sets)?
    };
    rounded_set(set)
}

/// Fits PCA on the concatenation of `sets`, saves it to `out` and returns
/// the model as read back.
pub fn fit_pca_stage(sets: &[DescriptorSet], output_dim: usize, out: &Path) -> Result<PcaModel> {
    let all = DescriptorSet::concat(sets)?;
    let model = fit_pca(&all, output_dim)?;
    info!(
        "stage=fit_pca descriptors={} input_dim={} output_dim={output_dim}",
        all.len(),
        all.dim()
    );
    model.save(out)?;
    PcaModel::load(out)
}

pub fn project_stage(model: &PcaModel, set: &DescriptorSet) -> Result<DescriptorSet> {
    rounded_set(project(model, set)?)
}

/// Fits a GMM on the concatenation of `sets`, saves it to `out` and
/// returns the model as read back.
pub fn fit_gmm_stage(sets: &[DescriptorSet], cfg: &GmmConfig, out: &Path) -> Result<GmmModel> {
    let all = DescriptorSet::concat(sets)?;
    let fit = fit_gmm(&all, cfg)?;
    fit.model.save(out)?;
    GmmModel::load(out)
}

/// One image's Fisher vector from its per-view descriptor sets.
pub fn encode_image(
    gmm: &GmmModel,
    views: &[DescriptorSet],
    norm: FvNorm,
    order: PoolOrder,
) -> Result<GlobalVector> {
    let raw = views
        .iter()
        .map(|v| encode_fv(gmm, v))
        .collect::<Result<Vec<_>>>()?;
    let fv = match order {
        PoolOrder::SumThenNormalize => norm.apply(&sum_pool(&raw)?)?,
        PoolOrder::NormalizeThenSum => {
            let normed = raw.iter().map(|fv| norm.apply(fv)).collect::<Result<Vec<_>>>()?;
            l2_normalize(&sum_pool(&normed)?)
        }
    };
    rounded_vector(fv.to_global("fv")?)
}

/// Sum-pools per-view vectors, ℓ2-normalizing when `l2` is set.
pub fn pool_vectors(views: &[GlobalVector], l2: bool, order: PoolOrder) -> Result<GlobalVector> {
    let pooled = if !l2 {
        sum_pool(views)?
    } else {
        match order {
            PoolOrder::SumThenNormalize => l2_normalize(&sum_pool(views)?),
            PoolOrder::NormalizeThenSum => {
                let normed: Vec<GlobalVector> = views.iter().map(l2_normalize).collect();
                l2_normalize(&sum_pool(&normed)?)
            }
        }
    };
    rounded_vector(pooled)
}

pub fn fuse_feature_stage(
    first: &GlobalVector,
    second: &GlobalVector,
    w: FusionWeights,
    tag: &str,
) -> Result<GlobalVector> {
    let fused = concat_features(first.data(), second.data(), w)?;
    GlobalVector::new(f32_exact(fused.into_data())?, tag)
}

pub fn fuse_score_stage(
    first: &ScoreVector,
    second: &ScoreVector,
    w: FusionWeights,
) -> Result<ScoreVector> {
    ScoreVector::new(f32_exact(fuse_scores(first, second, w)?.into_scores())?)
}

/// Trains the one-vs-rest SVM, saves it to `out` and returns it as read back.
pub fn train_svm_stage(
    features: &[Vec<f64>],
    labels: &[usize],
    class_names: &[String],
    cfg: &SvmConfig,
    out: &Path,
) -> Result<LinearModel> {
    let model = train_ovr(features, labels, class_names, cfg)?;
    model.save(out)?;
    LinearModel::load(out)
}

pub fn predict_stage(model: &LinearModel, ids: &[String], features: &[Vec<f64>]) -> Result<ScoreTable> {
    let mut table = ScoreTable::default();
    for (id, f) in ids.iter().zip(features) {
        table.push(id.clone(), predict_scores(model, f)?.into_scores());
    }
    Ok(table)
}

/// A score vector as a rank-1 tensor.
pub fn score_tensor(scores: &ScoreVector) -> Result<GlobalVector> {
    GlobalVector::new(scores.scores().to_vec(), "scores")
}

/// Row-wise weighted sum of two score tables over the same images.
pub fn fuse_tables(first: &ScoreTable, second: &ScoreTable, w: FusionWeights) -> Result<ScoreTable> {
    if first.image_ids != second.image_ids {
        return Err(Error::Shape("score tables list different images".into()));
    }
    let mut out = ScoreTable::default();
    for ((id, a), b) in first.image_ids.iter().zip(&first.scores).zip(&second.scores) {
        let a = ScoreVector::new(a.clone())?;
        let b = ScoreVector::new(b.clone())?;
        out.push(id.clone(), fuse_scores(&a, &b, w)?.into_scores());
    }
    Ok(out)
}
