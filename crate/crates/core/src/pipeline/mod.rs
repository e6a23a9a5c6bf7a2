//! End-to-end runs over a manifest: softmax fusion, global features,
//! Fisher vectors on conv maps, and fc + conv layer fusion.
//!
//! Every run writes its models, per-image features, `scores.csv`,
//! `report.csv` and `summary.txt` under one output directory, which only
//! appears once the whole run has succeeded.

pub mod stages;
pub mod synth;

use std::fs;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;

use crate::augment::PoolOrder;
use crate::classify::SvmConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_table, EvalReport, Integrator, ScoreTable};
use crate::fisher::{FvNorm, IntraBlocks};
use crate::fusion::FusionWeights;
use crate::gmm::GmmConfig;
use crate::io::{write_atomic, write_dir_atomic};
use crate::normalize::{DescriptorSet, Provenance, TddMode, DEFAULT_EPSILON};
use crate::pca::DEFAULT_OUTPUT_DIM;
use crate::tensors::{
    read_map, read_vector, write_tensor, GlobalVector, Manifest, ManifestEntry, ScoreVector,
    Split, Stream,
};

use stages::*;

/// The shipped default configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../../config/default.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    SoftmaxFusion,
    GlobalPretrained,
    GlobalFinetuned,
    #[default]
    LocalFv,
    LayerFusion,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::SoftmaxFusion => "softmax_fusion",
            Scenario::GlobalPretrained => "global_pretrained",
            Scenario::GlobalFinetuned => "global_finetuned",
            Scenario::LocalFv => "local_fv",
            Scenario::LayerFusion => "layer_fusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerFusionMode {
    #[default]
    Features,
    Scores,
}

/// Test-time view geometry the activations were produced with.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub scales: Vec<u32>,
    pub crop: u32,
    pub flips: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            scales: vec![256, 384, 512],
            crop: 224,
            flips: true,
        }
    }
}

impl ViewConfig {
    pub fn views_per_image(&self) -> usize {
        self.scales.len() * 5 * if self.flips { 2 } else { 1 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamLayers {
    pub softmax: String,
    pub fc: String,
    pub conv: String,
}

impl Default for StreamLayers {
    fn default() -> Self {
        StreamLayers {
            softmax: "prob".into(),
            fc: "fc7".into(),
            conv: "conv5_3".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Layers {
    pub object: StreamLayers,
    pub scene: StreamLayers,
}

impl Layers {
    pub fn stream(&self, stream: Stream) -> &StreamLayers {
        match stream {
            Stream::Object => &self.object,
            Stream::Scene => &self.scene,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Object/scene weights on softmax scores.
    pub scores: FusionWeights,
    /// Object/scene weights on feature blocks.
    pub features: FusionWeights,
    pub layer_mode: LayerFusionMode,
    /// fc/conv weights when fusing layers.
    pub layer: FusionWeights,
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalConfig {
    pub tdd: TddMode,
    pub epsilon: f64,
    pub pca_dim: usize,
    pub intra: bool,
    pub power: bool,
    pub intra_blocks: IntraBlocks,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            tdd: TddMode::Both,
            epsilon: DEFAULT_EPSILON,
            pca_dim: DEFAULT_OUTPUT_DIM,
            intra: true,
            power: true,
            intra_blocks: IntraBlocks::PerOrder,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub integrator: Integrator,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scenario: Scenario,
    /// Sum pooling of views before or after normalization.
    pub pooling: PoolOrder,
    pub views: ViewConfig,
    pub layers: Layers,
    pub fusion: FusionConfig,
    pub local: LocalConfig,
    pub gmm: GmmConfig,
    pub svm: SvmConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Parameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(format!("config: {m}")));
        if self.views.scales.is_empty() || self.views.crop == 0 {
            return bad("views need at least one scale and a positive crop");
        }
        if let Some(&s) = self.views.scales.iter().find(|&&s| s < self.views.crop) {
            return bad(&format!("scale {s} is smaller than the crop"));
        }
        if self.local.epsilon.is_nan() || self.local.epsilon <= 0.0 {
            return bad("local.epsilon must be positive");
        }
        if self.local.pca_dim == 0 {
            return bad("local.pca_dim must be positive");
        }
        if self.gmm.k == 0 || self.gmm.max_iters == 0 || self.gmm.tol.is_nan() || self.gmm.tol <= 0.0 {
            return bad("gmm needs k > 0, max_iters > 0 and tol > 0");
        }
        if !(self.svm.c > 0.0 && self.svm.c.is_finite()) || self.svm.max_epochs == 0 {
            return bad("svm needs c > 0 and max_epochs > 0");
        }
        Ok(())
    }

    pub fn fv_norm(&self) -> FvNorm {
        FvNorm {
            intra: self.local.intra,
            power: self.local.power,
            blocks: self.local.intra_blocks,
        }
    }

    /// (stream, layer) pairs the configured scenario reads.
    pub fn required_layers(&self) -> Vec<(Stream, &str)> {
        let mut out = Vec::new();
        for stream in Stream::BOTH {
            let l = self.layers.stream(stream);
            match self.scenario {
                Scenario::SoftmaxFusion => out.push((stream, l.softmax.as_str())),
                Scenario::GlobalPretrained | Scenario::GlobalFinetuned => {
                    out.push((stream, l.fc.as_str()))
                }
                Scenario::LocalFv => out.push((stream, l.conv.as_str())),
                Scenario::LayerFusion => {
                    out.push((stream, l.fc.as_str()));
                    out.push((stream, l.conv.as_str()));
                }
            }
        }
        out
    }

    /// Every entry must have at least one view for each layer the scenario reads.
    pub fn check_manifest(&self, manifest: &Manifest) -> Result<()> {
        let plan = self.views.views_per_image();
        for (stream, layer) in self.required_layers() {
            for e in manifest.entries() {
                let n = e.files(stream, layer).len();
                if n == 0 {
                    return Err(Error::Validation(format!(
                        "image `{}` has no {stream}:{layer} views",
                        e.image_id
                    )));
                }
                if n > plan {
                    warn!(
                        "stage=check_manifest image={} layer={stream}:{layer} views={n} planned={plan}",
                        e.image_id
                    );
                }
            }
        }
        if manifest.split(Split::Test).next().is_none() {
            warn!("stage=check_manifest event=no_test_images");
        }
        Ok(())
    }
}

/// Runs the configured scenario.
pub fn run(manifest: &Manifest, cfg: &PipelineConfig, out: &Path) -> Result<EvalReport> {
    match cfg.scenario {
        Scenario::SoftmaxFusion => run_scenario1(manifest, cfg, out),
        Scenario::GlobalPretrained | Scenario::GlobalFinetuned => run_global(manifest, cfg, out),
        Scenario::LocalFv => run_local_fv(manifest, cfg, out),
        Scenario::LayerFusion => run_layer_fusion(manifest, cfg, out),
    }
}

fn staged<F>(manifest: &Manifest, cfg: &PipelineConfig, out: &Path, body: F) -> Result<EvalReport>
where
    F: FnOnce(&Path) -> Result<ScoreTable>,
{
    cfg.validate()?;
    cfg.check_manifest(manifest)?;
    let mut report = None;
    write_dir_atomic(out, |dir| {
        write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
        let table = body(dir)?;
        table.write(&dir.join("scores.csv"))?;
        let r = evaluate_table(&table, manifest, cfg.eval.integrator)?;
        r.write(&dir.join("report.csv"))?;
        write_atomic(&dir.join("summary.txt"), format!("{}\n", r.summary_line()).as_bytes())?;
        info!("stage=evaluate images={} {}", r.images, r.summary_line());
        report = Some(r);
        Ok(())
    })?;
    Ok(report.expect("report set on success"))
}

/// Softmax outputs sum-pooled over views, then object/scene weighted sums.
/// Nothing is trained; test images are scored directly.
pub fn run_scenario1(manifest: &Manifest, cfg: &PipelineConfig, out: &Path) -> Result<EvalReport> {
    staged(manifest, cfg, out, |dir| {
        let test: Vec<&ManifestEntry> = manifest.split(Split::Test).collect();
        let fused = test
            .par_iter()
            .map(|e| {
                let pooled = Stream::BOTH
                    .iter()
                    .map(|&s| {
                        let views = read_vectors(e, s, &cfg.layers.stream(s).softmax)?;
                        ScoreVector::new(pool_vectors(&views, false, cfg.pooling)?.into_data())
                    })
                    .collect::<Result<Vec<_>>>()?;
                let fused = fuse_score_stage(&pooled[0], &pooled[1], cfg.fusion.scores)?;
                if fused.class_count() != manifest.class_count() {
                    return Err(Error::Shape(format!(
                        "image `{}` has {} softmax scores for {} classes",
                        e.image_id,
                        fused.class_count(),
                        manifest.class_count()
                    )));
                }
                write_tensor(
                    &score_tensor(&fused)?.into(),
                    &dir.join("fused").join(format!("{}.fvt", e.image_id)),
                )?;
                Ok(fused)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut table = ScoreTable::default();
        for (e, s) in test.iter().zip(fused) {
            table.push(e.image_id.clone(), s.into_scores());
        }
        info!("stage=softmax_fusion images={}", table.image_ids.len());
        Ok(table)
    })
}

/// fc vectors sum-pooled and ℓ2-normalized per stream, then concatenated
/// with the feature weights; one-vs-rest SVM on top.
pub fn run_global(manifest: &Manifest, cfg: &PipelineConfig, out: &Path) -> Result<EvalReport> {
    staged(manifest, cfg, out, |dir| {
        let features = global_features(manifest, cfg)?;
        classify(manifest, cfg, dir, &features)
    })
}

/// TDD → PCA → GMM → Fisher vector per stream, streams concatenated; SVM.
pub fn run_local_fv(manifest: &Manifest, cfg: &PipelineConfig, out: &Path) -> Result<EvalReport> {
    staged(manifest, cfg, out, |dir| {
        let features = local_features(manifest, cfg, dir)?;
        classify(manifest, cfg, dir, &features)
    })
}

/// Global (fc) and local (conv) representations combined, fc first, either
/// by concatenating features or by summing the two classifiers' scores.
pub fn run_layer_fusion(
    manifest: &Manifest,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<EvalReport> {
    staged(manifest, cfg, out, |dir| {
        let global = global_features(manifest, cfg)?;
        let local = local_features(manifest, cfg, dir)?;
        match cfg.fusion.layer_mode {
            LayerFusionMode::Features => {
                write_features(manifest, &dir.join("global"), &global)?;
                write_features(manifest, &dir.join("local"), &local)?;
                let fused = global
                    .par_iter()
                    .zip(&local)
                    .map(|(g, l)| fuse_feature_stage(g, l, cfg.fusion.layer, "layer"))
                    .collect::<Result<Vec<_>>>()?;
                classify(manifest, cfg, dir, &fused)
            }
            LayerFusionMode::Scores => {
                let g = classify(manifest, cfg, &dir.join("global"), &global)?;
                let l = classify(manifest, cfg, &dir.join("local"), &local)?;
                g.write(&dir.join("global").join("scores.csv"))?;
                l.write(&dir.join("local").join("scores.csv"))?;
                fuse_tables(&g, &l, cfg.fusion.layer)
            }
        }
    })
}

fn read_vectors(e: &ManifestEntry, stream: Stream, layer: &str) -> Result<Vec<GlobalVector>> {
    e.files(stream, layer).into_iter().map(read_vector).collect()
}

/// Per-entry global features in manifest order.
pub fn global_features(manifest: &Manifest, cfg: &PipelineConfig) -> Result<Vec<GlobalVector>> {
    let features = manifest
        .entries()
        .par_iter()
        .map(|e| {
            let pooled = Stream::BOTH
                .iter()
                .map(|&s| {
                    let views = read_vectors(e, s, &cfg.layers.stream(s).fc)?;
                    pool_vectors(&views, true, cfg.pooling)
                })
                .collect::<Result<Vec<_>>>()?;
            fuse_feature_stage(&pooled[0], &pooled[1], cfg.fusion.features, "global")
        })
        .collect::<Result<Vec<_>>>()?;
    info!(
        "stage=global_features images={} dim={}",
        features.len(),
        features.first().map_or(0, |f| f.data().len())
    );
    Ok(features)
}

fn single_mode(p: Provenance) -> TddMode {
    match p {
        Provenance::SpatialNorm => TddMode::Spatial,
        _ => TddMode::Channel,
    }
}

/// Directory name for the models and Fisher vectors of one
/// (stream, layer, normalization) combination.
pub fn local_key(stream: Stream, layer: &str, p: Provenance) -> String {
    format!("{stream}-{layer}-{}", p.as_str())
}

/// Per-entry local features in manifest order. PCA and GMM see training
/// images only; their models land under `dir/models/<key>/`.
pub fn local_features(
    manifest: &Manifest,
    cfg: &PipelineConfig,
    dir: &Path,
) -> Result<Vec<GlobalVector>> {
    let entries = manifest.entries();
    let is_train: Vec<bool> = entries.iter().map(|e| e.split == Split::Train).collect();
    if !is_train.iter().any(|&t| t) {
        return Err(Error::Validation(
            "local features need at least one training image".into(),
        ));
    }
    let mut per_stream = Vec::new();
    for stream in Stream::BOTH {
        let layer = &cfg.layers.stream(stream).conv;
        let mut variants: Vec<Vec<GlobalVector>> = Vec::new();
        for &p in cfg.local.tdd.provenances() {
            let key = local_key(stream, layer, p);
            let models = dir.join("models").join(&key);
            let descs: Vec<Vec<DescriptorSet>> = entries
                .par_iter()
                .map(|e| {
                    e.files(stream, layer)
                        .into_iter()
                        .map(|path| tdd_descriptors(&read_map(path)?, single_mode(p), cfg.local.epsilon))
                        .collect()
                })
                .collect::<Result<_>>()?;
            let train: Vec<DescriptorSet> = training_sets(&descs, &is_train);
            let pca = fit_pca_stage(&train, cfg.local.pca_dim, &models.join("pca"))?;
            let projected: Vec<Vec<DescriptorSet>> = descs
                .par_iter()
                .map(|views| views.iter().map(|d| project_stage(&pca, d)).collect())
                .collect::<Result<_>>()?;
            drop(descs);
            let train: Vec<DescriptorSet> = training_sets(&projected, &is_train);
            let gmm = fit_gmm_stage(&train, &cfg.gmm, &models.join("gmm"))?;
            let norm = cfg.fv_norm();
            let fvs: Vec<GlobalVector> = projected
                .par_iter()
                .map(|views| encode_image(&gmm, views, norm, cfg.pooling))
                .collect::<Result<_>>()?;
            write_features(manifest, &dir.join("fv").join(&key), &fvs)?;
            info!("stage=local_fv key={key} images={} dim={}", fvs.len(), fvs[0].data().len());
            variants.push(fvs);
        }
        let mut iter = variants.into_iter();
        let mut acc = iter.next().expect("tdd mode has at least one variant");
        for next in iter {
            acc = acc
                .par_iter()
                .zip(&next)
                .map(|(a, b)| fuse_feature_stage(a, b, FusionWeights::EQUAL, "fv"))
                .collect::<Result<_>>()?;
        }
        per_stream.push(acc);
    }
    per_stream[0]
        .par_iter()
        .zip(&per_stream[1])
        .map(|(o, s)| fuse_feature_stage(o, s, cfg.fusion.features, "local"))
        .collect()
}

fn training_sets(sets: &[Vec<DescriptorSet>], is_train: &[bool]) -> Vec<DescriptorSet> {
    sets.iter()
        .zip(is_train)
        .filter(|(_, &t)| t)
        .flat_map(|(views, _)| views.iter().cloned())
        .collect()
}

/// Writes `dir/<image_id>.fvt` for every entry.
pub fn write_features(manifest: &Manifest, dir: &Path, features: &[GlobalVector]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest
        .entries()
        .par_iter()
        .zip(features)
        .try_for_each(|(e, f)| {
            write_tensor(&f.clone().into(), &dir.join(format!("{}.fvt", e.image_id)))
        })
}

/// Writes `dir/features/`, trains `dir/svm/` on the training split and
/// scores the test split.
fn classify(
    manifest: &Manifest,
    cfg: &PipelineConfig,
    dir: &Path,
    features: &[GlobalVector],
) -> Result<ScoreTable> {
    write_features(manifest, &dir.join("features"), features)?;
    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    let mut test_ids = Vec::new();
    let mut test_x = Vec::new();
    for (e, f) in manifest.entries().iter().zip(features) {
        match (e.split, e.label) {
            (Split::Train, Some(label)) => {
                train_x.push(f.data().to_vec());
                train_y.push(label);
            }
            (Split::Test, _) => {
                test_ids.push(e.image_id.clone());
                test_x.push(f.data().to_vec());
            }
            (Split::Train, None) => unreachable!("manifest rejects unlabeled training images"),
        }
    }
    let model = train_svm_stage(
        &train_x,
        &train_y,
        manifest.class_names(),
        &cfg.svm,
        &dir.join("svm"),
    )?;
    predict_stage(&model, &test_ids, &test_x)
}
