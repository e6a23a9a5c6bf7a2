//! Seeded synthetic activations: per-class prototypes for conv maps, fc
//! vectors and softmax scores in both streams, plus a manifest tying them
//! together. Lets every scenario run end to end without a network.

use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_dir_atomic};
use crate::pipeline::Layers;
use crate::tensors::{
    load_manifest, write_tensor, FeatureMap, GlobalVector, Manifest, ManifestEntry, Split, Stream,
    ViewFile,
};

pub const MANIFEST_NAME: &str = "data.manifest";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub views: usize,
    /// Conv maps are `map_size × map_size × channels`.
    pub map_size: usize,
    pub channels: usize,
    pub fc_dim: usize,
    /// Per-image noise scale; per-view noise is half of it.
    pub noise: f64,
    /// Logit bonus of the true class in the softmax outputs.
    pub softmax_margin: f64,
    pub seed: u64,
    pub layers: Layers,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            train_per_class: 20,
            test_per_class: 10,
            views: 2,
            map_size: 6,
            channels: 32,
            fc_dim: 64,
            noise: 0.5,
            softmax_margin: 2.0,
            seed: 7,
            layers: Layers::default(),
        }
    }
}

struct Prototype {
    conv: Vec<f64>,
    fc: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Writes the dataset under `out` (replacing it) and returns the loaded manifest.
pub fn synth(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    if cfg.classes == 0 || cfg.train_per_class == 0 || cfg.views == 0 {
        return Err(Error::Parameter(
            "synth needs classes, training images and views".into(),
        ));
    }
    if cfg.map_size == 0 || cfg.channels == 0 || cfg.fc_dim == 0 {
        return Err(Error::Parameter("synth tensor sizes must be positive".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite() && cfg.softmax_margin.is_finite()) {
        return Err(Error::Parameter("synth noise must be finite and nonnegative".into()));
    }
    let class_names: Vec<String> = (0..cfg.classes).map(|c| format!("class{c:02}")).collect();
    let positions = cfg.map_size * cfg.map_size;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // prototypes[class][stream]
    let prototypes: Vec<[Prototype; 2]> = (0..cfg.classes)
        .map(|_| {
            [(); 2].map(|_| Prototype {
                conv: {
                    // class channel profile modulated by a class spatial layout
                    let profile: Vec<f64> = (0..cfg.channels).map(|_| rng.random()).collect();
                    let layout: Vec<f64> = (0..positions).map(|_| 0.5 + rng.random::<f64>()).collect();
                    layout
                        .iter()
                        .flat_map(|l| profile.iter().map(move |p| l * p))
                        .collect()
                },
                fc: (0..cfg.fc_dim).map(|_| normal(&mut rng)).collect(),
            })
        })
        .collect();

    let mut plan: Vec<(String, usize, Split)> = Vec::new();
    for (split, count) in [(Split::Train, cfg.train_per_class), (Split::Test, cfg.test_per_class)] {
        for (c, name) in class_names.iter().enumerate() {
            for i in 0..count {
                plan.push((format!("{name}-{}-{i:03}", split.as_str()), c, split));
            }
        }
    }

    let entries: Vec<ManifestEntry> = write_dir_with(out, |dir| {
        let entries = plan
            .par_iter()
            .enumerate()
            .map(|(idx, (id, class, split))| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(1 + idx as u64);
                let mut views = Vec::new();
                for (s, stream) in Stream::BOTH.into_iter().enumerate() {
                    let proto = &prototypes[*class][s];
                    let layers = cfg.layers.stream(stream);
                    let conv_latent: Vec<f64> = proto
                        .conv
                        .iter()
                        .map(|p| p + cfg.noise * normal(&mut rng))
                        .collect();
                    let fc_latent: Vec<f64> = proto
                        .fc
                        .iter()
                        .map(|p| p + cfg.noise * normal(&mut rng))
                        .collect();
                    let logit_latent: Vec<f64> = (0..cfg.classes)
                        .map(|k| {
                            normal(&mut rng) + if k == *class { cfg.softmax_margin } else { 0.0 }
                        })
                        .collect();
                    for v in 0..cfg.views {
                        let gain = rng.random_range(0.5..1.5);
                        let conv: Vec<f64> = conv_latent
                            .iter()
                            .map(|x| (gain * (x + 0.5 * cfg.noise * normal(&mut rng))).max(0.0))
                            .collect();
                        let fc: Vec<f64> = fc_latent
                            .iter()
                            .map(|x| (x + 0.5 * cfg.noise * normal(&mut rng)).max(0.0))
                            .collect();
                        let logits: Vec<f64> = logit_latent
                            .iter()
                            .map(|x| x + 0.5 * normal(&mut rng))
                            .collect();
                        let map =
                            FeatureMap::new(cfg.map_size, cfg.map_size, cfg.channels, conv)?
                                .declare_nonnegative()?;
                        let tensors = [
                            (&layers.conv, map.into()),
                            (&layers.fc, GlobalVector::new(fc, layers.fc.clone())?.into()),
                            (&layers.softmax, GlobalVector::new(softmax(&logits), "softmax")?.into()),
                        ];
                        for (layer, tensor) in tensors {
                            let rel = PathBuf::from(split.as_str())
                                .join(id)
                                .join(format!("{stream}-{layer}-v{v}.fvt"));
                            write_tensor(&tensor, &dir.join(&rel))?;
                            views.push(ViewFile {
                                stream,
                                layer: layer.clone(),
                                path: rel,
                            });
                        }
                    }
                }
                Ok(ManifestEntry {
                    image_id: id.clone(),
                    label: Some(*class),
                    views,
                    split: *split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest::new(class_names.clone(), entries.clone())?;
        write_atomic(
            &dir.join(MANIFEST_NAME),
            manifest.to_text(Path::new("")).as_bytes(),
        )?;
        Ok(entries)
    })?;
    info!(
        "stage=synth classes={} images={} views={} seed={}",
        cfg.classes,
        entries.len(),
        cfg.views,
        cfg.seed
    );
    load_manifest(&out.join(MANIFEST_NAME))
}

fn write_dir_with<T, F>(out: &Path, fill: F) -> Result<T>
where
    F: FnOnce(&Path) -> Result<T>,
{
    let mut value = None;
    write_dir_atomic(out, |dir| {
        value = Some(fill(dir)?);
        Ok(())
    })?;
    Ok(value.expect("set on success"))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}
