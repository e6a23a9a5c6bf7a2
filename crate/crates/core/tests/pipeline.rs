use std::fs;
use std::path::{Path, PathBuf};

use fvforge::fusion::FusionWeights;
use fvforge::pipeline::synth::{synth, SynthConfig};
use fvforge::pipeline::{
    run, run_global, LayerFusionMode, PipelineConfig, Scenario, DEFAULT_CONFIG,
};
use fvforge::tensors::{read_vector, write_tensor};
use fvforge::{GlobalVector, Manifest, ManifestEntry, Split, Stream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Builds a manifest of vector-only images. `make(class, split, view, stream)`
/// returns the (softmax, fc) vectors of one view.
fn vector_dataset<F>(
    dir: &Path,
    classes: usize,
    per_split: [usize; 2],
    views: usize,
    mut make: F,
) -> Manifest
where
    F: FnMut(usize, Split, usize, Stream) -> (Vec<f64>, Vec<f64>),
{
    let names: Vec<String> = (0..classes).map(|c| format!("k{c}")).collect();
    let mut entries = Vec::new();
    for (split, count) in [(Split::Train, per_split[0]), (Split::Test, per_split[1])] {
        for c in 0..classes {
            for i in 0..count {
                let id = format!("{}-{}-{i}", names[c], split.as_str());
                let mut files = Vec::new();
                for v in 0..views {
                    for stream in Stream::BOTH {
                        let (prob, fc) = make(c, split, v, stream);
                        for (layer, data) in [("prob", prob), ("fc7", fc)] {
                            let path: PathBuf = dir.join(&id).join(format!("{stream}-{layer}-{v}.fvt"));
                            write_tensor(&GlobalVector::new(data, layer).unwrap().into(), &path).unwrap();
                            files.push(fvforge::tensors::ViewFile {
                                stream,
                                layer: layer.into(),
                                path,
                            });
                        }
                    }
                }
                entries.push(ManifestEntry {
                    image_id: id,
                    label: Some(c),
                    views: files,
                    split,
                });
            }
        }
    }
    Manifest::new(names, entries).unwrap()
}

fn gaussian(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    center
        .iter()
        .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn cfg(scenario: Scenario) -> PipelineConfig {
    PipelineConfig {
        scenario,
        ..PipelineConfig::default()
    }
}

#[test]
fn shipped_config_matches_defaults() {
    let parsed = PipelineConfig::from_toml(DEFAULT_CONFIG).unwrap();
    assert_eq!(parsed, PipelineConfig::default());
    assert_eq!(PipelineConfig::from_toml(&parsed.to_toml()).unwrap(), parsed);
    assert!(PipelineConfig::from_toml("[svm]\nbogus = 1\n").is_err());
}

#[test]
fn object_only_softmax_fusion_with_perfect_object_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = vector_dataset(tmp.path(), 4, [1, 5], 2, |c, _, _, stream| {
        let prob = match stream {
            Stream::Object => (0..4).map(|k| if k == c { 0.9 } else { 0.1 / 3.0 }).collect(),
            // scene scores point at the wrong class
            Stream::Scene => (0..4).map(|k| if k == (c + 1) % 4 { 1.0 } else { 0.0 }).collect(),
        };
        (prob, vec![rng.random(), 1.0])
    });
    let mut c = cfg(Scenario::SoftmaxFusion);
    c.fusion.scores = FusionWeights::new(1.0, 0.0).unwrap();
    let report = run(&m, &c, &tmp.path().join("out")).unwrap();
    assert_eq!(report.map, Some(1.0));
    assert_eq!(report.top1, Some(1.0));
    assert_eq!(report.images, 20);

    c.fusion.scores = FusionWeights::new(0.0, 1.0).unwrap();
    let report = run(&m, &c, &tmp.path().join("out2")).unwrap();
    assert_eq!(report.top1, Some(0.0));
}

#[test]
fn separated_global_features_classify() {
    let tmp = tempfile::tempdir().unwrap();
    let centers: Vec<Vec<f64>> = (0..5)
        .map(|c| (0..16).map(|j| if j % 5 == c { 4.0 } else { 0.5 }).collect())
        .collect();
    let mut noise = ChaCha8Rng::seed_from_u64(3);
    let m = vector_dataset(tmp.path(), 5, [8, 6], 2, |c, _, _, _| {
        (vec![0.2; 5], gaussian(&mut noise, &centers[c], 0.3))
    });
    for scenario in [Scenario::GlobalPretrained, Scenario::GlobalFinetuned] {
        let out = tmp.path().join(scenario.as_str());
        let report = run(&m, &cfg(scenario), &out).unwrap();
        assert!(report.map.unwrap() >= 0.95, "{scenario:?}: {}", report.summary_line());
        for f in ["config.toml", "scores.csv", "report.csv", "summary.txt", "svm/model.hdr"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
        assert_eq!(scores.lines().count(), 1 + 30);
    }
}

#[test]
fn one_training_image_per_class() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = vector_dataset(tmp.path(), 3, [1, 2], 1, |c, _, _, _| {
        let mut fc = gaussian(&mut rng, &[0.0; 6], 0.1);
        fc[c] += 3.0;
        (vec![0.3; 3], fc)
    });
    let report = run(&m, &cfg(Scenario::GlobalPretrained), &tmp.path().join("out")).unwrap();
    assert!(report.map.unwrap().is_finite());
}

#[test]
fn identical_images_flag_constant_features() {
    let tmp = tempfile::tempdir().unwrap();
    let m = vector_dataset(tmp.path(), 3, [2, 1], 1, |_, _, _, _| (vec![0.3; 3], vec![1.0, 2.0, 3.0]));
    let out = tmp.path().join("out");
    run(&m, &cfg(Scenario::GlobalPretrained), &out).unwrap();
    let header = fs::read_to_string(out.join("svm/model.hdr")).unwrap();
    assert_eq!(header.matches("status=constant_features").count(), 3, "{header}");
}

#[test]
fn zero_scene_weight_zeroes_the_scene_block() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = vector_dataset(tmp.path(), 2, [3, 1], 2, |c, _, _, _| {
        let mut fc = gaussian(&mut rng, &[1.0; 4], 0.2);
        fc[c] += 2.0;
        (vec![0.5; 2], fc)
    });
    let mut c = cfg(Scenario::GlobalPretrained);
    c.fusion.features = FusionWeights::new(1.0, 0.0).unwrap();
    let out = tmp.path().join("out");
    run(&m, &c, &out).unwrap();
    let id = &m.entries()[0].image_id;
    let feature = read_vector(&out.join("features").join(format!("{id}.fvt"))).unwrap();
    let data = feature.data();
    assert_eq!(data.len(), 8);
    assert!(data[4..].iter().all(|&v| v == 0.0));
    let norm: f64 = data[..4].iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
}

#[test]
fn score_level_layer_fusion_with_fc_only_weight_equals_global() {
    let tmp = tempfile::tempdir().unwrap();
    let data = SynthConfig {
        classes: 3,
        train_per_class: 4,
        test_per_class: 2,
        map_size: 3,
        channels: 6,
        fc_dim: 8,
        ..SynthConfig::default()
    };
    let m = synth(&data, &tmp.path().join("data")).unwrap();
    let mut c = cfg(Scenario::LayerFusion);
    c.gmm.k = 2;
    c.local.pca_dim = 4;
    c.fusion.layer_mode = LayerFusionMode::Scores;
    c.fusion.layer = FusionWeights::new(1.0, 0.0).unwrap();
    run(&m, &c, &tmp.path().join("fused")).unwrap();
    run_global(&m, &c, &tmp.path().join("global")).unwrap();
    let read = |p: &str| fs::read(tmp.path().join(p)).unwrap();
    assert_eq!(read("fused/scores.csv"), read("global/scores.csv"));
    assert_eq!(read("fused/report.csv"), read("global/report.csv"));
    assert!(tmp.path().join("fused/local/svm/model.hdr").exists());
}

#[test]
fn feature_level_layer_fusion_runs_on_synthetic_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = SynthConfig {
        classes: 3,
        train_per_class: 5,
        test_per_class: 3,
        map_size: 3,
        channels: 6,
        fc_dim: 8,
        ..SynthConfig::default()
    };
    let m = synth(&data, &tmp.path().join("data")).unwrap();
    let mut c = cfg(Scenario::LayerFusion);
    c.gmm.k = 2;
    c.local.pca_dim = 4;
    let report = run(&m, &c, &tmp.path().join("out")).unwrap();
    assert_eq!(report.images, 9);
    assert!(report.map.unwrap() > 0.5);
    assert!(tmp.path().join("out/global").is_dir() && tmp.path().join("out/local").is_dir());
}

#[test]
fn missing_layer_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let m = vector_dataset(tmp.path(), 2, [1, 1], 1, |_, _, _, _| (vec![0.5; 2], vec![1.0; 3]));
    let err = run(&m, &cfg(Scenario::LocalFv), &tmp.path().join("out")).unwrap_err();
    assert!(matches!(err, fvforge::Error::Validation(_)), "{err}");
    assert!(!tmp.path().join("out").exists());
}
