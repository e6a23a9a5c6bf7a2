//! One-vs-rest linear SVMs (ℓ2-regularized hinge loss) trained by dual
//! coordinate descent.
//!
//! Each binary problem is
//!
//! ```text
//! min_w ½‖w‖² + C Σ_i max(0, 1 − y_i w·x̂_i),   x̂_i = [x_i, 1]
//! ```
//!
//! so the bias is the last coordinate of `w` and is regularized with it.

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{write_dir_atomic, Header, MODEL_HEADER};
use crate::numeric::{dot, l2_norm};
use crate::tensors::{read_map, read_vector, write_tensor, FeatureMap, GlobalVector, ScoreVector};

pub const DEFAULT_C: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub c: f64,
    pub seed: u64,
    pub max_epochs: usize,
    /// Stop when the spread of projected gradients falls below this.
    pub tol: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: DEFAULT_C,
            seed: 7,
            max_epochs: 1000,
            tol: 1e-3,
        }
    }
}

/// How a class's binary problem looked at training time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassStatus {
    Trained,
    /// No positive examples: the classifier only ever learned "no".
    NoPositives,
    /// No negative examples.
    NoNegatives,
    /// Every training feature was the same vector, so nothing separates classes.
    ConstantFeatures,
}

impl ClassStatus {
    fn as_str(self) -> &'static str {
        match self {
            ClassStatus::Trained => "trained",
            ClassStatus::NoPositives => "no_positives",
            ClassStatus::NoNegatives => "no_negatives",
            ClassStatus::ConstantFeatures => "constant_features",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "trained" => Ok(ClassStatus::Trained),
            "no_positives" => Ok(ClassStatus::NoPositives),
            "no_negatives" => Ok(ClassStatus::NoNegatives),
            "constant_features" => Ok(ClassStatus::ConstantFeatures),
            other => Err(Error::Validation(format!("unknown class status `{other}`"))),
        }
    }

    pub fn is_degenerate(self) -> bool {
        self != ClassStatus::Trained
    }
}

/// Solution of one binary problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySolution {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Dual variables, one per example, each in [0, C].
    pub alphas: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
}

/// Dual coordinate descent on one ±1-labelled problem.
pub fn train_binary(
    features: &[Vec<f64>],
    positive: &[bool],
    cfg: &SvmConfig,
    seed: u64,
) -> Result<BinarySolution> {
    if features.len() != positive.len() {
        return Err(Error::Shape(format!(
            "{} features but {} labels",
            features.len(),
            positive.len()
        )));
    }
    let n = features.len();
    let dim = features.first().map_or(0, Vec::len);
    let upper = cfg.c;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut alphas = vec![0.0; n];
    let qd: Vec<f64> = features.iter().map(|x| dot(x, x) + 1.0).collect();
    let y: Vec<f64> = positive.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut converged = false;
    let mut epochs = 0;
    while epochs < cfg.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        let mut pg_max = f64::NEG_INFINITY;
        let mut pg_min = f64::INFINITY;
        for &i in &order {
            let x = &features[i];
            let g = y[i] * (dot(&w, x) + b) - 1.0;
            let pg = if alphas[i] == 0.0 {
                g.min(0.0)
            } else if alphas[i] == upper {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > 1e-12 {
                let old = alphas[i];
                alphas[i] = (old - g / qd[i]).clamp(0.0, upper);
                let step = (alphas[i] - old) * y[i];
                if step != 0.0 {
                    for (wj, xj) in w.iter_mut().zip(x) {
                        *wj += step * xj;
                    }
                    b += step;
                }
            }
        }
        if n == 0 || pg_max - pg_min < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(BinarySolution {
        weights: w,
        bias: b,
        alphas,
        epochs,
        converged,
    })
}

/// ½(‖w‖² + b²) + C Σ hinge.
pub fn primal_objective(
    weights: &[f64],
    bias: f64,
    features: &[Vec<f64>],
    positive: &[bool],
    c: f64,
) -> f64 {
    let reg = 0.5 * (dot(weights, weights) + bias * bias);
    let loss: f64 = features
        .iter()
        .zip(positive)
        .map(|(x, &p)| {
            let y = if p { 1.0 } else { -1.0 };
            (1.0 - y * (dot(weights, x) + bias)).max(0.0)
        })
        .sum();
    reg + c * loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    class_names: Vec<String>,
    feature_dim: usize,
    /// class_count rows of length feature_dim.
    weights: Vec<f64>,
    biases: Vec<f64>,
    c: f64,
    status: Vec<ClassStatus>,
}

impl LinearModel {
    pub fn new(
        class_names: Vec<String>,
        feature_dim: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        c: f64,
        status: Vec<ClassStatus>,
    ) -> Result<Self> {
        let classes = class_names.len();
        if classes == 0 || feature_dim == 0 {
            return Err(Error::Validation("linear model needs classes and features".into()));
        }
        if weights.len() != classes * feature_dim
            || biases.len() != classes
            || status.len() != classes
        {
            return Err(Error::Validation("linear model payload sizes disagree".into()));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::Validation("linear model parameters must be finite".into()));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Validation(format!("C must be positive, got {c}")));
        }
        Ok(LinearModel {
            class_names,
            feature_dim,
            weights,
            biases,
            c,
            status,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
    pub fn c(&self) -> f64 {
        self.c
    }
    pub fn class_weights(&self, class: usize) -> &[f64] {
        &self.weights[class * self.feature_dim..(class + 1) * self.feature_dim]
    }
    pub fn biases(&self) -> &[f64] {
        &self.biases
    }
    pub fn status(&self) -> &[ClassStatus] {
        &self.status
    }

    /// Indices of classes trained without both positive and negative examples.
    pub fn degenerate_classes(&self) -> Vec<usize> {
        self.status
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_degenerate())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_dir_atomic(dir, |staging| {
            write_tensor(
                &FeatureMap::new(self.class_count(), 1, self.feature_dim, self.weights.clone())?
                    .into(),
                &staging.join("weights.fvt"),
            )?;
            write_tensor(
                &GlobalVector::new(self.biases.clone(), "svm_biases")?.into(),
                &staging.join("biases.fvt"),
            )?;
            let mut h = Header::new("svm");
            h.push("c", self.c);
            h.push("feature_dim", self.feature_dim);
            h.push("weights", "weights.fvt");
            h.push("biases", "biases.fvt");
            for (name, status) in self.class_names.iter().zip(&self.status) {
                h.push("class", name);
                h.push("status", status.as_str());
            }
            h.write(&staging.join(MODEL_HEADER))
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let h = Header::read(&dir.join(MODEL_HEADER))?;
        h.expect_kind("svm")?;
        let c: f64 = h.require_parsed("c")?;
        let feature_dim: usize = h.require_parsed("feature_dim")?;
        let class_names: Vec<String> = h.get_all("class").map(str::to_string).collect();
        let status = h
            .get_all("status")
            .map(ClassStatus::parse)
            .collect::<Result<Vec<_>>>()?;
        let weights = read_map(&dir.join(h.require("weights")?))?;
        if weights.height() != class_names.len()
            || weights.width() != 1
            || weights.channels() != feature_dim
        {
            return Err(Error::Validation("svm weight shape disagrees with header".into()));
        }
        let biases = read_vector(&dir.join(h.require("biases")?))?.into_data();
        LinearModel::new(class_names, feature_dim, weights.into_data(), biases, c, status)
    }
}

/// Trains one binary classifier per class. Classes run in parallel; each
/// class's solver is seeded from `cfg.seed` and its index.
pub fn train_ovr(
    features: &[Vec<f64>],
    labels: &[usize],
    class_names: &[String],
    cfg: &SvmConfig,
) -> Result<LinearModel> {
    if !(cfg.c > 0.0 && cfg.c.is_finite()) {
        return Err(Error::Parameter(format!("C must be positive, got {}", cfg.c)));
    }
    if cfg.max_epochs == 0 || cfg.tol.is_nan() || cfg.tol <= 0.0 {
        return Err(Error::Parameter("svm needs max_epochs > 0 and tol > 0".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Parameter("no training examples".into()))?;
    if dim == 0 {
        return Err(Error::Shape("feature dim must be positive".into()));
    }
    if let Some(bad) = features.iter().position(|f| f.len() != dim) {
        return Err(Error::Shape(format!(
            "feature {bad} has dim {}, expected {dim}",
            features[bad].len()
        )));
    }
    let classes = class_names.len();
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Parameter(format!(
            "label {l} out of range for {classes} classes"
        )));
    }
    let off_unit = features
        .iter()
        .filter(|f| (l2_norm(f) - 1.0).abs() > 0.1)
        .count();
    if off_unit > 0 {
        warn!(
            "stage=train_svm event=unnormalized_features count={off_unit} of={}",
            features.len()
        );
    }
    let constant = features.len() > 1 && features.iter().all(|f| f == &features[0]);

    let solutions: Vec<(BinarySolution, ClassStatus)> = (0..classes)
        .into_par_iter()
        .map(|class| {
            let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
            let pos = positive.iter().filter(|&&p| p).count();
            let status = if pos == 0 {
                ClassStatus::NoPositives
            } else if pos == positive.len() {
                ClassStatus::NoNegatives
            } else if constant {
                ClassStatus::ConstantFeatures
            } else {
                ClassStatus::Trained
            };
            let seed = cfg.seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            train_binary(features, &positive, cfg, seed).map(|s| (s, status))
        })
        .collect::<Result<_>>()?;

    let mut weights = Vec::with_capacity(classes * dim);
    let mut biases = Vec::with_capacity(classes);
    let mut status = Vec::with_capacity(classes);
    let mut unconverged = 0;
    for (s, st) in solutions {
        if st.is_degenerate() {
            warn!("stage=train_svm event=degenerate_class status={}", st.as_str());
        }
        unconverged += usize::from(!s.converged);
        weights.extend(s.weights);
        biases.push(s.bias);
        status.push(st);
    }
    info!(
        "stage=train_svm classes={classes} examples={} dim={dim} c={} unconverged={unconverged}",
        features.len(),
        cfg.c
    );
    LinearModel::new(class_names.to_vec(), dim, weights, biases, cfg.c, status)
}

/// `scores[k] = w_k · x + b_k`.
pub fn predict_scores(model: &LinearModel, feature: &[f64]) -> Result<ScoreVector> {
    if feature.len() != model.feature_dim {
        return Err(Error::Shape(format!(
            "feature has dim {}, model expects {}",
            feature.len(),
            model.feature_dim
        )));
    }
    ScoreVector::new(
        (0..model.class_count())
            .map(|k| dot(model.class_weights(k), feature) + model.biases[k])
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..20 {
            x.push(vec![2.0 + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]);
            y.push(1);
            x.push(vec![-2.0 + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]);
            y.push(0);
        }
        (x, y)
    }

    #[test]
    fn separable_toy_problem() {
        let (x, y) = toy();
        let cfg = SvmConfig::default();
        let model = train_ovr(&x, &y, &names(2), &cfg).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!(predict_scores(&model, xi).unwrap().argmax(), yi);
        }
        // boundary of the positive class crosses the first axis near zero
        let w = model.class_weights(1);
        let crossing = -model.biases()[1] / w[0];
        assert!(crossing.abs() < 0.2, "crossing at {crossing}");

        let positive: Vec<bool> = y.iter().map(|&l| l == 1).collect();
        let sol = train_binary(&x, &positive, &cfg, 3).unwrap();
        assert!(sol.converged);
        assert!(sol.alphas.iter().all(|&a| (0.0..=cfg.c).contains(&a)));
        let hinge: f64 = x
            .iter()
            .zip(&positive)
            .map(|(xi, &p)| {
                let yv = if p { 1.0 } else { -1.0 };
                (1.0 - yv * (dot(&sol.weights, xi) + sol.bias)).max(0.0)
            })
            .sum();
        assert!(hinge < 1e-3, "hinge {hinge}");
        let p = primal_objective(&sol.weights, sol.bias, &x, &positive, cfg.c);
        assert!(p <= primal_objective(&[0.0, 0.0], 0.0, &x, &positive, cfg.c));
    }

    #[test]
    fn same_data_two_seeds_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..300 {
            let c = i % 3;
            x.push(
                (0..4)
                    .map(|j| if j == c { 1.0 } else { 0.0 } + rng.random_range(-0.6..0.6))
                    .collect::<Vec<f64>>(),
            );
            y.push(c);
        }
        let acc = |seed| {
            let cfg = SvmConfig {
                seed,
                ..SvmConfig::default()
            };
            let m = train_ovr(&x, &y, &names(3), &cfg).unwrap();
            x.iter()
                .zip(&y)
                .filter(|(xi, &yi)| predict_scores(&m, xi).unwrap().argmax() == yi)
                .count() as f64
                / x.len() as f64
        };
        assert!((acc(1) - acc(99)).abs() < 0.005);
    }

    #[test]
    fn missing_positives_are_flagged() {
        let (x, y) = toy();
        let model = train_ovr(&x, &y, &names(3), &SvmConfig::default()).unwrap();
        assert_eq!(model.status()[2], ClassStatus::NoPositives);
        assert_eq!(model.degenerate_classes(), vec![2]);
        for xi in &x {
            assert!(predict_scores(&model, xi).unwrap().scores()[2] < 0.0);
        }
    }

    #[test]
    fn identical_features_are_flagged() {
        let x = vec![vec![0.6, 0.8]; 6];
        let y = vec![0, 1, 2, 0, 1, 2];
        let model = train_ovr(&x, &y, &names(3), &SvmConfig::default()).unwrap();
        assert!(model.status().iter().all(|&s| s == ClassStatus::ConstantFeatures));
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = toy();
        let a = train_ovr(&x, &y, &names(2), &SvmConfig::default()).unwrap();
        let b = train_ovr(&x, &y, &names(2), &SvmConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_and_parameter_errors() {
        let x = vec![vec![1.0, 0.0], vec![1.0]];
        assert!(matches!(
            train_ovr(&x, &[0, 1], &names(2), &SvmConfig::default()),
            Err(Error::Shape(_))
        ));
        let x = vec![vec![1.0], vec![2.0]];
        assert!(train_ovr(&x, &[0, 2], &names(2), &SvmConfig::default()).is_err());
        let bad = SvmConfig {
            c: 0.0,
            ..SvmConfig::default()
        };
        assert!(matches!(
            train_ovr(&x, &[0, 1], &names(2), &bad),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn prediction_identities() {
        let model = LinearModel::new(
            names(3),
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![0.0; 3],
            1.0,
            vec![ClassStatus::Trained; 3],
        )
        .unwrap();
        assert_eq!(
            predict_scores(&model, &[0.3, -1.0, 2.0]).unwrap().scores(),
            &[0.3, -1.0, 2.0]
        );
        let biased = LinearModel::new(
            names(2),
            2,
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.5, -0.5],
            1.0,
            vec![ClassStatus::Trained; 2],
        )
        .unwrap();
        assert_eq!(predict_scores(&biased, &[0.0, 0.0]).unwrap().scores(), &[0.5, -0.5]);
        assert!(matches!(predict_scores(&biased, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn prediction_matches_scalar_oracle_and_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let model =
            LinearModel::new(names(4), 6, r(24), r(4), 1.0, vec![ClassStatus::Trained; 4]).unwrap();
        let (a, b) = (r(6), r(6));
        let sa = predict_scores(&model, &a).unwrap();
        for k in 0..4 {
            let mut acc = model.biases()[k];
            for j in 0..6 {
                acc += model.class_weights(k)[j] * a[j];
            }
            assert!((sa.scores()[k] - acc).abs() < 1e-9);
        }
        // f(2a + 3b) = 2 f(a) + 3 f(b) − 4 bias
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x + 3.0 * y).collect();
        let sc = predict_scores(&model, &combo).unwrap();
        let sb = predict_scores(&model, &b).unwrap();
        for k in 0..4 {
            let expected = 2.0 * sa.scores()[k] + 3.0 * sb.scores()[k] - 4.0 * model.biases()[k];
            assert!((sc.scores()[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let (x, y) = toy();
        let model = train_ovr(&x, &y, &names(3), &SvmConfig::default()).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("svm");
        model.save(&dir).unwrap();
        let back = LinearModel::load(&dir).unwrap();
        assert_eq!(back.class_names(), model.class_names());
        assert_eq!(back.status(), model.status());
        assert_eq!(back.c(), 1.0);
        for k in 0..3 {
            for (a, b) in back.class_weights(k).iter().zip(model.class_weights(k)) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
    }
}
