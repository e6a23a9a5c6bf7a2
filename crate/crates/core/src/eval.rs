//! Per-class average precision, mAP and top-1 accuracy, plus the scores
//! and report CSV files.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensors::{argmax, Manifest};

/// How the precision–recall curve is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    /// Mean of the precision at each positive's rank.
    #[default]
    Step,
    /// Trapezoids between consecutive (recall, precision) points, starting
    /// from recall 0 at the first point's precision.
    Trapezoid,
}

impl Integrator {
    pub fn as_str(self) -> &'static str {
        match self {
            Integrator::Step => "step",
            Integrator::Trapezoid => "trapezoid",
        }
    }
}

impl FromStr for Integrator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Integrator::Step),
            "trapezoid" => Ok(Integrator::Trapezoid),
            other => Err(Error::Parameter(format!("unknown integrator `{other}`"))),
        }
    }
}

/// Indices sorted by descending score; equal scores keep input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

pub fn average_precision(scores: &[f64], labels: &[bool], integrator: Integrator) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("scores must be finite".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedAp);
    }
    let total = positives as f64;
    let mut hits = 0usize;
    let mut ap = 0.0;
    let (mut prev_recall, mut prev_precision) = (0.0, None::<f64>);
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
        }
        let precision = hits as f64 / (rank + 1) as f64;
        match integrator {
            Integrator::Step => {
                if labels[i] {
                    ap += precision;
                }
            }
            Integrator::Trapezoid => {
                let recall = hits as f64 / total;
                let left = prev_precision.unwrap_or(precision);
                ap += (recall - prev_recall) * (left + precision) / 2.0;
                prev_recall = recall;
                prev_precision = Some(precision);
            }
        }
        if hits == positives {
            break;
        }
    }
    Ok(match integrator {
        Integrator::Step => ap / total,
        Integrator::Trapezoid => ap,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// `None` for classes without positives; they are left out of the mean.
    pub per_class_ap: Vec<Option<f64>>,
    /// `None` when no class has a positive.
    pub map: Option<f64>,
    /// `None` when there are no images.
    pub top1: Option<f64>,
    pub per_class_counts: Vec<usize>,
    pub images: usize,
    pub integrator: Integrator,
}

impl EvalReport {
    pub fn excluded(&self) -> Vec<usize> {
        self.per_class_ap
            .iter()
            .enumerate()
            .filter(|(_, ap)| ap.is_none())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn summary_line(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        format!("mAP={} top1={}", fmt(self.map), fmt(self.top1))
    }

    /// `class,positives,ap` rows under a comment naming the tie-break and
    /// integrator. Excluded classes show `excluded` as their AP.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# ties=stable-input-order integrator={} images={}\nclass,positives,ap\n",
            self.integrator.as_str(),
            self.images
        );
        for ((name, count), ap) in self
            .class_names
            .iter()
            .zip(&self.per_class_counts)
            .zip(&self.per_class_ap)
        {
            match ap {
                Some(ap) => writeln!(out, "{name},{count},{ap}").unwrap(),
                None => writeln!(out, "{name},{count},excluded").unwrap(),
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// `scores[i][k]` is image i's score for class k; `labels[i]` its class.
pub fn evaluate(
    scores: &[Vec<f64>],
    labels: &[usize],
    class_names: &[String],
    integrator: Integrator,
) -> Result<EvalReport> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score rows but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let classes = class_names.len();
    if classes == 0 {
        return Err(Error::Parameter("evaluation needs at least one class".into()));
    }
    if let Some(row) = scores.iter().position(|r| r.len() != classes) {
        return Err(Error::Shape(format!(
            "score row {row} has {} entries, expected {classes}",
            scores[row].len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Parameter(format!(
            "label {l} out of range for {classes} classes"
        )));
    }

    let per_class: Vec<(usize, Option<f64>)> = (0..classes)
        .into_par_iter()
        .map(|k| {
            let column: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let truth: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            let count = truth.iter().filter(|&&t| t).count();
            match average_precision(&column, &truth, integrator) {
                Ok(ap) => Ok((count, Some(ap))),
                Err(Error::UndefinedAp) => Ok((count, None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let (per_class_counts, per_class_ap): (Vec<usize>, Vec<Option<f64>>) =
        per_class.into_iter().unzip();
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let top1 = (!labels.is_empty()).then(|| {
        let correct = scores
            .iter()
            .zip(labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        correct as f64 / labels.len() as f64
    });
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        per_class_ap,
        map,
        top1,
        per_class_counts,
        images: labels.len(),
        integrator,
    })
}

/// Rows of `image_id,score_0,...,score_{C-1}` under a header row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub image_ids: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn push(&mut self, image_id: impl Into<String>, scores: Vec<f64>) {
        self.image_ids.push(image_id.into());
        self.scores.push(scores);
    }

    pub fn class_count(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn to_csv(&self) -> String {
        let classes = self.class_count();
        let mut out = String::from("image_id");
        for k in 0..classes {
            write!(out, ",score_{k}").unwrap();
        }
        out.push('\n');
        for (id, row) in self.image_ids.iter().zip(&self.scores) {
            out.push_str(id);
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("scores file is empty".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"image_id") || cols.len() < 2 {
            return Err(Error::Format(
                "scores header must be image_id,score_0,...".into(),
            ));
        }
        for (k, c) in cols[1..].iter().enumerate() {
            if *c != format!("score_{k}") {
                return Err(Error::Format(format!("unexpected scores column `{c}`")));
            }
        }
        let classes = cols.len() - 1;
        let mut table = ScoreTable::default();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != classes + 1 {
                return Err(Error::Format(format!(
                    "scores row {} has {} fields, expected {}",
                    n + 1,
                    fields.len(),
                    classes + 1
                )));
            }
            let row = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Data(format!("bad score `{f}` in row {}", n + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            table.push(fields[0], row);
        }
        Ok(table)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Evaluates the labelled rows of `table` against the manifest's labels.
/// Rows for unlabelled images are skipped; unknown image ids are an error.
pub fn evaluate_table(
    table: &ScoreTable,
    manifest: &Manifest,
    integrator: Integrator,
) -> Result<EvalReport> {
    if table.class_count() != 0 && table.class_count() != manifest.class_count() {
        return Err(Error::Shape(format!(
            "scores have {} classes, manifest has {}",
            table.class_count(),
            manifest.class_count()
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (id, row) in table.image_ids.iter().zip(&table.scores) {
        let entry = manifest
            .entries()
            .iter()
            .find(|e| &e.image_id == id)
            .ok_or_else(|| Error::Data(format!("image `{id}` is not in the manifest")))?;
        if let Some(label) = entry.label {
            scores.push(row.clone());
            labels.push(label);
        }
    }
    evaluate(&scores, &labels, manifest.class_names(), integrator)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn hand_cases() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[false, true, false], Integrator::Step);
        assert_eq!(ap.unwrap(), 0.5);
        let ap = average_precision(&[3.0, 2.0, 1.0, 0.0], &[true, true, false, false], Integrator::Step);
        assert_eq!(ap.unwrap(), 1.0);
        // ranks 1 and 3: (1 + 2/3) / 2
        let ap = average_precision(&[4.0, 3.0, 2.0], &[true, false, true], Integrator::Step).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert!(matches!(
            average_precision(&[1.0, 2.0], &[false, false], Integrator::Step),
            Err(Error::UndefinedAp)
        ));
        assert!(matches!(
            average_precision(&[1.0], &[true, false], Integrator::Step),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ties_break_by_input_order() {
        // all equal: ranking is the input order
        let ap = average_precision(&[1.0; 4], &[false, true, false, true], Integrator::Step).unwrap();
        assert!((ap - (0.5 + 0.5) / 2.0).abs() < 1e-15);
        let ap = average_precision(&[1.0; 4], &[true, false, true, false], Integrator::Step).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn trapezoid_on_hand_case() {
        // points (0.5, 1), (0.5, 0.5), (1, 2/3); start (0, 1)
        let ap = average_precision(&[4.0, 3.0, 2.0], &[true, false, true], Integrator::Trapezoid).unwrap();
        let expected = 0.5 * 1.0 + 0.0 + 0.5 * (0.5 + 2.0 / 3.0) / 2.0;
        assert!((ap - expected).abs() < 1e-15);
        let perfect = average_precision(&[2.0, 1.0], &[true, false], Integrator::Trapezoid).unwrap();
        assert_eq!(perfect, 1.0);
    }

    #[test]
    fn invariant_under_monotone_transform() {
        let scores = [0.3, -1.2, 2.5, 0.0, 0.7, 1.1];
        let labels = [true, false, true, false, false, true];
        let a = average_precision(&scores, &labels, Integrator::Step).unwrap();
        let t: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp() + 1.0).collect();
        assert_eq!(a, average_precision(&t, &labels, Integrator::Step).unwrap());
    }

    #[test]
    fn evaluate_perfect_and_degenerate() {
        let r = evaluate(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], &names(2), Integrator::Step)
            .unwrap();
        assert_eq!(r.per_class_ap, vec![Some(1.0), Some(1.0)]);
        assert_eq!(r.map, Some(1.0));
        assert_eq!(r.top1, Some(1.0));

        let r = evaluate(&[vec![0.2], vec![-3.0]], &[0, 0], &names(1), Integrator::Step).unwrap();
        assert_eq!(r.per_class_ap, vec![Some(1.0)]);

        let r = evaluate(
            &[vec![1.0, 0.0, 0.5], vec![0.0, 1.0, 0.5]],
            &[0, 0],
            &names(3),
            Integrator::Step,
        )
        .unwrap();
        assert_eq!(r.excluded(), vec![1, 2]);
        assert_eq!(r.map, r.per_class_ap[0]);
        assert_eq!(r.top1, Some(0.5));
        assert!(r.to_csv().contains("c1,0,excluded"));

        let empty = evaluate(&[], &[], &names(2), Integrator::Step).unwrap();
        assert_eq!((empty.map, empty.top1), (None, None));
        assert_eq!(empty.summary_line(), "mAP=nan top1=nan");
    }

    #[test]
    fn top1_ties_pick_lowest_index() {
        let r = evaluate(&[vec![1.0, 1.0]], &[0], &names(2), Integrator::Step).unwrap();
        assert_eq!(r.top1, Some(1.0));
        let r = evaluate(&[vec![1.0, 1.0]], &[1], &names(2), Integrator::Step).unwrap();
        assert_eq!(r.top1, Some(0.0));
    }

    #[test]
    fn evaluate_validates_inputs() {
        assert!(matches!(
            evaluate(&[vec![1.0]], &[0], &names(2), Integrator::Step),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            evaluate(&[vec![1.0, 0.0]], &[2], &names(2), Integrator::Step),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn map_ignores_class_and_image_order() {
        let scores = vec![
            vec![0.1, 0.7, 0.2],
            vec![0.5, 0.4, 0.1],
            vec![0.3, 0.3, 0.9],
            vec![0.8, 0.1, 0.6],
        ];
        let labels = [1, 0, 2, 2];
        let a = evaluate(&scores, &labels, &names(3), Integrator::Step).unwrap();
        let perm = [2, 0, 3, 1];
        // permuted images; ties absent so the ranking is unchanged
        let s2: Vec<Vec<f64>> = perm.iter().map(|&i| scores[i].clone()).collect();
        let l2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let b = evaluate(&s2, &l2, &names(3), Integrator::Step).unwrap();
        assert!((a.map.unwrap() - b.map.unwrap()).abs() < 1e-15);
        // reversed classes
        let s3: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().rev().copied().collect()).collect();
        let l3: Vec<usize> = labels.iter().map(|l| 2 - l).collect();
        let c = evaluate(&s3, &l3, &names(3), Integrator::Step).unwrap();
        assert!((a.map.unwrap() - c.map.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn score_table_round_trip() {
        let mut t = ScoreTable::default();
        t.push("a", vec![0.1, -2.5e-7]);
        t.push("b", vec![1.0 / 3.0, 4.0]);
        let text = t.to_csv();
        assert!(text.starts_with("image_id,score_0,score_1\n"));
        assert_eq!(ScoreTable::parse(&text).unwrap(), t);
        assert!(matches!(ScoreTable::parse(""), Err(Error::Format(_))));
        assert!(matches!(
            ScoreTable::parse("image_id,score_0\na,1,2\n"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            ScoreTable::parse("image_id,score_0\na,x\n"),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            ScoreTable::read(Path::new("/nonexistent/scores.csv")),
            Err(Error::Io { .. })
        ));
    }
}
