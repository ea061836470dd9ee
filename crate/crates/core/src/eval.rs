//! Grouped detection accuracy and bias summaries.
//!
//! A prediction is "face" when `sigmoid(logit) >= threshold`. Accuracy for
//! each face group is the fraction of that group's faces detected; non-faces
//! get their own row (fraction correctly rejected). Alongside accuracy each
//! row reports the mean predicted face probability.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroupTag};
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::ops::sigmoid_scalar;

pub const NONFACE_ROW: &str = "nonface";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupAccuracyTable {
    pub model: String,
    pub threshold: f64,
    /// One row per [`GroupTag::ALL`] entry, in that order.
    pub groups: Vec<GroupRow>,
    /// Present when the test set contains non-faces.
    pub negative: Option<GroupRow>,
    /// `sum(correct) / sum(n)` over every row, non-faces included.
    pub overall: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasMetrics {
    /// Largest minus smallest group accuracy.
    pub gap: f64,
    /// Population variance of the group accuracies.
    pub variance: f64,
}

/// Builds the table from per-example face probabilities.
pub fn table_from_probs(
    model: &str,
    test: &Dataset,
    probs: &[f64],
    threshold: f64,
) -> Result<GroupAccuracyTable> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be in (0, 1), got {threshold}"
        )));
    }
    if probs.len() != test.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probabilities for {} examples",
            probs.len(),
            test.len()
        )));
    }
    #[derive(Default, Clone, Copy)]
    struct Tally {
        n: usize,
        correct: usize,
        prob_sum: f64,
    }
    let mut groups = [Tally::default(); 4];
    let mut negative = Tally::default();
    for (e, &p) in test.examples.iter().zip(probs) {
        let predicted_face = p >= threshold;
        let tally = if e.label {
            match e.group {
                Some(g) => &mut groups[GroupTag::ALL.iter().position(|&x| x == g).unwrap()],
                None => continue,
            }
        } else {
            &mut negative
        };
        tally.n += 1;
        tally.prob_sum += p;
        if predicted_face == e.label {
            tally.correct += 1;
        }
    }
    let missing: Vec<String> = GroupTag::ALL
        .iter()
        .zip(&groups)
        .filter(|(_, t)| t.n == 0)
        .map(|(g, _)| g.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGroup(missing.join(", ")));
    }
    let row = |name: String, t: &Tally| GroupRow {
        group: name,
        n: t.n,
        correct: t.correct,
        accuracy: t.correct as f64 / t.n as f64,
        mean_prob: t.prob_sum / t.n as f64,
    };
    let group_rows: Vec<GroupRow> = GroupTag::ALL
        .iter()
        .zip(&groups)
        .map(|(g, t)| row(g.to_string(), t))
        .collect();
    let negative_row = (negative.n > 0).then(|| row(NONFACE_ROW.into(), &negative));
    let (n, correct) = group_rows
        .iter()
        .chain(negative_row.as_ref())
        .fold((0, 0), |(n, c), r| (n + r.n, c + r.correct));
    Ok(GroupAccuracyTable {
        model: model.into(),
        threshold,
        groups: group_rows,
        negative: negative_row,
        overall: correct as f64 / n as f64,
    })
}

/// Face probabilities of `model` over `test`, evaluated in chunks.
pub fn predict_probs(model: &ModelBundle, test: &Dataset) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..test.len()).collect();
    let mut probs = Vec::with_capacity(test.len());
    for chunk in all.chunks(64) {
        let logits = model.encoder.classify(&test.stack(chunk))?;
        probs.extend(logits.data().iter().map(|&l| sigmoid_scalar(l)));
    }
    Ok(probs)
}

pub fn evaluate(model: &ModelBundle, test: &Dataset, threshold: f64) -> Result<GroupAccuracyTable> {
    test.validate()?;
    if test.channels() != Some(model.config().channels) {
        return Err(Error::InvalidArgument(format!(
            "test images have {:?} channels, model expects {}",
            test.channels(),
            model.config().channels
        )));
    }
    let probs = predict_probs(model, test)?;
    table_from_probs(&model.kind.to_string(), test, &probs, threshold)
}

pub fn bias_metrics(table: &GroupAccuracyTable) -> BiasMetrics {
    let acc: Vec<f64> = table.groups.iter().map(|r| r.accuracy).collect();
    let max = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = acc.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    let variance = acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / acc.len() as f64;
    BiasMetrics {
        gap: max - min,
        variance,
    }
}

impl GroupAccuracyTable {
    /// Rows: the four groups, `nonface` (if present), then `overall`.
    pub fn rows(&self) -> Vec<GroupRow> {
        let mut rows = self.groups.clone();
        rows.extend(self.negative.clone());
        let (n, correct, prob) = rows.iter().fold((0, 0, 0.0), |(n, c, p), r| {
            (n + r.n, c + r.correct, p + r.mean_prob * r.n as f64)
        });
        rows.push(GroupRow {
            group: "overall".into(),
            n,
            correct,
            accuracy: self.overall,
            mean_prob: prob / n as f64,
        });
        rows
    }

    pub fn to_csv(&self, header: Option<&str>) -> Result<String> {
        crate::report::to_csv_with_header(&self.rows(), header)
    }
}

/// One line of a standard-vs-debiased comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub row: String,
    pub standard: f64,
    pub dbvae: f64,
    /// `dbvae - standard`
    pub delta: f64,
    pub standard_mean_prob: Option<f64>,
    pub dbvae_mean_prob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

/// Labels of the summary rows that follow the per-group rows.
pub const SUMMARY_ROWS: [&str; 3] = ["overall", "gap", "variance"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub group: String,
    pub standard_acc: f64,
    pub dbvae_acc: f64,
}

pub fn compare(standard: &GroupAccuracyTable, dbvae: &GroupAccuracyTable) -> Result<ComparisonReport> {
    let names = |t: &GroupAccuracyTable| -> Vec<String> {
        t.groups
            .iter()
            .chain(t.negative.as_ref())
            .map(|r| r.group.clone())
            .collect()
    };
    if names(standard) != names(dbvae) {
        return Err(Error::InvalidArgument(format!(
            "group sets differ: {:?} vs {:?}",
            names(standard),
            names(dbvae)
        )));
    }
    let line = |row: &str, s: f64, d: f64, sp: Option<f64>, dp: Option<f64>| ComparisonRow {
        row: row.into(),
        standard: s,
        dbvae: d,
        delta: d - s,
        standard_mean_prob: sp,
        dbvae_mean_prob: dp,
    };
    let mut rows: Vec<ComparisonRow> = standard
        .groups
        .iter()
        .chain(standard.negative.as_ref())
        .zip(dbvae.groups.iter().chain(dbvae.negative.as_ref()))
        .map(|(s, d)| line(&s.group, s.accuracy, d.accuracy, Some(s.mean_prob), Some(d.mean_prob)))
        .collect();
    let (bs, bd) = (bias_metrics(standard), bias_metrics(dbvae));
    rows.push(line(SUMMARY_ROWS[0], standard.overall, dbvae.overall, None, None));
    rows.push(line(SUMMARY_ROWS[1], bs.gap, bd.gap, None, None));
    rows.push(line(SUMMARY_ROWS[2], bs.variance, bd.variance, None, None));
    Ok(ComparisonReport { rows })
}

impl ComparisonReport {
    pub fn to_csv(&self, header: Option<&str>) -> Result<String> {
        crate::report::to_csv_with_header(&self.rows, header)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        Ok(ComparisonReport {
            rows: crate::report::from_csv(text)?,
        })
    }

    /// Per-group accuracy pairs for bar charts.
    pub fn plot_rows(&self) -> Vec<PlotRow> {
        self.rows
            .iter()
            .filter(|r| r.row.parse::<GroupTag>().is_ok())
            .map(|r| PlotRow {
                group: r.row.clone(),
                standard_acc: r.standard,
                dbvae_acc: r.dbvae,
            })
            .collect()
    }

    pub fn plot_csv(&self, header: Option<&str>) -> Result<String> {
        crate::report::to_csv_with_header(&self.plot_rows(), header)
    }
}
