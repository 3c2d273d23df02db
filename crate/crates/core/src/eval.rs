//! Confusion matrices, per-class recall/precision/F1 in exact arithmetic,
//! and the text/CSV/JSON report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io;
use crate::labels::Label;
use crate::predictions::PredictionFile;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    /// `counts[actual][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(class_names: Vec<String>) -> Self {
        let c = class_names.len();
        Self {
            class_names,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn from_indices(actual: &[usize], predicted: &[usize], class_names: Vec<String>) -> Result<Self> {
        if actual.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} actual labels but {} predictions",
                actual.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::zeros(class_names);
        let c = cm.num_classes();
        for (&a, &p) in actual.iter().zip(predicted) {
            if a >= c || p >= c {
                return Err(Error::IndexOutOfRange { index: a.max(p), len: c });
            }
            cm.counts[a][p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Class `i` of the result is class `order[i]` of `self`.
    pub fn reorder(&self, order: &[usize]) -> Result<Self> {
        let c = self.num_classes();
        let mut seen = vec![false; c];
        if order.len() != c || order.iter().any(|&i| i >= c || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Config(format!("{order:?} is not a permutation of {c} classes")));
        }
        Ok(Self {
            class_names: order.iter().map(|&i| self.class_names[i].clone()).collect(),
            counts: order
                .iter()
                .map(|&a| order.iter().map(|&p| self.counts[a][p]).collect())
                .collect(),
        })
    }
}

/// Three-class confusion matrix over [`Label`] values.
pub fn confusion(actual: &[Label], predicted: &[Label]) -> Result<ConfusionMatrix> {
    let a: Vec<usize> = actual.iter().map(|l| l.index()).collect();
    let p: Vec<usize> = predicted.iter().map(|l| l.index()).collect();
    ConfusionMatrix::from_indices(&a, &p, Label::names())
}

/// Treatment of an empty row or column.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ZeroDivision {
    /// `0/0` counts as 0.
    #[default]
    Zero,
    /// `0/0` is reported as undefined.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassScores {
    pub class: String,
    /// `None` only in strict mode when the ratio is `0/0`.
    pub recall: Option<Ratio<u64>>,
    pub precision: Option<Ratio<u64>>,
    pub f1: Option<Ratio<u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassScores>,
    pub accuracy: Ratio<u64>,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<ClassMetrics> {
    metrics_with(cm, ZeroDivision::Zero)
}

pub fn metrics_with(cm: &ConfusionMatrix, mode: ZeroDivision) -> Result<ClassMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptySplit("confusion matrix".into()));
    }
    let ratio = |n: u64, d: u64| match (d, mode) {
        (0, ZeroDivision::Zero) => Some(Ratio::from_integer(0)),
        (0, ZeroDivision::Strict) => None,
        _ => Some(Ratio::new(n, d)),
    };
    let per_class = (0..cm.num_classes())
        .map(|c| {
            let tp = cm.counts[c][c];
            let (row, col) = (cm.row_sum(c), cm.col_sum(c));
            let recall = ratio(tp, row);
            let precision = ratio(tp, col);
            // 2pr/(p+r) with p = tp/col and r = tp/row reduces to 2tp/(row+col).
            let f1 = match (recall, precision) {
                (Some(_), Some(_)) if tp == 0 => Some(Ratio::from_integer(0)),
                (Some(_), Some(_)) => Some(Ratio::new(2 * tp, row + col)),
                _ => None,
            };
            ClassScores {
                class: cm.class_names[c].clone(),
                recall,
                precision,
                f1,
            }
        })
        .collect();
    Ok(ClassMetrics {
        per_class,
        accuracy: Ratio::new(cm.trace(), total),
    })
}

/// `2pr/(p+r)`, or 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// A fraction in `[0, 1]` as a percentage with two decimals, rounded half up.
pub fn percent(r: Ratio<u64>) -> String {
    let hundredths = (r * 10_000u64 + Ratio::new(1, 2)).to_integer();
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

fn percent_opt(r: Option<Ratio<u64>>) -> String {
    r.map(percent).unwrap_or_else(|| "undefined".into())
}

fn percent_cell(r: Option<Ratio<u64>>) -> String {
    r.map(|v| format!("{}%", percent(v))).unwrap_or_else(|| "undefined".into())
}

/// Plain-text confusion matrix and metric table.
pub fn render_text(cm: &ConfusionMatrix, m: &ClassMetrics) -> String {
    let mut out = String::new();
    let label_w = cm
        .class_names
        .iter()
        .map(|n| n.len())
        .chain(["actual \\ predicted".len(), "accuracy".len()])
        .max()
        .unwrap();
    let col_w = cm
        .class_names
        .iter()
        .map(|n| n.len())
        .chain(cm.counts.iter().flatten().map(|v| v.to_string().len()))
        .max()
        .unwrap()
        .max(9);
    writeln!(out, "Confusion matrix (rows: actual, columns: predicted)").unwrap();
    write!(out, "{:<label_w$}", "actual \\ predicted").unwrap();
    for n in &cm.class_names {
        write!(out, "  {n:>col_w$}").unwrap();
    }
    out.push('\n');
    for (name, row) in cm.class_names.iter().zip(&cm.counts) {
        write!(out, "{name:<label_w$}").unwrap();
        for v in row {
            write!(out, "  {v:>col_w$}").unwrap();
        }
        out.push('\n');
    }
    out.push('\n');
    writeln!(out, "{:<label_w$}  {:>col_w$}  {:>col_w$}  {:>col_w$}", "class", "recall", "precision", "f1").unwrap();
    for s in &m.per_class {
        writeln!(
            out,
            "{:<label_w$}  {:>col_w$}  {:>col_w$}  {:>col_w$}",
            s.class,
            percent_cell(s.recall),
            percent_cell(s.precision),
            percent_cell(s.f1)
        )
        .unwrap();
    }
    writeln!(out, "{:<label_w$}  {:>col_w$}", "accuracy", format!("{}%", percent(m.accuracy))).unwrap();
    writeln!(out, "{:<label_w$}  {:>col_w$}", "samples", cm.total()).unwrap();
    out
}

/// `class,recall,precision,f1` rows plus a final `accuracy` row.
pub fn render_metrics_csv(m: &ClassMetrics) -> String {
    let mut out = String::from("class,recall,precision,f1\n");
    for s in &m.per_class {
        writeln!(
            out,
            "{},{},{},{}",
            s.class,
            percent_opt(s.recall),
            percent_opt(s.precision),
            percent_opt(s.f1)
        )
        .unwrap();
    }
    writeln!(out, "accuracy,{},,", percent(m.accuracy)).unwrap();
    out
}

pub fn render_confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("actual\\predicted");
    for n in &cm.class_names {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for (name, row) in cm.class_names.iter().zip(&cm.counts) {
        out.push_str(name);
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize)]
struct Heatmap<'a> {
    class_names: &'a [String],
    counts: &'a [Vec<u64>],
    /// Row-normalized percentages, two decimals; empty rows are all zero.
    row_percent: Vec<Vec<String>>,
}

pub fn render_heatmap_json(cm: &ConfusionMatrix) -> String {
    let row_percent = cm
        .counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            row.iter()
                .map(|&v| percent(if total == 0 { Ratio::from_integer(0) } else { Ratio::new(v, total) }))
                .collect()
        })
        .collect();
    let h = Heatmap {
        class_names: &cm.class_names,
        counts: &cm.counts,
        row_percent,
    };
    let mut s = serde_json::to_string_pretty(&h).expect("heatmap serializes");
    s.push('\n');
    s
}

pub const REPORT_TEXT: &str = "report.txt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const HEATMAP_JSON: &str = "heatmap.json";

/// Writes the four report files into `dir`.
pub fn write_report(dir: &Path, cm: &ConfusionMatrix, m: &ClassMetrics) -> Result<()> {
    io::create_dir(dir)?;
    io::write_file(&dir.join(REPORT_TEXT), render_text(cm, m).as_bytes())?;
    io::write_file(&dir.join(METRICS_CSV), render_metrics_csv(m).as_bytes())?;
    io::write_file(&dir.join(CONFUSION_CSV), render_confusion_csv(cm).as_bytes())?;
    io::write_file(&dir.join(HEATMAP_JSON), render_heatmap_json(cm).as_bytes())
}

/// Confusion matrix of a prediction file against participant labels.
pub fn confusion_from_predictions(preds: &PredictionFile, labels: &BTreeMap<String, Label>) -> Result<ConfusionMatrix> {
    if preds.class_names != Label::names() {
        return Err(Error::Config(format!(
            "prediction classes {:?} do not match {:?}",
            preds.class_names,
            Label::names()
        )));
    }
    let mut actual = Vec::with_capacity(preds.rows.len());
    let mut predicted = Vec::with_capacity(preds.rows.len());
    for r in &preds.rows {
        let label = labels
            .get(&r.participant_id)
            .ok_or_else(|| Error::Config(format!("no label for participant `{}`", r.participant_id)))?;
        actual.push(label.index());
        predicted.push(r.predicted());
    }
    ConfusionMatrix::from_indices(&actual, &predicted, preds.class_names.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        ConfusionMatrix {
            class_names: Label::names(),
            counts,
        }
    }

    #[test]
    fn diagonal_when_perfect() {
        let labels: Vec<Label> = (0..10).map(|i| Label::ALL[i % 3]).collect();
        let c = confusion(&labels, &labels).unwrap();
        assert_eq!(c.trace(), 10);
        assert_eq!(c.total(), 10);
        let m = metrics(&c).unwrap();
        assert_eq!(m.accuracy, Ratio::from_integer(1));
        assert!(m.per_class.iter().all(|s| s.f1 == Some(Ratio::from_integer(1))));
    }

    #[test]
    fn single_off_diagonal() {
        let c = confusion(&[Label::Depressed], &[Label::Control]).unwrap();
        assert_eq!(c.counts[2][1], 1);
        assert_eq!(c.total(), 1);
        assert!(confusion(&[Label::Control], &[]).is_err());
    }

    #[test]
    fn never_predicted_class_is_zero_or_undefined() {
        let c = cm(vec![vec![5, 1, 0], vec![2, 4, 0], vec![1, 2, 0]]);
        let m = metrics(&c).unwrap();
        let d = &m.per_class[2];
        assert_eq!((d.recall, d.precision, d.f1), (Some(Ratio::from_integer(0)), Some(Ratio::from_integer(0)), Some(Ratio::from_integer(0))));
        let s = metrics_with(&c, ZeroDivision::Strict).unwrap();
        assert_eq!(s.per_class[2].precision, None);
        assert_eq!(s.per_class[2].recall, Some(Ratio::from_integer(0)));
        assert!(metrics(&cm(vec![vec![0; 3]; 3])).is_err());
    }

    #[test]
    fn f1_from_rates() {
        assert_eq!(percent(Ratio::new(7770, 10000)), "77.70");
        assert!((f1_score(0.72, 0.8438) * 100.0 - 77.70).abs() < 0.005);
        assert!((f1_score(0.6667, 0.1333) * 100.0 - 22.22).abs() < 0.005);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn percent_rounds_half_up() {
        assert_eq!(percent(Ratio::new(1, 8)), "12.50");
        assert_eq!(percent(Ratio::new(1, 3)), "33.33");
        assert_eq!(percent(Ratio::new(2, 3)), "66.67");
        assert_eq!(percent(Ratio::new(1, 80000)), "0.00");
        assert_eq!(percent(Ratio::new(1, 20000)), "0.01");
        assert_eq!(percent(Ratio::from_integer(1)), "100.00");
    }

    #[test]
    fn reorder_permutes_scores() {
        let c = cm(vec![vec![5, 1, 2], vec![2, 4, 0], vec![1, 2, 3]]);
        let r = c.reorder(&[2, 0, 1]).unwrap();
        let (m, mr) = (metrics(&c).unwrap(), metrics(&r).unwrap());
        for (i, &o) in [2, 0, 1].iter().enumerate() {
            assert_eq!(mr.per_class[i], m.per_class[o]);
        }
        assert_eq!(m.accuracy, mr.accuracy);
        assert!(c.reorder(&[0, 0, 1]).is_err());
    }
}
