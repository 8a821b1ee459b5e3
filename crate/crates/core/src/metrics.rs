//! Classification metrics and per-subject report tables.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::nn::train::argmax;
use crate::{Error, Result};

fn check_rows(probs: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let k = probs[0].len();
    if probs.iter().any(|r| r.len() != k) {
        return Err(Error::Argument("probability rows differ in length".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Argument(format!("label {y} outside {k} classes")));
    }
    Ok(k)
}

/// Position of `label` when classes are ordered by decreasing score, ties
/// broken toward the lower class index.
pub fn rank_of(row: &[f64], label: usize) -> usize {
    let p = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < label))
        .count()
}

pub fn topk_accuracy(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    let classes = check_rows(probs, labels)?;
    if k == 0 || k > classes {
        return Err(Error::Argument(format!("k = {k} outside 1..={classes}")));
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(row, &y)| rank_of(row, y) < k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn confusion(pred: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if pred.is_empty() || pred.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &y) in pred.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::Argument(format!("class index outside 0..{classes}")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroF1 {
    pub value: f64,
    /// Classes absent from both predictions and labels; each scored 0.
    pub absent: Vec<usize>,
}

pub fn macro_f1(pred: &[usize], labels: &[usize], classes: usize) -> Result<MacroF1> {
    let m = confusion(pred, labels, classes)?;
    let mut sum = 0.0;
    let mut absent = Vec::new();
    for c in 0..classes {
        let tp = m[c][c] as f64;
        let support: usize = m[c].iter().sum();
        let predicted: usize = m.iter().map(|r| r[c]).sum();
        if support == 0 && predicted == 0 {
            absent.push(c);
            continue;
        }
        sum += 2.0 * tp / (support + predicted) as f64;
    }
    Ok(MacroF1 {
        value: sum / classes as f64,
        absent,
    })
}

/// Cohen's kappa with chance agreement from the marginal products.
pub fn cohens_kappa(pred: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    let m = confusion(pred, labels, classes)?;
    let n = pred.len() as f64;
    let po = (0..classes).map(|c| m[c][c]).sum::<usize>() as f64 / n;
    let pe: f64 = (0..classes)
        .map(|c| {
            let row: usize = m[c].iter().sum();
            let col: usize = m.iter().map(|r| r[c]).sum();
            row as f64 * col as f64 / (n * n)
        })
        .sum();
    if (1.0 - pe).abs() < 1e-15 {
        return Ok(if po == 1.0 { 1.0 } else { 0.0 });
    }
    Ok((po - pe) / (1.0 - pe))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    pub macro_f1: f64,
    pub kappa: f64,
}

impl Metrics {
    pub fn compute(probs: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        let classes = check_rows(probs, labels)?;
        let pred: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
        Ok(Self {
            top1: topk_accuracy(probs, labels, 1)?,
            top3: topk_accuracy(probs, labels, 3.min(classes))?,
            top5: topk_accuracy(probs, labels, 5.min(classes))?,
            macro_f1: macro_f1(&pred, labels, classes)?.value,
            kappa: cohens_kappa(&pred, labels, classes)?,
        })
    }

    fn fields(&self) -> [f64; 5] {
        [self.top1, self.top3, self.top5, self.macro_f1, self.kappa]
    }

    fn from_fields(f: [f64; 5]) -> Self {
        Self {
            top1: f[0],
            top3: f[1],
            top5: f[2],
            macro_f1: f[3],
            kappa: f[4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    pub trials: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub config_hash: String,
    pub subjects: Vec<SubjectMetrics>,
    pub mean: Metrics,
    /// Population standard deviation across subjects.
    pub std: Metrics,
}

impl EvalReport {
    pub fn aggregate(method: impl Into<String>, config_hash: impl Into<String>, subjects: Vec<SubjectMetrics>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Argument("report needs at least one subject".into()));
        }
        let n = subjects.len() as f64;
        let mut mean = [0.0; 5];
        for s in &subjects {
            for (m, v) in mean.iter_mut().zip(s.metrics.fields()) {
                *m += v / n;
            }
        }
        let mut var = [0.0; 5];
        for s in &subjects {
            for ((q, v), m) in var.iter_mut().zip(s.metrics.fields()).zip(mean) {
                *q += (v - m).powi(2) / n;
            }
        }
        Ok(Self {
            method: method.into(),
            config_hash: config_hash.into(),
            subjects,
            mean: Metrics::from_fields(mean),
            std: Metrics::from_fields(var.map(f64::sqrt)),
        })
    }
}

/// Refuses evaluation trials that were used for fitting.
pub fn check_disjoint<'a>(train_ids: impl IntoIterator<Item = &'a str>, eval_ids: &[String]) -> Result<()> {
    let train: HashSet<&str> = train_ids.into_iter().collect();
    let overlap: Vec<&str> = eval_ids
        .iter()
        .map(String::as_str)
        .filter(|id| train.contains(id))
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::Contamination(format!(
            "{} evaluation trials were used in training (first: {})",
            overlap.len(),
            overlap[0]
        )))
    }
}

const COLUMNS: [&str; 5] = ["Top-1", "Top-3", "Top-5", "F1", "Kappa"];

/// Aligned text table, one row per method, cells as `mean (std)`.
pub fn render_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}", "Method");
    for c in COLUMNS {
        let _ = write!(out, "  {c:>15}");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<width$}", r.method);
        for (m, s) in r.mean.fields().iter().zip(r.std.fields()) {
            let _ = write!(out, "  {:>15}", format!("{m:.4} ({s:.4})"));
        }
        out.push('\n');
    }
    out
}

pub fn render_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("method,config_hash");
    for c in ["top1", "top3", "top5", "f1", "kappa"] {
        let _ = write!(out, ",{c}_mean,{c}_std");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{},{}", r.method, r.config_hash);
        for (m, s) in r.mean.fields().iter().zip(r.std.fields()) {
            let _ = write!(out, ",{m},{s}");
        }
        out.push('\n');
    }
    out
}
