//! The embedding teacher and the distillation objective.
//!
//! The student minimizes `α·CE(s, y) + (1−α)·H(softmax(t/T), log_softmax(s/T))`
//! where `s` are the student logits on EEG input and `t` the frozen teacher's
//! logits for the viewed image. No `T²` rescaling is applied.

use serde::{Deserialize, Serialize};

use crate::dataset::{check_teacher_coverage, EmbeddingRecord, TeacherTable};
use crate::linear::{fit_logreg, FitSummary, LinearClassifier, LogRegConfig};
use crate::nn::loss::{cross_entropy, log_softmax, softmax, Objective};
use crate::nn::{train, Checkpoint, LossKind, Model, TrainConfig, TrainData};
use crate::{Error, Result};

pub type LinearTeacher = LinearClassifier;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            temperature: 1.0,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Parameter(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Fits the teacher on image embeddings with plain logistic regression.
pub fn train_teacher(records: &[EmbeddingRecord], num_classes: usize) -> Result<(LinearTeacher, FitSummary)> {
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.embedding.clone()).collect();
    let labels: Vec<usize> = records.iter().map(|r| r.label_index).collect();
    fit_logreg(&rows, &labels, num_classes, &LogRegConfig::default())
}

pub fn teacher_predict(teacher: &LinearTeacher, embedding: &[f64]) -> Result<Vec<f64>> {
    teacher.predict_proba(embedding)
}

/// Distillation loss and its gradient with respect to the student logits.
pub fn kd_loss(student: &[f64], teacher: &[f64], label: usize, cfg: &KdConfig) -> Result<(f64, Vec<f64>)> {
    if student.len() != teacher.len() {
        return Err(Error::Argument(format!(
            "student has {} logits, teacher {}",
            student.len(),
            teacher.len()
        )));
    }
    if label >= student.len() {
        return Err(Error::Argument(format!("label {label} outside {} classes", student.len())));
    }
    if student.iter().chain(teacher).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits in distillation loss".into()));
    }
    Ok(kd_terms(student, teacher, label, cfg))
}

fn kd_terms(student: &[f64], teacher: &[f64], label: usize, cfg: &KdConfig) -> (f64, Vec<f64>) {
    let t = cfg.temperature;
    let (ce, g_ce) = cross_entropy(student, label);
    let p_t = softmax(&teacher.iter().map(|v| v / t).collect::<Vec<_>>());
    let s_t: Vec<f64> = student.iter().map(|v| v / t).collect();
    let ls = log_softmax(&s_t);
    let soft: f64 = -p_t.iter().zip(&ls).map(|(p, l)| if *p > 0.0 { p * l } else { 0.0 }).sum::<f64>();
    let a = cfg.alpha;
    let loss = a * ce + (1.0 - a) * soft;
    let grad = g_ce
        .iter()
        .zip(ls.iter().zip(&p_t))
        .map(|(g, (l, p))| a * g + (1.0 - a) * (l.exp() - p) / t)
        .collect();
    (loss, grad)
}

/// Training objective holding one teacher logit row per training sample.
pub struct KdObjective {
    pub teacher_logits: Vec<Vec<f64>>,
    pub cfg: KdConfig,
}

impl Objective for KdObjective {
    fn sample(&self, logits: &[f64], row: usize, label: usize) -> (f64, Vec<f64>) {
        kd_terms(logits, &self.teacher_logits[row], label, &self.cfg)
    }
}

/// Trains `model` against labels and the stored teacher rows of each
/// training sample's image. `image_ids` is aligned with `train_set`.
pub fn distill_train(
    model: &mut Model,
    train_set: &TrainData,
    image_ids: &[String],
    val_set: &TrainData,
    teacher: &TeacherTable,
    kd: &KdConfig,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    kd.validate()?;
    if image_ids.len() != train_set.len() {
        return Err(Error::Argument("one image id per training sample required".into()));
    }
    check_teacher_coverage(teacher, image_ids.iter().map(String::as_str))?;
    let teacher_logits: Vec<Vec<f64>> = image_ids.iter().map(|id| teacher[id].as_logits()).collect();
    if let Some(row) = teacher_logits.iter().find(|r| r.len() != model.spec.num_classes) {
        return Err(Error::Data(format!(
            "teacher rows have {} classes, model {}",
            row.len(),
            model.spec.num_classes
        )));
    }
    let objective = KdObjective {
        teacher_logits,
        cfg: *kd,
    };
    let cfg = TrainConfig {
        loss: LossKind::Kd,
        ..cfg.clone()
    };
    let mut ck = train(model, train_set, val_set, &cfg, &objective)?;
    ck.meta = serde_json::json!({ "kd": kd });
    Ok(ck)
}
