//! Multinomial logistic regression fitted by full-batch Adam. Shared by the
//! embedding teacher and the classical baselines.

use serde::{Deserialize, Serialize};

use crate::nn::loss::{log_softmax, softmax};
use crate::nn::tensor::gemm;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major `[num_classes × dim]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Logits are divided by this before the softmax.
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRegConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once the loss changes by less than this between iterations.
    pub tolerance: f64,
    pub l2: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_iters: 2000,
            tolerance: 1e-7,
            l2: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub iterations: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

impl LinearClassifier {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            num_classes,
            dim,
            weight: vec![0.0; num_classes * dim],
            bias: vec![0.0; num_classes],
            temperature: 1.0,
        }
    }

    /// Logits for a row-major `[n × dim]` matrix.
    pub fn logits_batch(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() / self.dim.max(1);
        let mut out: Vec<f64> = (0..n).flat_map(|_| self.bias.iter().copied()).collect();
        if self.dim > 0 {
            gemm(false, true, n, self.num_classes, self.dim, x, &self.weight, 1.0, &mut out);
        }
        out
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Argument(format!(
                "input has dimension {}, classifier expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(self.logits_batch(x))
    }

    /// `softmax((W·x + b) / T)`.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z: Vec<f64> = self.logits(x)?.iter().map(|v| v / self.temperature).collect();
        Ok(softmax(&z))
    }

    pub fn predict_proba_batch(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.logits_batch(x)
            .chunks(self.num_classes)
            .map(|z| softmax(&z.iter().map(|v| v / self.temperature).collect::<Vec<_>>()))
            .collect()
    }
}

/// Fits `rows` (each of equal length) to `labels` in `0..num_classes`.
pub fn fit_logreg(
    rows: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    cfg: &LogRegConfig,
) -> Result<(LinearClassifier, FitSummary)> {
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::Argument("need one label per non-empty feature row".into()));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Argument("feature rows differ in length".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature value".into()));
    }
    if labels.iter().any(|&y| y >= num_classes) {
        return Err(Error::Argument("label outside class range".into()));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Argument("logistic regression needs at least two classes".into()));
    }

    let n = rows.len();
    let k = num_classes;
    let x: Vec<f64> = rows.iter().flatten().copied().collect();
    let mut model = LinearClassifier::zeros(k, dim);
    let np = k * dim + k;
    let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut prev = f64::INFINITY;
    let mut loss = f64::INFINITY;
    let mut iterations = 0;
    let mut dz = vec![0.0; n * k];
    let mut grad = vec![0.0; np];

    for it in 1..=cfg.max_iters {
        iterations = it;
        let z = model.logits_batch(&x);
        loss = 0.0;
        for (i, row) in z.chunks(k).enumerate() {
            let lp = log_softmax(row);
            loss -= lp[labels[i]];
            for (j, l) in lp.iter().enumerate() {
                dz[i * k + j] = (l.exp() - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        loss /= n as f64;
        loss += 0.5 * cfg.l2 * model.weight.iter().map(|w| w * w).sum::<f64>();
        if (prev - loss).abs() < cfg.tolerance {
            break;
        }
        prev = loss;

        let (gw, gb) = grad.split_at_mut(k * dim);
        gemm(true, false, k, dim, n, &dz, &x, 0.0, gw);
        for (g, w) in gw.iter_mut().zip(&model.weight) {
            *g += cfg.l2 * w;
        }
        gb.iter_mut().for_each(|g| *g = 0.0);
        for row in dz.chunks(k) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        let bc1 = 1.0 - b1.powi(it as i32);
        let bc2 = 1.0 - b2.powi(it as i32);
        for p in 0..np {
            m[p] = b1 * m[p] + (1.0 - b1) * grad[p];
            v[p] = b2 * v[p] + (1.0 - b2) * grad[p] * grad[p];
            let step = cfg.learning_rate * (m[p] / bc1) / ((v[p] / bc2).sqrt() + eps);
            if p < k * dim {
                model.weight[p] -= step;
            } else {
                model.bias[p - k * dim] -= step;
            }
        }
    }

    let preds = model.logits_batch(&x);
    let correct = preds
        .chunks(k)
        .zip(labels)
        .filter(|(z, &y)| crate::nn::train::argmax(z) == y)
        .count();
    Ok((
        model,
        FitSummary {
            iterations,
            final_loss: loss,
            train_accuracy: correct as f64 / n as f64,
        },
    ))
}
