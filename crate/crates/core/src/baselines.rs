//! Non-neural baselines: hand-built temporal features, optional PCA, and
//! logistic regression on top.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::Trial;
use crate::linear::{fit_logreg, FitSummary, LinearClassifier, LogRegConfig};
use crate::{par, Error, Result};

pub const FEAT_MAGIC: &[u8; 4] = b"FEAT";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    /// Mean over channels of the squared signal, one feature per sample.
    SquaredMean,
    /// Per-channel non-overlapping window means.
    Windowed { window: usize },
    /// Windowed means projected onto principal components.
    WindowedPca { window: usize, variance_target: f64 },
}

impl FeatureKind {
    pub fn describe(&self) -> String {
        match self {
            FeatureKind::SquaredMean => "squared_mean".into(),
            FeatureKind::Windowed { window } => format!("windowed_{window}"),
            FeatureKind::WindowedPca {
                window,
                variance_target,
            } => format!("windowed_{window}_pca_{variance_target}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    /// Which transform produced the features.
    pub descriptor: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(descriptor: impl Into<String>, rows: Vec<Vec<f64>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self {
            descriptor: descriptor.into(),
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// `FEAT`, u32 rows, u32 cols, u32 descriptor length, descriptor bytes,
    /// then row-major f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.descriptor.len() + 4 * self.data.len());
        out.extend_from_slice(FEAT_MAGIC);
        for v in [self.rows, self.cols, self.descriptor.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(self.descriptor.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != FEAT_MAGIC {
            return Err(Error::Format("missing FEAT header".into()));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (rows, cols, dlen) = (word(4), word(8), word(12));
        let start = 16 + dlen;
        if bytes.len() != start + 4 * rows * cols {
            return Err(Error::Format("FEAT payload length mismatch".into()));
        }
        let descriptor = String::from_utf8(bytes[16..start].to_vec())
            .map_err(|_| Error::Format("FEAT descriptor is not UTF-8".into()))?;
        let data = bytes[start..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            descriptor,
            rows,
            cols,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn squared_mean_row(trial: &Trial) -> Vec<f64> {
    let len = trial.len();
    let mut row = vec![0.0; len];
    for c in 0..trial.channels {
        for (r, v) in row.iter_mut().zip(trial.channel(c)) {
            *r += v * v;
        }
    }
    row.iter_mut().for_each(|v| *v /= trial.channels as f64);
    row
}

pub fn features_squared_mean(trials: &[&Trial]) -> FeatureMatrix {
    FeatureMatrix::from_rows(
        FeatureKind::SquaredMean.describe(),
        par::map(trials, |t| squared_mean_row(t)),
    )
}

pub fn windowed_row(trial: &Trial, window: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(trial.channels * (trial.len() / window));
    for c in 0..trial.channels {
        row.extend(
            trial
                .channel(c)
                .chunks_exact(window)
                .map(|w| w.iter().sum::<f64>() / window as f64),
        );
    }
    row
}

/// Non-overlapping window means per channel, channels-major; a trailing
/// partial window is dropped.
pub fn features_windowed(trials: &[&Trial], window: usize) -> Result<FeatureMatrix> {
    if window == 0 {
        return Err(Error::Parameter("window must be positive".into()));
    }
    if let Some(t) = trials.iter().find(|t| t.len() < window) {
        return Err(Error::Parameter(format!(
            "window {window} exceeds trial {} length {}",
            t.trial_id,
            t.len()
        )));
    }
    Ok(FeatureMatrix::from_rows(
        FeatureKind::Windowed { window }.describe(),
        par::map(trials, |t| windowed_row(t, window)),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Row-major `[dim × dim]`, one unit-norm component per row, sorted by
    /// decreasing variance.
    pub components: Vec<f64>,
    /// Explained-variance ratio of every component.
    pub explained_ratio: Vec<f64>,
    pub retained: usize,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.components[i * d..(i + 1) * d]
    }

    /// Projection onto the first `k` components.
    pub fn project(&self, x: &[f64], k: usize) -> Vec<f64> {
        (0..k)
            .map(|i| {
                self.component(i)
                    .iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(c, (v, m))| c * (v - m))
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (i, zi) in z.iter().enumerate() {
            for (v, c) in x.iter_mut().zip(self.component(i)) {
                *v += zi * c;
            }
        }
        x
    }
}

/// Mean-centred PCA via the covariance eigendecomposition; keeps the fewest
/// components whose cumulative explained ratio reaches `variance_target`.
pub fn pca_fit(x: &FeatureMatrix, variance_target: f64) -> Result<PcaModel> {
    if x.rows < 2 {
        return Err(Error::Argument("PCA needs at least two rows".into()));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::Parameter(format!("variance target {variance_target} outside (0, 1]")));
    }
    let (n, d) = (x.rows, x.cols);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| x.data[i * d + j] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let total: f64 = cov.diagonal().iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("features have zero variance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::with_capacity(d * d);
    let mut explained_ratio = Vec::with_capacity(d);
    for &j in &order {
        components.extend(eig.eigenvectors.column(j).iter());
        explained_ratio.push(eig.eigenvalues[j].max(0.0) / total);
    }
    let mut cum = 0.0;
    let mut retained = d;
    for (i, r) in explained_ratio.iter().enumerate() {
        cum += r;
        if cum >= variance_target - 1e-12 {
            retained = i + 1;
            break;
        }
    }
    Ok(PcaModel {
        mean,
        components,
        explained_ratio,
        retained,
    })
}

pub fn pca_transform(model: &PcaModel, x: &FeatureMatrix) -> FeatureMatrix {
    FeatureMatrix::from_rows(
        format!("{}_pca{}", x.descriptor, model.retained),
        (0..x.rows).map(|i| model.project(x.row(i), model.retained)).collect(),
    )
}

/// Column z-scoring fitted on training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &FeatureMatrix) -> Self {
        let n = x.rows.max(1) as f64;
        let mut mean = vec![0.0; x.cols];
        let mut var = vec![0.0; x.cols];
        for i in 0..x.rows {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n;
            }
        }
        for i in 0..x.rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

pub fn train_logreg(
    x: &FeatureMatrix,
    labels: &[usize],
    num_classes: usize,
    l2: f64,
) -> Result<(LinearClassifier, FitSummary)> {
    let cfg = LogRegConfig {
        l2,
        ..LogRegConfig::default()
    };
    fit_logreg(&x.to_rows(), labels, num_classes, &cfg)
}

/// A fitted feature pipeline plus classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub features: FeatureKind,
    pub pca: Option<PcaModel>,
    pub scaler: Standardizer,
    pub classifier: LinearClassifier,
}

fn raw_features(kind: FeatureKind, trials: &[&Trial]) -> Result<FeatureMatrix> {
    match kind {
        FeatureKind::SquaredMean => Ok(features_squared_mean(trials)),
        FeatureKind::Windowed { window } | FeatureKind::WindowedPca { window, .. } => {
            features_windowed(trials, window)
        }
    }
}

impl BaselineModel {
    pub fn fit(
        kind: FeatureKind,
        trials: &[&Trial],
        labels: &[usize],
        num_classes: usize,
        l2: f64,
    ) -> Result<(Self, FitSummary)> {
        let mut x = raw_features(kind, trials)?;
        let pca = match kind {
            FeatureKind::WindowedPca { variance_target, .. } => {
                let p = pca_fit(&x, variance_target)?;
                log::info!("PCA keeps {} of {} components", p.retained, p.dim());
                x = pca_transform(&p, &x);
                Some(p)
            }
            _ => None,
        };
        let scaler = Standardizer::fit(&x);
        let scaled = FeatureMatrix::from_rows(
            x.descriptor.clone(),
            (0..x.rows).map(|i| scaler.apply(x.row(i))).collect(),
        );
        let (classifier, summary) = train_logreg(&scaled, labels, num_classes, l2)?;
        Ok((
            Self {
                features: kind,
                pca,
                scaler,
                classifier,
            },
            summary,
        ))
    }

    pub fn predict_proba(&self, trials: &[&Trial]) -> Result<Vec<Vec<f64>>> {
        let mut x = raw_features(self.features, trials)?;
        if let Some(p) = &self.pca {
            x = pca_transform(p, &x);
        }
        let rows: Vec<f64> = (0..x.rows).flat_map(|i| self.scaler.apply(x.row(i))).collect();
        Ok(self.classifier.predict_proba_batch(&rows))
    }
}
