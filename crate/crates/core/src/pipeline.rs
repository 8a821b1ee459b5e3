//! Glue between the stages: synthetic datasets, image preparation, model
//! inputs, teachers for synthetic runs, and per-subject evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    banded_signatures, generate_synthetic, Dataset, DatasetManifest, SynthConfig, TeacherKind, TeacherOutput,
    TeacherTable,
};
use crate::dsp::Preprocessor;
use crate::metrics::{check_disjoint, EvalReport, Metrics, SubjectMetrics};
use crate::nn::model::stack_images;
use crate::nn::{Model, ModelSpec, TrainData};
use crate::tfd::{Representation, TfdImage};
use crate::{Error, Result};

/// Parameters of the 40-class synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub subjects: usize,
    pub channels: usize,
    pub classes: usize,
    pub trials_per_class: usize,
    pub base_hz: f64,
    pub step_hz: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    pub latency_groups: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            subjects: 1,
            channels: 8,
            classes: 40,
            trials_per_class: 30,
            base_hz: 15.0,
            step_hz: 1.0,
            amplitude: 1.0,
            noise_std: 0.3,
            latency_groups: 20,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            subject_ids: (1..=self.subjects).map(|s| format!("sub{s:02}")).collect(),
            class_names: (0..self.classes).map(|c| format!("class{c:02}")).collect(),
            sampling_rate_hz: 1000,
            trial_length_samples: 500,
            channel_count: self.channels as u32,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        let m = self.manifest();
        let sigs = banded_signatures(
            self.classes,
            self.channels,
            self.base_hz,
            self.step_hz,
            self.amplitude,
            self.latency_groups,
            m.trial_len() as f64 / m.fs(),
        );
        generate_synthetic(
            &m,
            &sigs,
            &SynthConfig {
                trials_per_class: self.trials_per_class,
                noise_std: self.noise_std,
                seed: self.seed,
            },
        )
    }
}

/// Preprocesses every trial and converts it to a time-frequency image.
pub fn prepare_images(ds: &Dataset, pre: &Preprocessor, rep: &Representation) -> Result<Vec<TfdImage>> {
    let clean: Vec<_> = pre.preprocess_all(&ds.trials)?.into_iter().map(|p| p.trial).collect();
    rep.transform_all(&clean, ds.manifest.fs())
}

/// Model inputs for the selected trials.
pub fn train_data(spec: &ModelSpec, ds: &Dataset, images: &[TfdImage], indices: &[usize]) -> Result<TrainData> {
    let refs: Vec<&TfdImage> = indices.iter().map(|&i| &images[i]).collect();
    let x = stack_images(spec, &refs)?;
    Ok(TrainData::new(
        x,
        indices.iter().map(|&i| ds.trials[i].label_index).collect(),
        indices.iter().map(|&i| ds.trials[i].trial_id.clone()).collect(),
    ))
}

/// Class probabilities for `data`, in batches.
pub fn predict_data(model: &Model, data: &TrainData, batch: usize) -> Vec<Vec<f64>> {
    let rows: Vec<usize> = (0..data.len()).collect();
    rows.chunks(batch.max(1))
        .flat_map(|c| model.predict_tensor(&data.x.gather(c)))
        .collect()
}

/// A teacher that assigns probability 1 to each image's true class.
pub fn one_hot_teacher(ds: &Dataset) -> TeacherTable {
    let k = ds.manifest.num_classes();
    ds.trials
        .iter()
        .map(|t| {
            let mut values = vec![0.0; k];
            values[t.label_index] = 1.0;
            (
                t.image_id.clone(),
                TeacherOutput {
                    image_id: t.image_id.clone(),
                    kind: TeacherKind::Probabilities,
                    values,
                },
            )
        })
        .collect()
}

/// Control teacher: rows shuffled across image ids, so soft targets carry
/// no information about the viewed image.
pub fn permuted_teacher(table: &TeacherTable, seed: u64) -> TeacherTable {
    let ids: Vec<&String> = table.keys().collect();
    let mut rows: Vec<&TeacherOutput> = table.values().collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.into_iter()
        .zip(rows)
        .map(|(id, row)| {
            (
                id.clone(),
                TeacherOutput {
                    image_id: id.clone(),
                    ..row.clone()
                },
            )
        })
        .collect()
}

/// Scores one subject's held-out trials after checking they were not used
/// for training.
pub fn score_subject(
    subject_id: &str,
    probs: &[Vec<f64>],
    data: &TrainData,
    train_ids: &[String],
) -> Result<SubjectMetrics> {
    check_disjoint(train_ids.iter().map(String::as_str), &data.ids)?;
    if probs.len() != data.len() {
        return Err(Error::Argument("one probability row per trial required".into()));
    }
    Ok(SubjectMetrics {
        subject_id: subject_id.to_string(),
        trials: data.len(),
        metrics: Metrics::compute(probs, &data.labels)?,
    })
}

pub fn report(method: &str, config_hash: &str, subjects: Vec<SubjectMetrics>) -> Result<EvalReport> {
    let r = EvalReport::aggregate(method, config_hash, subjects)?;
    for s in &r.subjects {
        let m = s.metrics;
        if !(m.top1 <= m.top3 && m.top3 <= m.top5) {
            return Err(Error::Numeric(format!("top-k not monotone for {}", s.subject_id)));
        }
    }
    Ok(r)
}
