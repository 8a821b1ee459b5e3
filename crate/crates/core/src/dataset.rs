//! On-disk dataset layout, ingestion, stratified splitting, synthetic EEG
//! generation and teacher-output files.
//!
//! A dataset directory looks like:
//!
//! ```text
//! <root>/manifest.json
//! <root>/labels.jsonl           one {trial_id, subject_id, label_index, image_id} per line
//! <root>/trials/<trial_id>.eegt 16-byte header + f32 payload, row = channel
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par;

pub const EEGT_MAGIC: &[u8; 4] = b"EEGT";
pub const EMBD_MAGIC: &[u8; 4] = b"EMBD";

/// Dataset geometry shared by every trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subject_ids: Vec<String>,
    pub class_names: Vec<String>,
    pub sampling_rate_hz: u32,
    pub trial_length_samples: u32,
    pub channel_count: u32,
}

impl DatasetManifest {
    /// 1000 Hz, 0.5 s trials, 128 electrodes, 40 classes.
    pub fn reference_geometry(subject_ids: Vec<String>, class_names: Vec<String>) -> Self {
        Self {
            subject_ids,
            class_names,
            sampling_rate_hz: 1000,
            trial_length_samples: 500,
            channel_count: 128,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn channels(&self) -> usize {
        self.channel_count as usize
    }

    pub fn trial_len(&self) -> usize {
        self.trial_length_samples as usize
    }

    pub fn fs(&self) -> f64 {
        f64::from(self.sampling_rate_hz)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sampling_rate_hz == 0 || self.trial_length_samples == 0 || self.channel_count == 0 {
            return Err(Error::Format(
                "manifest geometry fields must be positive".into(),
            ));
        }
        if self.class_names.len() < 2 {
            return Err(Error::Format("manifest needs at least 2 classes".into()));
        }
        let unique: BTreeSet<&String> = self.class_names.iter().collect();
        if unique.len() != self.class_names.len() {
            return Err(Error::Format("manifest class_names are not unique".into()));
        }
        let subjects: BTreeSet<&String> = self.subject_ids.iter().collect();
        if subjects.len() != self.subject_ids.len() || subjects.is_empty() {
            return Err(Error::Format(
                "manifest subject_ids must be non-empty and unique".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// One stimulus presentation: a `[channels × len]` block of samples in
/// microvolts, stored row-major with one row per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub trial_id: String,
    pub subject_id: String,
    pub label_index: usize,
    pub image_id: String,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Trial {
    pub fn new(
        trial_id: impl Into<String>,
        subject_id: impl Into<String>,
        label_index: usize,
        image_id: impl Into<String>,
        channels: usize,
        data: Vec<f64>,
    ) -> Self {
        assert!(channels > 0 && data.len() % channels == 0, "ragged trial");
        Self {
            trial_id: trial_id.into(),
            subject_id: subject_id.into(),
            label_index,
            image_id: image_id.into(),
            channels,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copy with the same metadata and a new payload of identical shape.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Self {
            data,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            trial_id: self.trial_id.clone(),
            subject_id: self.subject_id.clone(),
            label_index: self.label_index,
            image_id: self.image_id.clone(),
            channels: self.channels,
            data: Vec::new(),
        }
    }

    fn check(&self, manifest: &DatasetManifest) -> Result<()> {
        if self.channels != manifest.channels() || self.len() != manifest.trial_len() {
            return Err(Error::Data(format!(
                "trial {}: shape {}x{} does not match manifest {}x{}",
                self.trial_id,
                self.channels,
                self.len(),
                manifest.channel_count,
                manifest.trial_length_samples
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "trial {}: payload contains NaN or Inf",
                self.trial_id
            )));
        }
        if self.label_index >= manifest.num_classes() {
            return Err(Error::Data(format!(
                "trial {}: label_index {} out of range",
                self.trial_id, self.label_index
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let mut ids = BTreeSet::new();
        for t in &self.trials {
            t.check(&self.manifest)?;
            if !self.manifest.subject_ids.contains(&t.subject_id) {
                return Err(Error::Data(format!(
                    "trial {}: unknown subject {}",
                    t.trial_id, t.subject_id
                )));
            }
            if !ids.insert(t.trial_id.as_str()) {
                return Err(Error::Data(format!("duplicate trial_id {}", t.trial_id)));
            }
        }
        Ok(())
    }

    /// Trials of one subject, in dataset order.
    pub fn subject(&self, subject_id: &str) -> Dataset {
        Dataset {
            manifest: self.manifest.clone(),
            trials: self
                .trials
                .iter()
                .filter(|t| t.subject_id == subject_id)
                .cloned()
                .collect(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&Trial> {
        indices.iter().map(|&i| &self.trials[i]).collect()
    }

    /// Digest over the manifest and every trial's id, label and payload.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest.digest().as_bytes());
        for t in &self.trials {
            h.update(t.trial_id.as_bytes());
            h.update((t.label_index as u64).to_le_bytes());
            h.update(t.image_id.as_bytes());
            for v in &t.data {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    trial_id: String,
    subject_id: String,
    label_index: usize,
    image_id: String,
}

// ---------------------------------------------------------------------------
// EEGT binary records

pub fn write_eegt(path: &Path, channels: usize, samples: usize, data: &[f64]) -> Result<()> {
    debug_assert_eq!(channels * samples, data.len());
    let mut buf = Vec::with_capacity(16 + 4 * data.len());
    buf.extend_from_slice(EEGT_MAGIC);
    buf.extend_from_slice(&(channels as u32).to_le_bytes());
    buf.extend_from_slice(&(samples as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for v in data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an EEGT record, returning `(channels, samples, payload)`.
pub fn read_eegt(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != EEGT_MAGIC {
        return Err(Error::Format(format!(
            "{}: missing EEGT header",
            path.display()
        )));
    }
    let channels = u32_at(&bytes, 4) as usize;
    let samples = u32_at(&bytes, 8) as usize;
    let payload = &bytes[16..];
    if payload.len() != channels * samples * 4 {
        return Err(Error::Data(format!(
            "{}: payload holds {} bytes, header declares {}x{}",
            path.display(),
            payload.len(),
            channels,
            samples
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok((channels, samples, data))
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

// ---------------------------------------------------------------------------
// Directory import / export

pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    let trials_dir = root.join("trials");
    fs::create_dir_all(&trials_dir).map_err(|e| Error::io(&trials_dir, e))?;
    let manifest_path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&dataset.manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    let labels_path = root.join("labels.jsonl");
    let file = fs::File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut w = BufWriter::new(file);
    for t in &dataset.trials {
        let row = LabelRow {
            trial_id: t.trial_id.clone(),
            subject_id: t.subject_id.clone(),
            label_index: t.label_index,
            image_id: t.image_id.clone(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(&labels_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;

    let results = par::map(&dataset.trials, |t| {
        write_eegt(&trial_path(root, &t.trial_id), t.channels, t.len(), &t.data)
    });
    results.into_iter().collect()
}

pub fn trial_path(root: &Path, trial_id: &str) -> PathBuf {
    root.join("trials").join(format!("{trial_id}.eegt"))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::Format(format!("missing manifest.json in {}", root.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads and validates every trial listed in `labels.jsonl`.
///
/// Any subset of the nominal trial grid is accepted; the count is logged.
pub fn import_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let labels_path = root.join("labels.jsonl");
    let file = fs::File::open(&labels_path)
        .map_err(|_| Error::Format(format!("missing labels.jsonl in {}", root.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&labels_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: LabelRow = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("labels.jsonl line {}: {e}", lineno + 1)))?;
        rows.push(row);
    }

    let loaded = par::map(&rows, |row| -> Result<Trial> {
        let (channels, samples, data) = read_eegt(&trial_path(root, &row.trial_id))
            .map_err(|e| match e {
                Error::Data(msg) => Error::Data(format!("trial {}: {msg}", row.trial_id)),
                other => other,
            })?;
        if channels != manifest.channels() || samples != manifest.trial_len() {
            return Err(Error::Data(format!(
                "trial {}: shape {}x{} does not match manifest {}x{}",
                row.trial_id, channels, samples, manifest.channel_count, manifest.trial_length_samples
            )));
        }
        Ok(Trial {
            trial_id: row.trial_id.clone(),
            subject_id: row.subject_id.clone(),
            label_index: row.label_index,
            image_id: row.image_id.clone(),
            channels,
            data,
        })
    });
    let trials = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    let dataset = Dataset { manifest, trials };
    dataset.validate()?;
    log::info!("imported {} trials from {}", dataset.len(), root.display());
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// Stratified splitting

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Trial indices (into `Dataset::trials`) of each partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// SHA-256 over the sorted trial ids of one partition.
    pub fn partition_digest(dataset: &Dataset, indices: &[usize]) -> String {
        let ids: BTreeSet<&str> = indices
            .iter()
            .map(|&i| dataset.trials[i].trial_id.as_str())
            .collect();
        let mut h = Sha256::new();
        for id in ids {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Stratified split per (subject, class) cell. Cell sizes are apportioned by
/// largest remainder, so each partition is within one trial of its exact
/// share; a partition never ends up empty.
pub fn split_dataset(dataset: &Dataset, ratios: SplitRatios, seed: u64) -> Result<Splits> {
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "split ratios must be positive and sum to 1, got {r:?}"
        )));
    }
    let mut cells: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    for (i, t) in dataset.trials.iter().enumerate() {
        cells
            .entry((t.subject_id.as_str(), t.label_index))
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Splits {
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for ((subject, class), mut members) in cells {
        let n = members.len();
        if n < 3 {
            return Err(Error::Stratification(format!(
                "subject {subject} class {class} has {n} trials, need at least 3"
            )));
        }
        // Sort by trial id so the outcome does not depend on file order.
        members.sort_by(|&a, &b| dataset.trials[a].trial_id.cmp(&dataset.trials[b].trial_id));
        shuffle(&mut members, &mut rng);
        let counts = apportion(n, &r);
        let (a, rest) = members.split_at(counts[0]);
        let (b, c) = rest.split_at(counts[1]);
        out.train.extend_from_slice(a);
        out.val.extend_from_slice(b);
        out.test.extend_from_slice(c);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = (e + 1e-9).floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        if counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Synthetic generation

/// Gaussian amplitude envelope in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub center_s: f64,
    pub width_s: f64,
}

/// A sinusoidal component of a class signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub freq_hz: f64,
    pub amplitude: f64,
    /// Per-electrode gain; `None` means gain 1 on every channel.
    #[serde(default)]
    pub channel_gains: Option<Vec<f64>>,
    #[serde(default)]
    pub envelope: Option<Envelope>,
}

impl Tone {
    pub fn pure(freq_hz: f64, amplitude: f64) -> Self {
        Self {
            freq_hz,
            amplitude,
            channel_gains: None,
            envelope: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub tones: Vec<Tone>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub trials_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

/// Each trial is the sum of its class's tones (uniform random phase per tone)
/// plus white Gaussian noise. Samples are rounded to f32 precision so a
/// written-then-imported dataset is bit-identical.
///
/// Every trial draws from its own generator keyed by `(seed, trial ordinal)`,
/// so output is independent of thread scheduling.
pub fn generate_synthetic(
    manifest: &DatasetManifest,
    signatures: &[ClassSignature],
    cfg: &SynthConfig,
) -> Result<Dataset> {
    manifest.validate()?;
    if signatures.len() != manifest.num_classes() {
        return Err(Error::Parameter(format!(
            "{} signatures for {} classes",
            signatures.len(),
            manifest.num_classes()
        )));
    }
    let nyquist = manifest.fs() / 2.0;
    for (c, sig) in signatures.iter().enumerate() {
        for tone in &sig.tones {
            if !(tone.freq_hz > 0.0 && tone.freq_hz < nyquist) {
                return Err(Error::Parameter(format!(
                    "class {c}: tone at {} Hz outside (0, {nyquist})",
                    tone.freq_hz
                )));
            }
            if let Some(g) = &tone.channel_gains {
                if g.len() != manifest.channels() {
                    return Err(Error::Parameter(format!(
                        "class {c}: {} channel gains for {} channels",
                        g.len(),
                        manifest.channel_count
                    )));
                }
            }
        }
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::Parameter("noise_std must be non-negative".into()));
    }

    let num_classes = manifest.num_classes();
    let per_subject = num_classes * cfg.trials_per_class;
    let total = manifest.subject_ids.len() * per_subject;
    let channels = manifest.channels();
    let len = manifest.trial_len();
    let fs = manifest.fs();

    let trials = par::map_range(total, |ordinal| {
        let s = ordinal / per_subject;
        let within = ordinal % per_subject;
        let class = within / cfg.trials_per_class;
        let k = within % cfg.trials_per_class;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, ordinal as u64));
        let mut data = vec![0.0f64; channels * len];
        for tone in &signatures[class].tones {
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let w = std::f64::consts::TAU * tone.freq_hz / fs;
            let wave: Vec<f64> = (0..len)
                .map(|t| {
                    let env = tone.envelope.map_or(1.0, |e| {
                        let z = (t as f64 / fs - e.center_s) / e.width_s;
                        (-0.5 * z * z).exp()
                    });
                    tone.amplitude * env * (w * t as f64 + phase).sin()
                })
                .collect();
            for c in 0..channels {
                let g = tone.channel_gains.as_ref().map_or(1.0, |g| g[c]);
                if g == 0.0 {
                    continue;
                }
                for (dst, v) in data[c * len..(c + 1) * len].iter_mut().zip(&wave) {
                    *dst += g * v;
                }
            }
        }
        if cfg.noise_std > 0.0 {
            let normal = Normal::new(0.0, cfg.noise_std).expect("valid std");
            for v in data.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        for v in data.iter_mut() {
            *v = f64::from(*v as f32);
        }
        let subject = &manifest.subject_ids[s];
        Trial {
            trial_id: format!("{subject}_c{class:02}_k{k:03}"),
            subject_id: subject.clone(),
            label_index: class,
            image_id: synthetic_image_id(class, k),
            channels,
            data,
        }
    });
    Ok(Dataset {
        manifest: manifest.clone(),
        trials,
    })
}

/// Image ids are shared across subjects: every subject sees the same images.
pub fn synthetic_image_id(class: usize, k: usize) -> String {
    format!("img_c{class:02}_k{k:03}")
}

pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Class signatures confined to the 14-70 Hz band with three independent
/// cues per class: a distinct tone frequency `base_hz + c * step_hz`, a
/// burst latency shared by classes `c` and `c + latency_groups`, and a
/// sparse electrode topography.
pub fn banded_signatures(
    num_classes: usize,
    channels: usize,
    base_hz: f64,
    step_hz: f64,
    amplitude: f64,
    latency_groups: usize,
    trial_s: f64,
) -> Vec<ClassSignature> {
    let groups = latency_groups.max(1);
    (0..num_classes)
        .map(|c| {
            let g = c % groups;
            let center = if groups > 1 {
                trial_s * (0.15 + 0.7 * g as f64 / (groups - 1) as f64)
            } else {
                trial_s * 0.5
            };
            let width = trial_s * 0.06;
            let gains: Vec<f64> = (0..channels)
                .map(|ch| {
                    // Each class lights up about half of the electrodes.
                    let bit = mix_seed(c as u64, ch as u64 + 1) & 1;
                    if bit == 1 {
                        1.0
                    } else {
                        0.25
                    }
                })
                .collect();
            ClassSignature {
                tones: vec![Tone {
                    freq_hz: base_hz + c as f64 * step_hz,
                    amplitude,
                    channel_gains: Some(gains),
                    envelope: Some(Envelope {
                        center_s: center,
                        width_s: width,
                    }),
                }],
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Teacher outputs and embeddings

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Logits,
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherOutput {
    pub image_id: String,
    pub kind: TeacherKind,
    pub values: Vec<f64>,
}

impl TeacherOutput {
    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "teacher row {}: non-finite value",
                self.image_id
            )));
        }
        if self.kind == TeacherKind::Probabilities {
            if self.values.iter().any(|&v| v < 0.0) {
                return Err(Error::Data(format!(
                    "teacher row {}: negative probability",
                    self.image_id
                )));
            }
            let sum: f64 = self.values.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "teacher row {}: probabilities sum to {sum}",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    /// Logits whose softmax reproduces this row. Probabilities map to their
    /// logarithms (zeros clamp to a large negative value).
    pub fn as_logits(&self) -> Vec<f64> {
        match self.kind {
            TeacherKind::Logits => self.values.clone(),
            TeacherKind::Probabilities => self
                .values
                .iter()
                .map(|&p| if p > 0.0 { p.ln() } else { -1e4 })
                .collect(),
        }
    }
}

pub type TeacherTable = BTreeMap<String, TeacherOutput>;

pub fn load_teacher_outputs(path: &Path) -> Result<TeacherTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    let mut width = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TeacherOutput = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), lineno + 1)))?;
        row.validate()?;
        match width {
            None => width = Some(row.values.len()),
            Some(w) if w != row.values.len() => {
                return Err(Error::Data(format!(
                    "teacher row {} has {} values, expected {w}",
                    row.image_id,
                    row.values.len()
                )))
            }
            _ => {}
        }
        map.insert(row.image_id.clone(), row);
    }
    Ok(map)
}

pub fn write_teacher_outputs(path: &Path, rows: &TeacherTable) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows.values() {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Checks that every image id has a teacher row; the error lists all
/// missing ids.
pub fn check_teacher_coverage<'a>(
    table: &TeacherTable,
    image_ids: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let missing: BTreeSet<&str> = image_ids
        .into_iter()
        .filter(|id| !table.contains_key(*id))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        let list: Vec<&str> = missing.into_iter().collect();
        Err(Error::Data(format!(
            "teacher outputs missing for {} image ids: {}",
            list.len(),
            list.join(", ")
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub embedding: Vec<f64>,
    pub label_index: usize,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingId {
    image_id: String,
    label_index: usize,
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.embedding.len());
    if records.iter().any(|r| r.embedding.len() != dim) {
        return Err(Error::Data("embeddings have mixed dimensions".into()));
    }
    let mut buf = Vec::with_capacity(12 + records.len() * dim * 4);
    buf.extend_from_slice(EMBD_MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        for v in &r.embedding {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let ids: Vec<EmbeddingId> = records
        .iter()
        .map(|r| EmbeddingId {
            image_id: r.image_id.clone(),
            label_index: r.label_index,
        })
        .collect();
    buf.extend_from_slice(&serde_json::to_vec(&ids)?);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != EMBD_MAGIC {
        return Err(Error::Format(format!("{}: missing EMBD header", path.display())));
    }
    let count = u32_at(&bytes, 4) as usize;
    let dim = u32_at(&bytes, 8) as usize;
    let end = 12 + count * dim * 4;
    if bytes.len() < end {
        return Err(Error::Format(format!("{}: truncated payload", path.display())));
    }
    let ids: Vec<EmbeddingId> = serde_json::from_slice(&bytes[end..])
        .map_err(|e| Error::Format(format!("{}: id table: {e}", path.display())))?;
    if ids.len() != count {
        return Err(Error::Format(format!(
            "{}: id table has {} entries, header declares {count}",
            path.display(),
            ids.len()
        )));
    }
    let floats: Vec<f64> = bytes[12..end]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if floats.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{}: non-finite embedding", path.display())));
    }
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| EmbeddingRecord {
            image_id: id.image_id,
            embedding: floats[i * dim..(i + 1) * dim].to_vec(),
            label_index: id.label_index,
        })
        .collect())
}

/// Lookup from image id to embedding row.
pub fn index_embeddings(records: &[EmbeddingRecord]) -> HashMap<&str, &EmbeddingRecord> {
    records.iter().map(|r| (r.image_id.as_str(), r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_manifest(subjects: usize, classes: usize) -> DatasetManifest {
        DatasetManifest {
            subject_ids: (0..subjects).map(|s| format!("s{s}")).collect(),
            class_names: (0..classes).map(|c| format!("class{c}")).collect(),
            sampling_rate_hz: 1000,
            trial_length_samples: 128,
            channel_count: 8,
        }
    }

    fn cfg(tpc: usize, noise: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            trials_per_class: tpc,
            noise_std: noise,
            seed,
        }
    }

    #[test]
    fn empty_directory_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = import_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn channel_mismatch_names_the_trial() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_manifest(1, 2);
        let sigs = vec![ClassSignature { tones: vec![] }; 2];
        let d = generate_synthetic(&m, &sigs, &cfg(3, 1.0, 1)).unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let bad = &d.trials[2];
        write_eegt(
            &trial_path(dir.path(), &bad.trial_id),
            7,
            128,
            &vec![0.0; 7 * 128],
        )
        .unwrap();
        let err = import_dataset(dir.path()).unwrap_err();
        match err {
            Error::Data(msg) => assert!(msg.contains(&bad.trial_id), "{msg}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn nan_payload_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_manifest(1, 2);
        let sigs = vec![ClassSignature { tones: vec![] }; 2];
        let d = generate_synthetic(&m, &sigs, &cfg(3, 1.0, 1)).unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let mut payload = vec![0.0; 8 * 128];
        payload[17] = f64::NAN;
        write_eegt(&trial_path(dir.path(), &d.trials[0].trial_id), 8, 128, &payload).unwrap();
        assert!(matches!(import_dataset(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn zero_amplitude_signatures_give_zero_trials() {
        let m = small_manifest(1, 2);
        let sigs = vec![
            ClassSignature {
                tones: vec![Tone::pure(30.0, 0.0)]
            };
            2
        ];
        let d = generate_synthetic(&m, &sigs, &cfg(2, 0.0, 3)).unwrap();
        assert!(d.trials.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn nyquist_frequency_rejected() {
        let m = small_manifest(1, 2);
        let sigs = vec![
            ClassSignature {
                tones: vec![Tone::pure(500.0, 1.0)]
            };
            2
        ];
        assert!(matches!(
            generate_synthetic(&m, &sigs, &cfg(2, 0.0, 3)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn split_counts_40_5_5() {
        let m = small_manifest(2, 3);
        let sigs = vec![ClassSignature { tones: vec![] }; 3];
        let d = generate_synthetic(&m, &sigs, &cfg(50, 1.0, 9)).unwrap();
        let s = split_dataset(&d, SplitRatios::default(), 7).unwrap();
        for subject in &m.subject_ids {
            for class in 0..3 {
                let count = |idx: &[usize]| {
                    idx.iter()
                        .filter(|&&i| {
                            let t = &d.trials[i];
                            &t.subject_id == subject && t.label_index == class
                        })
                        .count()
                };
                assert_eq!(
                    (count(&s.train), count(&s.val), count(&s.test)),
                    (40, 5, 5)
                );
            }
        }
        let again = split_dataset(&d, SplitRatios::default(), 7).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn tiny_cell_is_a_stratification_error() {
        let m = small_manifest(1, 2);
        let sigs = vec![ClassSignature { tones: vec![] }; 2];
        let d = generate_synthetic(&m, &sigs, &cfg(2, 1.0, 9)).unwrap();
        assert!(matches!(
            split_dataset(&d, SplitRatios::default(), 1),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn bad_ratios_rejected() {
        let m = small_manifest(1, 2);
        let d = Dataset {
            manifest: m,
            trials: vec![],
        };
        let r = SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.2,
        };
        assert!(split_dataset(&d, r, 1).is_err());
    }

    #[test]
    fn apportion_never_leaves_a_partition_empty() {
        assert_eq!(apportion(3, &[0.8, 0.1, 0.1]), [1, 1, 1]);
        assert_eq!(apportion(50, &[0.8, 0.1, 0.1]), [40, 5, 5]);
        assert_eq!(apportion(10, &[0.5, 0.25, 0.25]).iter().sum::<usize>(), 10);
    }

    #[test]
    fn teacher_simplex_validation() {
        let mut values = vec![0.0; 40];
        values[0] = 0.5;
        values[1] = 0.5;
        let ok = TeacherOutput {
            image_id: "a".into(),
            kind: TeacherKind::Probabilities,
            values: values.clone(),
        };
        assert!(ok.validate().is_ok());
        values[0] = 0.6;
        values[1] = 0.6;
        let bad = TeacherOutput {
            values,
            ..ok.clone()
        };
        assert!(matches!(bad.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn teacher_coverage_lists_missing_ids() {
        let mut table = TeacherTable::new();
        table.insert(
            "a".into(),
            TeacherOutput {
                image_id: "a".into(),
                kind: TeacherKind::Logits,
                values: vec![0.0, 1.0],
            },
        );
        let err = check_teacher_coverage(&table, ["a", "b", "c"]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('b') && msg.contains('c'), "{msg}");
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.bin");
        let records: Vec<EmbeddingRecord> = (0..5)
            .map(|i| EmbeddingRecord {
                image_id: format!("img{i}"),
                embedding: vec![i as f64 * 0.5, -1.0, 2.25],
                label_index: i % 2,
            })
            .collect();
        write_embeddings(&path, &records).unwrap();
        assert_eq!(load_embeddings(&path).unwrap(), records);
    }
}
