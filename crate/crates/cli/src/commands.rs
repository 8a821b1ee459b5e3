use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use spectromind::baselines::{BaselineModel, FeatureKind};
use spectromind::dataset::{
    import_dataset, load_embeddings, load_teacher_outputs, split_dataset, write_dataset, write_teacher_outputs,
    Dataset, Splits, TeacherKind, TeacherOutput, TeacherTable, Trial, EMBD_MAGIC,
};
use spectromind::distill::{distill_train, teacher_predict, train_teacher};
use spectromind::dsp::Preprocessor;
use spectromind::metrics::{check_disjoint, render_csv, render_table, EvalReport, Metrics, SubjectMetrics};
use spectromind::nn::train::argmax;
use spectromind::nn::{build_model, train, Checkpoint, CrossEntropy, Model, ModelSpec, TrainConfig};
use spectromind::pipeline::{one_hot_teacher, predict_data, report, train_data};
use spectromind::stream::{stream_simulate, LatencyReport, Recording, StreamConfig};
use spectromind::tfd::{Representation, TfdImage, TfdKind};
use spectromind::Error;
use spectromind_recon::{reconstruct, Client, ClientConfig, ReconItem, ReconSettings, RowStatus};

use crate::config::{hash_file, hash_json, RunConfig};
use crate::error::{CliError, CliResult};
use crate::stages::{read_json, stage_hash, write_atomic, write_json, RunDir, StageRecord};

pub struct Ctx {
    pub cfg: RunConfig,
    pub cfg_hash: String,
    pub run: RunDir,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: PathBuf) -> CliResult<Self> {
        cfg.validate()?;
        let cfg_hash = hash_json(&cfg);
        log::info!("run seed {} (config {})", cfg.seed, &cfg_hash[..12]);
        Ok(Self {
            cfg,
            cfg_hash,
            run: RunDir::new(out),
        })
    }

    fn record(&self, stage: &str, hash: String, digest: &str, outputs: serde_json::Value) -> CliResult<StageRecord> {
        let rec = StageRecord {
            stage: stage.to_string(),
            hash,
            dataset_digest: digest.to_string(),
            config_hash: self.cfg_hash.clone(),
            seed: self.cfg.seed,
            outputs,
        };
        self.run.record(&rec)?;
        Ok(rec)
    }
}

/// A trained method: the model family plus its input representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Cnn(TfdKind),
    Kd(TfdKind),
    Conv1d,
    Baseline(FeatureKind),
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Cnn(k) => format!("cnn-{k}"),
            Method::Kd(k) => format!("kd-{k}"),
            Method::Conv1d => "conv1d".into(),
            Method::Baseline(FeatureKind::SquaredMean) => "lr-squared".into(),
            Method::Baseline(FeatureKind::Windowed { .. }) => "lr-windowed".into(),
            Method::Baseline(FeatureKind::WindowedPca { .. }) => "pca-lr".into(),
        }
    }

    /// Parses a method name, taking baseline parameters from `cfg`.
    pub fn parse(s: &str, cfg: &RunConfig) -> CliResult<Self> {
        let window = cfg.window;
        Ok(match s {
            "conv1d" => Method::Conv1d,
            "lr-squared" => Method::Baseline(FeatureKind::SquaredMean),
            "lr-windowed" => Method::Baseline(FeatureKind::Windowed { window }),
            "pca-lr" => Method::Baseline(FeatureKind::WindowedPca {
                window,
                variance_target: cfg.pca_variance,
            }),
            "cnn" => Method::Cnn(cfg.representation),
            other => match other.split_once('-') {
                Some(("cnn", k)) => Method::Cnn(TfdKind::from_str(k)?),
                Some(("kd", k)) => Method::Kd(TfdKind::from_str(k)?),
                _ => return Err(CliError::Config(format!("unknown method {other}"))),
            },
        })
    }

    fn is_network(&self) -> bool {
        !matches!(self, Method::Baseline(_))
    }

    fn input_kind(&self) -> Option<TfdKind> {
        match self {
            Method::Cnn(k) | Method::Kd(k) => Some(*k),
            Method::Conv1d => Some(TfdKind::Raw2d),
            Method::Baseline(_) => None,
        }
    }

    fn producer(&self) -> &'static str {
        match self {
            Method::Kd(_) => "distill",
            _ => "train",
        }
    }
}

fn mix(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn short(hash: &str) -> &str {
    &hash[..16]
}

// ---------------------------------------------------------------------------
// Dataset stages

fn register_dataset(ctx: &Ctx, ds: &Dataset, path: &Path, hash: String) -> CliResult<StageRecord> {
    let path = path.canonicalize().map_err(|e| Error::io(path, e))?;
    ctx.record("dataset", hash, &ds.digest(), json!({ "path": path, "trials": ds.len() }))
}

pub fn import(ctx: &Ctx, path: Option<PathBuf>) -> CliResult<()> {
    let path = path
        .or_else(|| ctx.cfg.dataset.clone())
        .ok_or_else(|| CliError::Config("import needs --dataset or a config `dataset`".into()))?;
    if !path.exists() {
        return Err(CliError::Config(format!("dataset {} does not exist", path.display())));
    }
    let ds = import_dataset(&path)?;
    let rec = register_dataset(ctx, &ds, &path, stage_hash("dataset", "", &ds.digest()))?;
    println!("dataset {} ({} trials)", short(&rec.dataset_digest), ds.len());
    Ok(())
}

/// Generates the synthetic benchmark and a one-hot teacher beside it.
pub fn synth(ctx: &Ctx) -> CliResult<()> {
    let dir = ctx.run.root.join("dataset");
    let hash = stage_hash("dataset", "synth", &ctx.cfg.synth);
    if let Some(rec) = ctx.run.up_to_date("dataset", &hash, |_| dir.join("manifest.json").exists()) {
        println!("dataset {} up to date", short(&rec.dataset_digest));
        return Ok(());
    }
    let ds = ctx.cfg.synth.generate()?;
    write_dataset(&dir, &ds)?;
    write_teacher_outputs(&dir.join("teacher.jsonl"), &one_hot_teacher(&ds))?;
    let rec = register_dataset(ctx, &ds, &dir, hash)?;
    println!("synthetic dataset {} ({} trials) at {}", short(&rec.dataset_digest), ds.len(), dir.display());
    Ok(())
}

fn load_dataset(ctx: &Ctx) -> CliResult<(StageRecord, Dataset)> {
    let rec = ctx.run.require("dataset", "import` or `synth")?;
    let path = PathBuf::from(rec.outputs["path"].as_str().unwrap_or_default());
    let ds = import_dataset(&path)?;
    if ds.digest() != rec.dataset_digest {
        return Err(Error::Data(format!("{} changed since it was imported", path.display())).into());
    }
    Ok((rec, ds))
}

fn out_dir(rec: &StageRecord) -> PathBuf {
    PathBuf::from(rec.outputs["dir"].as_str().unwrap_or_default())
}

pub fn preprocess(ctx: &Ctx) -> CliResult<()> {
    let data = ctx.run.require("dataset", "import` or `synth")?;
    let hash = stage_hash("preprocess", &data.hash, &"notch 49-51, band-pass 14-70, z-score");
    if ctx.run.up_to_date("preprocess", &hash, |r| out_dir(r).join("manifest.json").exists()).is_some() {
        println!("preprocess up to date");
        return Ok(());
    }
    let (_, ds) = load_dataset(ctx)?;
    let pre = Preprocessor::standard(ds.manifest.fs())?;
    let done = pre.preprocess_all(&ds.trials)?;
    let warnings: usize = done.iter().map(|p| p.warnings.len()).sum();
    if warnings > 0 {
        log::warn!("{warnings} constant channels left unscaled");
    }
    let clean = Dataset {
        manifest: ds.manifest.clone(),
        trials: done.into_iter().map(|p| p.trial).collect(),
    };
    let dir = ctx.run.cache.join(format!("preprocess-{}", short(&hash)));
    write_dataset(&dir, &clean)?;
    ctx.record(
        "preprocess",
        hash,
        &data.dataset_digest,
        json!({ "dir": dir, "constant_channels": warnings }),
    )?;
    println!("preprocessed {} trials", clean.len());
    Ok(())
}

fn load_preprocessed(ctx: &Ctx) -> CliResult<(StageRecord, Dataset)> {
    let rec = ctx.run.require("preprocess", "preprocess")?;
    let ds = import_dataset(&out_dir(&rec))?;
    Ok((rec, ds))
}

fn tfd_stage(kind: TfdKind) -> String {
    format!("tfd-{kind}")
}

pub fn tfd(ctx: &Ctx) -> CliResult<()> {
    let kind = ctx.cfg.representation;
    let pre = ctx.run.require("preprocess", "preprocess")?;
    let rep = Representation::default_for(kind);
    let stage = tfd_stage(kind);
    let hash = stage_hash(&stage, &pre.hash, &rep);
    if ctx.run.up_to_date(&stage, &hash, |r| out_dir(r).join("index.json").exists()).is_some() {
        println!("{stage} up to date");
        return Ok(());
    }
    let (_, ds) = load_preprocessed(ctx)?;
    let images = rep.transform_all(&ds.trials, ds.manifest.fs())?;
    let dir = ctx.run.cache.join(format!("{stage}-{}", short(&hash)));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (t, img) in ds.trials.iter().zip(&images) {
        img.write(&dir.join(format!("{}.tfdi", t.trial_id)))?;
    }
    let ids: Vec<&str> = ds.trials.iter().map(|t| t.trial_id.as_str()).collect();
    write_json(&dir.join("index.json"), &ids)?;
    let shape = images.first().map(TfdImage::shape);
    ctx.record(&stage, hash, &pre.dataset_digest, json!({ "dir": dir, "representation": rep, "shape": shape }))?;
    println!("{stage}: {} images of shape {:?}", images.len(), shape.unwrap_or_default());
    Ok(())
}

fn load_images(ctx: &Ctx, kind: TfdKind, ds: &Dataset) -> CliResult<(StageRecord, Vec<TfdImage>)> {
    let rec = ctx.run.require(&tfd_stage(kind), "tfd")?;
    let dir = out_dir(&rec);
    let images = ds
        .trials
        .iter()
        .map(|t| TfdImage::read(&dir.join(format!("{}.tfdi", t.trial_id))))
        .collect::<spectromind::Result<Vec<_>>>()?;
    Ok((rec, images))
}

fn splits(ctx: &Ctx, ds: &Dataset) -> CliResult<Splits> {
    let s = split_dataset(ds, ctx.cfg.split, ctx.cfg.seed)?;
    write_json(&ctx.run.root.join("splits.json"), &s)?;
    Ok(s)
}

fn subject_rows<'a>(ds: &'a Dataset, idx: &'a [usize], subject: &'a str) -> Vec<usize> {
    idx.iter().copied().filter(|&i| ds.trials[i].subject_id == subject).collect()
}

// ---------------------------------------------------------------------------
// Model stages

#[derive(Serialize, Deserialize)]
struct BaselineArtifact {
    config_hash: String,
    train_ids: Vec<String>,
    model: BaselineModel,
}

fn model_stage(method: &Method) -> String {
    format!("model-{}", method.name())
}

fn model_file(ctx: &Ctx, method: &Method, subject: &str) -> PathBuf {
    let ext = if method.is_network() { "ckpt" } else { "json" };
    ctx.run.model_dir(&method.name()).join(format!("{subject}.{ext}"))
}

fn network_spec(ctx: &Ctx, method: &Method, shape: [usize; 3], ds: &Dataset) -> CliResult<ModelSpec> {
    let k = ds.manifest.num_classes();
    let mut spec = match method {
        Method::Conv1d => ModelSpec::conv1d(ds.manifest.channels(), ds.manifest.trial_len(), k),
        _ => ModelSpec::student(method.input_kind().unwrap_or(TfdKind::Stft), shape, k),
    };
    if let Some(w) = &ctx.cfg.widths {
        spec = spec.scaled(w.clone());
    }
    spec.dropout_rate = ctx.cfg.dropout_rate;
    spec.validate()?;
    Ok(spec)
}

fn resolve_teacher(ctx: &Ctx, data: &StageRecord, ds: &Dataset) -> CliResult<(TeacherTable, String)> {
    let path = match &ctx.cfg.teacher {
        Some(p) => p.clone(),
        None => PathBuf::from(data.outputs["path"].as_str().unwrap_or_default()).join("teacher.jsonl"),
    };
    if !path.exists() {
        return Err(CliError::missing(&path, "synth` or pass --teacher"));
    }
    let digest = hash_file(&path)?;
    let magic = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if magic.starts_with(EMBD_MAGIC) {
        let records = load_embeddings(&path)?;
        let (teacher, fit) = train_teacher(&records, ds.manifest.num_classes())?;
        log::info!("linear teacher: {} iterations, train accuracy {:.3}", fit.iterations, fit.train_accuracy);
        let mut table = TeacherTable::new();
        for r in &records {
            let values = teacher_predict(&teacher, &r.embedding)?;
            table.insert(
                r.image_id.clone(),
                TeacherOutput {
                    image_id: r.image_id.clone(),
                    kind: TeacherKind::Probabilities,
                    values,
                },
            );
        }
        Ok((table, digest))
    } else {
        Ok((load_teacher_outputs(&path)?, digest))
    }
}

/// Fits one model per subject for `method`.
pub fn fit(ctx: &Ctx, method: Method) -> CliResult<()> {
    let name = method.name();
    let stage = model_stage(&method);
    let data = ctx.run.require("dataset", "import` or `synth")?;
    let upstream = match method.input_kind() {
        Some(kind) => ctx.run.require(&tfd_stage(kind), "tfd")?,
        None => ctx.run.require("preprocess", "preprocess")?,
    };
    let teacher_digest = match method {
        Method::Kd(_) => Some(match &ctx.cfg.teacher {
            Some(p) => hash_file(p)?,
            None => {
                let p = PathBuf::from(data.outputs["path"].as_str().unwrap_or_default()).join("teacher.jsonl");
                if !p.exists() {
                    return Err(CliError::missing(&p, "synth` or pass --teacher"));
                }
                hash_file(&p)?
            }
        }),
        _ => None,
    };
    let params = json!({
        "method": name,
        "widths": ctx.cfg.widths,
        "dropout": ctx.cfg.dropout_rate,
        "train": ctx.cfg.train,
        "kd": matches!(method, Method::Kd(_)).then_some(ctx.cfg.kd),
        "teacher": teacher_digest,
        "features": match method { Method::Baseline(f) => Some(f), _ => None },
        "l2": ctx.cfg.baseline_l2,
        "seed": ctx.cfg.seed,
        "split": ctx.cfg.split,
    });
    let hash = stage_hash(&stage, &upstream.hash, &params);
    let subjects_exist = |r: &StageRecord| {
        r.outputs["subjects"]
            .as_array()
            .is_some_and(|s| s.iter().all(|s| model_file(ctx, &method, s.as_str().unwrap_or_default()).exists()))
    };
    if ctx.run.up_to_date(&stage, &hash, subjects_exist).is_some() {
        println!("{name} up to date");
        return Ok(());
    }

    let subjects = match method {
        Method::Baseline(features) => fit_baselines(ctx, &method, features, &hash)?,
        _ => fit_networks(ctx, &method, &data, &hash)?,
    };
    ctx.record(&stage, hash, &data.dataset_digest, json!({ "method": name, "subjects": subjects }))?;
    println!("{name}: fitted {} subject models", subjects.len());
    Ok(())
}

fn fit_networks(ctx: &Ctx, method: &Method, data: &StageRecord, hash: &str) -> CliResult<Vec<String>> {
    let kind = method.input_kind().expect("network input");
    let (_, ds) = load_dataset(ctx)?;
    let (_, images) = load_images(ctx, kind, &ds)?;
    let split = splits(ctx, &ds)?;
    let shape = images.first().map(TfdImage::shape).unwrap_or_default();
    let spec = network_spec(ctx, method, shape, &ds)?;
    let teacher = match method {
        Method::Kd(_) => Some(resolve_teacher(ctx, data, &ds)?.0),
        _ => None,
    };
    let mut done = Vec::new();
    for (si, subject) in ds.manifest.subject_ids.iter().enumerate() {
        let tr = subject_rows(&ds, &split.train, subject);
        let va = subject_rows(&ds, &split.val, subject);
        if tr.is_empty() {
            log::warn!("subject {subject} has no trials; skipped");
            continue;
        }
        let train_set = train_data(&spec, &ds, &images, &tr)?;
        let val_set = train_data(&spec, &ds, &images, &va)?;
        let seed = mix(ctx.cfg.seed, si as u64);
        let cfg = TrainConfig {
            seed,
            ..ctx.cfg.train.clone()
        };
        log::info!("{subject}: {} train / {} val trials, seed {seed}", tr.len(), va.len());
        let mut model: Model = build_model(&spec, mix(seed, 1))?;
        let mut ckpt = match &teacher {
            Some(table) => {
                let image_ids: Vec<String> = tr.iter().map(|&i| ds.trials[i].image_id.clone()).collect();
                distill_train(&mut model, &train_set, &image_ids, &val_set, table, &ctx.cfg.kd, &cfg)?
            }
            None => train(&mut model, &train_set, &val_set, &cfg, &CrossEntropy)?,
        };
        ckpt.config_hash = hash.to_string();
        if let serde_json::Value::Object(m) = &mut ckpt.meta {
            m.insert("subject".into(), json!(subject));
        } else {
            ckpt.meta = json!({ "subject": subject });
        }
        let path = model_file(ctx, method, subject);
        write_atomic(&path, &ckpt.to_bytes()?)?;
        log::info!("{subject}: best epoch {} -> {}", ckpt.best_epoch, path.display());
        done.push(subject.clone());
    }
    Ok(done)
}

fn fit_baselines(ctx: &Ctx, method: &Method, features: FeatureKind, hash: &str) -> CliResult<Vec<String>> {
    let (_, ds) = load_preprocessed(ctx)?;
    let split = splits(ctx, &ds)?;
    let mut done = Vec::new();
    for subject in &ds.manifest.subject_ids {
        let tr = subject_rows(&ds, &split.train, subject);
        if tr.is_empty() {
            continue;
        }
        let trials: Vec<&Trial> = tr.iter().map(|&i| &ds.trials[i]).collect();
        let labels: Vec<usize> = trials.iter().map(|t| t.label_index).collect();
        let (model, fit) = BaselineModel::fit(features, &trials, &labels, ds.manifest.num_classes(), ctx.cfg.baseline_l2)?;
        log::info!("{subject}: {} iterations, train accuracy {:.3}", fit.iterations, fit.train_accuracy);
        let artifact = BaselineArtifact {
            config_hash: hash.to_string(),
            train_ids: trials.iter().map(|t| t.trial_id.clone()).collect(),
            model,
        };
        write_json(&model_file(ctx, method, subject), &artifact)?;
        done.push(subject.clone());
    }
    Ok(done)
}

// ---------------------------------------------------------------------------
// Inference

struct SubjectPrediction {
    subject: String,
    ids: Vec<String>,
    labels: Vec<usize>,
    probs: Vec<Vec<f64>>,
    train_ids: Vec<String>,
}

fn load_checkpoint(ctx: &Ctx, method: &Method, subject: &str) -> CliResult<Checkpoint> {
    let path = model_file(ctx, method, subject);
    if !path.exists() {
        return Err(CliError::missing(&path, method.producer()));
    }
    Ok(Checkpoint::load(&path)?)
}

/// Test-split probabilities of every subject model.
fn predict_test(ctx: &Ctx, method: &Method) -> CliResult<(StageRecord, Vec<SubjectPrediction>)> {
    let rec = ctx.run.require(&model_stage(method), method.producer())?;
    let subjects: Vec<String> = serde_json::from_value(rec.outputs["subjects"].clone()).unwrap_or_default();
    let mut out = Vec::new();
    match method {
        Method::Baseline(_) => {
            let (_, ds) = load_preprocessed(ctx)?;
            let split = splits(ctx, &ds)?;
            for subject in subjects {
                let path = model_file(ctx, method, &subject);
                if !path.exists() {
                    return Err(CliError::missing(&path, "train"));
                }
                let art: BaselineArtifact = read_json(&path)?;
                let te = subject_rows(&ds, &split.test, &subject);
                let trials: Vec<&Trial> = te.iter().map(|&i| &ds.trials[i]).collect();
                out.push(SubjectPrediction {
                    probs: art.model.predict_proba(&trials)?,
                    ids: trials.iter().map(|t| t.trial_id.clone()).collect(),
                    labels: trials.iter().map(|t| t.label_index).collect(),
                    subject,
                    train_ids: art.train_ids,
                });
            }
        }
        _ => {
            let (_, ds) = load_dataset(ctx)?;
            let (_, images) = load_images(ctx, method.input_kind().expect("network input"), &ds)?;
            let split = splits(ctx, &ds)?;
            for subject in subjects {
                let ckpt = load_checkpoint(ctx, method, &subject)?;
                let model = ckpt.model()?;
                let te = subject_rows(&ds, &split.test, &subject);
                let data = train_data(&model.spec, &ds, &images, &te)?;
                out.push(SubjectPrediction {
                    probs: predict_data(&model, &data, ctx.cfg.train.batch_size),
                    ids: data.ids,
                    labels: data.labels,
                    subject,
                    train_ids: ckpt.train_ids,
                });
            }
        }
    }
    Ok((rec, out))
}

/// Report file: the evaluation plus the dataset it was computed on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub dataset_digest: String,
    pub config_hash: String,
    pub report: EvalReport,
}

pub fn evaluate(ctx: &Ctx, method: Method) -> CliResult<()> {
    let (rec, preds) = predict_test(ctx, &method)?;
    let mut subjects = Vec::new();
    for p in preds {
        check_disjoint(p.train_ids.iter().map(String::as_str), &p.ids)?;
        subjects.push(SubjectMetrics {
            subject_id: p.subject.clone(),
            trials: p.ids.len(),
            metrics: Metrics::compute(&p.probs, &p.labels)?,
        });
    }
    let r = report(&method.name(), &rec.hash, subjects)?;
    let file = ReportFile {
        dataset_digest: rec.dataset_digest.clone(),
        config_hash: rec.hash.clone(),
        report: r,
    };
    write_json(&ctx.run.report_path(&method.name()), &file)?;
    print!("{}", render_table(std::slice::from_ref(&file.report)));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub trial_id: String,
    pub subject_id: String,
    pub label: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionFile {
    pub method: String,
    pub config_hash: String,
    pub dataset_digest: String,
    pub rows: Vec<PredictionRow>,
}

pub fn predict(ctx: &Ctx, method: Method) -> CliResult<()> {
    let (rec, preds) = predict_test(ctx, &method)?;
    let mut rows = Vec::new();
    for p in preds {
        for ((id, label), probs) in p.ids.into_iter().zip(p.labels).zip(p.probs) {
            rows.push(PredictionRow {
                trial_id: id,
                subject_id: p.subject.clone(),
                label,
                predicted: argmax(&probs),
                probabilities: probs,
            });
        }
    }
    let path = ctx.run.predictions_path(&method.name());
    write_json(
        &path,
        &PredictionFile {
            method: method.name(),
            config_hash: rec.hash,
            dataset_digest: rec.dataset_digest,
            rows,
        },
    )?;
    println!("predictions written to {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Reconstruction, streaming, reporting

pub fn reconstruct_images(ctx: &Ctx, method: Method) -> CliResult<()> {
    let path = ctx.run.predictions_path(&method.name());
    if !path.exists() {
        return Err(CliError::missing(&path, "predict"));
    }
    let preds: PredictionFile = read_json(&path)?;
    let manifest = load_dataset(ctx)?.1.manifest;
    let items: Vec<ReconItem> = preds
        .rows
        .iter()
        .map(|r| ReconItem {
            trial_id: r.trial_id.clone(),
            class_index: r.predicted,
            class_name: manifest.class_names[r.predicted].clone(),
        })
        .collect();
    let client = Client::new(ClientConfig {
        in_flight: ctx.cfg.in_flight,
        ..ClientConfig::default()
    })?;
    let settings = ReconSettings {
        endpoint: ctx.cfg.endpoint.clone(),
        seed: ctx.cfg.seed,
        steps: ctx.cfg.steps,
    };
    let dir = ctx.run.root.join("recon").join(method.name());
    let rows = reconstruct(&client, &items, &manifest.class_names, &dir, &settings)?;
    let failed = rows.iter().filter(|r| r.status != RowStatus::Ok).count();
    println!("reconstructed {} of {} trials into {}", rows.len() - failed, rows.len(), dir.display());
    if failed > 0 {
        return Err(CliError::Service(format!("{failed} reconstructions failed; see {}", dir.join("index.json").display())));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamFile {
    pub method: String,
    pub config_hash: String,
    pub subject_id: String,
    pub rt_factor: f64,
    pub latency: LatencyReport,
    pub batch_predictions: Vec<usize>,
    pub matches_batch: bool,
}

/// Replays a subject's held-out trials as one continuous recording.
pub fn stream_sim(ctx: &Ctx, method: Method, limit: Option<usize>) -> CliResult<()> {
    if !method.is_network() {
        return Err(CliError::Config("stream-sim needs a network method".into()));
    }
    let rec = ctx.run.require(&model_stage(&method), method.producer())?;
    let (_, ds) = load_dataset(ctx)?;
    let split = splits(ctx, &ds)?;
    let subject = ds.manifest.subject_ids[0].clone();
    let model = load_checkpoint(ctx, &method, &subject)?.model()?;
    let mut te = subject_rows(&ds, &split.test, &subject);
    if let Some(n) = limit {
        te.truncate(n);
    }
    let trials: Vec<&Trial> = te.iter().map(|&i| &ds.trials[i]).collect();
    let fs = ds.manifest.fs();
    let recording = Recording::from_trials(&trials, fs);
    let pre = Preprocessor::standard(fs)?;
    let rep = Representation::default_for(ctx.cfg.representation);
    let scfg = StreamConfig {
        rt_factor: ctx.cfg.rt_factor,
        trial_len: ds.manifest.trial_len(),
        ..StreamConfig::default()
    };
    let latency = stream_simulate(&recording, &model, &pre, &rep, &scfg)?;

    // batch inference over the same segmentation
    let windows = recording.segment(scfg.trial_len)?;
    let clean: Vec<Trial> = pre.preprocess_all(&windows)?.into_iter().map(|p| p.trial).collect();
    let images = rep.transform_all(&clean, fs)?;
    let refs: Vec<&TfdImage> = images.iter().collect();
    let batch: Vec<usize> = model.predict(&refs)?.iter().map(|p| argmax(p)).collect();
    let matches = latency.rows.iter().all(|r| batch[r.index] == r.predicted);

    let file = StreamFile {
        method: method.name(),
        config_hash: rec.hash,
        subject_id: subject,
        rt_factor: ctx.cfg.rt_factor,
        latency,
        batch_predictions: batch,
        matches_batch: matches,
    };
    write_json(&ctx.run.root.join("stream").join(format!("{}.json", method.name())), &file)?;
    let l = &file.latency;
    println!(
        "{} windows, {} dropped; latency p50 {:.1} ms, p95 {:.1} ms, p99 {:.1} ms; real-time margin {:.1} ms; wall {:.2} s",
        l.rows.len(),
        l.dropped,
        l.p50_ms,
        l.p95_ms,
        l.p99_ms,
        l.realtime_margin_ms,
        l.wall_s
    );
    if !matches {
        return Err(Error::Numeric("streamed predictions differ from batch inference".into()).into());
    }
    Ok(())
}

/// Renders a comparison table over evaluated methods, in the given order
/// (all reports, sorted by name, when none are named).
pub fn report_table(ctx: &Ctx, methods: &[String]) -> CliResult<String> {
    let dir = ctx.run.root.join("reports");
    let names: Vec<String> = if methods.is_empty() {
        let mut found: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|_| CliError::missing(&dir, "evaluate"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                if p.extension()? == "json" { Some(p.file_stem()?.to_string_lossy().into_owned()) } else { None }
            })
            .collect();
        found.sort();
        found
    } else {
        methods.to_vec()
    };
    let mut files = Vec::new();
    for name in &names {
        let path = ctx.run.report_path(name);
        if !path.exists() {
            return Err(CliError::missing(&path, "evaluate"));
        }
        files.push(read_json::<ReportFile>(&path)?);
    }
    if files.is_empty() {
        return Err(CliError::missing(&dir, "evaluate"));
    }
    let digests: BTreeMap<&str, &str> = files
        .iter()
        .map(|f| (f.report.method.as_str(), f.dataset_digest.as_str()))
        .collect();
    if digests.values().any(|d| *d != files[0].dataset_digest) {
        return Err(Error::Data(format!("reports were computed on different datasets: {digests:?}")).into());
    }
    let reports: Vec<EvalReport> = files.into_iter().map(|f| f.report).collect();
    let table = render_table(&reports);
    write_atomic(&dir.join("table.txt"), table.as_bytes())?;
    write_atomic(&dir.join("table.csv"), render_csv(&reports).as_bytes())?;
    Ok(table)
}
