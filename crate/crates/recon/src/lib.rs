//! Prompts and image requests for reconstructing what a subject viewed.
//!
//! A predicted class becomes the prompt `an image of a {class}`, which is
//! POSTed as JSON to `{endpoint}/generate`; the service answers with a
//! base64-encoded PNG. [`reconstruct`] drives a batch of predictions into a
//! run directory and can resume an interrupted run.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

pub mod stub;

use base64::Engine;
use serde::{Deserialize, Serialize};

pub const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("argument error: {0}")]
    Argument(String),
    #[error("service error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Service { status: Option<u16>, message: String },
    #[error("payload error: {0}")]
    Payload(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `an image of a {class_name}`; the class must be one of `known`.
pub fn build_prompt(class_name: &str, known: &[String]) -> Result<String> {
    if class_name.is_empty() {
        return Err(Error::Argument("empty class name".into()));
    }
    if !known.iter().any(|k| k == class_name) {
        return Err(Error::Argument(format!("unknown class {class_name:?}")));
    }
    Ok(format!("an image of a {class_name}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenResult {
    pub image: Vec<u8>,
    pub prompt: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    /// Waits before each retry; its length is the retry count.
    pub backoff: Vec<Duration>,
    pub timeout: Duration,
    pub in_flight: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            backoff: vec![
                Duration::from_millis(500),
                Duration::from_secs(1),
                Duration::from_secs(2),
            ],
            timeout: Duration::from_secs(120),
            in_flight: 2,
        }
    }
}

#[derive(Serialize)]
struct Body<'a> {
    prompt: &'a str,
    seed: u64,
    steps: u32,
}

#[derive(Deserialize)]
struct Reply {
    image: String,
}

fn excerpt(body: &str) -> String {
    body.chars().take(200).collect()
}

/// Decodes and checks the service reply.
fn parse_reply(text: &str) -> Result<Vec<u8>> {
    let reply: Reply = serde_json::from_str(text)
        .map_err(|e| Error::Payload(format!("reply is not {{\"image\": …}}: {e}")))?;
    let image = base64::engine::general_purpose::STANDARD
        .decode(reply.image.trim())
        .map_err(|e| Error::Payload(format!("image is not base64: {e}")))?;
    if !image.starts_with(&PNG_SIGNATURE) {
        return Err(Error::Payload("image lacks the PNG signature".into()));
    }
    Ok(image)
}

pub struct Client {
    http: reqwest::blocking::Client,
    cfg: ClientConfig,
}

impl Client {
    pub fn new(cfg: ClientConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| Error::Service {
                status: None,
                message: format!("cannot build HTTP client: {e}"),
            })?;
        Ok(Self { http, cfg })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    /// Sends one generation request. Transport failures and 5xx replies are
    /// retried on the backoff schedule; 4xx replies are final.
    pub fn request_image(&self, req: &GenRequest) -> Result<GenResult> {
        if req.prompt.is_empty() {
            return Err(Error::Argument("empty prompt".into()));
        }
        if req.steps == 0 {
            return Err(Error::Argument("steps must be positive".into()));
        }
        let url = format!("{}/generate", req.endpoint.trim_end_matches('/'));
        let body = Body {
            prompt: &req.prompt,
            seed: req.seed,
            steps: req.steps,
        };
        let start = Instant::now();
        let mut last = None;
        for attempt in 0..=self.cfg.backoff.len() {
            if attempt > 0 {
                std::thread::sleep(self.cfg.backoff[attempt - 1]);
                log::info!("retry {attempt} for {url}");
            }
            match self.http.post(&url).json(&body).send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        return Ok(GenResult {
                            image: parse_reply(&text)?,
                            prompt: req.prompt.clone(),
                            latency_ms: start.elapsed().as_secs_f64() * 1e3,
                        });
                    }
                    let err = Error::Service {
                        status: Some(status.as_u16()),
                        message: excerpt(&text),
                    };
                    if status.is_client_error() {
                        return Err(err);
                    }
                    last = Some(err);
                }
                Err(e) => {
                    last = Some(Error::Service {
                        status: None,
                        message: e.to_string(),
                    })
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// One prediction to render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconItem {
    pub trial_id: String,
    pub class_index: usize,
    pub class_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    ServiceError,
    PayloadError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub trial_id: String,
    pub predicted_class: usize,
    pub class_name: String,
    pub prompt: String,
    pub seed: u64,
    pub status: RowStatus,
    /// Relative to the run directory.
    pub image_path: Option<String>,
    pub latency_ms: Option<f64>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconSettings {
    pub endpoint: String,
    pub seed: u64,
    pub steps: u32,
}

impl Default for ReconSettings {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:7860".into(),
            seed: 0,
            steps: 30,
        }
    }
}

/// Per-trial generator seed: the run seed mixed with an FNV-1a hash of the
/// trial id, so seeds do not depend on trial order.
pub fn trial_seed(base: u64, trial_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in trial_id.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ base
}

pub const INDEX_FILE: &str = "index.json";

pub fn read_index(run_dir: &Path) -> Result<Vec<IndexRow>> {
    let path = run_dir.join(INDEX_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = std::fs::read(&path).map_err(|e| io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_index(run_dir: &Path, rows: &[IndexRow]) -> Result<()> {
    let path = run_dir.join(INDEX_FILE);
    let tmp = run_dir.join("index.json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(rows)?).map_err(|e| io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| io(&path, e))
}

/// Requests an image per item into `run_dir/images/<trial_id>.png` and
/// records every outcome in `run_dir/index.json`. Rows already `ok` for the
/// same seed with their image on disk are kept without a new request.
pub fn reconstruct(
    client: &Client,
    items: &[ReconItem],
    known_classes: &[String],
    run_dir: &Path,
    settings: &ReconSettings,
) -> Result<Vec<IndexRow>> {
    let mut seen = HashSet::new();
    for item in items {
        if !seen.insert(item.trial_id.as_str()) {
            return Err(Error::Argument(format!("duplicate trial id {}", item.trial_id)));
        }
        if item.trial_id.is_empty() || item.trial_id.contains(['/', '\\']) {
            return Err(Error::Argument(format!("trial id {:?} is not a file name", item.trial_id)));
        }
    }
    let prompts = items
        .iter()
        .map(|i| build_prompt(&i.class_name, known_classes))
        .collect::<Result<Vec<_>>>()?;

    let images = run_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| io(&images, e))?;
    let previous: BTreeMap<String, IndexRow> = read_index(run_dir)?
        .into_iter()
        .map(|r| (r.trial_id.clone(), r))
        .collect();

    let rows: Vec<Mutex<Option<IndexRow>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let mut todo = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let seed = trial_seed(settings.seed, &item.trial_id);
        let done = previous.get(&item.trial_id).filter(|r| {
            r.status == RowStatus::Ok
                && r.seed == seed
                && r.predicted_class == item.class_index
                && r.image_path.as_ref().is_some_and(|p| run_dir.join(p).exists())
        });
        match done {
            Some(r) => *rows[i].lock().unwrap() = Some(r.clone()),
            None => todo.push(i),
        }
    }
    log::info!("{} of {} images already complete", items.len() - todo.len(), items.len());

    let next = AtomicUsize::new(0);
    let index_lock = Mutex::new(());
    let workers = client.cfg.in_flight.clamp(1, todo.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = todo.get(k) else { break };
                let item = &items[i];
                let seed = trial_seed(settings.seed, &item.trial_id);
                let req = GenRequest {
                    prompt: prompts[i].clone(),
                    seed,
                    steps: settings.steps,
                    endpoint: settings.endpoint.clone(),
                };
                let mut row = IndexRow {
                    trial_id: item.trial_id.clone(),
                    predicted_class: item.class_index,
                    class_name: item.class_name.clone(),
                    prompt: prompts[i].clone(),
                    seed,
                    status: RowStatus::Ok,
                    image_path: None,
                    latency_ms: None,
                    message: None,
                };
                let rel = format!("images/{}.png", item.trial_id);
                let outcome = client.request_image(&req).and_then(|res| {
                    let path = run_dir.join(&rel);
                    std::fs::write(&path, &res.image).map_err(|e| io(&path, e))?;
                    Ok(res.latency_ms)
                });
                match outcome {
                    Ok(ms) => {
                        row.image_path = Some(rel);
                        row.latency_ms = Some(ms);
                    }
                    Err(e) => {
                        row.status = match e {
                            Error::Payload(_) => RowStatus::PayloadError,
                            _ => RowStatus::ServiceError,
                        };
                        row.message = Some(e.to_string());
                    }
                }
                *rows[i].lock().unwrap() = Some(row);
                // Persist progress so an interrupted run can resume.
                let _guard = index_lock.lock().unwrap();
                let snapshot: Vec<IndexRow> = rows.iter().filter_map(|r| r.lock().unwrap().clone()).collect();
                if let Err(e) = write_index(run_dir, &snapshot) {
                    log::warn!("cannot update index: {e}");
                }
            });
        }
    });
    let rows: Vec<IndexRow> = rows.into_iter().map(|r| r.into_inner().unwrap().expect("row filled")).collect();
    write_index(run_dir, &rows)?;
    Ok(rows)
}
