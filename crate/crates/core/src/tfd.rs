//! Time-frequency images: STFT spectrograms, db4 wavelet scalograms and the
//! raw electrode-by-time layout.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataset::Trial;
use crate::dsp::standardize_in_place;
use crate::error::{Error, Result};
use crate::par;

pub const TFDI_MAGIC: &[u8; 4] = b"TFDI";
const TFDI_HEADER: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TfdKind {
    Stft,
    Wavelet,
    Raw2d,
}

impl TfdKind {
    fn code(self) -> u8 {
        match self {
            TfdKind::Stft => 1,
            TfdKind::Wavelet => 2,
            TfdKind::Raw2d => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(TfdKind::Stft),
            2 => Some(TfdKind::Wavelet),
            3 => Some(TfdKind::Raw2d),
            _ => None,
        }
    }
}

impl std::fmt::Display for TfdKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TfdKind::Stft => "stft",
            TfdKind::Wavelet => "wavelet",
            TfdKind::Raw2d => "raw2d",
        })
    }
}

impl std::str::FromStr for TfdKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stft" => Ok(TfdKind::Stft),
            "wavelet" => Ok(TfdKind::Wavelet),
            "raw2d" => Ok(TfdKind::Raw2d),
            other => Err(Error::Argument(format!("unknown representation {other}"))),
        }
    }
}

/// A `[channels × rows × cols]` image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TfdImage {
    pub kind: TfdKind,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    /// Hz per row for spectrograms, 0 otherwise.
    pub hz_per_row: f32,
    /// Input samples advanced per column.
    pub samples_per_col: f32,
    pub data: Vec<f32>,
}

impl TfdImage {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.rows, self.cols]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.rows * self.cols;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, r: usize, col: usize) -> f32 {
        self.data[(c * self.rows + r) * self.cols + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(TFDI_HEADER + 4 * self.data.len());
        buf.extend_from_slice(TFDI_MAGIC);
        buf.extend_from_slice(&[self.kind.code(), 0, 0, 0]);
        for v in [self.channels, self.rows, self.cols] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.hz_per_row.to_le_bytes());
        buf.extend_from_slice(&self.samples_per_col.to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < TFDI_HEADER || &bytes[..4] != TFDI_MAGIC {
            return Err(Error::Format("missing TFDI header".into()));
        }
        let kind = TfdKind::from_code(bytes[4])
            .ok_or_else(|| Error::Format(format!("unknown TFDI kind byte {}", bytes[4])))?;
        let word = |at: usize| [bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]];
        let channels = u32::from_le_bytes(word(8)) as usize;
        let rows = u32::from_le_bytes(word(12)) as usize;
        let cols = u32::from_le_bytes(word(16)) as usize;
        let hz_per_row = f32::from_le_bytes(word(20));
        let samples_per_col = f32::from_le_bytes(word(24));
        let payload = &bytes[TFDI_HEADER..];
        if payload.len() != channels * rows * cols * 4 {
            return Err(Error::Data(format!(
                "TFDI payload of {} bytes does not match shape {channels}x{rows}x{cols}",
                payload.len()
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("TFDI payload contains NaN or Inf".into()));
        }
        Ok(Self {
            kind,
            channels,
            rows,
            cols,
            hz_per_row,
            samples_per_col,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// STFT

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowFn {
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    Log1pMagnitude,
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub nfft: usize,
    pub window_fn: WindowFn,
    pub scaling: Scaling,
    /// Z-score each electrode's image after scaling.
    pub normalize: bool,
}

impl Default for StftConfig {
    /// 40 ms Hann windows every 20 ms, 64-point FFT, log1p magnitude,
    /// per-electrode z-scoring.
    fn default() -> Self {
        Self {
            window_ms: 40.0,
            hop_ms: 20.0,
            nfft: 64,
            window_fn: WindowFn::Hann,
            scaling: Scaling::Log1pMagnitude,
            normalize: true,
        }
    }
}

impl StftConfig {
    pub fn window_samples(&self, fs: f64) -> usize {
        (self.window_ms * fs / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, fs: f64) -> usize {
        (self.hop_ms * fs / 1000.0).round() as usize
    }

    pub fn bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    pub fn frames(&self, len: usize, fs: f64) -> usize {
        let w = self.window_samples(fs);
        if len < w {
            0
        } else {
            (len - w) / self.hop_samples(fs) + 1
        }
    }

    fn validate(&self, fs: f64) -> Result<()> {
        let w = self.window_samples(fs);
        let h = self.hop_samples(fs);
        if w == 0 || h == 0 || h > w {
            return Err(Error::Parameter(format!(
                "window {w} and hop {h} samples must satisfy 0 < hop <= window"
            )));
        }
        if self.nfft < w {
            return Err(Error::Parameter(format!(
                "nfft {} shorter than the {w}-sample window",
                self.nfft
            )));
        }
        Ok(())
    }

    fn window(&self, w: usize) -> Vec<f64> {
        match self.window_fn {
            WindowFn::Rectangular => vec![1.0; w],
            // periodic Hann
            WindowFn::Hann => (0..w)
                .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / w as f64).cos())
                .collect(),
        }
    }
}

/// Reusable STFT plan for one configuration and sampling rate.
pub struct Stft {
    cfg: StftConfig,
    fs: f64,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig, fs: f64) -> Result<Self> {
        cfg.validate(fs)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.nfft);
        Ok(Self {
            window: cfg.window(cfg.window_samples(fs)),
            cfg,
            fs,
            fft,
        })
    }

    /// One-sided magnitudes `[bins][frames]` before scaling.
    pub fn magnitudes(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let w = self.window.len();
        if x.len() < w {
            return Err(Error::Length {
                needed: w,
                got: x.len(),
            });
        }
        let hop = self.cfg.hop_samples(self.fs);
        let frames = self.cfg.frames(x.len(), self.fs);
        let bins = self.cfg.bins();
        let mut out = vec![vec![0.0; frames]; bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.cfg.nfft];
        for f in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (i, (b, wv)) in buf.iter_mut().zip(&self.window).enumerate() {
                *b = Complex64::new(x[f * hop + i] * wv, 0.0);
            }
            self.fft.process(&mut buf);
            for (k, row) in out.iter_mut().enumerate() {
                row[f] = buf[k].norm();
            }
        }
        Ok(out)
    }

    pub fn spectrogram(&self, trial: &Trial) -> Result<TfdImage> {
        let bins = self.cfg.bins();
        let frames = self.cfg.frames(trial.len(), self.fs);
        let mut data = Vec::with_capacity(trial.channels * bins * frames);
        for c in 0..trial.channels {
            let mags = self.magnitudes(trial.channel(c))?;
            let mut plane: Vec<f64> = mags
                .into_iter()
                .flatten()
                .map(|m| match self.cfg.scaling {
                    Scaling::Magnitude => m,
                    Scaling::Log1pMagnitude => m.ln_1p(),
                })
                .collect();
            if self.cfg.normalize {
                standardize_in_place(&mut plane);
            }
            data.extend(plane.into_iter().map(|v| v as f32));
        }
        Ok(TfdImage {
            kind: TfdKind::Stft,
            channels: trial.channels,
            rows: bins,
            cols: frames,
            hz_per_row: (self.fs / self.cfg.nfft as f64) as f32,
            samples_per_col: self.cfg.hop_samples(self.fs) as f32,
            data,
        })
    }
}

pub fn stft_spectrogram(trial: &Trial, cfg: &StftConfig, fs: f64) -> Result<TfdImage> {
    Stft::new(*cfg, fs)?.spectrogram(trial)
}

// ---------------------------------------------------------------------------
// Daubechies-4 wavelet

/// db4 scaling (low-pass) filter, orthonormal: sum = sqrt(2), sum of squares = 1.
pub const DB4_LOWPASS: [f64; 8] = [
    0.230_377_813_308_855_23,
    0.714_846_570_552_541_53,
    0.630_880_767_929_590_36,
    -0.027_983_769_416_983_849,
    -0.187_034_811_718_881_14,
    0.030_841_381_835_986_965,
    0.032_883_011_666_982_945,
    -0.010_597_401_784_997_278,
];

fn db4_highpass() -> [f64; 8] {
    let mut g = [0.0; 8];
    for (m, v) in g.iter_mut().enumerate() {
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        *v = sign * DB4_LOWPASS[7 - m];
    }
    g
}

/// Multi-level decomposition: `details[0]` is the finest band.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBands {
    pub details: Vec<Vec<f64>>,
    pub approx: Vec<f64>,
    /// Length of the signal before zero-padding.
    pub signal_len: usize,
}

impl WaveletBands {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    pub fn energy(&self) -> f64 {
        self.details
            .iter()
            .chain(std::iter::once(&self.approx))
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum()
    }
}

/// Deepest level at which the 8-tap filter still fits the signal.
pub fn dwt_max_level(len: usize) -> usize {
    if len < 7 {
        return 0;
    }
    ((len as f64) / 7.0).log2().floor() as usize
}

/// Orthonormal periodized db4 analysis. The signal is zero-padded to a
/// multiple of `2^levels`, so the transform conserves energy exactly.
pub fn dwt_db4(x: &[f64], levels: usize) -> Result<WaveletBands> {
    if levels == 0 || levels > dwt_max_level(x.len()) {
        return Err(Error::Parameter(format!(
            "{levels} levels too deep for a {}-sample signal (max {})",
            x.len(),
            dwt_max_level(x.len())
        )));
    }
    let block = 1usize << levels;
    let padded_len = x.len().div_ceil(block) * block;
    let mut approx = x.to_vec();
    approx.resize(padded_len, 0.0);
    let g = db4_highpass();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let n = approx.len();
        let half = n / 2;
        let mut a = vec![0.0; half];
        let mut d = vec![0.0; half];
        for k in 0..half {
            let (mut sa, mut sd) = (0.0, 0.0);
            for m in 0..8 {
                let v = approx[(2 * k + m) % n];
                sa += DB4_LOWPASS[m] * v;
                sd += g[m] * v;
            }
            a[k] = sa;
            d[k] = sd;
        }
        details.push(d);
        approx = a;
    }
    Ok(WaveletBands {
        details,
        approx,
        signal_len: x.len(),
    })
}

/// Synthesis inverse of [`dwt_db4`].
pub fn idwt_db4(bands: &WaveletBands) -> Result<Vec<f64>> {
    let g = db4_highpass();
    let mut approx = bands.approx.clone();
    for d in bands.details.iter().rev() {
        if d.len() != approx.len() {
            return Err(Error::Parameter(format!(
                "band length mismatch: detail {} vs approximation {}",
                d.len(),
                approx.len()
            )));
        }
        let n = 2 * approx.len();
        let mut out = vec![0.0; n];
        for k in 0..approx.len() {
            for m in 0..8 {
                let idx = (2 * k + m) % n;
                out[idx] += DB4_LOWPASS[m] * approx[k] + g[m] * d[k];
            }
        }
        approx = out;
    }
    approx.truncate(bands.signal_len);
    Ok(approx)
}

/// Per electrode, one row per subband (detail 1..L, then approximation L),
/// each row the absolute coefficients nearest-neighbour resampled to `width`.
pub fn wavelet_scalogram(trial: &Trial, levels: usize, width: usize) -> Result<TfdImage> {
    if width == 0 {
        return Err(Error::Parameter("scalogram width must be positive".into()));
    }
    let rows = levels + 1;
    let mut data = Vec::with_capacity(trial.channels * rows * width);
    for c in 0..trial.channels {
        let bands = dwt_db4(trial.channel(c), levels)?;
        for band in bands.details.iter().chain(std::iter::once(&bands.approx)) {
            let n = band.len();
            data.extend((0..width).map(|i| band[i * n / width].abs() as f32));
        }
    }
    Ok(TfdImage {
        kind: TfdKind::Wavelet,
        channels: trial.channels,
        rows,
        cols: width,
        hz_per_row: 0.0,
        samples_per_col: (trial.len() as f64 / width as f64) as f32,
        data,
    })
}

/// The trial as a single-plane `[1 × electrodes × samples]` image.
pub fn raw2d(trial: &Trial) -> TfdImage {
    TfdImage {
        kind: TfdKind::Raw2d,
        channels: 1,
        rows: trial.channels,
        cols: trial.len(),
        hz_per_row: 0.0,
        samples_per_col: 1.0,
        data: trial.data.iter().map(|&v| v as f32).collect(),
    }
}

// ---------------------------------------------------------------------------

/// A representation choice with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Representation {
    Stft(StftConfig),
    Wavelet { levels: usize, width: usize },
    Raw2d,
}

impl Representation {
    pub fn default_for(kind: TfdKind) -> Self {
        match kind {
            TfdKind::Stft => Representation::Stft(StftConfig::default()),
            TfdKind::Wavelet => Representation::Wavelet {
                levels: 5,
                width: 64,
            },
            TfdKind::Raw2d => Representation::Raw2d,
        }
    }

    pub fn kind(&self) -> TfdKind {
        match self {
            Representation::Stft(_) => TfdKind::Stft,
            Representation::Wavelet { .. } => TfdKind::Wavelet,
            Representation::Raw2d => TfdKind::Raw2d,
        }
    }

    /// `[channels, rows, cols]` produced for trials of the given geometry.
    pub fn output_shape(&self, channels: usize, len: usize, fs: f64) -> [usize; 3] {
        match self {
            Representation::Stft(cfg) => [channels, cfg.bins(), cfg.frames(len, fs)],
            Representation::Wavelet { levels, width } => [channels, levels + 1, *width],
            Representation::Raw2d => [1, channels, len],
        }
    }

    pub fn transform(&self, trial: &Trial, fs: f64) -> Result<TfdImage> {
        match self {
            Representation::Stft(cfg) => stft_spectrogram(trial, cfg, fs),
            Representation::Wavelet { levels, width } => wavelet_scalogram(trial, *levels, *width),
            Representation::Raw2d => Ok(raw2d(trial)),
        }
    }

    /// Transforms every trial; output order matches input order.
    pub fn transform_all(&self, trials: &[Trial], fs: f64) -> Result<Vec<TfdImage>> {
        match self {
            Representation::Stft(cfg) => {
                let plan = Stft::new(*cfg, fs)?;
                par::map(trials, |t| plan.spectrogram(t)).into_iter().collect()
            }
            _ => par::map(trials, |t| self.transform(t, fs))
                .into_iter()
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn trial_from(channels: usize, data: Vec<f64>) -> Trial {
        Trial::new("t", "s", 0, "i", channels, data)
    }

    #[test]
    fn reference_geometry_shape() {
        let t = trial_from(128, vec![0.0; 128 * 500]);
        let img = stft_spectrogram(&t, &StftConfig::default(), 1000.0).unwrap();
        assert_eq!(img.shape(), [128, 33, 24]);
        assert!(img.data.iter().all(|&v| v == 0.0));
        assert_eq!(img.hz_per_row, 15.625);
    }

    #[test]
    fn short_trial_is_a_length_error() {
        let t = trial_from(1, vec![0.0; 30]);
        assert!(matches!(
            stft_spectrogram(&t, &StftConfig::default(), 1000.0),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn hop_longer_than_window_rejected() {
        let cfg = StftConfig {
            hop_ms: 50.0,
            ..StftConfig::default()
        };
        assert!(Stft::new(cfg, 1000.0).is_err());
    }

    #[test]
    fn bin_two_tone_peaks_in_bin_two() {
        let x: Vec<f64> = (0..500)
            .map(|t| (2.0 * PI * 31.25 * t as f64 / 1000.0).sin())
            .collect();
        let cfg = StftConfig {
            window_fn: WindowFn::Rectangular,
            scaling: Scaling::Magnitude,
            normalize: false,
            ..StftConfig::default()
        };
        let mags = Stft::new(cfg, 1000.0).unwrap().magnitudes(&x).unwrap();
        for f in 0..24 {
            let best = (0..33)
                .max_by(|&a, &b| mags[a][f].partial_cmp(&mags[b][f]).unwrap())
                .unwrap();
            assert_eq!(best, 2, "frame {f}");
        }
    }

    #[test]
    fn db4_filter_is_orthonormal() {
        let h = DB4_LOWPASS;
        assert!((h.iter().sum::<f64>() - 2f64.sqrt()).abs() < 1e-12);
        assert!((h.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-11);
        for shift in 1..4 {
            let dot: f64 = (0..8 - 2 * shift).map(|k| h[k] * h[k + 2 * shift]).sum();
            assert!(dot.abs() < 1e-11);
        }
        // four vanishing moments of the wavelet
        let g = db4_highpass();
        for p in 0..4 {
            let m: f64 = g.iter().enumerate().map(|(k, v)| (k as f64).powi(p) * v).sum();
            assert!(m.abs() < 1e-7, "moment {p}: {m}");
        }
    }

    #[test]
    fn dwt_zero_signal() {
        let b = dwt_db4(&[0.0; 500], 5).unwrap();
        assert_eq!(b.levels(), 5);
        assert!(b.details.iter().flatten().all(|&v| v == 0.0));
        assert!(b.approx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dwt_level_limit() {
        assert_eq!(dwt_max_level(500), 6);
        assert!(dwt_db4(&[1.0; 500], 7).is_err());
        assert!(dwt_db4(&[1.0; 500], 0).is_err());
    }

    #[test]
    fn scalogram_shape_and_bands() {
        let t = trial_from(128, vec![0.0; 128 * 500]);
        assert_eq!(wavelet_scalogram(&t, 5, 64).unwrap().shape(), [128, 6, 64]);

        let row_energy = |freq: f64| -> Vec<f64> {
            let x: Vec<f64> = (0..500)
                .map(|n| (2.0 * PI * freq * n as f64 / 1000.0).sin())
                .collect();
            let b = dwt_db4(&x, 5).unwrap();
            b.details
                .iter()
                .chain(std::iter::once(&b.approx))
                .map(|band| band.iter().map(|v| v * v).sum())
                .collect()
        };
        let argmax = |e: &[f64]| {
            (0..e.len())
                .max_by(|&a, &b| e[a].partial_cmp(&e[b]).unwrap())
                .unwrap()
        };
        let high = row_energy(200.0);
        let total: f64 = high.iter().sum();
        assert_eq!(argmax(&high), 1);
        assert!((high[0] + high[1]) / total > 0.9);
        let low = row_energy(20.0);
        assert!(argmax(&low) >= 4);
    }

    #[test]
    fn raw2d_is_identity_layout() {
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let t = trial_from(3, data);
        let img = raw2d(&t);
        assert_eq!(img.shape(), [1, 3, 4]);
        for c in 0..3 {
            for s in 0..4 {
                assert_eq!(img.at(0, c, s) as f64, t.channel(c)[s]);
            }
        }
    }

    #[test]
    fn tfdi_round_trip() {
        let t = trial_from(2, (0..1000).map(|v| (v as f64 * 0.37).sin()).collect());
        let img = stft_spectrogram(&t, &StftConfig::default(), 1000.0).unwrap();
        assert_eq!(TfdImage::from_bytes(&img.to_bytes()).unwrap(), img);
        let mut bytes = img.to_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(TfdImage::from_bytes(&bytes).is_err());
    }
}
