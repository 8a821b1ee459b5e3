//! Real-time decode simulation over a continuous recording.
//!
//! A pacing thread releases consecutive trial-length windows as the sample
//! clock reaches their end and hands them to the decoder through a bounded
//! queue. When the decoder falls behind and the queue is full, the window is
//! dropped and counted.

use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, TrySendError};
use serde::{Deserialize, Serialize};

use crate::dataset::Trial;
use crate::dsp::Preprocessor;
use crate::nn::train::argmax;
use crate::nn::Model;
use crate::tfd::Representation;
use crate::{Error, Result};

/// Multichannel signal, row-major `[channels × samples]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub channels: usize,
    pub sampling_rate_hz: f64,
    pub data: Vec<f64>,
}

impl Recording {
    pub fn samples(&self) -> usize {
        self.data.len() / self.channels
    }

    /// Concatenates trials end to end into one stream.
    pub fn from_trials(trials: &[&Trial], sampling_rate_hz: f64) -> Self {
        let channels = trials.first().map_or(1, |t| t.channels);
        let total: usize = trials.iter().map(|t| t.len()).sum();
        let mut data = vec![0.0; channels * total];
        let mut offset = 0;
        for t in trials {
            for c in 0..channels {
                data[c * total + offset..c * total + offset + t.len()].copy_from_slice(t.channel(c));
            }
            offset += t.len();
        }
        Self {
            channels,
            sampling_rate_hz,
            data,
        }
    }

    /// Consecutive non-overlapping windows of `len` samples; a trailing
    /// partial window is discarded.
    pub fn segment(&self, len: usize) -> Result<Vec<Trial>> {
        let total = self.samples();
        if len == 0 || total < len {
            return Err(Error::Argument(format!(
                "recording of {total} samples is shorter than one {len}-sample window"
            )));
        }
        Ok((0..total / len)
            .map(|i| {
                let mut data = Vec::with_capacity(self.channels * len);
                for c in 0..self.channels {
                    let row = &self.data[c * total..(c + 1) * total];
                    data.extend_from_slice(&row[i * len..(i + 1) * len]);
                }
                Trial::new(format!("seg{i:05}"), "stream", 0, "", self.channels, data)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// 1 paces release at the sampling rate, 0 releases as fast as possible.
    pub rt_factor: f64,
    pub queue_depth: usize,
    pub trial_len: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            rt_factor: 0.0,
            queue_depth: 4,
            trial_len: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLatency {
    pub index: usize,
    pub predicted: usize,
    pub preprocess_ms: f64,
    pub tfd_ms: f64,
    pub inference_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rows: Vec<TrialLatency>,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub dropped: usize,
    pub trial_ms: f64,
    /// Trial duration minus the p99 decode latency; positive means the
    /// decoder keeps up.
    pub realtime_margin_ms: f64,
    pub wall_s: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Decodes one window: preprocessing, time-frequency transform, inference.
pub fn decode(
    trial: &Trial,
    model: &Model,
    pre: &Preprocessor,
    rep: &Representation,
    fs: f64,
) -> Result<(usize, [f64; 3])> {
    let t0 = Instant::now();
    let clean = pre.preprocess(trial)?.trial;
    let t1 = Instant::now();
    let image = rep.transform(&clean, fs)?;
    let t2 = Instant::now();
    let probs = model.predict(&[&image])?;
    let t3 = Instant::now();
    Ok((argmax(&probs[0]), [ms(t1 - t0), ms(t2 - t1), ms(t3 - t2)]))
}

pub fn stream_simulate(
    recording: &Recording,
    model: &Model,
    pre: &Preprocessor,
    rep: &Representation,
    cfg: &StreamConfig,
) -> Result<LatencyReport> {
    if rep.kind() != model.spec.input_kind {
        return Err(Error::Argument(format!(
            "checkpoint expects {} input, stream produces {}",
            model.spec.input_kind,
            rep.kind()
        )));
    }
    if !(cfg.rt_factor >= 0.0) || cfg.queue_depth == 0 {
        return Err(Error::Argument("rt factor must be non-negative and queue depth positive".into()));
    }
    let fs = recording.sampling_rate_hz;
    let windows = recording.segment(cfg.trial_len)?;
    let window_s = cfg.trial_len as f64 / fs;
    let (tx, rx) = bounded::<(usize, &Trial)>(cfg.queue_depth);
    let start = Instant::now();

    let (rows, dropped) = std::thread::scope(|s| {
        let producer = s.spawn(|| {
            let mut dropped = 0;
            for (i, w) in windows.iter().enumerate() {
                if cfg.rt_factor > 0.0 {
                    let due = start + Duration::from_secs_f64((i + 1) as f64 * window_s * cfg.rt_factor);
                    if let Some(wait) = due.checked_duration_since(Instant::now()) {
                        std::thread::sleep(wait);
                    }
                    match tx.try_send((i, w)) {
                        Ok(()) => {}
                        Err(TrySendError::Full(_)) => dropped += 1,
                        Err(TrySendError::Disconnected(_)) => break,
                    }
                } else if tx.send((i, w)).is_err() {
                    break;
                }
            }
            drop(tx);
            dropped
        });
        let mut rows = Vec::new();
        let mut failure = None;
        for (index, w) in rx.iter() {
            match decode(w, model, pre, rep, fs) {
                Ok((predicted, [p, t, n])) => rows.push(TrialLatency {
                    index,
                    predicted,
                    preprocess_ms: p,
                    tfd_ms: t,
                    inference_ms: n,
                    total_ms: p + t + n,
                }),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        drop(rx);
        let dropped = producer.join().expect("pacing thread panicked");
        match failure {
            Some(e) => Err(e),
            None => Ok((rows, dropped)),
        }
    })?;

    let mut totals: Vec<f64> = rows.iter().map(|r| r.total_ms).collect();
    totals.sort_by(f64::total_cmp);
    let trial_ms = window_s * 1e3;
    let p99 = percentile(&totals, 99.0);
    if dropped > 0 {
        log::warn!("{dropped} windows dropped: decoder fell behind the stream");
    }
    Ok(LatencyReport {
        p50_ms: percentile(&totals, 50.0),
        p95_ms: percentile(&totals, 95.0),
        p99_ms: p99,
        dropped,
        trial_ms,
        realtime_margin_ms: trial_ms - p99,
        wall_s: start.elapsed().as_secs_f64(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 5.0);
        assert_eq!(percentile(&v, 95.0), 10.0);
        assert_eq!(percentile(&[3.0], 99.0), 3.0);
    }

    #[test]
    fn segmentation_round_trip() {
        let a = Trial::new("a", "s", 0, "", 2, (0..8).map(f64::from).collect());
        let b = Trial::new("b", "s", 0, "", 2, (8..16).map(f64::from).collect());
        let rec = Recording::from_trials(&[&a, &b], 1000.0);
        let segs = rec.segment(4).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].data, a.data);
        assert_eq!(segs[1].data, b.data);
        assert!(rec.segment(9).is_err());
    }
}
