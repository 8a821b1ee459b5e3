//! Notch and band-pass Butterworth filtering, zero-phase application and
//! per-channel standardization.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dataset::Trial;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    NotchBandstop,
    Bandpass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub low_hz: f64,
    pub high_hz: f64,
    /// Prototype order; band filters have twice as many poles.
    pub order: usize,
    pub sampling_rate_hz: f64,
}

impl FilterSpec {
    /// 49-51 Hz line-noise band-stop.
    pub fn line_notch(sampling_rate_hz: f64) -> Self {
        Self {
            kind: FilterKind::NotchBandstop,
            low_hz: 49.0,
            high_hz: 51.0,
            order: 2,
            sampling_rate_hz,
        }
    }

    /// 14-70 Hz second-order band-pass.
    pub fn visual_band(sampling_rate_hz: f64) -> Self {
        Self {
            kind: FilterKind::Bandpass,
            low_hz: 14.0,
            high_hz: 70.0,
            order: 2,
            sampling_rate_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyq = self.sampling_rate_hz / 2.0;
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyq) {
            return Err(Error::Parameter(format!(
                "band edges must satisfy 0 < {} < {} < {nyq}",
                self.low_hz, self.high_hz
            )));
        }
        if self.order == 0 {
            return Err(Error::Parameter("filter order must be positive".into()));
        }
        Ok(())
    }
}

/// Second-order section, `H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + z_inv * self.b1 + z2 * self.b2) / (1.0 + z_inv * self.a1 + z2 * self.a2)
    }

    /// Largest pole modulus.
    pub fn pole_radius(&self) -> f64 {
        let disc = self.a1 * self.a1 - 4.0 * self.a2;
        if disc < 0.0 {
            self.a2.abs().sqrt()
        } else {
            let r = disc.sqrt();
            ((-self.a1 + r) / 2.0).abs().max(((-self.a1 - r) / 2.0).abs())
        }
    }

    /// Filter state that yields steady-state output for a constant input of 1.
    fn step_state(&self) -> [f64; 2] {
        let gain = (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2);
        let z2 = self.b2 - self.a2 * gain;
        let z1 = self.b1 - self.a1 * gain + z2;
        [z1, z2]
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
}

impl BiquadCascade {
    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / fs;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude(&self, freq_hz: f64, fs: f64) -> f64 {
        self.response(freq_hz, fs).norm()
    }

    pub fn magnitude_db(&self, freq_hz: f64, fs: f64) -> f64 {
        20.0 * self.magnitude(freq_hz, fs).log10()
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(|s| s.pole_radius() < 1.0)
    }

    /// Single causal pass (transposed direct form II), starting from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            run_section(s, &mut y, [0.0, 0.0]);
        }
        y
    }

    pub fn impulse_response(&self, len: usize) -> Vec<f64> {
        let mut x = vec![0.0; len];
        if len > 0 {
            x[0] = 1.0;
        }
        self.filter(&x)
    }

    /// Upper bound of the group delay (samples) over a dense grid in (0, pi).
    pub fn group_delay_bound(&self) -> f64 {
        const GRID: usize = 4096;
        let mut worst = 0.0f64;
        for i in 1..GRID {
            let w = PI * i as f64 / GRID as f64;
            let mut total = 0.0;
            let mut ok = true;
            for s in &self.sections {
                match (
                    poly_group_delay(&[s.b0, s.b1, s.b2], w),
                    poly_group_delay(&[1.0, s.a1, s.a2], w),
                ) {
                    (Some(gb), Some(ga)) => total += gb - ga,
                    _ => ok = false,
                }
            }
            if ok {
                worst = worst.max(total);
            }
        }
        worst
    }

    /// Minimum signal length accepted by [`filter_zero_phase`].
    pub fn min_signal_len(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }

    /// Edge padding used by [`filter_zero_phase`].
    pub fn pad_len(&self) -> usize {
        (3.0 * self.group_delay_bound()).ceil() as usize
    }
}

fn run_section(s: &Biquad, x: &mut [f64], mut z: [f64; 2]) {
    for v in x.iter_mut() {
        let input = *v;
        let out = s.b0 * input + z[0];
        z[0] = s.b1 * input - s.a1 * out + z[1];
        z[1] = s.b2 * input - s.a2 * out;
        *v = out;
    }
}

/// Group delay of an FIR polynomial in z^-1; `None` where its magnitude
/// vanishes (the phase is undefined there).
fn poly_group_delay(c: &[f64], w: f64) -> Option<f64> {
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = Complex64::new(0.0, 0.0);
    for (k, &ck) in c.iter().enumerate() {
        let e = Complex64::from_polar(1.0, -w * k as f64);
        num += e * (k as f64 * ck);
        den += e * ck;
    }
    if den.norm() < 1e-9 {
        None
    } else {
        Some((num / den).re)
    }
}

/// Butterworth band-pass or band-stop design via bilinear transform of the
/// analog prototype, with pre-warped band edges so the -3 dB points land
/// exactly on `low_hz` and `high_hz`.
pub fn design_filter(spec: &FilterSpec) -> Result<BiquadCascade> {
    spec.validate()?;
    let fs = spec.sampling_rate_hz;
    let k = 2.0 * fs;
    let w1 = k * (PI * spec.low_hz / fs).tan();
    let w2 = k * (PI * spec.high_hz / fs).tan();
    let bw = w2 - w1;
    let w0sq = w1 * w2;
    let n = spec.order;

    let mut analog_poles = Vec::with_capacity(2 * n);
    for i in 0..n {
        let theta = PI * (2 * i + n + 1) as f64 / (2 * n) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let half = match spec.kind {
            FilterKind::Bandpass => p * (bw / 2.0),
            FilterKind::NotchBandstop => (bw / 2.0) / p,
        };
        let root = (half * half - w0sq).sqrt();
        analog_poles.push(half + root);
        analog_poles.push(half - root);
    }
    let digital: Vec<Complex64> = analog_poles
        .iter()
        .map(|&s| (k + s) / (k - s))
        .collect();

    let denominators = pair_poles(&digital)?;
    let numerator = match spec.kind {
        // one zero at z = 1 (DC) and one at z = -1 (Nyquist) per section
        FilterKind::Bandpass => [1.0, 0.0, -1.0],
        FilterKind::NotchBandstop => {
            let w0 = 2.0 * (w0sq.sqrt() / k).atan();
            [1.0, -2.0 * w0.cos(), 1.0]
        }
    };
    let mut sections: Vec<Biquad> = denominators
        .into_iter()
        .map(|(a1, a2)| Biquad {
            b0: numerator[0],
            b1: numerator[1],
            b2: numerator[2],
            a1,
            a2,
        })
        .collect();

    // Normalize to unit gain where the analog prototype has unit gain:
    // band center for band-pass, DC for band-stop.
    let cascade = BiquadCascade {
        sections: sections.clone(),
    };
    let reference_hz = match spec.kind {
        FilterKind::Bandpass => fs / PI * (w0sq.sqrt() / k).atan(),
        FilterKind::NotchBandstop => 0.0,
    };
    let gain = cascade.magnitude(reference_hz, fs);
    if !(gain.is_finite() && gain > 0.0) {
        return Err(Error::Design(format!("degenerate gain {gain}")));
    }
    let per_section = gain.powf(-1.0 / sections.len() as f64);
    for s in &mut sections {
        s.b0 *= per_section;
        s.b1 *= per_section;
        s.b2 *= per_section;
    }
    let out = BiquadCascade { sections };
    if !out.is_stable() {
        return Err(Error::Design("designed cascade is unstable".into()));
    }
    Ok(out)
}

/// Groups digital poles into real second-order denominators `(a1, a2)`.
fn pair_poles(poles: &[Complex64]) -> Result<Vec<(f64, f64)>> {
    const TOL: f64 = 1e-12;
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > TOL).collect();
    let mut real: Vec<f64> = poles
        .iter()
        .filter(|p| p.im.abs() <= TOL)
        .map(|p| p.re)
        .collect();
    complex.sort_by(|a, b| a.arg().partial_cmp(&b.arg()).unwrap());
    real.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if real.len() % 2 != 0 {
        return Err(Error::Design("odd number of real poles".into()));
    }
    let mut out: Vec<(f64, f64)> = complex
        .iter()
        .map(|p| (-2.0 * p.re, p.norm_sqr()))
        .collect();
    for pair in real.chunks(2) {
        out.push((-(pair[0] + pair[1]), pair[0] * pair[1]));
    }
    Ok(out)
}

/// Forward-backward application of `f` with odd-reflection edge padding and
/// steady-state initial conditions. The result has zero phase and magnitude
/// `|H|^2`.
pub fn filter_zero_phase(x: &[f64], f: &BiquadCascade) -> Result<Vec<f64>> {
    let n = x.len();
    let min = f.min_signal_len();
    if n <= min {
        return Err(Error::Length {
            needed: min + 1,
            got: n,
        });
    }
    let pad = f.pad_len().max(min);
    let mut ext = odd_extend(x, pad);
    apply_with_steady_state(f, &mut ext);
    ext.reverse();
    apply_with_steady_state(f, &mut ext);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

fn apply_with_steady_state(f: &BiquadCascade, x: &mut [f64]) {
    let mut level = x[0];
    for s in &f.sections {
        let [z1, z2] = s.step_state();
        run_section(s, x, [z1 * level, z2 * level]);
        level *= s.dc_gain();
    }
}

/// Extends `x` by `pad` samples on each side using point reflection about the
/// end samples, repeated as often as needed.
pub fn odd_extend(x: &[f64], pad: usize) -> Vec<f64> {
    let mut ext = x.to_vec();
    let mut left = pad;
    while left > 0 {
        let m = left.min(ext.len() - 1);
        if m == 0 {
            // single-sample signal: extend with its constant value
            let v = ext[0];
            let mut out = vec![v; left];
            out.extend_from_slice(&ext);
            ext = out;
            break;
        }
        let anchor = ext[0];
        let mut front: Vec<f64> = (1..=m).rev().map(|j| 2.0 * anchor - ext[j]).collect();
        front.extend_from_slice(&ext);
        ext = front;
        left -= m;
    }
    let mut right = pad;
    while right > 0 {
        let len = ext.len();
        let m = right.min(len - 1);
        if m == 0 {
            let v = ext[len - 1];
            ext.extend(std::iter::repeat(v).take(right));
            break;
        }
        let anchor = ext[len - 1];
        let tail: Vec<f64> = (1..=m).map(|j| 2.0 * anchor - ext[len - 1 - j]).collect();
        ext.extend(tail);
        right -= m;
    }
    ext
}

/// Notice emitted when a channel cannot be z-scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstantChannel {
    pub trial_id: String,
    pub channel: usize,
}

/// Per-channel z-score over the time axis (population standard deviation).
/// Constant channels become all-zero and are reported.
pub fn standardize(trial: &Trial) -> (Trial, Vec<ConstantChannel>) {
    let mut out = trial.clone();
    let mut warnings = Vec::new();
    for c in 0..trial.channels {
        if !standardize_in_place(out.channel_mut(c)) {
            warnings.push(ConstantChannel {
                trial_id: trial.trial_id.clone(),
                channel: c,
            });
        }
    }
    (out, warnings)
}

/// Returns `false` (and zeroes the slice) when the slice is constant.
pub fn standardize_in_place(x: &mut [f64]) -> bool {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || std <= 1e-12 * mean.abs() {
        x.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    x.iter_mut().for_each(|v| *v = (*v - mean) / std);
    true
}

/// Notch, then band-pass, then standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub notch: BiquadCascade,
    pub bandpass: BiquadCascade,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub trial: Trial,
    pub warnings: Vec<ConstantChannel>,
}

impl Preprocessor {
    pub fn new(notch: &FilterSpec, bandpass: &FilterSpec) -> Result<Self> {
        Ok(Self {
            notch: design_filter(notch)?,
            bandpass: design_filter(bandpass)?,
        })
    }

    /// The 49-51 Hz notch and 14-70 Hz band-pass at `fs`.
    pub fn standard(fs: f64) -> Result<Self> {
        Self::new(&FilterSpec::line_notch(fs), &FilterSpec::visual_band(fs))
    }

    /// Filters one channel (notch then band-pass), without standardizing.
    pub fn filter_channel(&self, x: &[f64]) -> Result<Vec<f64>> {
        let notched = filter_zero_phase(x, &self.notch)?;
        filter_zero_phase(&notched, &self.bandpass)
    }

    pub fn preprocess(&self, trial: &Trial) -> Result<Preprocessed> {
        let mut data = Vec::with_capacity(trial.data.len());
        for c in 0..trial.channels {
            data.extend(self.filter_channel(trial.channel(c))?);
        }
        let filtered = trial.with_data(data);
        let (trial, warnings) = standardize(&filtered);
        Ok(Preprocessed { trial, warnings })
    }

    /// Preprocesses every trial; output order matches input order.
    pub fn preprocess_all(&self, trials: &[Trial]) -> Result<Vec<Preprocessed>> {
        par::map(trials, |t| self.preprocess(t)).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 1000.0;

    fn sine(freq: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|t| (2.0 * PI * freq * t as f64 / FS).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    /// Analog Butterworth band-pass magnitude at a pre-warped frequency.
    fn analog_bandpass_mag(f: f64, lo: f64, hi: f64, order: i32) -> f64 {
        let warp = |x: f64| (PI * x / FS).tan();
        let (w, w1, w2) = (warp(f), warp(lo), warp(hi));
        let q = (w * w - w1 * w2) / (w * (w2 - w1));
        1.0 / (1.0 + q.powi(2 * order)).sqrt()
    }

    #[test]
    fn bandpass_matches_analog_formula() {
        let bp = design_filter(&FilterSpec::visual_band(FS)).unwrap();
        for f in [5.0, 14.0, 20.0, 31.47, 37.4, 40.0, 55.0, 70.0, 120.0, 300.0] {
            let got = bp.magnitude(f, FS);
            let want = analog_bandpass_mag(f, 14.0, 70.0, 2);
            assert!((got - want).abs() < 1e-9, "{f} Hz: {got} vs {want}");
        }
        assert!(bp.magnitude_db(37.4, FS).abs() < 0.5);
        assert_eq!(bp.magnitude(0.0, FS), 0.0);
    }

    #[test]
    fn band_edges_are_minus_3db() {
        for spec in [FilterSpec::visual_band(FS), FilterSpec::line_notch(FS)] {
            let f = design_filter(&spec).unwrap();
            for edge in [spec.low_hz, spec.high_hz] {
                let db = f.magnitude_db(edge, FS);
                assert!((db + 3.0103).abs() < 0.02 * 3.0103, "{edge}: {db}");
            }
        }
    }

    // Denominators from scipy.signal.butter(2, [lo, hi], btype, fs=1000, output="sos").
    #[test]
    fn denominators_match_reference_design() {
        let check = |spec: FilterSpec, mut want: Vec<(f64, f64)>| {
            let f = design_filter(&spec).unwrap();
            let mut got: Vec<(f64, f64)> = f.sections.iter().map(|s| (s.a1, s.a2)).collect();
            got.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            want.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for (g, w) in got.iter().zip(&want) {
                assert!((g.0 - w.0).abs() < 1e-12 && (g.1 - w.1).abs() < 1e-12, "{g:?} vs {w:?}");
            }
        };
        check(
            FilterSpec::visual_band(FS),
            vec![
                (-1.5475567411151183, 0.6733886399777622),
                (-1.8936477790564727, 0.903053088940489),
            ],
        );
        check(
            FilterSpec::line_notch(FS),
            vec![
                (-1.8908514634624487, 0.9910331479054232),
                (-1.896548069620061, 0.9912740584817218),
            ],
        );
    }

    #[test]
    fn notch_attenuates_50hz() {
        let notch = design_filter(&FilterSpec::line_notch(FS)).unwrap();
        assert!(notch.magnitude_db(50.0, FS) <= -20.0);
        assert!(notch.magnitude_db(0.0, FS).abs() < 1e-9);
    }

    #[test]
    fn degenerate_band_rejected() {
        let mut spec = FilterSpec::visual_band(FS);
        spec.high_hz = 600.0;
        assert!(design_filter(&spec).is_err());
        spec.high_hz = 10.0;
        assert!(design_filter(&spec).is_err());
    }

    #[test]
    fn impulse_response_decays() {
        for spec in [FilterSpec::visual_band(FS), FilterSpec::line_notch(FS)] {
            let f = design_filter(&spec).unwrap();
            assert!(f.is_stable());
            let h = f.impulse_response(20_000);
            let peak = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let tail = h[15_000..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(tail < 1e-8 * peak);
        }
    }

    #[test]
    fn zero_phase_notch_removes_line_noise() {
        let notch = design_filter(&FilterSpec::line_notch(FS)).unwrap();
        let x = sine(50.0, 2001);
        let y = filter_zero_phase(&x, &notch).unwrap();
        assert!(rms(&y) <= 0.01 * rms(&x), "{}", rms(&y) / rms(&x));
    }

    #[test]
    fn zero_phase_squares_the_magnitude() {
        let bp = design_filter(&FilterSpec::visual_band(FS)).unwrap();
        for f in [20.0, 40.0, 65.0] {
            let x = sine(f, 4000);
            let y = filter_zero_phase(&x, &bp).unwrap();
            let interior = 1000..3000;
            let ratio = rms(&y[interior.clone()]) / rms(&x[interior]);
            let want = bp.magnitude(f, FS).powi(2);
            assert!((ratio - want).abs() < 2e-3, "{f}: {ratio} vs {want}");
        }
        let x = sine(40.0, 1000);
        let y = filter_zero_phase(&x, &bp).unwrap();
        let db = 20.0 * (rms(&y) / rms(&x)).log10();
        assert!(db.abs() < 1.0);
    }

    #[test]
    fn zero_phase_preserves_peaks() {
        let bp = design_filter(&FilterSpec::visual_band(FS)).unwrap();
        let x = sine(31.0, 1000);
        let y = filter_zero_phase(&x, &bp).unwrap();
        let peaks = |s: &[f64]| -> Vec<usize> {
            (200..800)
                .filter(|&i| s[i] > s[i - 1] && s[i] >= s[i + 1] && s[i] > 0.5)
                .collect()
        };
        let (px, py) = (peaks(&x), peaks(&y));
        assert_eq!(px.len(), py.len());
        for (a, b) in px.iter().zip(&py) {
            assert!(a.abs_diff(*b) <= 1);
        }
    }

    #[test]
    fn zero_signal_stays_zero() {
        let pre = Preprocessor::standard(FS).unwrap();
        let y = pre.filter_channel(&vec![0.0; 500]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_signal_is_a_length_error() {
        let bp = design_filter(&FilterSpec::visual_band(FS)).unwrap();
        assert!(matches!(
            filter_zero_phase(&[1.0; 10], &bp),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn odd_extension_is_point_symmetric() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let e = odd_extend(&x, 2);
        assert_eq!(e, vec![-2.0, 0.0, 1.0, 2.0, 4.0, 7.0, 10.0, 12.0]);
        // longer than the signal: reflections repeat
        let e = odd_extend(&x, 9);
        assert_eq!(e.len(), 4 + 18);
        assert_eq!(&e[9..13], &x);
    }

    #[test]
    fn standardize_hand_values() {
        let t = Trial::new("t", "s", 0, "i", 2, vec![1.0, 2.0, 3.0, 5.0, 5.0, 5.0]);
        let (z, warnings) = standardize(&t);
        let k = 1.5f64.sqrt();
        let want = [-k, 0.0, k];
        for (g, w) in z.channel(0).iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!((z.channel(0)[0] + 1.2247).abs() < 1e-4);
        assert_eq!(z.channel(1), &[0.0, 0.0, 0.0]);
        assert_eq!(
            warnings,
            vec![ConstantChannel {
                trial_id: "t".into(),
                channel: 1
            }]
        );
    }

    #[test]
    fn zero_trial_preprocesses_to_zero_with_warnings() {
        let pre = Preprocessor::standard(FS).unwrap();
        let t = Trial::new("t", "s", 0, "i", 3, vec![0.0; 1500]);
        let out = pre.preprocess(&t).unwrap();
        assert!(out.trial.data.iter().all(|&v| v == 0.0));
        assert_eq!(out.warnings.len(), 3);
    }
}
