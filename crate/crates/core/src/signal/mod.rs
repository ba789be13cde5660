//! Waveform primitives: band-pass filtering, normalization, differencing,
//! spectral heart-rate estimation, correlation and resampling.

mod filter;

use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filter::{Biquad, SosFilter};

/// Default heart-rate pass band, Hz.
pub const HR_BAND_HZ: (f64, f64) = (0.75, 2.5);
/// Default heart-rate search band, BPM (the image of [`HR_BAND_HZ`]).
pub const HR_BAND_BPM: (f64, f64) = (45.0, 150.0);
/// Default spectral grid spacing, BPM.
pub const SPECTRUM_RESOLUTION_BPM: f64 = 0.5;

/// Uniformly sampled real-valued signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f64>,
    fs: f64,
    start_time: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        Self::with_start(samples, fs, 0.0)
    }

    pub fn with_start(samples: Vec<f64>, fs: f64, start_time: f64) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::InvalidWaveform(format!("sampling rate {fs} must be positive")));
        }
        if samples.len() < 2 {
            return Err(Error::TooShort { needed: 2, got: samples.len() });
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidWaveform(format!("sample {i} is not finite")));
        }
        if !start_time.is_finite() {
            return Err(Error::InvalidWaveform("start time is not finite".into()));
        }
        Ok(Self { samples, fs, start_time })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    /// Time stamp of the last sample.
    pub fn end_time(&self) -> f64 {
        self.time_of(self.samples.len() - 1)
    }

    pub fn time_of(&self, i: usize) -> f64 {
        self.start_time + i as f64 / self.fs
    }

    /// Same sampling rate and start, new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::with_start(samples, self.fs, self.start_time)
    }

    /// Samples `[from, to)` as a new waveform starting at the time of `from`.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        if from > to || to > self.samples.len() {
            return Err(Error::Precondition(format!(
                "slice [{from}, {to}) outside waveform of length {}",
                self.samples.len()
            )));
        }
        Self::with_start(self.samples[from..to].to_vec(), self.fs, self.time_of(from))
    }

    /// Samples whose time stamps lie in `[t0, t1)`.
    pub fn crop_time(&self, t0: f64, t1: f64) -> Result<Self> {
        let idx = |t: f64| {
            (((t - self.start_time) * self.fs) - 1e-9).ceil().clamp(0.0, self.len() as f64) as usize
        };
        self.slice(idx(t0), idx(t1))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_s", "value"])?;
        for (i, v) in self.samples.iter().enumerate() {
            w.write_record([self.time_of(i).to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "t_s" || &headers[1] != "value" {
            return Err(Error::InvalidWaveform(format!(
                "expected header `t_s,value`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidWaveform(format!("bad number `{s}`: {e}")))
            };
            times.push(parse(&rec[0])?);
            samples.push(parse(&rec[1])?);
        }
        if times.len() < 2 {
            return Err(Error::TooShort { needed: 2, got: times.len() });
        }
        let span = times[times.len() - 1] - times[0];
        if !(span > 0.0) {
            return Err(Error::InvalidWaveform("time stamps are not increasing".into()));
        }
        let fs = snap_rate((times.len() - 1) as f64 / span);
        Self::with_start(samples, fs, times[0])
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Rates recovered from time stamps are rounded to micro-hertz so a rate that
/// was written out comes back exactly.
pub(crate) fn snap_rate(fs: f64) -> f64 {
    (fs * 1e6).round() / 1e6
}

/// Discrete power spectrum on a beats-per-minute axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    pub freqs_bpm: Vec<f64>,
    pub power: Vec<f64>,
}

impl PowerSpectrum {
    /// Index and frequency of the largest bin with frequency in `[lo, hi]`.
    pub fn peak_in(&self, lo: f64, hi: f64) -> Option<(usize, f64)> {
        let mut best: Option<usize> = None;
        for (i, &f) in self.freqs_bpm.iter().enumerate() {
            if f < lo || f > hi {
                continue;
            }
            if best.is_none_or(|b| self.power[i] > self.power[b]) {
                best = Some(i);
            }
        }
        best.map(|i| (i, self.freqs_bpm[i]))
    }

    pub fn bin_spacing_bpm(&self) -> f64 {
        self.freqs_bpm[1] - self.freqs_bpm[0]
    }
}

/// Butterworth band-pass applied forward and backward (zero phase).
pub fn bandpass(w: &Waveform, lo: f64, hi: f64, order: usize) -> Result<Waveform> {
    let filt = SosFilter::butter_bandpass(order, lo, hi, w.fs())?;
    let needed = 3 * order;
    if w.len() < needed {
        return Err(Error::TooShort { needed, got: w.len() });
    }
    w.with_samples(filt.filtfilt(w.samples()))
}

/// [`bandpass`] with the heart-rate defaults: 0.75 to 2.5 Hz, order 2.
pub fn bandpass_hr(w: &Waveform) -> Result<Waveform> {
    bandpass(w, HR_BAND_HZ.0, HR_BAND_HZ.1, 2)
}

/// Affine map onto `[0, 1]` by the signal's extrema.
pub fn maxmin_normalize(w: &Waveform) -> Result<Waveform> {
    let (lo, hi) = min_max(w.samples());
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::DegenerateRange(format!("constant signal (value {lo})")));
    }
    w.with_samples(w.samples().iter().map(|x| ((x - lo) / range).clamp(0.0, 1.0)).collect())
}

pub(crate) fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// `x[i+1] - x[i]`; one sample shorter than the input.
pub fn first_difference(w: &Waveform) -> Result<Waveform> {
    // the output must itself hold at least two samples
    if w.len() < 3 {
        return Err(Error::TooShort { needed: 3, got: w.len() });
    }
    w.with_samples(w.samples().windows(2).map(|p| p[1] - p[0]).collect())
}

/// Running sum, the inverse of [`first_difference`] up to the first sample.
pub fn cumulative_sum(w: &Waveform) -> Waveform {
    let mut acc = 0.0;
    let samples = w
        .samples()
        .iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect();
    Waveform { samples, fs: w.fs, start_time: w.start_time }
}

/// Number of FFT points giving a grid no coarser than `resolution_bpm`.
pub fn fft_len(n: usize, fs: f64, resolution_bpm: f64) -> usize {
    let needed = (60.0 * fs / resolution_bpm - 1e-9).ceil() as usize;
    n.max(needed)
}

/// Power spectrum `|X_k|^2` of the mean-removed, zero-padded signal.
pub fn power_spectrum(w: &Waveform, resolution_bpm: f64) -> Result<PowerSpectrum> {
    if !(resolution_bpm > 0.0) {
        return Err(Error::Config(format!("spectral resolution {resolution_bpm} must be positive")));
    }
    let n = w.len();
    let nfft = fft_len(n, w.fs(), resolution_bpm);
    let mean = w.samples().iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = w
        .samples()
        .iter()
        .map(|x| Complex64::new(x - mean, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(nfft)
        .collect();
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let bins = nfft / 2 + 1;
    let step = 60.0 * w.fs() / nfft as f64;
    Ok(PowerSpectrum {
        freqs_bpm: (0..bins).map(|k| k as f64 * step).collect(),
        power: buf[..bins].iter().map(|c| c.norm_sqr()).collect(),
    })
}

/// Heart rate (BPM) at the in-band spectral peak of the band-passed signal.
pub fn estimate_hr(w: &Waveform, band_bpm: (f64, f64)) -> Result<f64> {
    let nyquist_bpm = 30.0 * w.fs();
    let (lo, hi) = band_bpm;
    if !(lo > 0.0 && lo < hi && hi < nyquist_bpm) {
        return Err(Error::Estimation(format!(
            "band [{lo}, {hi}] BPM outside (0, {nyquist_bpm})"
        )));
    }
    let (mn, mx) = min_max(w.samples());
    if !(mx > mn) {
        return Err(Error::Estimation("constant signal has no spectral peak".into()));
    }
    let filtered = bandpass_hr(w)?;
    let spec = power_spectrum(&filtered, SPECTRUM_RESOLUTION_BPM)?;
    let (i, f) = spec
        .peak_in(lo, hi)
        .ok_or_else(|| Error::Estimation(format!("no spectral bins in [{lo}, {hi}] BPM")))?;
    let total: f64 = spec.power.iter().sum();
    if !(spec.power[i] > 1e-24 * total) || spec.power[i] == 0.0 {
        return Err(Error::Estimation("no in-band energy".into()));
    }
    Ok(f)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: a.len() });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Linear interpolation onto a uniform grid at `fs_target` covering the same
/// time span.
pub fn resample_linear(w: &Waveform, fs_target: f64) -> Result<Waveform> {
    if !(fs_target > 0.0 && fs_target.is_finite()) {
        return Err(Error::Config(format!("target rate {fs_target} must be positive")));
    }
    let n = w.len();
    let span = (n - 1) as f64 / w.fs();
    let n_out = (span * fs_target + 1e-9).floor() as usize + 1;
    let ratio = w.fs() / fs_target;
    let x = w.samples();
    let samples = (0..n_out)
        .map(|k| interp_at(x, k as f64 * ratio))
        .collect();
    Waveform::with_start(samples, fs_target, w.start_time())
}

/// Linear interpolation of `x` at fractional index `pos`, clamped to the ends.
pub(crate) fn interp_at(x: &[f64], pos: f64) -> f64 {
    let last = x.len() - 1;
    if pos <= 0.0 {
        return x[0];
    }
    if pos >= last as f64 {
        return x[last];
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if frac == 0.0 {
        x[i]
    } else {
        x[i] + (x[i + 1] - x[i]) * frac
    }
}

/// Zero mean, unit variance. Constant inputs are only centered.
pub fn standardize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for x in xs.iter_mut() {
        *x -= mean;
        if sd > f64::EPSILON * mean.abs() && sd > 0.0 {
            *x /= sd;
        }
    }
}

#[cfg(test)]
mod tests;
