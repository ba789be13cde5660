//! Heart-rate metrics, the per-trial evaluation protocol and grouped reports.

mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Device, Lighting, Lux, Motion, SkinGroup, Trial, TrialMeta};
use crate::labelgen::finger_label;
use crate::model::{forward, preprocess_clip, NetworkParams};
use crate::signal::{bandpass_hr, cumulative_sum, estimate_hr, pearson, power_spectrum, Waveform, HR_BAND_BPM, SPECTRUM_RESOLUTION_BPM};

pub use report::{aggregate, format_cell, read_rows, write_rows, Cell, GroupField, Report};

/// Frequency range of the SNR template, BPM.
pub const SNR_BAND_BPM: (f64, f64) = (30.0, 240.0);
/// Half-width of the template around the fundamental, BPM.
pub const SNR_FUNDAMENTAL_HALF_WIDTH: f64 = 6.0;
/// Half-width of the template around the first harmonic, BPM.
pub const SNR_HARMONIC_HALF_WIDTH: f64 = 12.0;
/// Magnitude bound of reported SNR values, dB.
pub const SNR_CAP_DB: f64 = 60.0;

/// Mean absolute heart-rate error.
pub fn mae_hr(gold: &[f64], pred: &[f64]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch(gold.len(), pred.len()));
    }
    if gold.is_empty() {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    Ok(gold.iter().zip(pred).map(|(g, p)| (g - p).abs()).sum::<f64>() / gold.len() as f64)
}

/// Whether `f` lies in the SNR template for a pulse at `gold_hr`.
pub fn in_template(f: f64, gold_hr: f64) -> bool {
    (f - gold_hr).abs() <= SNR_FUNDAMENTAL_HALF_WIDTH || (f - 2.0 * gold_hr).abs() <= SNR_HARMONIC_HALF_WIDTH
}

/// Ratio, in dB, of spectral energy inside the heart-rate template to the
/// energy outside it over 30-240 BPM, bounded to +-60 dB.
pub fn snr_db(pred: &Waveform, gold_hr: f64) -> Result<f64> {
    let (lo, hi) = SNR_BAND_BPM;
    if !(lo..=hi).contains(&gold_hr) {
        return Err(Error::Template(gold_hr));
    }
    if 30.0 * pred.fs() < hi {
        return Err(Error::Precondition(format!(
            "sampling rate {} Hz cannot resolve {hi} BPM",
            pred.fs()
        )));
    }
    let spec = power_spectrum(pred, SPECTRUM_RESOLUTION_BPM)?;
    let (mut signal, mut noise) = (0.0, 0.0);
    for (&f, &p) in spec.freqs_bpm.iter().zip(&spec.power) {
        if f < lo || f > hi {
            continue;
        }
        if in_template(f, gold_hr) {
            signal += p;
        } else {
            noise += p;
        }
    }
    match (signal > 0.0, noise > 0.0) {
        (false, false) => Err(Error::Estimation("prediction has no energy in 30-240 BPM".into())),
        (true, false) => Ok(SNR_CAP_DB),
        (false, true) => Ok(-SNR_CAP_DB),
        (true, true) => Ok((10.0 * (signal / noise).log10()).clamp(-SNR_CAP_DB, SNR_CAP_DB)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Meta-learned and personalized with finger labels.
    Mobilephys,
    /// Supervised network, optionally fine-tuned on the support window.
    Tscan,
    /// Meta-learned and personalized with POS labels.
    Metaphys,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Mobilephys => "mobilephys",
            Method::Tscan => "tscan",
            Method::Metaphys => "metaphys",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mobilephys" => Ok(Method::Mobilephys),
            "tscan" => Ok(Method::Tscan),
            "metaphys" => Ok(Method::Metaphys),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Metrics of one trial under one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: Method,
    pub subject_id: String,
    pub trial_no: u32,
    pub device: Device,
    pub lighting: Lighting,
    pub lux: Lux,
    pub motion: Motion,
    pub exercise: bool,
    pub skin_group: SkinGroup,
    pub mae_bpm: f64,
    pub snr_db: f64,
    /// Undefined when either heart-rate series is constant.
    pub rho: Option<f64>,
    /// False when a heart rate could not be estimated; such rows carry NaN
    /// metrics and are left out of aggregates.
    pub valid: bool,
}

impl MetricsRow {
    pub fn new(method: Method, meta: &TrialMeta) -> Self {
        Self {
            method,
            subject_id: meta.subject_id.clone(),
            trial_no: meta.trial_no,
            device: meta.device,
            lighting: meta.lighting,
            lux: meta.lux,
            motion: meta.motion,
            exercise: meta.exercise,
            skin_group: meta.skin_group,
            mae_bpm: f64::NAN,
            snr_db: f64::NAN,
            rho: None,
            valid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    /// Leading seconds reserved for adaptation.
    pub skip_s: f64,
    pub window_s: f64,
    pub hop_s: f64,
    /// Integrate the predicted derivative before estimating.
    pub cumulative: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { skip_s: 18.0, window_s: 30.0, hop_s: 15.0, cumulative: false }
    }
}

/// Start indices of `win`-sample windows every `hop` samples over `n`
/// samples, plus one window flush with the end when the hops leave a tail.
pub fn window_starts(n: usize, win: usize, hop: usize) -> Vec<usize> {
    if win > n || win == 0 || hop == 0 {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..).map(|k| k * hop).take_while(|s| s + win <= n).collect();
    if starts.last().is_some_and(|&s| s + win < n) {
        starts.push(n - win);
    }
    starts
}

/// Reference waveform over `[t0, t1)`: the gold stream if present, else the
/// finger label.
pub fn reference_waveform(trial: &Trial, t0: f64, t1: f64) -> Result<Waveform> {
    match &trial.gold_ppg {
        Some(g) => g.crop_time(t0, t1),
        None => finger_label(trial, t0, t1),
    }
}

/// Heart-rate series of a prediction and reference over shared windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowHr {
    pub pred: Vec<f64>,
    pub gold: Vec<f64>,
}

/// Evaluates an already computed prediction (the network's derivative output)
/// against a reference waveform.
pub fn score_prediction(pred: &Waveform, reference: &Waveform, proto: &EvalProtocol) -> Result<(f64, f64, Option<f64>, WindowHr)> {
    let signal = if proto.cumulative { cumulative_sum(pred) } else { pred.clone() };
    let filtered = bandpass_hr(&signal)?;
    let fs = filtered.fs();
    let win = (proto.window_s * fs).round() as usize;
    let hop = (proto.hop_s * fs).round() as usize;
    let starts = window_starts(filtered.len().min(reference.len()), win, hop);
    if starts.is_empty() {
        return Err(Error::Protocol(format!(
            "{:.2} s of prediction is shorter than a {} s window",
            filtered.duration(),
            proto.window_s
        )));
    }
    let mut hr = WindowHr { pred: Vec::new(), gold: Vec::new() };
    for &s in &starts {
        hr.pred.push(estimate_hr(&filtered.slice(s, s + win)?, HR_BAND_BPM)?);
        hr.gold.push(estimate_hr(&reference.slice(s, s + win)?, HR_BAND_BPM)?);
    }
    let mae = mae_hr(&hr.gold, &hr.pred)?;
    let full_gold = estimate_hr(reference, HR_BAND_BPM)?;
    let snr = snr_db(&filtered, full_gold)?;
    let rho = pearson(&hr.pred, &hr.gold).ok();
    Ok((mae, snr, rho, hr))
}

/// Runs the network over the trial after `skip_s` and scores it.
pub fn evaluate_trial(params: &NetworkParams, trial: &Trial, method: Method, proto: &EvalProtocol) -> Result<MetricsRow> {
    let fs = trial.front.frame_rate();
    let t0 = trial.front.start_time();
    let end = trial.front.end_time() + 1.0 / fs;
    if end - t0 <= proto.skip_s + proto.window_s {
        return Err(Error::Protocol(format!(
            "trial lasts {:.2} s, needs more than {} s",
            end - t0,
            proto.skip_s + proto.window_s
        )));
    }
    let seg0 = t0 + proto.skip_s;
    let clip = preprocess_clip(&trial.front.crop_time(seg0, end)?, params.config())?;
    let pred = forward(params, &clip)?;
    let reference = reference_waveform(trial, seg0, end)?;
    let reference = crate::model::align_label(&reference, pred.start_time(), pred.fs(), pred.len())?;
    let mut row = MetricsRow::new(method, &trial.meta);
    match score_prediction(&pred, &reference, proto) {
        Ok((mae, snr, rho, _)) => {
            row.mae_bpm = mae;
            row.snr_db = snr;
            row.rho = rho;
            row.valid = true;
        }
        Err(Error::Estimation(_)) => {}
        Err(e) => return Err(e),
    }
    Ok(row)
}
