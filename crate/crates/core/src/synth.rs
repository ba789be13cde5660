//! Ground-truth trial generator: blood-volume pulse waveforms, pulsing face
//! clips and fingertip clips with known heart rate.
//!
//! The face model is deliberately simple: an elliptical skin region on a flat
//! background whose pixels follow `base * (1 + amp * k_c * bvp(t))`, modulated
//! by illuminant color, illuminance, slow global drift, motion and sensor
//! noise. Channel strengths `k = (0.5, 1.0, 0.4)` put the strongest pulse in
//! green.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    CameraConfig, Device, FrameSequence, Lighting, Lux, Motion, SkinGroup, Trial, TrialMeta,
};
use crate::signal::Waveform;

/// Default relative pulse strength per channel (R, G, B).
pub const CHANNEL_STRENGTH: [f64; 3] = [0.5, 1.0, 0.4];
/// Face clip side length before model downscaling.
pub const FACE_SIZE: usize = 72;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Pulse waveform: fundamental at `hr_bpm` plus a second harmonic of relative
/// amplitude `harmonic_ratio`; `jitter_bpm` adds a slow sinusoidal wander of
/// the instantaneous rate.
pub fn gen_bvp(
    hr_bpm: f64,
    fs: f64,
    dur_s: f64,
    harmonic_ratio: f64,
    jitter_bpm: f64,
    seed: u64,
) -> Result<Waveform> {
    if !(40.0..=180.0).contains(&hr_bpm) {
        return Err(Error::Precondition(format!("heart rate {hr_bpm} BPM outside [40, 180]")));
    }
    let n = (dur_s * fs).round() as usize;
    let mut rng = rng_for(seed, 1);
    let wander_hz: f64 = rng.random_range(0.01..0.03);
    let psi: f64 = rng.random_range(0.0..2.0 * PI);
    let f0 = hr_bpm / 60.0;
    let dev = jitter_bpm / 60.0;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let mut phase = 2.0 * PI * f0 * t;
            if dev != 0.0 {
                phase -= dev / wander_hz * ((2.0 * PI * wander_hz * t + psi).cos() - psi.cos());
            }
            phase.sin() + harmonic_ratio * (2.0 * phase).sin()
        })
        .collect();
    Waveform::new(samples, fs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkinLevel {
    Light,
    Medium,
    Dark,
}

impl SkinLevel {
    /// Nominal skin reflectance, RGB on a 0..255 scale.
    pub fn base_color(self) -> [f64; 3] {
        match self {
            SkinLevel::Light => [205.0, 160.0, 140.0],
            SkinLevel::Medium => [165.0, 115.0, 90.0],
            SkinLevel::Dark => [90.0, 60.0, 45.0],
        }
    }

    /// Fraction of the pulse amplitude that survives melanin absorption.
    pub fn pulse_factor(self) -> f64 {
        match self {
            SkinLevel::Light => 1.0,
            SkinLevel::Medium => 0.8,
            SkinLevel::Dark => 0.45,
        }
    }

    pub fn group(self) -> SkinGroup {
        match self {
            SkinLevel::Light => SkinGroup::I2,
            SkinLevel::Medium => SkinGroup::III4,
            SkinLevel::Dark => SkinGroup::V6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceClipParams {
    pub skin: SkinLevel,
    /// Overrides the skin level's nominal color.
    pub base_color: Option<[f64; 3]>,
    pub pulse_amp: f64,
    pub channel_strength: [f64; 3],
    pub noise_sigma: f64,
    pub motion: Motion,
    pub light_drift_amp: f64,
    /// Drift frequency, capped at 0.1 Hz.
    pub light_drift_hz: f64,
    /// Illuminant color cast per channel.
    pub illuminant: [f64; 3],
    /// Illuminance scale.
    pub intensity: f64,
    pub background: [f64; 3],
    pub size: usize,
    /// Colored light flickering on the face, e.g. a nearby screen.
    pub flicker: Option<Flicker>,
}

/// Periodic colored light falling mostly on the face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flicker {
    /// Relative modulation depth.
    pub amp: f64,
    pub hz: f64,
    /// Per-channel share of the modulation, largest entry 1.
    pub hue: [f64; 3],
    pub phase: f64,
}

/// Fraction of the flicker reaching the background.
const FLICKER_BACKGROUND: f64 = 0.2;

impl Default for FaceClipParams {
    fn default() -> Self {
        Self {
            skin: SkinLevel::Light,
            base_color: None,
            pulse_amp: 0.02,
            channel_strength: CHANNEL_STRENGTH,
            noise_sigma: 0.0,
            motion: Motion::Stationary,
            light_drift_amp: 0.0,
            light_drift_hz: 0.05,
            illuminant: [1.0, 1.0, 1.0],
            intensity: 1.0,
            background: [70.0, 80.0, 95.0],
            size: FACE_SIZE,
            flicker: None,
        }
    }
}

/// Face-region center offset `(dx, dy)` in pixels and jaw opening for each
/// frame.
pub fn motion_trajectory(motion: Motion, n: usize, fs: f64, seed: u64) -> Vec<(f64, f64, f64)> {
    let mut rng = rng_for(seed, 2);
    match motion {
        Motion::Stationary => vec![(0.0, 0.0, 0.0); n],
        Motion::Yaw => {
            let f: f64 = rng.random_range(0.15..0.3);
            let ph: f64 = rng.random_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| (5.0 * (2.0 * PI * f * i as f64 / fs + ph).sin(), 0.0, 0.0))
                .collect()
        }
        Motion::Talking => {
            let f: f64 = rng.random_range(3.0..4.5);
            let ph: f64 = rng.random_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    let open = 2.0 * (0.5 + 0.5 * (2.0 * PI * f * t + ph).sin());
                    (0.0, 0.5 * open, open)
                })
                .collect()
        }
        Motion::Random => {
            let comps: Vec<[f64; 4]> = (0..4)
                .map(|_| {
                    [
                        rng.random_range(0.05..0.6),
                        rng.random_range(0.0..2.0 * PI),
                        rng.random_range(0.5..2.5),
                        rng.random_range(0.5..2.5),
                    ]
                })
                .collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    comps.iter().fold((0.0, 0.0, 0.0), |(dx, dy, j), c| {
                        let s = (2.0 * PI * c[0] * t + c[1]).sin();
                        (dx + c[2] * s, dy + c[3] * (2.0 * PI * c[0] * t + 2.0 * c[1]).cos(), j)
                    })
                })
                .collect()
        }
    }
}

/// Face video whose skin pixels pulse with `bvp`.
pub fn gen_face_clip(bvp: &Waveform, p: &FaceClipParams, seed: u64) -> Result<FrameSequence> {
    if !(p.pulse_amp > 0.0) {
        return Err(Error::Precondition("pulse amplitude must be positive".into()));
    }
    let size = p.size;
    let n = bvp.len();
    let fs = bvp.fs();
    let base = p.base_color.unwrap_or_else(|| p.skin.base_color());
    let amp = p.pulse_amp * p.skin.pulse_factor();
    let drift_hz = p.light_drift_hz.min(0.1);

    let mut rng = rng_for(seed, 3);
    let drift_phase: f64 = rng.random_range(0.0..2.0 * PI);
    // static texture in face coordinates (skin) and image coordinates (background)
    let tex = Normal::new(0.0, 0.04).expect("valid normal");
    let pad = 16;
    let tex_side = size + 2 * pad;
    let skin_tex: Vec<f64> = (0..tex_side * tex_side).map(|_| 1.0 + tex.sample(&mut rng)).collect();
    let bg_tex: Vec<f64> = (0..size * size).map(|_| 1.0 + 0.5 * tex.sample(&mut rng)).collect();
    let traj = motion_trajectory(p.motion, n, fs, seed);
    let pixel_noise = Normal::new(0.0, p.noise_sigma.max(0.0)).expect("valid normal");

    let s = size as f64;
    let (cx0, cy0) = (s / 2.0, s / 2.0 + s / 36.0);
    let (ax, ay) = (s * 0.28, s * 0.36);
    let timestamps: Vec<f64> = (0..n).map(|i| bvp.start_time() + i as f64 / fs).collect();
    let mut data = Vec::with_capacity(n * size * size * 3);
    for (t, &pulse) in bvp.samples().iter().enumerate() {
        let time = t as f64 / fs;
        let drift = 1.0 + p.light_drift_amp * (2.0 * PI * drift_hz * time + drift_phase).sin();
        let light: [f64; 3] = std::array::from_fn(|c| p.illuminant[c] * p.intensity * drift);
        let fl: [f64; 3] = match p.flicker {
            Some(f) => {
                let s = f.amp * (2.0 * PI * f.hz * time + f.phase).sin();
                std::array::from_fn(|c| s * f.hue[c])
            }
            None => [0.0; 3],
        };
        let skin: [f64; 3] = std::array::from_fn(|c| {
            base[c] * (1.0 + amp * p.channel_strength[c] * pulse) * light[c] * (1.0 + fl[c])
        });
        let bg: [f64; 3] =
            std::array::from_fn(|c| p.background[c] * light[c] * (1.0 + FLICKER_BACKGROUND * fl[c]));
        let (dx, dy, jaw) = traj[t];
        let (cx, cy) = (cx0 + dx, cy0 + dy);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let ry = if fy > 0.0 { ay + jaw } else { ay };
                let r = ((fx / ax).powi(2) + (fy / ry).powi(2)).sqrt();
                // one-pixel soft edge
                let alpha = ((1.0 - r) * ax.min(ry) + 0.5).clamp(0.0, 1.0);
                let tx = ((x as f64 - dx).round() as isize + pad as isize).clamp(0, tex_side as isize - 1) as usize;
                let ty = ((y as f64 - dy).round() as isize + pad as isize).clamp(0, tex_side as isize - 1) as usize;
                let st = skin_tex[ty * tex_side + tx];
                let bt = bg_tex[y * size + x];
                for c in 0..3 {
                    let mut v = alpha * skin[c] * st + (1.0 - alpha) * bg[c] * bt;
                    if p.noise_sigma > 0.0 {
                        v += pixel_noise.sample(&mut rng);
                    }
                    data.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    FrameSequence::new(size, size, data, timestamps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerClipParams {
    /// Red-channel level with the flash on.
    pub base: f64,
    /// Relative pulse amplitude.
    pub amp: f64,
    pub noise_sigma: f64,
    pub size: usize,
}

impl Default for FingerClipParams {
    fn default() -> Self {
        Self { base: 180.0, amp: 0.05, noise_sigma: 0.0, size: 16 }
    }
}

impl FingerClipParams {
    /// Per-pixel noise that puts the spatial-mean red trace at `snr_db`
    /// (pulse power over noise power) for a pulse of variance `pulse_var`.
    pub fn noise_for_snr(&self, snr_db: f64, pulse_var: f64) -> f64 {
        let signal_var = (self.base * self.amp).powi(2) * pulse_var;
        let pixels = (self.size * self.size) as f64;
        (pixels * signal_var / 10f64.powf(snr_db / 10.0)).sqrt()
    }
}

/// Rear-camera fingertip clip: red near saturation following `bvp`, green and
/// blue dark.
pub fn gen_finger_clip(bvp: &Waveform, p: &FingerClipParams, seed: u64) -> Result<FrameSequence> {
    let mut rng = rng_for(seed, 4);
    let noise = Normal::new(0.0, p.noise_sigma.max(0.0)).expect("valid normal");
    let n = bvp.len();
    let timestamps: Vec<f64> = (0..n).map(|i| bvp.start_time() + i as f64 / bvp.fs()).collect();
    let mut data = Vec::with_capacity(n * p.size * p.size * 3);
    for &pulse in bvp.samples() {
        let red = p.base * (1.0 + p.amp * pulse);
        for _ in 0..p.size * p.size {
            let r = if p.noise_sigma > 0.0 { red + noise.sample(&mut rng) } else { red };
            data.extend_from_slice(&[r.round().clamp(0.0, 255.0) as u8, 8, 4]);
        }
    }
    FrameSequence::new(p.size, p.size, data, timestamps)
}

/// Recording condition of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub lighting: Lighting,
    pub motion: Motion,
    pub lux: Lux,
    pub exercise: bool,
    pub device: Device,
}

impl Default for Condition {
    fn default() -> Self {
        Self {
            lighting: Lighting::Natural,
            motion: Motion::Stationary,
            lux: Lux::Unknown,
            exercise: false,
            device: Device::Xiaomi8,
        }
    }
}

impl Condition {
    /// Parses `lighting[:motion[:lux[:exercise]]]`, e.g. `led:talking:110`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut c = Condition::default();
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        if parts.is_empty() || parts.len() > 4 || parts[0].is_empty() {
            return Err(Error::Config(format!("bad condition `{s}`")));
        }
        c.lighting = parts[0].parse()?;
        if let Some(m) = parts.get(1) {
            c.motion = m.parse()?;
        }
        if let Some(l) = parts.get(2) {
            c.lux = l.parse()?;
        }
        if let Some(e) = parts.get(3) {
            c.exercise = match *e {
                "exercise" | "true" => true,
                "rest" | "false" => false,
                other => return Err(Error::Config(format!("bad exercise flag `{other}`"))),
            };
        }
        Ok(c)
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(Self::parse).collect()
    }

    fn illuminant(&self) -> [f64; 3] {
        match self.lighting {
            Lighting::Natural => [1.0, 1.0, 1.0],
            Lighting::Incandescent => [1.12, 0.92, 0.68],
            Lighting::Led => [0.95, 1.0, 1.08],
        }
    }

    fn intensity(&self) -> f64 {
        match self.lux {
            Lux::L220 | Lux::Unknown => 1.0,
            Lux::L110 => 0.6,
            Lux::L55 => 0.35,
        }
    }
}

/// Population a suite's subjects are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub skin_levels: Vec<SkinLevel>,
    pub pulse_amp: (f64, f64),
    pub hr_bpm: (f64, f64),
    pub noise_sigma: f64,
    pub light_drift_amp: (f64, f64),
    pub jitter_bpm: f64,
    /// Relative spread of per-subject channel strengths.
    pub strength_spread: f64,
    pub finger_noise_sigma: f64,
    /// Depth range of per-trial colored flicker on the face; `(0, 0)` for
    /// none.
    pub flicker_amp: (f64, f64),
}

/// Flicker frequencies are drawn from this band, Hz.
pub const FLICKER_BAND_HZ: (f64, f64) = (0.8, 2.4);
/// Minimum distance of the flicker from the pulse and its harmonic, BPM.
pub const FLICKER_MIN_SEPARATION_BPM: f64 = 15.0;

impl Default for Domain {
    fn default() -> Self {
        Self {
            skin_levels: vec![SkinLevel::Light, SkinLevel::Medium],
            pulse_amp: (0.015, 0.025),
            hr_bpm: (55.0, 100.0),
            noise_sigma: 2.0,
            light_drift_amp: (0.0, 0.0),
            jitter_bpm: 0.0,
            strength_spread: 0.1,
            finger_noise_sigma: 2.0,
            flicker_amp: (0.0, 0.0),
        }
    }
}

impl Domain {
    /// Every skin level, with lighting drift.
    pub fn diverse() -> Self {
        Self {
            skin_levels: vec![SkinLevel::Light, SkinLevel::Medium, SkinLevel::Dark],
            pulse_amp: (0.01, 0.025),
            light_drift_amp: (0.0, 0.08),
            ..Self::default()
        }
    }

    /// Darker skin, weaker pulse and drifting light.
    pub fn shifted() -> Self {
        Self {
            skin_levels: vec![SkinLevel::Dark],
            pulse_amp: (0.01, 0.015),
            light_drift_amp: (0.04, 0.08),
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" | "in" => Ok(Self::default()),
            "diverse" => Ok(Self::diverse()),
            "shifted" => Ok(Self::shifted()),
            other => Err(Error::Config(format!("unknown domain preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub n_subjects: usize,
    pub conditions: Vec<Condition>,
    pub domain: Domain,
    pub seed: u64,
    pub duration_s: f64,
    pub fs: f64,
    /// Face clip side length in pixels.
    pub frame_size: usize,
    pub subject_prefix: String,
}

impl SuiteSpec {
    pub fn new(n_subjects: usize, conditions: Vec<Condition>, seed: u64) -> Self {
        Self {
            n_subjects,
            conditions,
            domain: Domain::default(),
            seed,
            duration_s: 60.0,
            fs: 30.0,
            frame_size: FACE_SIZE,
            subject_prefix: "S".into(),
        }
    }
}

/// Per-subject generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub subject_id: String,
    pub skin: SkinLevel,
    pub base_color: [f64; 3],
    pub channel_strength: [f64; 3],
    pub pulse_amp: f64,
    pub hr_bpm: f64,
    /// Color of the subject's flicker source.
    pub flicker_hue: [f64; 3],
}

/// One generated trial's ground truth, listed in `suite.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub subject_id: String,
    pub trial_no: u32,
    pub condition: Condition,
    pub hr_bpm: f64,
    pub skin: SkinLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub spec: SuiteSpec,
    pub subjects: Vec<SubjectProfile>,
    pub trials: Vec<SuiteEntry>,
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub manifest: SuiteManifest,
    pub trials: Vec<Trial>,
}

fn draw_subject(spec: &SuiteSpec, i: usize, rng: &mut ChaCha8Rng) -> SubjectProfile {
    let d = &spec.domain;
    let skin = d.skin_levels[rng.random_range(0..d.skin_levels.len())];
    let nominal = skin.base_color();
    let base_color = nominal.map(|c| c * rng.random_range(0.92..1.08));
    let channel_strength =
        CHANNEL_STRENGTH.map(|k| k * (1.0 + d.strength_spread * rng.random_range(-1.0..1.0)));
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    SubjectProfile {
        subject_id: format!("{}{:02}", spec.subject_prefix, i + 1),
        skin,
        base_color,
        channel_strength,
        pulse_amp: uniform(rng, d.pulse_amp),
        hr_bpm: uniform(rng, d.hr_bpm),
        flicker_hue: {
            let h: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..1.0));
            let m = h.iter().cloned().fold(0.0, f64::max);
            h.map(|v| v / m)
        },
    }
}

/// Flicker frequency away from the pulse fundamental and harmonic.
fn draw_flicker_hz(rng: &mut ChaCha8Rng, hr_bpm: f64) -> f64 {
    loop {
        let f: f64 = rng.random_range(FLICKER_BAND_HZ.0..FLICKER_BAND_HZ.1);
        let bpm = 60.0 * f;
        if (bpm - hr_bpm).abs() >= FLICKER_MIN_SEPARATION_BPM
            && (bpm - 2.0 * hr_bpm).abs() >= FLICKER_MIN_SEPARATION_BPM
        {
            return f;
        }
    }
}

/// Generates `n_subjects x conditions` trials with matching face and finger
/// clips; the gold waveform is the generating pulse itself.
pub fn gen_task_suite(spec: &SuiteSpec) -> Result<Suite> {
    if spec.n_subjects == 0 || spec.conditions.is_empty() {
        return Err(Error::Precondition("suite needs at least one subject and one condition".into()));
    }
    let mut rng = rng_for(spec.seed, 0);
    let subjects: Vec<SubjectProfile> =
        (0..spec.n_subjects).map(|i| draw_subject(spec, i, &mut rng)).collect();
    let mut trials = Vec::new();
    let mut entries = Vec::new();
    for (si, subj) in subjects.iter().enumerate() {
        for (ci, cond) in spec.conditions.iter().enumerate() {
            let trial_seed = spec.seed.wrapping_mul(1_000_003).wrapping_add((si * 1000 + ci) as u64);
            let mut trng = rng_for(trial_seed, 5);
            let hr = if cond.exercise { (subj.hr_bpm + 25.0).min(150.0) } else { subj.hr_bpm };
            let (dlo, dhi) = spec.domain.light_drift_amp;
            let drift = if dhi > dlo { trng.random_range(dlo..dhi) } else { dlo };
            let (flo, fhi) = spec.domain.flicker_amp;
            let flicker = (fhi > 0.0).then(|| Flicker {
                amp: if fhi > flo { trng.random_range(flo..fhi) } else { flo },
                hz: draw_flicker_hz(&mut trng, hr),
                hue: subj.flicker_hue,
                phase: trng.random_range(0.0..2.0 * PI),
            });
            let bvp = gen_bvp(hr, spec.fs, spec.duration_s, 0.3, spec.domain.jitter_bpm, trial_seed)?;
            let face = FaceClipParams {
                skin: subj.skin,
                base_color: Some(subj.base_color),
                pulse_amp: subj.pulse_amp,
                channel_strength: subj.channel_strength,
                noise_sigma: spec.domain.noise_sigma,
                motion: cond.motion,
                light_drift_amp: drift,
                light_drift_hz: trng.random_range(0.03..0.1),
                illuminant: cond.illuminant(),
                intensity: cond.intensity(),
                size: spec.frame_size,
                flicker,
                ..FaceClipParams::default()
            };
            let front = gen_face_clip(&bvp, &face, trial_seed)?;
            let finger = FingerClipParams {
                noise_sigma: spec.domain.finger_noise_sigma,
                ..FingerClipParams::default()
            };
            let rear = gen_finger_clip(&bvp, &finger, trial_seed)?;
            let trial_no = (ci + 1) as u32;
            let meta = TrialMeta {
                subject_id: subj.subject_id.clone(),
                device: cond.device,
                lighting: cond.lighting,
                lux: cond.lux,
                motion: cond.motion,
                exercise: cond.exercise,
                skin_group: subj.skin.group(),
                trial_no,
                duration_s: spec.duration_s,
                camera: CameraConfig::default(),
                extra: Default::default(),
            };
            let name = format!("{}_t{:02}", subj.subject_id, trial_no);
            entries.push(SuiteEntry {
                name,
                subject_id: subj.subject_id.clone(),
                trial_no,
                condition: *cond,
                hr_bpm: hr,
                skin: subj.skin,
            });
            trials.push(Trial::new(meta, front, Some(rear), None, Some(bvp))?);
        }
    }
    Ok(Suite {
        manifest: SuiteManifest { spec: spec.clone(), subjects, trials: entries },
        trials,
    })
}

impl Suite {
    /// Writes each trial to `dir/<name>/` and the manifest to `dir/suite.json`.
    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (entry, trial) in self.manifest.trials.iter().zip(&self.trials) {
            crate::ingest::save_trial(trial, dir.join(&entry.name))?;
        }
        let path = dir.join("suite.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// Trial directories listed by `dir/suite.json`, or every subdirectory holding
/// a `meta.json` when there is no manifest, in name order.
pub fn list_trial_dirs(dir: impl AsRef<std::path::Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let manifest = dir.join("suite.json");
    if manifest.is_file() {
        let raw = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let m: SuiteManifest =
            serde_json::from_str(&raw).map_err(|e| Error::schema("suite.json", e.to_string()))?;
        return Ok(m.trials.iter().map(|t| dir.join(&t.name)).collect());
    }
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{spatial_mean_channel, Channel};
    use crate::signal::{estimate_hr, HR_BAND_BPM};

    #[test]
    fn bvp_upward_crossings_are_one_period_apart() {
        let w = gen_bvp(60.0, 100.0, 10.0, 0.3, 0.0, 1).unwrap();
        let x = w.samples();
        let ups: Vec<f64> = (1..x.len())
            .filter(|&i| x[i - 1] < 0.0 && x[i] >= 0.0)
            .map(|i| {
                // linear interpolation of the crossing
                let f = -x[i - 1] / (x[i] - x[i - 1]);
                (i as f64 - 1.0 + f) / 100.0
            })
            .collect();
        assert!(ups.len() >= 8);
        for p in ups.windows(2) {
            assert!((p[1] - p[0] - 1.0).abs() < 1e-3, "{:?}", p);
        }
    }

    #[test]
    fn pure_bvp_rate_is_exact() {
        let w = gen_bvp(72.0, 30.0, 60.0, 0.0, 0.0, 1).unwrap();
        assert_eq!(estimate_hr(&w, HR_BAND_BPM).unwrap(), 72.0);
    }

    #[test]
    fn jitter_stays_within_bound() {
        for seed in 0..5 {
            let w = gen_bvp(80.0, 30.0, 60.0, 0.3, 3.0, seed).unwrap();
            assert!((estimate_hr(&w, HR_BAND_BPM).unwrap() - 80.0).abs() <= 3.0);
        }
    }

    #[test]
    fn static_clip_without_pulse_effects() {
        let bvp = gen_bvp(70.0, 30.0, 1.0, 0.3, 0.0, 1).unwrap();
        let p = FaceClipParams { pulse_amp: 1e-9, size: 24, ..Default::default() };
        let clip = gen_face_clip(&bvp, &p, 1).unwrap();
        for t in 1..clip.len() {
            assert_eq!(clip.frame(t), clip.frame(0));
        }
    }

    #[test]
    fn random_motion_moves_the_face() {
        let traj = motion_trajectory(Motion::Random, 300, 30.0, 3);
        let xs: Vec<f64> = traj.iter().map(|t| t.0).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(var > 0.1);
        assert!(motion_trajectory(Motion::Stationary, 10, 30.0, 3).iter().all(|t| *t == (0.0, 0.0, 0.0)));
    }

    #[test]
    fn face_pulse_strongest_in_green() {
        let bvp = gen_bvp(75.0, 30.0, 20.0, 0.0, 0.0, 2).unwrap();
        let p = FaceClipParams { pulse_amp: 0.05, size: 24, ..Default::default() };
        let clip = gen_face_clip(&bvp, &p, 2).unwrap();
        let amp = |c| {
            let w = spatial_mean_channel(&clip, c).unwrap();
            let (lo, hi) = crate::signal::min_max(w.samples());
            hi - lo
        };
        assert!(amp(Channel::G) > amp(Channel::R));
        assert!(amp(Channel::R) > amp(Channel::B));
    }

    #[test]
    fn finger_clip_tracks_bvp() {
        let bvp = gen_bvp(66.0, 30.0, 20.0, 0.3, 0.0, 4).unwrap();
        let clip = gen_finger_clip(&bvp, &FingerClipParams::default(), 4).unwrap();
        let label = crate::labelgen::extract_finger_ppg(&clip).unwrap();
        let rho = crate::signal::pearson(label.samples(), bvp.samples()).unwrap();
        assert!(rho >= 0.999, "{rho}");

        let flat = gen_finger_clip(&bvp, &FingerClipParams { amp: 0.0, ..Default::default() }, 4).unwrap();
        assert!(crate::labelgen::extract_finger_ppg(&flat).is_err());
    }

    #[test]
    fn suite_is_deterministic_and_truthful() {
        let mut spec = SuiteSpec::new(2, vec![Condition::default()], 11);
        spec.duration_s = 20.0;
        let a = gen_task_suite(&spec).unwrap();
        let b = gen_task_suite(&spec).unwrap();
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.trials.len(), 2);
        assert_ne!(a.manifest.subjects[0], a.manifest.subjects[1]);
        for (entry, trial) in a.manifest.trials.iter().zip(&a.trials) {
            trial.validate().unwrap();
            let hr = estimate_hr(trial.gold_ppg.as_ref().unwrap(), HR_BAND_BPM).unwrap();
            assert!((hr - entry.hr_bpm).abs() <= 0.5 + 60.0 / 20.0 / 2.0, "{hr} vs {}", entry.hr_bpm);
        }
    }

    #[test]
    fn condition_parsing() {
        let c = Condition::parse("incandescent:yaw:55:exercise").unwrap();
        assert_eq!(c.lighting, Lighting::Incandescent);
        assert_eq!(c.motion, Motion::Yaw);
        assert_eq!(c.lux, Lux::L55);
        assert!(c.exercise);
        assert_eq!(Condition::parse_list("natural,led:talking").unwrap().len(), 2);
        assert!(Condition::parse("sunny").is_err());
    }
}
