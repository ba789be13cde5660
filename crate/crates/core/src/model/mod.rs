//! Two-branch convolutional network with temporal shift and attention.
//!
//! The appearance branch reads standardized raw frames and produces two
//! spatial attention masks; the motion branch reads normalized difference
//! frames, shifts a fraction of its channels across neighbouring frames and is
//! gated by the masks. The output is one value per difference frame, the
//! first derivative of the pulse.
//!
//! Parameters are stored as `f32` (the checkpoint format); all arithmetic runs
//! in `f64` on a flat parameter vector in [`Layout`] order.

mod layers;
mod net;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::FrameSequence;
use crate::signal::{bandpass_hr, first_difference, interp_at, standardize, Waveform};

pub use layers::{attention_mask, shifted_channels, temporal_shift};
pub use net::{forward_flat, loss_and_grad};

/// Guards the difference-frame ratio against black pixels.
pub const DIFF_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub frame_depth: usize,
    pub shift_fraction: f64,
    pub conv_filters: [usize; 2],
    pub dense_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { input_size: 36, frame_depth: 10, shift_fraction: 0.125, conv_filters: [32, 64], dense_width: 128 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_depth < 2 {
            return Err(Error::Config(format!("frame_depth {} must be at least 2", self.frame_depth)));
        }
        if !(self.shift_fraction > 0.0 && self.shift_fraction <= 0.5) {
            return Err(Error::Config(format!("shift_fraction {} must lie in (0, 0.5]", self.shift_fraction)));
        }
        // two 2x2 poolings
        if self.input_size < 8 || self.input_size % 4 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be at least 8 and a multiple of 4",
                self.input_size
            )));
        }
        if self.conv_filters.contains(&0) || self.dense_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// One named parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Parameter order of the flat vector and of `params.bin`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
    pub total: usize,
}

// indices into Layout::entries
pub(crate) mod slot {
    pub const APP_CONV: [usize; 4] = [0, 2, 6, 8];
    pub const APP_ATT: [usize; 2] = [4, 10];
    pub const MOT_CONV: [usize; 4] = [12, 14, 16, 18];
    pub const DENSE1: usize = 20;
    pub const DENSE2: usize = 22;
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let [c1, c2] = cfg.conv_filters;
        let s4 = cfg.input_size / 4;
        let conv = |name: &str, cout: usize, cin: usize| {
            vec![(format!("{name}.weight"), vec![cout, cin, 3, 3]), (format!("{name}.bias"), vec![cout])]
        };
        let att = |name: &str, c: usize| vec![(format!("{name}.weight"), vec![c]), (format!("{name}.bias"), vec![1])];
        let dense = |name: &str, out: usize, inp: usize| {
            vec![(format!("{name}.weight"), vec![out, inp]), (format!("{name}.bias"), vec![out])]
        };
        let shapes: Vec<(String, Vec<usize>)> = [
            conv("appearance.conv1", c1, 3),
            conv("appearance.conv2", c1, c1),
            att("appearance.attention1", c1),
            conv("appearance.conv3", c2, c1),
            conv("appearance.conv4", c2, c2),
            att("appearance.attention2", c2),
            conv("motion.conv1", c1, 3),
            conv("motion.conv2", c1, c1),
            conv("motion.conv3", c2, c1),
            conv("motion.conv4", c2, c2),
            dense("dense1", cfg.dense_width, c2 * s4 * s4),
            dense("dense2", 1, cfg.dense_width),
        ]
        .into_iter()
        .flatten()
        .collect();
        let mut offset = 0;
        let entries = shapes
            .into_iter()
            .map(|(name, shape)| {
                let e = LayoutEntry { name, offset, shape };
                offset += e.len();
                e
            })
            .collect();
        Self { entries, total: offset }
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Network weights plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    config: ModelConfig,
    values: Vec<f32>,
}

impl NetworkParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0f32; layout.total];
        for e in layout.entries.iter().filter(|e| e.name.ends_with(".weight")) {
            let (fan_in, fan_out) = match e.shape.as_slice() {
                [co, ci, kh, kw] => (ci * kh * kw, co * kh * kw),
                [c] => (*c, 1),
                [o, i] => (*i, *o),
                _ => unreachable!("layout shapes are rank 1, 2 or 4"),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut values[e.range()] {
                *v = rng.random_range(-limit..limit) as f32;
            }
        }
        Ok(Self { config, values })
    }

    pub fn from_values(config: ModelConfig, values: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let total = Layout::new(&config).total;
        if values.len() != total {
            return Err(Error::Config(format!("expected {total} parameters, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite parameter".into()));
        }
        Ok(Self { config, values })
    }

    /// Rounds a flat `f64` vector to storage precision.
    pub fn from_flat(config: ModelConfig, theta: &[f64]) -> Result<Self> {
        Self::from_values(config, theta.iter().map(|&v| v as f32).collect())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Values of one named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.layout().get(name).map(|e| &self.values[e.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let range = self.layout().get(name)?.range();
        Some(&mut self.values[range])
    }

    /// Writes `config.json`, `params.bin` and `layout.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write("config.json", serde_json::to_string_pretty(&self.config)?.as_bytes())?;
        write("layout.json", serde_json::to_string_pretty(&self.layout())?.as_bytes())?;
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        write("params.bin", &bytes)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let config: ModelConfig = serde_json::from_slice(&read("config.json")?)
            .map_err(|e| Error::schema("config.json", e.to_string()))?;
        config.validate()?;
        let expected = Layout::new(&config);
        if let Ok(raw) = read("layout.json") {
            let stored: Layout =
                serde_json::from_slice(&raw).map_err(|e| Error::schema("layout.json", e.to_string()))?;
            if stored != expected {
                return Err(Error::schema("layout.json", "does not match config.json"));
            }
        }
        let bytes = read("params.bin")?;
        if bytes.len() != 4 * expected.total {
            return Err(Error::schema(
                "params.bin",
                format!("expected {} bytes, found {}", 4 * expected.total, bytes.len()),
            ));
        }
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::from_values(config, values)
    }
}

/// Network input derived from a face clip. Frames are stored channel-major,
/// `frames x 3 x size x size`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedClip {
    motion: Vec<f32>,
    appearance: Vec<f32>,
    frames: usize,
    size: usize,
    fs: f64,
    start_time: f64,
}

impl PreprocessedClip {
    /// Builds a clip from channel-major arrays; both must hold
    /// `frames * 3 * size * size` finite values.
    pub fn from_arrays(
        motion: Vec<f32>,
        appearance: Vec<f32>,
        size: usize,
        fs: f64,
        start_time: f64,
    ) -> Result<Self> {
        let fl = 3 * size * size;
        if size == 0 || motion.len() != appearance.len() || motion.len() % fl != 0 || motion.is_empty() {
            return Err(Error::Config("clip arrays are not frames x 3 x size x size".into()));
        }
        if motion.iter().chain(&appearance).any(|v| !v.is_finite()) {
            return Err(Error::Config("clip holds non-finite values".into()));
        }
        Ok(Self { frames: motion.len() / fl, motion, appearance, size, fs, start_time })
    }

    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    /// Timestamp of the first source frame.
    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn motion(&self) -> &[f32] {
        &self.motion
    }

    pub fn appearance(&self) -> &[f32] {
        &self.appearance
    }

    pub fn frame_len(&self) -> usize {
        3 * self.size * self.size
    }

    /// Frames `[from, to)`.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.frames {
            return Err(Error::Alignment(format!("frame range {from}..{to} outside 0..{}", self.frames)));
        }
        let fl = self.frame_len();
        Ok(Self {
            motion: self.motion[from * fl..to * fl].to_vec(),
            appearance: self.appearance[from * fl..to * fl].to_vec(),
            frames: to - from,
            size: self.size,
            fs: self.fs,
            start_time: self.start_time + from as f64 / self.fs,
        })
    }
}

/// Area-average resampling weights from `n` source cells onto `m`.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut ws = Vec::new();
            let mut j = a.floor() as usize;
            while (j as f64) < b && j < n {
                let overlap = (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0);
                if overlap > 0.0 {
                    ws.push((j, overlap / scale));
                }
                j += 1;
            }
            ws
        })
        .collect()
}

/// Area-averaged `size x size` downscale of every frame, channel-major.
pub fn downscale(frames: &FrameSequence, size: usize) -> Vec<f64> {
    let (h, w) = (frames.height(), frames.width());
    let wy = area_weights(h, size);
    let wx = area_weights(w, size);
    let mut out = Vec::with_capacity(frames.len() * 3 * size * size);
    let mut rows = vec![0.0; h * size * 3];
    for t in 0..frames.len() {
        let f = frames.frame(t);
        for y in 0..h {
            for (j, ws) in wx.iter().enumerate() {
                let mut acc = [0.0; 3];
                for &(x, wt) in ws {
                    let p = &f[(y * w + x) * 3..(y * w + x) * 3 + 3];
                    for c in 0..3 {
                        acc[c] += wt * p[c] as f64;
                    }
                }
                rows[(y * size + j) * 3..(y * size + j) * 3 + 3].copy_from_slice(&acc);
            }
        }
        for c in 0..3 {
            for ws in &wy {
                for j in 0..size {
                    out.push(ws.iter().map(|&(y, wt)| wt * rows[(y * size + j) * 3 + c]).sum());
                }
            }
        }
    }
    out
}

/// Frames kept after trimming `t` source frames: the largest multiple of
/// `frame_depth` not exceeding `t - 1`.
pub fn trimmed_len(t: usize, frame_depth: usize) -> usize {
    t.saturating_sub(1) / frame_depth * frame_depth
}

pub fn preprocess_clip(front: &FrameSequence, cfg: &ModelConfig) -> Result<PreprocessedClip> {
    cfg.validate()?;
    let t = front.len();
    if t < cfg.frame_depth + 1 {
        return Err(Error::TooShort { needed: cfg.frame_depth + 1, got: t });
    }
    let s = cfg.input_size;
    let fl = 3 * s * s;
    let n = trimmed_len(t, cfg.frame_depth);
    let raw = downscale(front, s);
    let mut motion: Vec<f64> = (0..n * fl)
        .map(|i| {
            let (a, b) = (raw[i], raw[i + fl]);
            (b - a) / (b + a + DIFF_EPS)
        })
        .collect();
    let mut appearance = raw[..n * fl].to_vec();
    standardize(&mut motion);
    standardize(&mut appearance);
    PreprocessedClip::from_arrays(
        motion.into_iter().map(|v| v as f32).collect(),
        appearance.into_iter().map(|v| v as f32).collect(),
        s,
        front.frame_rate(),
        front.start_time(),
    )
}

/// Samples `label` at `n` instants starting at `start_time`, spaced `1 / fs`.
pub fn align_label(label: &Waveform, start_time: f64, fs: f64, n: usize) -> Result<Waveform> {
    let first = (start_time - label.start_time()) * label.fs();
    let last = first + (n - 1) as f64 * label.fs() / fs;
    let tol = 1e-6;
    if first < -tol || last > (label.len() - 1) as f64 + tol {
        return Err(Error::Alignment(format!(
            "label covers {:.3}..{:.3} s, frames need {:.3}..{:.3} s",
            label.start_time(),
            label.end_time(),
            start_time,
            start_time + (n - 1) as f64 / fs
        )));
    }
    let samples = (0..n)
        .map(|k| {
            let pos = first + k as f64 * label.fs() / fs;
            let r = pos.round();
            interp_at(label.samples(), if (pos - r).abs() < 1e-9 { r } else { pos })
        })
        .collect();
    Waveform::with_start(samples, fs, start_time)
}

/// Training target for `n` difference frames: the (optionally band-passed)
/// label, first-differenced, truncated to `n` and standardized.
pub fn prepare_label(label: &Waveform, n: usize, bandpass: bool) -> Result<Vec<f64>> {
    let src = if bandpass { bandpass_hr(label)? } else { label.clone() };
    let d = first_difference(&src)?;
    if d.len() < n {
        return Err(Error::Alignment(format!("label yields {} differences, need {n}", d.len())));
    }
    let mut out = d.samples()[..n].to_vec();
    standardize(&mut out);
    Ok(out)
}

/// Target for a clip: `label` aligned to the clip's source frames, then
/// prepared.
pub fn clip_target(clip: &PreprocessedClip, label: &Waveform, bandpass: bool) -> Result<Vec<f64>> {
    let aligned = align_label(label, clip.start_time(), clip.fs(), clip.len() + 1)?;
    prepare_label(&aligned, clip.len(), bandpass)
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Alignment(format!("prediction has {} frames, label {}", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Mean squared error between a prediction and the prepared `label`, which
/// must be sampled on the same frames plus one.
pub fn loss(pred: &Waveform, label: &Waveform, bandpass: bool) -> Result<f64> {
    if label.len() != pred.len() + 1 {
        return Err(Error::Alignment(format!(
            "label has {} samples, prediction {} (need one more)",
            label.len(),
            pred.len()
        )));
    }
    mse(pred.samples(), &prepare_label(label, pred.len(), bandpass)?)
}

/// Predicted pulse derivative, one sample per difference frame.
pub fn forward(params: &NetworkParams, clip: &PreprocessedClip) -> Result<Waveform> {
    let y = forward_flat(params.config(), &params.to_flat(), clip)?;
    Waveform::with_start(y, clip.fs(), clip.start_time())
}

/// Gradient of [`loss`] for `forward(params, clip)` in [`Layout`] order.
pub fn grad(params: &NetworkParams, clip: &PreprocessedClip, label: &Waveform, bandpass: bool) -> Result<Vec<f64>> {
    let target = clip_target(clip, label, bandpass)?;
    Ok(loss_and_grad(params.config(), &params.to_flat(), clip, &target)?.1)
}
