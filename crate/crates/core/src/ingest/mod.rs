//! Trial data model, ARGB decoding, spatial channel averaging, trigger-based
//! stream synchronization and on-disk persistence.

mod argb;
mod store;
mod sync;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{snap_rate, Waveform};

pub use argb::{decode_argb, pack_argb, ArgbPlanes};
pub use store::{load_trial, save_trial, FRAME_MAGIC};
pub use sync::{synchronize, SYNC_RATE_HZ};

/// Nominal camera frame rate.
pub const NOMINAL_FPS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub fn index(self) -> usize {
        match self {
            Channel::R => 0,
            Channel::G => 1,
            Channel::B => 2,
        }
    }
}

/// Timestamped RGB video clip, frames stored as `T x H x W x 3` bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    height: usize,
    width: usize,
    data: Vec<u8>,
    timestamps: Vec<f64>,
}

impl FrameSequence {
    pub fn new(height: usize, width: usize, data: Vec<u8>, timestamps: Vec<f64>) -> Result<Self> {
        let t = timestamps.len();
        if t < 2 {
            return Err(Error::InvalidFrames(format!("need at least 2 frames, got {t}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidFrames("empty frame size".into()));
        }
        if data.len() != t * height * width * 3 {
            return Err(Error::InvalidFrames(format!(
                "pixel buffer holds {} bytes, expected {t}x{height}x{width}x3",
                data.len()
            )));
        }
        if timestamps.iter().any(|v| !v.is_finite()) || timestamps.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidFrames("timestamps must be finite and strictly increasing".into()));
        }
        Ok(Self { height, width, data, timestamps })
    }

    /// Builds frames from a per-frame closure returning `(r, g, b)` at `(y, x)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        timestamps: Vec<f64>,
        mut pixel: impl FnMut(usize, usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(timestamps.len() * height * width * 3);
        for t in 0..timestamps.len() {
            for y in 0..height {
                for x in 0..width {
                    data.extend_from_slice(&pixel(t, y, x));
                }
            }
        }
        Self::new(height, width, data, timestamps)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    /// Interleaved RGB bytes of frame `t`.
    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn start_time(&self) -> f64 {
        self.timestamps[0]
    }

    pub fn end_time(&self) -> f64 {
        self.timestamps[self.timestamps.len() - 1]
    }

    /// Mean frame rate implied by the timestamps.
    pub fn frame_rate(&self) -> f64 {
        snap_rate((self.len() - 1) as f64 / (self.end_time() - self.start_time()))
    }

    /// New sequence made of the listed frames, with the given timestamps.
    pub fn select(&self, indices: &[usize], timestamps: Vec<f64>) -> Result<Self> {
        let n = self.frame_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        Self::new(self.height, self.width, data, timestamps)
    }

    /// Frames with timestamps in `[t0, t1)`.
    pub fn crop_time(&self, t0: f64, t1: f64) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.timestamps[i] >= t0 - 1e-9 && self.timestamps[i] < t1 - 1e-9)
            .collect();
        let ts = idx.iter().map(|&i| self.timestamps[i]).collect();
        self.select(&idx, ts)
    }

    /// Frames `[from, to)`.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        let idx: Vec<usize> = (from..to.min(self.len())).collect();
        let ts = idx.iter().map(|&i| self.timestamps[i]).collect();
        self.select(&idx, ts)
    }

    /// Per-frame spatial mean of every channel, `T x 3`.
    pub fn channel_means(&self) -> Vec<[f64; 3]> {
        let pixels = (self.height * self.width) as f64;
        (0..self.len())
            .map(|t| {
                let mut acc = [0u64; 3];
                for px in self.frame(t).chunks_exact(3) {
                    acc[0] += px[0] as u64;
                    acc[1] += px[1] as u64;
                    acc[2] += px[2] as u64;
                }
                acc.map(|s| s as f64 / pixels)
            })
            .collect()
    }
}

/// Per-frame spatial average of one color channel.
pub fn spatial_mean_channel(frames: &FrameSequence, channel: Channel) -> Result<Waveform> {
    let c = channel.index();
    let samples = frames.channel_means().into_iter().map(|m| m[c]).collect();
    Waveform::with_start(samples, frames.frame_rate(), frames.start_time())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Xiaomi8,
    Iphone11,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lighting {
    Natural,
    Incandescent,
    Led,
}

/// Illuminance level; serialized as an integer or `"unknown"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lux {
    L220,
    L110,
    L55,
    Unknown,
}

impl Lux {
    pub fn value(self) -> Option<u32> {
        match self {
            Lux::L220 => Some(220),
            Lux::L110 => Some(110),
            Lux::L55 => Some(55),
            Lux::Unknown => None,
        }
    }

    pub fn from_value(v: u32) -> Option<Self> {
        match v {
            220 => Some(Lux::L220),
            110 => Some(Lux::L110),
            55 => Some(Lux::L55),
            _ => None,
        }
    }
}

impl Serialize for Lux {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.value() {
            Some(v) => s.serialize_u32(v),
            None => s.serialize_str("unknown"),
        }
    }
}

impl<'de> Deserialize<'de> for Lux {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) if s == "unknown" => Ok(Lux::Unknown),
            serde_json::Value::Number(n) => n
                .as_u64()
                .and_then(|v| Lux::from_value(v as u32))
                .ok_or_else(|| D::Error::custom(format!("unsupported lux level {n}"))),
            other => Err(D::Error::custom(format!("invalid lux value {other}"))),
        }
    }
}

impl std::fmt::Display for Lux {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.value() {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("unknown"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Stationary,
    Yaw,
    Talking,
    Random,
}

/// Fitzpatrick skin type, grouped in pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SkinGroup {
    #[serde(rename = "I+II")]
    I2,
    #[serde(rename = "III+IV")]
    III4,
    #[serde(rename = "V+VI")]
    V6,
}

macro_rules! display_via_serde {
    ($($t:ty),*) => {$(
        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                match serde_json::to_value(self) {
                    Ok(serde_json::Value::String(s)) => f.write_str(&s),
                    _ => write!(f, "{:?}", self),
                }
            }
        }

        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| Error::Config(format!("unknown {} `{s}`", stringify!($t))))
            }
        }
    )*};
}

display_via_serde!(Device, Lighting, Motion, SkinGroup);

impl std::str::FromStr for Lux {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "unknown" {
            return Ok(Lux::Unknown);
        }
        s.parse::<u32>()
            .ok()
            .and_then(Lux::from_value)
            .ok_or_else(|| Error::Config(format!("unknown lux level `{s}`")))
    }
}

/// Camera settings recorded with a trial; metadata only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub awb: bool,
    pub exposure_time: f64,
    pub sensitivity: u32,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { awb: true, exposure_time: 1.0 / 30.0, sensitivity: 175 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub subject_id: String,
    pub device: Device,
    pub lighting: Lighting,
    pub lux: Lux,
    pub motion: Motion,
    pub exercise: bool,
    pub skin_group: SkinGroup,
    pub trial_no: u32,
    pub duration_s: f64,
    pub camera: CameraConfig,
    /// Keys this version does not know about; kept so they survive a rewrite.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl TrialMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::schema("meta.json", format!("duration_s {} must be positive", self.duration_s)));
        }
        if !(self.camera.exposure_time > 0.0) || self.camera.sensitivity == 0 {
            return Err(Error::schema("meta.json", "camera exposure and sensitivity must be positive"));
        }
        Ok(())
    }
}

/// One recording: metadata plus the front clip, the finger source (rear clip
/// and/or an already-extracted finger waveform) and optionally an oximeter
/// waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub meta: TrialMeta,
    pub front: FrameSequence,
    pub rear: Option<FrameSequence>,
    pub finger_ppg: Option<Waveform>,
    pub gold_ppg: Option<Waveform>,
}

/// Slack allowed between the nominal trial duration and the stream overlap.
pub const OVERLAP_SLACK_S: f64 = 2.0;

impl Trial {
    pub fn new(
        meta: TrialMeta,
        front: FrameSequence,
        rear: Option<FrameSequence>,
        finger_ppg: Option<Waveform>,
        gold_ppg: Option<Waveform>,
    ) -> Result<Self> {
        let trial = Self { meta, front, rear, finger_ppg, gold_ppg };
        trial.validate()?;
        Ok(trial)
    }

    /// `(start, end)` of every present stream.
    pub fn spans(&self) -> Vec<(&'static str, f64, f64)> {
        let mut spans = vec![("front", self.front.start_time(), self.front.end_time())];
        if let Some(r) = &self.rear {
            spans.push(("rear", r.start_time(), r.end_time()));
        }
        if let Some(w) = &self.finger_ppg {
            spans.push(("finger_ppg", w.start_time(), w.end_time()));
        }
        if let Some(w) = &self.gold_ppg {
            spans.push(("gold_ppg", w.start_time(), w.end_time()));
        }
        spans
    }

    /// Common `(start, end)` of all streams.
    pub fn overlap(&self) -> (f64, f64) {
        self.spans()
            .iter()
            .fold((f64::NEG_INFINITY, f64::INFINITY), |(s, e), &(_, a, b)| (s.max(a), e.min(b)))
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        if self.rear.is_none() && self.finger_ppg.is_none() {
            return Err(Error::schema(
                "rear_frames.bin",
                "missing finger source: neither rear frames nor finger_ppg.csv present",
            ));
        }
        let (s, e) = self.overlap();
        // the overlap is measured between first and last samples, one frame
        // period shorter than the recording
        let needed = self.meta.duration_s - OVERLAP_SLACK_S;
        if e - s < needed - 1.0 / NOMINAL_FPS - 1e-9 {
            return Err(Error::schema(
                "meta.json",
                format!("streams overlap for {:.3} s, need at least {needed:.3} s", e - s),
            ));
        }
        Ok(())
    }

    /// All streams restricted to `[t0, t1)`; duration updated accordingly.
    pub fn crop_time(&self, t0: f64, t1: f64) -> Result<Trial> {
        let mut meta = self.meta.clone();
        let front = self.front.crop_time(t0, t1)?;
        meta.duration_s = front.len() as f64 / front.frame_rate();
        let rear = self.rear.as_ref().map(|r| r.crop_time(t0, t1)).transpose()?;
        let finger_ppg = self.finger_ppg.as_ref().map(|w| w.crop_time(t0, t1)).transpose()?;
        let gold_ppg = self.gold_ppg.as_ref().map(|w| w.crop_time(t0, t1)).transpose()?;
        Trial::new(meta, front, rear, finger_ppg, gold_ppg)
    }
}

#[cfg(test)]
mod tests;
