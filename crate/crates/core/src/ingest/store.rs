use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{FrameSequence, Trial, TrialMeta};
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Leading bytes of a frame file; followed by little-endian `u32` T, H, W.
pub const FRAME_MAGIC: &[u8; 4] = b"MPFS";

const META: &str = "meta.json";
const FRONT_FRAMES: &str = "front_frames.bin";
const FRONT_TS: &str = "front_timestamps.csv";
const REAR_FRAMES: &str = "rear_frames.bin";
const REAR_TS: &str = "rear_timestamps.csv";
const FINGER: &str = "finger_ppg.csv";
const GOLD: &str = "gold_ppg.csv";

/// Writes a trial directory. The files are assembled in a sibling staging
/// directory which then replaces `dir`.
pub fn save_trial(trial: &Trial, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

    let meta = serde_json::to_string_pretty(&trial.meta)?;
    write_file(&staging.join(META), meta.as_bytes())?;
    write_frames(&staging.join(FRONT_FRAMES), &trial.front)?;
    write_timestamps(&staging.join(FRONT_TS), trial.front.timestamps())?;
    if let Some(rear) = &trial.rear {
        write_frames(&staging.join(REAR_FRAMES), rear)?;
        write_timestamps(&staging.join(REAR_TS), rear.timestamps())?;
    }
    if let Some(w) = &trial.finger_ppg {
        w.save_csv(staging.join(FINGER))?;
    }
    if let Some(w) = &trial.gold_ppg {
        w.save_csv(staging.join(GOLD))?;
    }

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

fn staging_path(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.partial"))
}

pub fn load_trial(dir: impl AsRef<Path>) -> Result<Trial> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META);
    if !meta_path.is_file() {
        return Err(Error::schema(META, format!("missing in {}", dir.display())));
    }
    let raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: TrialMeta =
        serde_json::from_str(&raw).map_err(|e| Error::schema(META, e.to_string()))?;

    let front = read_stream(dir, FRONT_FRAMES, FRONT_TS)?
        .ok_or_else(|| Error::schema(FRONT_FRAMES, format!("missing in {}", dir.display())))?;
    let rear = read_stream(dir, REAR_FRAMES, REAR_TS)?;
    let finger_ppg = optional_wave(dir, FINGER)?;
    let gold_ppg = optional_wave(dir, GOLD)?;
    if rear.is_none() && finger_ppg.is_none() {
        return Err(Error::schema(
            REAR_FRAMES,
            format!(
                "missing finger source in {}: expected {REAR_FRAMES} or {FINGER}",
                dir.display()
            ),
        ));
    }
    Trial::new(meta, front, rear, finger_ppg, gold_ppg)
}

fn optional_wave(dir: &Path, name: &str) -> Result<Option<Waveform>> {
    let p = dir.join(name);
    if !p.is_file() {
        return Ok(None);
    }
    Waveform::load_csv(&p)
        .map(Some)
        .map_err(|e| Error::schema(name, e.to_string()))
}

fn read_stream(dir: &Path, frames: &str, ts: &str) -> Result<Option<FrameSequence>> {
    let fp = dir.join(frames);
    let tp = dir.join(ts);
    match (fp.is_file(), tp.is_file()) {
        (false, false) => Ok(None),
        (true, false) => Err(Error::schema(ts, "missing timestamps for frame file")),
        (false, true) => Err(Error::schema(frames, "missing frame file for timestamps")),
        (true, true) => {
            let timestamps = read_timestamps(&tp).map_err(|e| Error::schema(ts, e.to_string()))?;
            read_frames(&fp, timestamps).map(Some).map_err(|e| match e {
                Error::Schema { .. } => e,
                other => Error::schema(frames, other.to_string()),
            })
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_frames(path: &Path, seq: &FrameSequence) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(16);
    header.extend_from_slice(FRAME_MAGIC);
    for v in [seq.len(), seq.height(), seq.width()] {
        header.extend_from_slice(&(v as u32).to_le_bytes());
    }
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    w.write_all(seq.data()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_frames(path: &Path, timestamps: Vec<f64>) -> Result<FrameSequence> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|_| Error::schema(&name, "truncated header"))?;
    if &header[..4] != FRAME_MAGIC {
        return Err(Error::schema(&name, "bad magic"));
    }
    let field = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, h, w) = (field(0), field(1), field(2));
    if t != timestamps.len() {
        return Err(Error::schema(&name, format!("{t} frames but {} timestamps", timestamps.len())));
    }
    let mut data = Vec::with_capacity(t * h * w * 3);
    r.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    if data.len() != t * h * w * 3 {
        return Err(Error::schema(&name, format!("expected {} pixel bytes, found {}", t * h * w * 3, data.len())));
    }
    FrameSequence::new(h, w, data, timestamps)
}

fn write_timestamps(path: &Path, ts: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t_s"])?;
    for t in ts {
        w.write_record([t.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_timestamps(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != ["t_s"] {
        return Err(Error::InvalidFrames("expected header `t_s`".into()));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            rec[0]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidFrames(format!("bad timestamp `{}`: {e}", &rec[0])))
        })
        .collect()
}
