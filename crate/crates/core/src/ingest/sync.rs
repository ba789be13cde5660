use super::{FrameSequence, Trial};
use crate::error::{Error, Result};
use crate::signal::{interp_at, Waveform};

/// Common grid rate after synchronization.
pub const SYNC_RATE_HZ: f64 = 30.0;

/// Crops every stream to the common span starting at `trigger_time` and puts
/// all of them on one uniform grid: frames by nearest timestamp, waveforms by
/// linear interpolation.
pub fn synchronize(trial: &Trial, trigger_time: f64) -> Result<Trial> {
    let spans = trial.spans();
    for &(name, start, end) in &spans {
        if trigger_time < start - 1e-9 || trigger_time > end + 1e-9 {
            return Err(Error::Sync(format!(
                "trigger at {trigger_time} s outside {name} stream [{start}, {end}]"
            )));
        }
    }
    let end = spans.iter().map(|s| s.2).fold(f64::INFINITY, f64::min);
    let n = ((end - trigger_time) * SYNC_RATE_HZ + 1e-9).floor() as usize + 1;
    if n < 2 {
        return Err(Error::Sync(format!("common overlap after trigger is {} s", end - trigger_time)));
    }
    let grid: Vec<f64> = (0..n).map(|k| trigger_time + k as f64 / SYNC_RATE_HZ).collect();

    let frames = |seq: &FrameSequence| -> Result<FrameSequence> {
        let idx: Vec<usize> = grid.iter().map(|&t| nearest(seq.timestamps(), t)).collect();
        seq.select(&idx, grid.clone())
    };
    let wave = |w: &Waveform| -> Result<Waveform> {
        let samples = grid
            .iter()
            .map(|&t| {
                let pos = (t - w.start_time()) * w.fs();
                let snapped = pos.round();
                let pos = if (pos - snapped).abs() < 1e-9 { snapped } else { pos };
                interp_at(w.samples(), pos)
            })
            .collect();
        Waveform::with_start(samples, SYNC_RATE_HZ, trigger_time)
    };

    let mut meta = trial.meta.clone();
    meta.duration_s = n as f64 / SYNC_RATE_HZ;
    Trial::new(
        meta,
        frames(&trial.front)?,
        trial.rear.as_ref().map(frames).transpose()?,
        trial.finger_ppg.as_ref().map(wave).transpose()?,
        trial.gold_ppg.as_ref().map(wave).transpose()?,
    )
}

/// Index of the timestamp closest to `t`; ties go to the earlier frame.
fn nearest(ts: &[f64], t: f64) -> usize {
    let i = ts.partition_point(|&v| v < t);
    if i == 0 {
        return 0;
    }
    if i == ts.len() {
        return ts.len() - 1;
    }
    if (ts[i] - t) < (t - ts[i - 1]) {
        i
    } else {
        i - 1
    }
}
