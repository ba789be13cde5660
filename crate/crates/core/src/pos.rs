//! Plane-orthogonal-to-skin (POS) pulse extraction, the classical method used
//! to generate pseudo labels for the meta-learning baseline.

use crate::error::{Error, Result};
use crate::ingest::FrameSequence;
use crate::signal::Waveform;

/// Default sliding-window length, seconds.
pub const POS_WINDOW_S: f64 = 1.6;

/// Per-frame spatial means of R, G, B.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbTrace {
    pub values: Vec<[f64; 3]>,
    pub fs: f64,
    pub start_time: f64,
}

impl RgbTrace {
    pub fn new(values: Vec<[f64; 3]>, fs: f64) -> Result<Self> {
        if !(fs > 0.0) {
            return Err(Error::Config(format!("sampling rate {fs} must be positive")));
        }
        if values.iter().flatten().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidWaveform("RGB trace values must be finite and positive".into()));
        }
        Ok(Self { values, fs, start_time: 0.0 })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Spatial means of all three channels over the full frame.
pub fn rgb_trace_from_clip(front: &FrameSequence) -> Result<RgbTrace> {
    let mut trace = RgbTrace::new(front.channel_means(), front.frame_rate())?;
    trace.start_time = front.start_time();
    Ok(trace)
}

/// Overlap-added POS pulse signal.
///
/// Each window of `ceil(window_s * fs)` frames is divided by its temporal
/// mean, projected onto `s1 = G - B` and `s2 = -2R + G + B`, combined as
/// `s1 + (std(s1) / std(s2)) * s2`, centered and added into the output.
pub fn pos_pulse(trace: &RgbTrace, window_s: f64) -> Result<Waveform> {
    let n = trace.len();
    let l = (window_s * trace.fs - 1e-9).ceil() as usize;
    if l < 2 {
        return Err(Error::Config(format!("POS window of {l} frames is too short")));
    }
    if n < l {
        return Err(Error::TooShort { needed: l, got: n });
    }
    let mut out = vec![0.0; n];
    let mut s1 = vec![0.0; l];
    let mut s2 = vec![0.0; l];
    for m in 0..=n - l {
        let win = &trace.values[m..m + l];
        let mut mean = [0.0; 3];
        for v in win {
            for c in 0..3 {
                mean[c] += v[c];
            }
        }
        mean.iter_mut().for_each(|x| *x /= l as f64);
        for (i, v) in win.iter().enumerate() {
            let (r, g, b) = (v[0] / mean[0], v[1] / mean[1], v[2] / mean[2]);
            s1[i] = g - b;
            s2[i] = -2.0 * r + g + b;
        }
        let (sd1, sd2) = (std_dev(&s1), std_dev(&s2));
        let alpha = if sd2 > 0.0 { sd1 / sd2 } else { 0.0 };
        let h: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + alpha * b).collect();
        let hm = h.iter().sum::<f64>() / l as f64;
        for (i, v) in h.iter().enumerate() {
            out[m + i] += v - hm;
        }
    }
    Waveform::with_start(out, trace.fs, trace.start_time)
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{estimate_hr, HR_BAND_BPM};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn synthetic_trace(hr: f64, secs: f64, drift: f64) -> RgbTrace {
        let fs = 30.0;
        let n = (secs * fs) as usize;
        let k = [0.5, 1.0, 0.4];
        let base = [180.0, 130.0, 110.0];
        let values = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                let p = (2.0 * std::f64::consts::PI * hr / 60.0 * t).sin();
                let d = 1.0 + drift * (2.0 * std::f64::consts::PI * 0.1 * t).sin();
                std::array::from_fn(|c| base[c] * (1.0 + 0.01 * p * k[c]) * d)
            })
            .collect();
        RgbTrace::new(values, fs).unwrap()
    }

    #[test]
    fn constant_trace_gives_zero_pulse() {
        let trace = RgbTrace::new(vec![[100.0, 120.0, 90.0]; 120], 30.0).unwrap();
        let out = pos_pulse(&trace, POS_WINDOW_S).unwrap();
        assert!(out.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recovers_rate_with_and_without_drift() {
        for drift in [0.0, 0.1] {
            let out = pos_pulse(&synthetic_trace(72.0, 30.0, drift), POS_WINDOW_S).unwrap();
            let hr = estimate_hr(&out, HR_BAND_BPM).unwrap();
            assert!((hr - 72.0).abs() <= 1.0, "drift {drift}: {hr}");
        }
    }

    #[test]
    fn rejects_short_trace() {
        let trace = RgbTrace::new(vec![[1.0, 1.0, 1.0]; 10], 30.0).unwrap();
        assert!(matches!(pos_pulse(&trace, POS_WINDOW_S), Err(Error::TooShort { .. })));
    }

    #[test]
    fn trace_from_clip_matches_naive_means() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (h, w, t) = (6, 4, 10);
        let data: Vec<u8> = (0..t * h * w * 3).map(|_| rng.random_range(1..=255)).collect();
        let ts = (0..t).map(|i| i as f64 / 30.0).collect();
        let clip = FrameSequence::new(h, w, data.clone(), ts).unwrap();
        let trace = rgb_trace_from_clip(&clip).unwrap();
        for f in 0..t {
            for c in 0..3 {
                let mut s = 0.0;
                for p in 0..h * w {
                    s += data[(f * h * w + p) * 3 + c] as f64;
                }
                assert!((trace.values[f][c] - s / (h * w) as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn uniform_and_single_pixel_clips() {
        let ts: Vec<f64> = (0..3).map(|i| i as f64 / 30.0).collect();
        let clip = FrameSequence::from_fn(5, 5, ts.clone(), |t, _, _| [10 + t as u8, 20, 30]).unwrap();
        let trace = rgb_trace_from_clip(&clip).unwrap();
        assert_eq!(trace.values, vec![[10.0, 20.0, 30.0], [11.0, 20.0, 30.0], [12.0, 20.0, 30.0]]);
        let clip = FrameSequence::from_fn(1, 1, ts, |t, _, _| [7, 8 + t as u8, 9]).unwrap();
        assert_eq!(rgb_trace_from_clip(&clip).unwrap().values[2], [7.0, 10.0, 9.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn rate_invariant_to_global_scale(scale in 0.05f64..20.0, hr in 55.0f64..130.0) {
            let a = synthetic_trace(hr, 20.0, 0.0);
            let b = RgbTrace::new(a.values.iter().map(|v| v.map(|x| x * scale)).collect(), a.fs).unwrap();
            let ha = estimate_hr(&pos_pulse(&a, POS_WINDOW_S).unwrap(), HR_BAND_BPM).unwrap();
            let hb = estimate_hr(&pos_pulse(&b, POS_WINDOW_S).unwrap(), HR_BAND_BPM).unwrap();
            prop_assert_eq!(ha, hb);
        }

        #[test]
        fn window_segments_are_centered(
            vals in prop::collection::vec((1.0f64..255.0, 1.0f64..255.0, 1.0f64..255.0), 48..96),
        ) {
            // a single window: the output is exactly that window's segment
            let trace = RgbTrace::new(vals.iter().map(|&(r, g, b)| [r, g, b]).collect(), 30.0).unwrap();
            let l = trace.len() as f64 / 30.0;
            let out = pos_pulse(&trace, l).unwrap();
            let mean = out.samples().iter().sum::<f64>() / out.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }
}
