//! Self-supervised PPG labels from the rear-camera fingertip video.
//!
//! With the flash on and a fingertip over the lens, the red channel is close
//! to saturation and its spatial mean follows the blood volume in the finger.

use crate::error::{Error, Result};
use crate::ingest::{spatial_mean_channel, Channel, FrameSequence, Trial};
use crate::signal::{bandpass_hr, estimate_hr, interp_at, maxmin_normalize, pearson, Waveform, HR_BAND_BPM};

/// Minimum finger clip length in frames (two seconds at 30 fps).
pub const MIN_FINGER_FRAMES: usize = 60;

/// Red-channel finger PPG scaled to `[0, 1]` over the clip handed in.
pub fn extract_finger_ppg(rear: &FrameSequence) -> Result<Waveform> {
    extract_finger_ppg_channel(rear, Channel::R)
}

pub fn extract_finger_ppg_channel(rear: &FrameSequence, channel: Channel) -> Result<Waveform> {
    if rear.len() < MIN_FINGER_FRAMES {
        return Err(Error::TooShort { needed: MIN_FINGER_FRAMES, got: rear.len() });
    }
    let mean = spatial_mean_channel(rear, channel)?;
    maxmin_normalize(&mean).map_err(|_| {
        Error::DegenerateRange(format!(
            "{channel:?} channel of the rear clip is constant; is the finger on the lens?"
        ))
    })
}

/// Finger label over `[t0, t1)` of a trial: extracted from the rear frames
/// when present, otherwise the stored finger waveform, normalized over the
/// window either way.
pub fn finger_label(trial: &Trial, t0: f64, t1: f64) -> Result<Waveform> {
    if let Some(rear) = &trial.rear {
        return extract_finger_ppg(&rear.crop_time(t0, t1)?);
    }
    match &trial.finger_ppg {
        Some(w) => maxmin_normalize(&w.crop_time(t0, t1)?),
        None => Err(Error::Precondition(
            "missing finger source: trial has neither rear frames nor a finger waveform".into(),
        )),
    }
}

/// Agreement between a pseudo label and a reference waveform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelQuality {
    /// Absolute heart-rate difference, BPM.
    pub hr_diff: f64,
    /// Correlation of the band-passed waveforms on a common grid.
    pub rho: f64,
}

pub fn label_quality(pseudo: &Waveform, gold: &Waveform) -> Result<LabelQuality> {
    let hr_diff = (estimate_hr(pseudo, HR_BAND_BPM)? - estimate_hr(gold, HR_BAND_BPM)?).abs();
    let (a, b) = (bandpass_hr(pseudo)?, bandpass_hr(gold)?);
    let start = a.start_time().max(b.start_time());
    let end = a.end_time().min(b.end_time());
    let fs = a.fs();
    if end <= start {
        return Err(Error::Alignment("pseudo and gold labels do not overlap in time".into()));
    }
    let n = ((end - start) * fs + 1e-9).floor() as usize + 1;
    let on_grid = |w: &Waveform| -> Vec<f64> {
        (0..n)
            .map(|k| interp_at(w.samples(), (start + k as f64 / fs - w.start_time()) * w.fs()))
            .collect()
    };
    let rho = pearson(&on_grid(&a), &on_grid(&b))?;
    Ok(LabelQuality { hr_diff, rho })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_bvp, gen_finger_clip, FingerClipParams};

    fn ts(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / 30.0).collect()
    }

    #[test]
    fn synthetic_finger_recovers_rate() {
        let bvp = gen_bvp(72.0, 30.0, 30.0, 0.3, 0.0, 1).unwrap();
        let clip = gen_finger_clip(&bvp, &FingerClipParams { noise_sigma: 2.0, ..Default::default() }, 5).unwrap();
        let label = extract_finger_ppg(&clip).unwrap();
        let hr = estimate_hr(&label, HR_BAND_BPM).unwrap();
        assert!((hr - 72.0).abs() <= 1.0, "{hr}");
        let (lo, hi) = crate::signal::min_max(label.samples());
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn ramp_frames_give_normalized_ramp() {
        let clip = FrameSequence::from_fn(2, 2, ts(61), |t, _, _| [(100 + 2 * t) as u8, 0, 0]).unwrap();
        let label = extract_finger_ppg(&clip).unwrap();
        for (i, v) in label.samples().iter().enumerate() {
            assert!((v - i as f64 / 60.0).abs() < 1e-12);
        }
    }

    #[test]
    fn black_frames_are_degenerate() {
        let clip = FrameSequence::from_fn(2, 2, ts(90), |_, _, _| [0, 0, 0]).unwrap();
        assert!(matches!(extract_finger_ppg(&clip), Err(Error::DegenerateRange(_))));
        let short = FrameSequence::from_fn(2, 2, ts(30), |t, _, _| [t as u8, 0, 0]).unwrap();
        assert!(matches!(extract_finger_ppg(&short), Err(Error::TooShort { .. })));
    }

    #[test]
    fn brightness_scaling_keeps_rate() {
        let bvp = gen_bvp(84.0, 30.0, 20.0, 0.3, 0.0, 2).unwrap();
        let a = gen_finger_clip(&bvp, &FingerClipParams { base: 200.0, ..Default::default() }, 1).unwrap();
        let b = gen_finger_clip(&bvp, &FingerClipParams { base: 100.0, ..Default::default() }, 1).unwrap();
        let ha = estimate_hr(&extract_finger_ppg(&a).unwrap(), HR_BAND_BPM).unwrap();
        let hb = estimate_hr(&extract_finger_ppg(&b).unwrap(), HR_BAND_BPM).unwrap();
        assert_eq!(ha, hb);
    }

    #[test]
    fn quality_of_identical_labels() {
        let gold = gen_bvp(75.0, 30.0, 30.0, 0.3, 0.0, 3).unwrap();
        let q = label_quality(&gold, &gold).unwrap();
        assert_eq!(q.hr_diff, 0.0);
        assert!((q.rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quality_under_noise_and_shift() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let gold = gen_bvp(75.0, 30.0, 60.0, 0.0, 0.0, 3).unwrap();
        // 20 dB: noise variance is 1% of the unit-amplitude sinusoid's 0.5
        let sigma = (0.5f64 / 100.0).sqrt();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, sigma).unwrap();
        let noisy = gold.with_samples(gold.samples().iter().map(|v| v + noise.sample(&mut rng)).collect()).unwrap();
        assert!(label_quality(&noisy, &gold).unwrap().hr_diff <= 1.0);

        let shifted = gen_bvp(85.0, 30.0, 60.0, 0.0, 0.0, 3).unwrap();
        let q = label_quality(&shifted, &gold).unwrap();
        assert!((q.hr_diff - 10.0).abs() <= 0.5, "{}", q.hr_diff);
    }
}
