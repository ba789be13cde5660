use std::f64::consts::PI;

use proptest::prelude::*;

use super::*;

fn sine(f: f64, fs: f64, secs: f64, amp: f64) -> Waveform {
    let n = (fs * secs).round() as usize;
    Waveform::new((0..n).map(|i| amp * (2.0 * PI * f * i as f64 / fs).sin()).collect(), fs).unwrap()
}

/// Least-squares amplitude of the `f` component over `[from, to)`.
fn fitted_amplitude(x: &[f64], f: f64, fs: f64, from: usize, to: usize) -> f64 {
    let (mut ss, mut cc, mut sc, mut xs, mut xc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &v) in x.iter().enumerate().take(to).skip(from) {
        let ph = 2.0 * PI * f * i as f64 / fs;
        let (s, c) = ph.sin_cos();
        ss += s * s;
        cc += c * c;
        sc += s * c;
        xs += v * s;
        xc += v * c;
    }
    let det = ss * cc - sc * sc;
    let a = (xs * cc - xc * sc) / det;
    let b = (xc * ss - xs * sc) / det;
    (a * a + b * b).sqrt()
}

/// Squared Butterworth band-pass magnitude after bilinear warping; the gain of
/// a forward-backward pass.
fn analytic_filtfilt_gain(f: f64, lo: f64, hi: f64, fs: f64) -> f64 {
    let warp = |x: f64| (PI * x / fs).tan();
    let (wl, wh, w) = (warp(lo), warp(hi), warp(f));
    let q = (w * w - wl * wh) / ((wh - wl) * w);
    1.0 / (1.0 + q.powi(4))
}

#[test]
fn waveform_rejects_bad_input() {
    assert!(Waveform::new(vec![1.0], 30.0).is_err());
    assert!(Waveform::new(vec![1.0, 2.0], 0.0).is_err());
    assert!(Waveform::new(vec![1.0, f64::NAN], 30.0).is_err());
}

#[test]
fn bandpass_removes_dc() {
    let w = Waveform::new(vec![5.0; 900], 30.0).unwrap();
    let out = bandpass_hr(&w).unwrap();
    assert!(out.samples()[60..840].iter().all(|v| v.abs() <= 1e-6));
}

#[test]
fn bandpass_passes_center_and_rejects_stopband() {
    let oracle = analytic_filtfilt_gain(1.5, 0.75, 2.5, 30.0);
    assert!((0.95..=1.05).contains(&oracle));
    let w = sine(1.5, 30.0, 60.0, 1.0);
    let out = bandpass_hr(&w).unwrap();
    let amp = fitted_amplitude(out.samples(), 1.5, 30.0, 300, 1500);
    assert!((0.95..=1.05).contains(&amp), "passband amplitude {amp}");
    assert!((amp - oracle).abs() < 1e-3);

    let w = sine(10.0, 30.0, 60.0, 1.0);
    let out = bandpass_hr(&w).unwrap();
    let amp = fitted_amplitude(out.samples(), 10.0, 30.0, 300, 1500);
    assert!(amp < 0.05, "stopband amplitude {amp}");
    assert!(analytic_filtfilt_gain(10.0, 0.75, 2.5, 30.0) < 0.05);
}

#[test]
fn bandpass_errors() {
    let w = sine(1.0, 30.0, 10.0, 1.0);
    assert!(matches!(bandpass(&w, 0.75, 15.0, 2), Err(Error::InvalidBand { .. })));
    let short = Waveform::new(vec![0.0, 1.0, 0.0, 1.0, 0.0], 30.0).unwrap();
    assert!(matches!(bandpass(&short, 0.75, 2.5, 2), Err(Error::TooShort { .. })));
}

#[test]
fn maxmin_examples() {
    let w = Waveform::new(vec![2.0, 4.0, 6.0], 1.0).unwrap();
    assert_eq!(maxmin_normalize(&w).unwrap().samples(), &[0.0, 0.5, 1.0]);
    let w = Waveform::new(vec![0.0, 0.5, 1.0], 1.0).unwrap();
    assert_eq!(maxmin_normalize(&w).unwrap().samples(), &[0.0, 0.5, 1.0]);
    let w = Waveform::new(vec![3.0; 4], 1.0).unwrap();
    assert!(matches!(maxmin_normalize(&w), Err(Error::DegenerateRange(_))));
}

#[test]
fn maxmin_preserves_rank_order() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let x: Vec<f64> = (0..1000).map(|_| rng.random_range(-50.0..50.0)).collect();
    let out = maxmin_normalize(&Waveform::new(x.clone(), 30.0).unwrap()).unwrap();
    let y = out.samples();
    let (lo, hi) = min_max(y);
    assert_eq!((lo, hi), (0.0, 1.0));
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        idx
    };
    assert_eq!(rank(&x), rank(y));
}

#[test]
fn first_difference_examples() {
    let w = Waveform::new(vec![1.0, 3.0, 6.0], 1.0).unwrap();
    assert_eq!(first_difference(&w).unwrap().samples(), &[2.0, 3.0]);
    let w = Waveform::new(vec![4.0; 10], 1.0).unwrap();
    assert!(first_difference(&w).unwrap().samples().iter().all(|&v| v == 0.0));
    let w = Waveform::new(vec![1.0, 2.0], 1.0).unwrap();
    assert!(first_difference(&w).is_err());
}

#[test]
fn first_difference_gain_matches_difference_operator() {
    let (f0, fs) = (1.3, 30.0);
    let d = first_difference(&sine(f0, fs, 60.0, 1.0)).unwrap();
    let amp = fitted_amplitude(d.samples(), f0, fs, 0, d.len());
    let want = 2.0 * (PI * f0 / fs).sin();
    assert!((amp - want).abs() < 1e-9, "{amp} vs {want}");
}

#[test]
fn spectrum_peak_at_tone() {
    let w = sine(1.2, 30.0, 60.0, 1.0);
    let spec = power_spectrum(&w, 0.5).unwrap();
    assert!(spec.bin_spacing_bpm() <= 0.5);
    let (_, f) = spec.peak_in(0.0, 1e9).unwrap();
    assert_eq!(f, 72.0);

    let z = Waveform::new(vec![0.0; 100], 30.0).unwrap();
    assert!(power_spectrum(&z, 0.5).unwrap().power.iter().all(|&p| p == 0.0));
}

#[test]
fn spectrum_two_tone_ratio_matches_direct_dft() {
    let fs = 30.0;
    let n = 1800;
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            (2.0 * PI * t).sin() + 0.5 * (4.0 * PI * t).sin()
        })
        .collect();
    let spec = power_spectrum(&Waveform::new(x.clone(), fs).unwrap(), 0.5).unwrap();
    // direct DFT of the mean-removed, zero-padded signal at one frequency
    let mean = x.iter().sum::<f64>() / n as f64;
    let direct = |bpm: f64| {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let ph = -2.0 * PI * bpm / 60.0 * i as f64 / fs;
            re += (v - mean) * ph.cos();
            im += (v - mean) * ph.sin();
        }
        re * re + im * im
    };
    let at = |bpm: f64| {
        let i = spec.freqs_bpm.iter().position(|&f| (f - bpm).abs() < 1e-9).unwrap();
        spec.power[i]
    };
    let (p60, p120) = (at(60.0), at(120.0));
    assert!((p60 / direct(60.0) - 1.0).abs() < 1e-9);
    assert!((p120 / direct(120.0) - 1.0).abs() < 1e-9);
    assert!((p60 / p120 - direct(60.0) / direct(120.0)).abs() < 1e-9);
    assert!((p60 / p120 - 4.0).abs() < 1e-6);
}

#[test]
fn hr_of_pure_tone() {
    let hr = estimate_hr(&sine(1.2, 30.0, 60.0, 1.0), HR_BAND_BPM).unwrap();
    assert!((hr - 72.0).abs() <= SPECTRUM_RESOLUTION_BPM);
}

#[test]
fn hr_ignores_out_of_band_interferer() {
    let a = sine(1.0, 30.0, 60.0, 1.0);
    let b = sine(3.5, 30.0, 60.0, 1.5);
    let sum: Vec<f64> = a.samples().iter().zip(b.samples()).map(|(x, y)| x + y).collect();
    let w = Waveform::new(sum, 30.0).unwrap();
    // analytic filter oracle: the interferer is attenuated well below the tone
    assert!(1.5 * analytic_filtfilt_gain(3.5, 0.75, 2.5, 30.0) < 0.5 * analytic_filtfilt_gain(1.0, 0.75, 2.5, 30.0));
    assert_eq!(estimate_hr(&w, HR_BAND_BPM).unwrap(), 60.0);
}

#[test]
fn hr_of_constant_is_an_error() {
    let w = Waveform::new(vec![1.0; 300], 30.0).unwrap();
    assert!(matches!(estimate_hr(&w, HR_BAND_BPM), Err(Error::Estimation(_))));
    let w = sine(1.0, 30.0, 10.0, 1.0);
    assert!(estimate_hr(&w, (45.0, 1000.0)).is_err());
}

#[test]
fn pearson_examples() {
    let a: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64).collect();
    let neg: Vec<f64> = a.iter().map(|x| -x).collect();
    assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert!(matches!(pearson(&a, &[1.0; 20]), Err(Error::UndefinedCorrelation(_))));
    assert!(pearson(&a, &a[..5]).is_err());
}

#[test]
fn pearson_matches_covariance_definition() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
    let b: Vec<f64> = a.iter().map(|x| x + rng.random::<f64>()).collect();
    let n = 50.0;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0);
    let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / (n - 1.0);
    let oracle = cov / (va * vb).sqrt();
    assert!((pearson(&a, &b).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn resample_identity_and_ramp() {
    let w = sine(1.0, 30.0, 5.0, 1.0);
    assert_eq!(resample_linear(&w, 30.0).unwrap().samples(), w.samples());

    let ramp = Waveform::new((0..31).map(|i| 2.0 * i as f64 + 1.0).collect(), 10.0).unwrap();
    let up = resample_linear(&ramp, 20.0).unwrap();
    assert_eq!(up.len(), 61);
    for (k, v) in up.samples().iter().enumerate() {
        let t = k as f64 / 20.0;
        assert!((v - (20.0 * t + 1.0)).abs() < 1e-9);
    }
}

#[test]
fn resample_sinusoid_error_bound() {
    let w = sine(1.0, 30.0, 10.0, 1.0);
    let out = resample_linear(&w, 25.0).unwrap();
    let err = out
        .samples()
        .iter()
        .enumerate()
        .map(|(k, v)| (v - (2.0 * PI * k as f64 / 25.0).sin()).abs())
        .fold(0.0, f64::max);
    assert!(err <= 0.01, "max error {err}");
}

#[test]
fn csv_round_trip() {
    let w = Waveform::with_start(vec![0.125, -3.5, 1e-9, 42.0], 30.0, 12.5).unwrap();
    let mut buf = Vec::new();
    w.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("t_s,value\n"));
    let back = Waveform::read_csv(&buf[..]).unwrap();
    assert_eq!(back, w);
}

#[test]
fn cumulative_sum_inverts_difference() {
    let w = Waveform::new(vec![1.0, -2.0, 3.5, 0.25, 7.0], 30.0).unwrap();
    let d = first_difference(&cumulative_sum(&w)).unwrap();
    assert_eq!(d.samples(), &w.samples()[1..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bandpass_is_linear(
        x in prop::collection::vec(-10.0f64..10.0, 64..256),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v * 0.3 + (i as u64 ^ seed) as f64 * 0.01).sin()).collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let f = |v: &[f64]| bandpass_hr(&Waveform::new(v.to_vec(), 30.0).unwrap()).unwrap().into_samples();
        let (fx, fy, fm) = (f(&x), f(&y), f(&mix));
        for i in 0..x.len() {
            prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn hr_invariant_to_scale_and_offset(
        f in 0.9f64..2.3,
        scale in 0.01f64..100.0,
        offset in -100.0f64..100.0,
    ) {
        let w = sine(f, 30.0, 20.0, 1.0);
        let t = w.with_samples(w.samples().iter().map(|x| scale * x + offset).collect()).unwrap();
        prop_assert_eq!(estimate_hr(&w, HR_BAND_BPM).unwrap(), estimate_hr(&t, HR_BAND_BPM).unwrap());
    }

    #[test]
    fn maxmin_is_idempotent(x in prop::collection::vec(-1e3f64..1e3, 2..200)) {
        let w = Waveform::new(x, 1.0).unwrap();
        if let Ok(once) = maxmin_normalize(&w) {
            let twice = maxmin_normalize(&once).unwrap();
            prop_assert_eq!(once.samples(), twice.samples());
        }
    }

    #[test]
    fn difference_of_cumsum_recovers_signal(x in prop::collection::vec(-1e3f64..1e3, 3..200)) {
        let w = Waveform::new(x.clone(), 1.0).unwrap();
        let d = first_difference(&cumulative_sum(&w)).unwrap();
        for (got, want) in d.samples().iter().zip(&x[1..]) {
            prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs() * 1e3));
        }
    }

    #[test]
    fn pearson_affine_invariant(
        a in prop::collection::vec(-1e2f64..1e2, 5..60),
        s in 0.1f64..10.0,
        c in -50.0f64..50.0,
    ) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * 0.5 + (i as f64).sin()).collect();
        let a2: Vec<f64> = a.iter().map(|x| s * x + c).collect();
        if let (Ok(r1), Ok(r2)) = (pearson(&a, &b), pearson(&a2, &b)) {
            prop_assert!((r1 - r2).abs() < 1e-9);
        }
    }
}
