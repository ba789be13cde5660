use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;

fn grid(n: usize, start: f64, fs: f64) -> Vec<f64> {
    (0..n).map(|i| start + i as f64 / fs).collect()
}

fn meta(duration_s: f64) -> TrialMeta {
    TrialMeta {
        subject_id: "s01".into(),
        device: Device::Xiaomi8,
        lighting: Lighting::Natural,
        lux: Lux::Unknown,
        motion: Motion::Stationary,
        exercise: false,
        skin_group: SkinGroup::III4,
        trial_no: 1,
        duration_s,
        camera: CameraConfig::default(),
        extra: Default::default(),
    }
}

fn pulsing(n: usize, start: f64, size: usize, f: f64) -> FrameSequence {
    FrameSequence::from_fn(size, size, grid(n, start, 30.0), |t, _, _| {
        let v = 128.0 + 50.0 * (2.0 * std::f64::consts::PI * f * (start + t as f64 / 30.0)).sin();
        [v.round() as u8, 40, 20]
    })
    .unwrap()
}

fn small_trial() -> Trial {
    let front = pulsing(90, 0.0, 4, 1.0);
    let rear = pulsing(90, 0.0, 2, 1.2);
    let gold = Waveform::new((0..90).map(|i| (i as f64 * 0.2).sin()).collect(), 30.0).unwrap();
    Trial::new(meta(3.0), front, Some(rear), None, Some(gold)).unwrap()
}

#[test]
fn spatial_mean_follows_uniform_frames() {
    let seq = FrameSequence::from_fn(3, 3, grid(3, 0.0, 30.0), |t, _, _| {
        [[10, 20, 30][t], 0, 0]
    })
    .unwrap();
    let w = spatial_mean_channel(&seq, Channel::R).unwrap();
    assert_eq!(w.samples(), &[10.0, 20.0, 30.0]);
    assert_eq!(w.fs(), 30.0);
    assert_eq!(w.start_time(), 0.0);
}

#[test]
fn spatial_mean_of_split_frame() {
    let seq = FrameSequence::from_fn(4, 4, grid(5, 1.0, 30.0), |_, _, x| {
        [if x < 2 { 0 } else { 100 }, 0, 0]
    })
    .unwrap();
    let w = spatial_mean_channel(&seq, Channel::R).unwrap();
    assert!(w.samples().iter().all(|&v| v == 50.0));
    assert_eq!(w.start_time(), 1.0);
}

#[test]
fn spatial_mean_matches_naive_loop() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let (h, wd, t) = (7, 5, 12);
    let data: Vec<u8> = (0..t * h * wd * 3).map(|_| rng.random()).collect();
    let seq = FrameSequence::new(h, wd, data.clone(), grid(t, 0.0, 30.0)).unwrap();
    for ch in [Channel::R, Channel::G, Channel::B] {
        let w = spatial_mean_channel(&seq, ch).unwrap();
        for f in 0..t {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..wd {
                    s += data[((f * h + y) * wd + x) * 3 + ch.index()] as f64;
                }
            }
            assert!((w.samples()[f] - s / (h * wd) as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn frame_sequence_validation() {
    assert!(FrameSequence::new(1, 1, vec![0; 3], vec![0.0]).is_err());
    assert!(FrameSequence::new(1, 1, vec![0; 6], vec![0.0, 0.0]).is_err());
    assert!(FrameSequence::new(1, 1, vec![0; 5], vec![0.0, 1.0]).is_err());
}

#[test]
fn meta_json_spellings() {
    let mut m = meta(60.0);
    m.lux = Lux::L110;
    m.skin_group = SkinGroup::V6;
    m.lighting = Lighting::Led;
    m.motion = Motion::Talking;
    let v = serde_json::to_value(&m).unwrap();
    assert_eq!(v["lux"], 110);
    assert_eq!(v["skin_group"], "V+VI");
    assert_eq!(v["lighting"], "led");
    assert_eq!(v["motion"], "talking");
    assert_eq!(v["device"], "xiaomi8");
    m.lux = Lux::Unknown;
    assert_eq!(serde_json::to_value(&m).unwrap()["lux"], "unknown");
    assert!(serde_json::from_str::<Lux>("100").is_err());
    assert_eq!("III+IV".parse::<SkinGroup>().unwrap(), SkinGroup::III4);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trial");
    let mut trial = small_trial();
    trial.finger_ppg = Some(
        Waveform::new((0..90).map(|i| (i as f64 / 89.0).powi(2)).collect(), 30.0).unwrap(),
    );
    trial.validate().unwrap();
    save_trial(&trial, &path).unwrap();
    let back = load_trial(&path).unwrap();
    assert_eq!(back, trial);
    // overwriting an existing directory works
    save_trial(&back, &path).unwrap();
    assert_eq!(load_trial(&path).unwrap(), trial);
}

#[test]
fn missing_meta_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trial");
    save_trial(&small_trial(), &path).unwrap();
    std::fs::remove_file(path.join("meta.json")).unwrap();
    match load_trial(&path) {
        Err(Error::Schema { file, .. }) => assert_eq!(file, "meta.json"),
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn missing_finger_source_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trial");
    save_trial(&small_trial(), &path).unwrap();
    std::fs::remove_file(path.join("rear_frames.bin")).unwrap();
    std::fs::remove_file(path.join("rear_timestamps.csv")).unwrap();
    let err = load_trial(&path).unwrap_err().to_string();
    assert!(err.contains("finger source"), "{err}");
}

#[test]
fn unknown_meta_keys_survive() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trial");
    save_trial(&small_trial(), &path).unwrap();
    let meta_path = path.join("meta.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&meta_path).unwrap()).unwrap();
    v["room"] = serde_json::json!({"temp_c": 21.5});
    std::fs::write(&meta_path, v.to_string()).unwrap();
    let loaded = load_trial(&path).unwrap();
    assert_eq!(loaded.meta.extra["room"]["temp_c"], 21.5);
    let again = dir.path().join("again");
    save_trial(&loaded, &again).unwrap();
    assert_eq!(load_trial(&again).unwrap().meta.extra["room"]["temp_c"], 21.5);
}

#[test]
fn sync_of_aligned_streams_is_a_crop() {
    let trial = small_trial();
    let out = synchronize(&trial, 0.0).unwrap();
    assert_eq!(out.front, trial.front);
    assert_eq!(out.rear, trial.rear);
    assert_eq!(out.gold_ppg.as_ref().unwrap().samples(), trial.gold_ppg.as_ref().unwrap().samples());
}

#[test]
fn sync_truncates_to_shortest_stream() {
    let front = pulsing(300, 0.0, 2, 1.0);
    let rear = pulsing(150, 0.0, 2, 1.0);
    let trial = Trial::new(meta(5.0), front, Some(rear), None, None).unwrap();
    let out = synchronize(&trial, 0.0).unwrap();
    assert_eq!(out.front.len(), out.rear.as_ref().unwrap().len());
    assert_eq!(out.front.len(), 150);
}

#[test]
fn sync_errors_outside_spans() {
    let trial = small_trial();
    assert!(matches!(synchronize(&trial, 10.0), Err(Error::Sync(_))));
    assert!(matches!(synchronize(&trial, -1.0), Err(Error::Sync(_))));
}

#[test]
fn sync_aligns_offset_gold_stream() {
    // a 1.1 Hz pulse seen through the finger clip from t = 0 and logged by the
    // oximeter with its own clock starting 0.1 s later
    let f = 1.1;
    let pulse = |t: f64| (2.0 * std::f64::consts::PI * f * t).sin();
    let rear = FrameSequence::from_fn(2, 2, grid(600, 0.0, 30.0), |i, _, _| {
        [(128.0 + 100.0 * pulse(i as f64 / 30.0)).round() as u8, 0, 0]
    })
    .unwrap();
    let gold = Waveform::with_start((0..1200).map(|i| pulse(0.1 + i as f64 / 60.0)).collect(), 60.0, 0.1).unwrap();
    let front = pulsing(600, 0.0, 2, 1.0);
    let trial = Trial::new(meta(20.0), front, Some(rear), None, Some(gold)).unwrap();
    let out = synchronize(&trial, 0.5).unwrap();
    let finger = spatial_mean_channel(out.rear.as_ref().unwrap(), Channel::R).unwrap();
    let gold = out.gold_ppg.unwrap();
    assert_eq!(finger.len(), gold.len());
    assert_eq!(gold.fs(), 30.0);
    let best = (-5i64..=5)
        .max_by(|&a, &b| xcorr(finger.samples(), gold.samples(), a).total_cmp(&xcorr(finger.samples(), gold.samples(), b)))
        .unwrap();
    assert_eq!(best, 0);
}

fn xcorr(a: &[f64], b: &[f64], lag: i64) -> f64 {
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    let mut s = 0.0;
    for i in 0..a.len() as i64 {
        let j = i + lag;
        if j >= 0 && (j as usize) < b.len() {
            s += (a[i as usize] - ma) * (b[j as usize] - mb);
        }
    }
    s
}

#[test]
fn sync_is_idempotent() {
    let front = pulsing(300, 0.013, 3, 1.0);
    let rear = pulsing(290, 0.2, 2, 1.0);
    let gold = Waveform::with_start((0..500).map(|i| (i as f64 * 0.05).cos()).collect(), 50.0, 0.07).unwrap();
    let trial = Trial::new(meta(9.0), front, Some(rear), None, Some(gold)).unwrap();
    let once = synchronize(&trial, 0.25).unwrap();
    let twice = synchronize(&once, 0.25).unwrap();
    assert_eq!(once, twice);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn spatial_mean_commutes_with_offset(
        data in prop::collection::vec(0u8..200, 2 * 3 * 3 * 3),
        c in 0u8..55,
    ) {
        let ts = grid(2, 0.0, 30.0);
        let a = FrameSequence::new(3, 3, data.clone(), ts.clone()).unwrap();
        let b = FrameSequence::new(3, 3, data.iter().map(|v| v + c).collect(), ts).unwrap();
        let ma = spatial_mean_channel(&a, Channel::G).unwrap();
        let mb = spatial_mean_channel(&b, Channel::G).unwrap();
        for (x, y) in ma.samples().iter().zip(mb.samples()) {
            prop_assert!((y - x - c as f64).abs() < 1e-9);
        }
    }
}
