use super::*;
use crate::grid::tile_partition;

fn small_config() -> SynthConfig {
    SynthConfig { spec: GridSpec::with_size(16, 16).unwrap(), n_days: 60, seed: 7, ..SynthConfig::default() }
}

#[test]
fn zero_noise_without_triggers_decays_geometrically() {
    let cfg = SynthConfig { noise_scale: 0.0, cape_trigger: 1e9, ..small_config() };
    let set = generate::<f64>(&cfg).unwrap();
    assert_eq!(set.burst_days(), 0);
    for (d, field) in set.targets().iter().enumerate() {
        let expect = INITIAL_RAIN * cfg.ar1_rain.powi(d as i32);
        for &v in field.values() {
            assert!((v - expect).abs() <= 1e-6 * expect, "day {d}: {v} vs {expect}");
        }
    }
}

#[test]
fn same_seed_is_identical_and_seed_matters() {
    let cfg = small_config();
    let a = generate::<f64>(&cfg).unwrap();
    let b = generate::<f64>(&cfg).unwrap();
    assert_eq!(a, b);
    let c = generate::<f64>(&SynthConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn bursts_follow_triggers_by_one_day() {
    let cfg = SynthConfig { n_days: 120, ..SynthConfig::default() };
    let set = generate::<f64>(&cfg).unwrap();
    let (h, w) = (cfg.spec.height(), cfg.spec.width());
    let mut trigger_days = 0;
    for t in 0..set.len() - 1 {
        let fired = trigger_mask(&set.predictors()[t], cfg.cape_trigger, cfg.omega_trigger);
        let any = fired.iter().any(|&f| f);
        trigger_days += any as usize;
        // The truth mask on t+1 is exactly the dilated trigger mask of t.
        let reach = neighbourhood_fraction(&fired, h, w, cfg.burst_radius);
        let expect: Vec<bool> = reach.iter().map(|&d| d > 0.0).collect();
        assert_eq!(set.extreme_truth()[t + 1], expect, "day {}", t + 1);
    }
    assert!(!set.extreme_truth()[0].iter().any(|&b| b));
    assert!(trigger_days > 0);
    assert_eq!(set.burst_days(), trigger_days);
}

#[test]
fn bursts_reach_at_least_the_configured_intensity() {
    let cfg = SynthConfig { n_days: 80, ..SynthConfig::default() };
    let set = generate::<f64>(&cfg).unwrap();
    for (field, mask) in set.targets().iter().zip(set.extreme_truth()) {
        for (&v, &m) in field.values().iter().zip(mask) {
            if m {
                assert!(v >= cfg.burst_intensity);
            }
        }
    }
}

#[test]
fn yesterdays_trigger_rule_detects_every_planted_tile() {
    let cfg = SynthConfig::default();
    let set = generate::<f64>(&cfg).unwrap();
    let (h, w) = (cfg.spec.height(), cfg.spec.width());
    let tiles = tile_partition(&cfg.spec, 32).unwrap().tiles;
    let (mut hits, mut misses) = (0, 0);
    for t in 1..set.len() {
        let fired = trigger_mask(&set.predictors()[t - 1], cfg.cape_trigger, cfg.omega_trigger);
        let reach = neighbourhood_fraction(&fired, h, w, cfg.burst_radius);
        for tile in &tiles {
            let observed = tile.pixels(w).any(|p| set.extreme_truth()[t][p]);
            let predicted = tile.pixels(w).any(|p| reach[p] > 0.0);
            match (predicted, observed) {
                (true, true) => hits += 1,
                (false, true) => misses += 1,
                _ => {}
            }
        }
    }
    assert!(hits > 0);
    assert_eq!(misses, 0, "tile POD must be 1.0");
}

#[test]
fn spatial_mean_rain_keeps_its_persistence() {
    for seed in [1, 42, 99] {
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        let set = generate::<f64>(&cfg).unwrap();
        let series: Vec<f64> =
            set.targets().iter().map(|f| f.values().iter().sum::<f64>() / f.values().len() as f64).collect();
        let m = series.iter().sum::<f64>() / series.len() as f64;
        let var: f64 = series.iter().map(|x| (x - m).powi(2)).sum();
        let cov: f64 = series.windows(2).map(|p| (p[0] - m) * (p[1] - m)).sum();
        let rho = cov / var;
        assert!((rho - cfg.ar1_rain).abs() <= 0.1, "seed {seed}: lag-1 autocorrelation {rho}");
    }
}

#[test]
fn config_validation() {
    let bad = |c: SynthConfig| generate::<f64>(&c).unwrap_err();
    assert!(matches!(bad(SynthConfig { n_days: 10, ..small_config() }), SynthError::InvalidConfig(_)));
    assert!(matches!(bad(SynthConfig { ar1_rain: 1.0, ..small_config() }), SynthError::InvalidConfig(_)));
    assert!(matches!(bad(SynthConfig { ar1_cape: -0.1, ..small_config() }), SynthError::InvalidConfig(_)));
}

#[test]
fn chronological_split() {
    let cfg = SynthConfig { n_days: 100, ..small_config() };
    let set = generate::<f64>(&cfg).unwrap();
    let (train, eval) = split(&set, 0.8).unwrap();
    assert_eq!((train.len(), eval.len()), (80, 20));
    let train_days: Vec<_> = train.targets().iter().map(|f| f.day_index()).collect();
    let eval_days: Vec<_> = eval.targets().iter().map(|f| f.day_index()).collect();
    let mut all = train_days.clone();
    all.extend(&eval_days);
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert!(eval_days.iter().min() > train_days.iter().max());
    assert_eq!(eval.first_day(), 80);

    assert!(matches!(split(&set, 0.95), Err(SynthError::SplitTooSmall { train: 95, eval: 5 })));
    assert!(matches!(split(&set, 1.0), Err(SynthError::BadFraction(_))));
}

#[test]
fn dataset_round_trip_is_lossless_and_byte_stable() {
    let set = generate::<f64>(&small_config()).unwrap();
    let bytes = encode_dataset(&set);
    let back = decode_dataset::<f64>(&bytes).unwrap();
    assert_eq!(back, set);
    assert_eq!(encode_dataset(&back), bytes);

    let (_, eval) = split(&set, 0.5).unwrap();
    let back = decode_dataset::<f64>(&encode_dataset(&eval)).unwrap();
    assert_eq!(back.first_day(), 30);
    assert_eq!(back, eval);

    let single = decode_dataset::<f32>(&bytes).unwrap();
    assert_eq!(encode_dataset(&single), bytes);
}

#[test]
fn dataset_errors_are_distinct() {
    let set = generate::<f64>(&small_config()).unwrap();
    let bytes = encode_dataset(&set);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_dataset::<f64>(&bad), Err(FormatError::BadMagic(_))));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_dataset::<f64>(&bad), Err(FormatError::VersionMismatch { found: 9 })));

    let cut = &bytes[..bytes.len() / 2];
    assert!(matches!(decode_dataset::<f64>(cut), Err(FormatError::Truncated { .. })));
    assert!(matches!(decode_dataset::<f64>(&bytes[..2]), Err(FormatError::Truncated { .. })));

    let mut bad = bytes.clone();
    bad[38] = 3; // channel count
    assert!(matches!(decode_dataset::<f64>(&bad), Err(FormatError::DimensionMismatch(_))));

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_dataset::<f64>(&long), Err(FormatError::DimensionMismatch(_))));
}

#[test]
fn dataset_file_round_trip() {
    let dir = std::env::temp_dir().join(format!("pglode-synth-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("set.pgl");
    let set = generate::<f64>(&small_config()).unwrap();
    write_dataset(&set, &path).unwrap();
    assert_eq!(read_dataset::<f64>(&path).unwrap(), set);
    std::fs::remove_dir_all(&dir).unwrap();
}
