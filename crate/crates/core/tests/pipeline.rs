use pglode::grid::{channel_stats, compute_threshold_map, tile_partition, GridSpec};
use pglode::models::{
    decode_checkpoint, encode_checkpoint, persistence_forecast, Checkpoint, ModelConfig, ModelKind, WindowedSet,
};
use pglode::scalar::Scalar;
use pglode::synthgen::{decode_dataset, encode_dataset, generate, split, SynthConfig};
use pglode::training::{climatology, fit, LossConfig};
use pglode::verify::{evaluate_model, parse_csv, render_csv, Tier};

fn synth() -> SynthConfig {
    SynthConfig {
        spec: GridSpec::with_size(16, 16).unwrap(),
        n_days: 48,
        seed: 3,
        smoothing_radius: 2,
        burst_radius: 2,
        ..SynthConfig::default()
    }
}

fn model_config() -> ModelConfig {
    ModelConfig { history_t: 2, latent_channels: 4, hidden_channels: 4, rk4_steps: 2, ..ModelConfig::default() }
}

/// Generates, splits, trains one model for a few epochs and scores it
/// against persistence. Returns the first and last epoch losses.
fn run<T: Scalar>(kind: ModelKind) -> (f64, f64) {
    let set = generate::<T>(&synth()).unwrap();
    assert_eq!(decode_dataset::<T>(&encode_dataset(&set)).unwrap(), set);
    let (train, eval) = split(&set, 0.75).unwrap();
    let thr = compute_threshold_map(train.targets()).unwrap();
    let stats = channel_stats(train.predictors());
    let windows = WindowedSet::from_samples(&train, &stats, 2, 1).unwrap();

    let mut model = pglode::models::Model::<T>::new(kind, model_config(), *set.spec()).unwrap();
    let (mean_log, rate) = climatology(&windows, &thr);
    model.set_output_biases(mean_log, rate);
    let loss = LossConfig { epochs: 4, batch_size: 4, learning_rate: 1e-2, ..LossConfig::default() };
    let report = fit(&mut model, &windows, &thr, &loss, &[]).unwrap();
    assert_eq!(report.epochs.len(), 4);

    let ckpt = Checkpoint { model, stats };
    let restored = decode_checkpoint::<T>(&encode_checkpoint(&ckpt)).unwrap();
    assert_eq!(restored, ckpt);

    let eval_windows = WindowedSet::from_samples(&eval, &restored.stats, 2, 1).unwrap();
    let forecasts = restored.model.predict_windows(&eval_windows, 4).unwrap();
    let obs: Vec<_> = (0..eval_windows.len()).map(|i| eval_windows.target(i).clone()).collect();
    let persistence: Vec<_> =
        (0..eval_windows.len()).map(|i| persistence_forecast(eval_windows.last_observed(i), &thr).unwrap()).collect();
    let tiles = tile_partition(set.spec(), 8).unwrap().tiles;

    let mut rows = evaluate_model("persistence", &persistence, &obs, &thr, &tiles).unwrap().to_vec();
    rows.extend(evaluate_model(kind.name(), &forecasts, &obs, &thr, &tiles).unwrap());
    for r in &rows {
        let expected = match r.tier {
            Tier::Pixel => obs.len() * 256,
            Tier::Tile => obs.len() * 4,
        };
        assert_eq!(r.counts.total(), expected as u64);
    }
    let parsed = parse_csv(&render_csv(&rows)).unwrap();
    assert_eq!(parsed.iter().map(|p| p.row.clone()).collect::<Vec<_>>(), rows);

    let losses = report.total_losses();
    (losses[0], losses[losses.len() - 1])
}

#[test]
fn pg_lode_pipeline_in_double_precision() {
    let (first, last) = run::<f64>(ModelKind::PgLode);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn convlstm_pipeline_in_double_precision() {
    let (first, last) = run::<f64>(ModelKind::ConvLstm);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn pipeline_runs_in_single_precision() {
    let (first, last) = run::<f32>(ModelKind::PgLode);
    assert!(first.is_finite() && last.is_finite());
}

#[test]
fn crate_root_aliases_are_double_precision() {
    let set: pglode::SampleSet = generate(&synth()).unwrap();
    let thr: pglode::ThresholdMap = compute_threshold_map(set.targets()).unwrap();
    let f: pglode::Forecast = persistence_forecast(&set.targets()[0], &thr).unwrap();
    assert_eq!(f.intensity(), set.targets()[0].values());
}
