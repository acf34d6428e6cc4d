use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::grid::{channel_stats, compute_threshold_map, normalize_predictors, GridSpec};
use crate::models::{ModelConfig, ModelKind};
use crate::synthgen::{generate, SynthConfig};

fn thresholds(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ThresholdMap<f64> {
    let spec = GridSpec::with_size(h, w).unwrap();
    ThresholdMap::new(spec, (0..h * w).map(|_| rng.random_range(5.0..30.0)).collect(), 100).unwrap()
}

fn rain(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..40.0) })
}

fn scalar_of(f: impl for<'t> Fn(&'t Tape<f64>) -> Result<Var<'t, f64>, TrainError>) -> f64 {
    let tape = Tape::new();
    let v = f(&tape).unwrap();
    v.item().unwrap()
}

#[test]
fn unit_lambda_is_plain_log_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let thr = thresholds(4, 5, &mut rng);
        let y = rain(&[3, 1, 4, 5], &mut rng);
        let pred = Tensor::from_fn(&[3, 1, 4, 5], |_| rng.random_range(-1.0..5.0));
        let got = scalar_of(|t| extreme_weighted_mse(t, t.constant(pred.clone()), &y, &thr, 1.0));
        let oracle: f64 =
            y.data().iter().zip(pred.data()).map(|(y, p)| (y.ln_1p() - p).powi(2)).sum::<f64>() / y.numel() as f64;
        assert!((got - oracle).abs() <= 1e-12 * oracle.max(1.0), "{got} vs {oracle}");
    }
}

#[test]
fn single_extreme_pixel_costs_lambda_r_squared_over_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let thr = thresholds(4, 4, &mut rng);
    let mut y: Vec<f64> = thr.p95().iter().map(|q| q * 0.5).collect();
    y[9] = thr.p95()[9] + 3.0;
    let y = Tensor::new(vec![1, 1, 4, 4], y).unwrap();
    let mut pred = y.map(f64::ln_1p);
    pred.data_mut()[9] -= 0.75;
    let r = y.data()[9].ln_1p() - pred.data()[9];
    for lambda in [1.0, 5.0, 7.5] {
        let got = scalar_of(|t| extreme_weighted_mse(t, t.constant(pred.clone()), &y, &thr, lambda));
        assert_eq!(got, lambda * r * r / 16.0);
    }
    let exact = y.map(f64::ln_1p);
    assert_eq!(scalar_of(|t| extreme_weighted_mse(t, t.constant(exact.clone()), &y, &thr, 5.0)), 0.0);
}

#[test]
fn boundary_pixel_takes_the_extreme_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let thr = thresholds(2, 2, &mut rng);
    let y = Tensor::new(vec![1, 1, 2, 2], vec![thr.p95()[0], 0.0, 0.0, 0.0]).unwrap();
    let pred = Tensor::new(vec![1, 1, 2, 2], vec![y.data()[0].ln_1p() - 1.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(scalar_of(|t| extreme_weighted_mse(t, t.constant(pred.clone()), &y, &thr, 5.0)), 5.0 / 4.0);
    assert_eq!(exceedance_labels(&y, &thr), vec![true, false, false, false]);
}

#[test]
fn loss_rejects_bad_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let thr = thresholds(4, 4, &mut rng);
    let y = rain(&[1, 1, 4, 4], &mut rng);
    let tape = Tape::new();
    let wrong = tape.constant(Tensor::zeros(&[1, 1, 4, 3]));
    assert!(matches!(extreme_weighted_mse(&tape, wrong, &y, &thr, 5.0), Err(TrainError::Shape(_))));
    assert!(matches!(exceedance_bce(&tape, wrong, &y, &thr), Err(TrainError::Shape(_))));
    let nan = tape.constant(Tensor::full(&[1, 1, 4, 4], f64::NAN));
    assert!(matches!(extreme_weighted_mse(&tape, nan, &y, &thr, 5.0), Err(TrainError::NonFinitePrediction)));
    let other = thresholds(2, 8, &mut rng);
    let pred = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    assert!(matches!(extreme_weighted_mse(&tape, pred, &y, &other, 5.0), Err(TrainError::Shape(_))));
}

#[test]
fn bce_reference_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let thr = thresholds(4, 4, &mut rng);
    let y = rain(&[2, 1, 4, 4], &mut rng);
    let labels = exceedance_labels(&y, &thr);

    let half = Tensor::full(&[2, 1, 4, 4], 0.5);
    let got = scalar_of(|t| exceedance_bce(t, t.constant(half.clone()), &y, &thr));
    assert!((got - std::f64::consts::LN_2).abs() < 1e-15);

    let perfect = Tensor::new(vec![2, 1, 4, 4], labels.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect()).unwrap();
    let got = scalar_of(|t| exceedance_bce(t, t.constant(perfect.clone()), &y, &thr));
    assert!(got <= 1e-6 * -(1e-7f64).ln());

    let prob = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.0..1.0));
    let got = scalar_of(|t| exceedance_bce(t, t.constant(prob.clone()), &y, &thr));
    let mut oracle = 0.0;
    for (&p, &e) in prob.data().iter().zip(&labels) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        oracle -= if e { p.ln() } else { (1.0 - p).ln() };
    }
    oracle /= 32.0;
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
}

#[test]
fn total_loss_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let thr = thresholds(4, 4, &mut rng);
    let y = rain(&[2, 1, 4, 4], &mut rng);
    let li = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.0..4.0));
    let pr = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.0..1.0));
    let run = |alpha: f64| {
        let cfg = LossConfig { bce_weight: alpha, ..LossConfig::default() };
        let tape = Tape::new();
        let out = Outputs { log_intensity: tape.constant(li.clone()), exceed_prob: tape.constant(pr.clone()) };
        let parts = total_loss(&tape, &out, &y, &thr, &cfg).unwrap();
        (parts.total.item().unwrap(), parts.mse.item().unwrap(), parts.bce.item().unwrap())
    };
    let (total, mse, _) = run(0.0);
    assert_eq!(total, mse);
    let (total, mse, bce) = run(1.0);
    assert_eq!(total, mse + bce);

    let perfect_li = y.map(f64::ln_1p);
    let labels = exceedance_labels(&y, &thr);
    let perfect_pr =
        Tensor::new(vec![2, 1, 4, 4], labels.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect()).unwrap();
    let tape = Tape::new();
    let out = Outputs { log_intensity: tape.constant(perfect_li), exceed_prob: tape.constant(perfect_pr) };
    let parts = total_loss(&tape, &out, &y, &thr, &LossConfig::default()).unwrap();
    assert!(parts.total.item().unwrap() < 1e-6);
}

#[test]
fn loss_is_invariant_under_pixel_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let thr = thresholds(1, 64, &mut rng);
    let y = rain(&[1, 1, 1, 64], &mut rng);
    let li = Tensor::from_fn(&[1, 1, 1, 64], |_| rng.random_range(0.0..4.0));
    let pr = Tensor::from_fn(&[1, 1, 1, 64], |_| rng.random_range(0.0..1.0));
    let perm = epoch_order(64, 99);
    let permute = |t: &[f64]| perm.iter().map(|&i| t[i]).collect::<Vec<f64>>();
    let thr2 = ThresholdMap::new(*thr.spec(), permute(thr.p95()), 100).unwrap();
    let shape = vec![1, 1, 1, 64];
    let y2 = Tensor::new(shape.clone(), permute(y.data())).unwrap();
    let li2 = Tensor::new(shape.clone(), permute(li.data())).unwrap();
    let pr2 = Tensor::new(shape, permute(pr.data())).unwrap();
    let eval = |li: &Tensor<f64>, pr: &Tensor<f64>, y: &Tensor<f64>, thr: &ThresholdMap<f64>| {
        let tape = Tape::new();
        let out = Outputs { log_intensity: tape.constant(li.clone()), exceed_prob: tape.constant(pr.clone()) };
        let v = total_loss(&tape, &out, y, thr, &LossConfig::default()).unwrap().total.item().unwrap();
        v
    };
    let a = eval(&li, &pr, &y, &thr);
    let b = eval(&li2, &pr2, &y2, &thr2);
    assert!((a - b).abs() <= 1e-12 * a, "{a} vs {b}");
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let thr = thresholds(4, 4, &mut rng);
    let y = rain(&[2, 1, 4, 4], &mut rng);
    let point = vec![
        Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.0..4.0)),
        Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.05..0.95)),
    ];
    let cfg = LossConfig::default();
    let err = grad_check::<f64, TrainError, _>(
        |tape, v| {
            let out = Outputs { log_intensity: v[0], exceed_prob: v[1] };
            Ok(total_loss(tape, &out, &y, &thr, &cfg)?.total)
        },
        &point,
    )
    .unwrap();
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut p: Tensor<f64> = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let g = Tensor::new(vec![3], vec![0.3, -4.0, 0.0]).unwrap();
    let mut adam = Adam::new(0.01);
    adam.step(&mut [&mut p], &[g]).unwrap();
    assert!((p.data()[0] - 0.99).abs() < 1e-9);
    assert!((p.data()[1] + 1.99).abs() < 1e-9);
    assert_eq!(p.data()[2], 0.5);
    assert_eq!(adam.steps_taken(), 1);
}

#[test]
fn adam_matches_a_scalar_oracle() {
    // Hand-rolled recurrence on f(w) = (w − 3)².
    let mut w = Tensor::scalar(0.0);
    let mut adam = Adam::new(0.1);
    let (mut ow, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=25 {
        let g = 2.0 * (w.data()[0] - 3.0);
        adam.step(&mut [&mut w], &[Tensor::scalar(g)]).unwrap();
        let og = 2.0 * (ow - 3.0);
        m = 0.9 * m + 0.1 * og;
        v = 0.999 * v + 0.001 * og * og;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        ow -= 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((w.data()[0] - ow).abs() < 1e-12);
    }
    assert!((ow - 3.0).abs() < 1.0);
}

#[test]
fn config_validation() {
    assert!(LossConfig::default().validate().is_ok());
    for bad in [
        LossConfig { lambda_extreme: 0.5, ..LossConfig::default() },
        LossConfig { bce_weight: -1.0, ..LossConfig::default() },
        LossConfig { learning_rate: f64::NAN, ..LossConfig::default() },
        LossConfig { epochs: 0, ..LossConfig::default() },
        LossConfig { batch_size: 0, ..LossConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
    }
}

struct Setup {
    model: Model<f64>,
    train: WindowedSet<f64>,
    thr: ThresholdMap<f64>,
}

fn setup(kind: ModelKind, size: usize, days: usize) -> Setup {
    let spec = GridSpec::with_size(size, size).unwrap();
    let set = generate::<f64>(&SynthConfig { spec, n_days: days, seed: 42, ..SynthConfig::default() }).unwrap();
    let thr = compute_threshold_map(set.targets()).unwrap();
    let stats = channel_stats(set.predictors());
    let cfg =
        ModelConfig { history_t: 2, latent_channels: 4, hidden_channels: 6, rk4_steps: 2, ..ModelConfig::default() };
    let train = WindowedSet::from_samples(&set, &stats, cfg.history_t, cfg.lead_tau).unwrap();
    let model = Model::new(kind, cfg, spec).unwrap();
    Setup { model, train, thr }
}

#[test]
fn zero_learning_rate_keeps_parameters_and_loss() {
    let mut s = setup(ModelKind::PgLode, 16, 40);
    let before = s.model.clone();
    let cfg = LossConfig { learning_rate: 0.0, epochs: 3, batch_size: 8, ..LossConfig::default() };
    let report = fit(&mut s.model, &s.train, &s.thr, &cfg, &[]).unwrap();
    assert_eq!(s.model, before);
    let losses = report.total_losses();
    assert_eq!(losses.len(), 3);
    assert!(losses.iter().all(|&l| l == losses[0] && l.is_finite()));
}

#[test]
fn training_is_deterministic() {
    for kind in ModelKind::ALL {
        let cfg = LossConfig { epochs: 2, batch_size: 8, ..LossConfig::default() };
        let mut a = setup(kind, 16, 40);
        let mut b = setup(kind, 16, 40);
        let ra = fit(&mut a.model, &a.train, &a.thr, &cfg, &[]).unwrap();
        let rb = fit(&mut b.model, &b.train, &b.thr, &cfg, &[]).unwrap();
        assert_eq!(ra.to_csv(), rb.to_csv());
        assert_eq!(a.model, b.model);
    }
}

#[test]
fn frozen_groups_stay_put() {
    let mut s = setup(ModelKind::PgLode, 16, 40);
    let before = s.model.clone();
    let cfg = LossConfig { epochs: 1, batch_size: 8, ..LossConfig::default() };
    fit(&mut s.model, &s.train, &s.thr, &cfg, &["beta", "gate.w"]).unwrap();
    assert_eq!(s.model.params().get("beta"), before.params().get("beta"));
    assert_eq!(s.model.params().get("gate.w"), before.params().get("gate.w"));
    assert_ne!(s.model.params().get("gate.b"), before.params().get("gate.b"));
}

#[test]
fn tiny_step_does_not_increase_the_batch_loss() {
    let s = setup(ModelKind::PgLode, 16, 40);
    let batch: Vec<usize> = (0..8).collect();
    let (x, y) = (s.train.input_batch(&batch), s.train.target_batch(&batch));
    let cfg = LossConfig::default();
    let loss_and_grads = |model: &Model<f64>| {
        let tape = Tape::new();
        let p = model.params().bind(&tape, &[]);
        let out = model.forward(&tape, &p, tape.constant(x.clone())).unwrap();
        let loss = total_loss(&tape, &out, &y, &s.thr, &cfg).unwrap().total;
        let grads = tape.backward(loss).unwrap();
        let g: Vec<Tensor<f64>> = p.iter().map(|(_, v)| grads.get_or_zeros(v)).collect();
        (loss.item().unwrap(), g)
    };
    let mut model = s.model.clone();
    let (before, grads) = loss_and_grads(&model);
    let mut adam = Adam::new(1e-6);
    let mut params: Vec<&mut Tensor<f64>> = model.params_mut().iter_mut().map(|(_, t)| t).collect();
    adam.step(&mut params, &grads).unwrap();
    let (after, _) = loss_and_grads(&model);
    assert!(after <= before, "{after} > {before}");
    assert!(after < before);
}

#[test]
fn training_reduces_the_loss() {
    let mut s = setup(ModelKind::ConvLstm, 16, 40);
    let (mean_log, rate) = climatology(&s.train, &s.thr);
    s.model.set_output_biases(mean_log, rate);
    let cfg = LossConfig { epochs: 8, batch_size: 8, learning_rate: 3e-3, ..LossConfig::default() };
    let report = fit(&mut s.model, &s.train, &s.thr, &cfg, &[]).unwrap();
    let l = report.total_losses();
    assert!(l.last().unwrap() < &l[0], "{l:?}");
    assert!(report.wall_seconds > 0.0);
}

#[test]
fn one_epoch_on_eight_days_of_32x32_is_quick() {
    let spec = GridSpec::with_size(32, 32).unwrap();
    let full = generate::<f64>(&SynthConfig { spec, n_days: 40, ..SynthConfig::default() }).unwrap();
    let (predictors, targets) = (&full.predictors()[..8], &full.targets()[..8]);
    let thr = compute_threshold_map(full.targets()).unwrap();
    let stats = channel_stats(predictors);
    let stacks = normalize_predictors(predictors, &stats).unwrap();
    for kind in ModelKind::ALL {
        let mut model = Model::new(kind, ModelConfig::default(), spec).unwrap();
        let train = WindowedSet::new(stacks.clone(), targets.to_vec(), 3, 1).unwrap();
        let cfg = LossConfig { epochs: 1, ..LossConfig::default() };
        let report = fit(&mut model, &train, &thr, &cfg, &[]).unwrap();
        assert!(report.wall_seconds < 60.0, "{kind}: {}s", report.wall_seconds);
    }
}

#[test]
fn divergence_names_epoch_and_batch() {
    let mut s = setup(ModelKind::PgLode, 16, 40);
    s.model.params_mut().get_mut("head_int.b").unwrap().data_mut()[0] = f64::INFINITY;
    let cfg = LossConfig { epochs: 2, batch_size: 8, ..LossConfig::default() };
    let err = fit(&mut s.model, &s.train, &s.thr, &cfg, &[]).unwrap_err();
    assert_eq!(err, TrainError::Diverged { epoch: 1, batch: 0 });
    assert!(err.is_numerical());
}

#[test]
fn fit_checks_its_inputs() {
    let mut s = setup(ModelKind::PgLode, 16, 40);
    let other = setup(ModelKind::PgLode, 8, 40);
    let cfg = LossConfig { epochs: 1, ..LossConfig::default() };
    assert!(matches!(fit(&mut s.model, &other.train, &s.thr, &cfg, &[]), Err(TrainError::Shape(_))));
    let bad = LossConfig { lambda_extreme: 0.0, ..cfg };
    assert!(matches!(fit(&mut s.model, &s.train, &s.thr, &bad, &[]), Err(TrainError::InvalidConfig(_))));
}

#[test]
fn report_csv_layout() {
    let report = TrainReport {
        epochs: vec![
            EpochLoss { epoch: 1, total: 1.5, mse: 1.0, bce: 0.5 },
            EpochLoss { epoch: 2, total: 0.75, mse: 0.5, bce: 0.25 },
        ],
        checkpoint: None,
        wall_seconds: 3.0,
    };
    assert_eq!(report.to_csv(), "epoch,total,mse,bce\n1,1.5,1,0.5\n2,0.75,0.5,0.25\n");
}

#[test]
fn climatology_of_targets() {
    let s = setup(ModelKind::PgLode, 8, 40);
    let (mean_log, rate) = climatology(&s.train, &s.thr);
    let mut sum = 0.0;
    let mut hits = 0;
    let mut n = 0;
    for i in 0..s.train.len() {
        for (y, q) in s.train.target(i).values().iter().zip(s.thr.p95()) {
            sum += y.ln_1p();
            hits += (y >= q) as usize;
            n += 1;
        }
    }
    assert!((mean_log - sum / n as f64).abs() < 1e-12);
    assert_eq!(rate, hits as f64 / n as f64);
}
