use rand::Rng;

use super::*;
use crate::config::ScenarioConfig;
use crate::dataset::{
    build_labels, unpack_cascaded, unpack_direct, Dataset, GenParams, NormStats, Sample, SampleKind,
    SampleMeta, Tensor3,
};
use crate::rng::seeded;

fn toy_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Input,
        LayerSpec::Conv { filters: 2, height: 3, width: 3, relu: true },
        LayerSpec::FullyConnected { units: 3, relu: true },
        LayerSpec::Dropout { rate: 0.3 },
        LayerSpec::RegressionOutput,
    ]
}

fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn batch_loss(net: &Network<f64>, x: &[f64], batch: usize, labels: &[Vec<f64>]) -> f64 {
    let fwd = net.forward_batch(x, batch, Mode::Train, &mut seeded(77)).unwrap();
    let per: f64 = (0..batch)
        .map(|b| loss(&fwd.prediction(b), &labels[b]).unwrap())
        .sum();
    per / batch as f64
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = seeded(3);
    let net = Network::<f64>::new(&toy_specs(), 2, 2, 2, 11).unwrap();
    let batch = 3;
    let inputs: Vec<Vec<f64>> = (0..batch).map(|_| random_vec(12, &mut rng)).collect();
    let labels: Vec<Vec<f64>> = (0..batch).map(|_| random_vec(2, &mut rng)).collect();
    let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
    let x = net.pack_batch(&refs).unwrap();
    let lrefs: Vec<&[f64]> = labels.iter().map(|v| v.as_slice()).collect();

    let fwd = net.forward_batch(&x, batch, Mode::Train, &mut seeded(77)).unwrap();
    let (l0, grads) = net.backward(&fwd, &lrefs).unwrap();
    assert!((l0 - batch_loss(&net, &x, batch, &labels)).abs() < 1e-12);
    let analytic = grads.flat();
    assert_eq!(analytic.len(), net.param_count());

    let h = 1e-4;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let p = probe.param(i).unwrap();
        probe.set_param(i, p + h).unwrap();
        let up = batch_loss(&probe, &x, batch, &labels);
        probe.set_param(i, p - h).unwrap();
        let down = batch_loss(&probe, &x, batch, &labels);
        probe.set_param(i, p).unwrap();
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst}");
}

#[test]
fn zero_loss_gives_zero_gradients() {
    let net = Network::<f64>::new(&toy_specs(), 2, 2, 2, 5).unwrap();
    let input = random_vec(12, &mut seeded(9));
    let x = net.pack_batch(&[&input]).unwrap();
    let fwd = net.forward_batch(&x, 1, Mode::Infer, &mut seeded(0)).unwrap();
    let target = fwd.prediction(0);
    let (l, g) = net.backward(&fwd, &[&target]).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.flat().iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn output_gradient_is_linear_in_residual() {
    let net = Network::<f64>::new(&toy_specs(), 2, 2, 2, 5).unwrap();
    let input = random_vec(12, &mut seeded(10));
    let x = net.pack_batch(&[&input]).unwrap();
    let fwd = net.forward_batch(&x, 1, Mode::Infer, &mut seeded(0)).unwrap();
    let p = fwd.prediction(0);
    let z1: Vec<f64> = p.iter().map(|v| v - 0.3).collect();
    let z2: Vec<f64> = p.iter().map(|v| v - 0.6).collect();
    let (_, g1) = net.backward(&fwd, &[&z1]).unwrap();
    let (_, g2) = net.backward(&fwd, &[&z2]).unwrap();
    let (w1, b1) = g1.output_layer().unwrap();
    let (w2, b2) = g2.output_layer().unwrap();
    for (a, b) in w1.iter().chain(b1).zip(w2.iter().chain(b2)) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let specs = [
        LayerSpec::Input,
        LayerSpec::FullyConnected { units: 4, relu: false },
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::RegressionOutput,
    ];
    let net = Network::<f64>::new(&specs, 1, 1, 1, 4).unwrap();
    // Identity-like tail so the output is the mean of the dropped activations.
    let mut params = net.params_flat();
    let n_first = 4 * 3 + 4;
    for (i, p) in params[n_first..].iter_mut().enumerate() {
        *p = if i < 4 { 0.25 } else { 0.0 };
    }
    let mut net = net;
    net.load_params(&params).unwrap();
    let input = [0.7, -0.2, 0.4];
    let infer = net.forward(&input, Mode::Infer, &mut seeded(0)).unwrap()[0];
    let mut rng = seeded(123);
    let draws = 10_000;
    let mean: f64 = (0..draws)
        .map(|_| net.forward(&input, Mode::Train, &mut rng).unwrap()[0])
        .sum::<f64>()
        / draws as f64;
    assert!(infer.abs() > 1e-3);
    assert!(((mean - infer) / infer).abs() < 0.02, "mean {mean} vs {infer}");
}

fn toy_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    let config = ScenarioConfig::desk();
    let gen = GenParams {
        u: 1,
        v: 1,
        label_snrs_db: vec![f64::INFINITY],
        train_snrs_db: vec![10.0],
        cascaded_input: Default::default(),
        input_shape: Default::default(),
        eps_on: 0.0,
        eps_off: 0.0,
        train_fraction: 0.5,
    };
    let meta = SampleMeta { user: 0, u: 0, v: 0, snr_db: 10.0, label_snr_db: f64::INFINITY };
    let samples: Vec<Sample> = (0..n)
        .map(|_| {
            let t = Tensor3 { rows: 2, cols: 2, data: random_vec(12, &mut rng) };
            let z = random_vec(4, &mut rng);
            Sample::new(&t, &z, SampleKind::Direct, meta)
        })
        .collect();
    let norm = NormStats::from_samples(&samples);
    Dataset { kind: SampleKind::Direct, samples, config, gen, norm }
}

fn small_specs(dropout: bool) -> Vec<LayerSpec> {
    let mut s = vec![
        LayerSpec::Input,
        LayerSpec::Conv { filters: 8, height: 3, width: 3, relu: true },
        LayerSpec::FullyConnected { units: 32, relu: true },
    ];
    if dropout {
        s.push(LayerSpec::Dropout { rate: 0.5 });
    }
    s.push(LayerSpec::RegressionOutput);
    s
}

#[test]
fn memorizes_eight_samples() {
    let ds = toy_dataset(8, 1);
    let net = Network::<f64>::new(&small_specs(false), 2, 2, 4, 2).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        batch_size: 8,
        max_epochs: 2000,
        patience: 2000,
        ..TrainConfig::default()
    };
    let initial = validation_metrics(&net, &ds, &ds.norm).unwrap().0;
    let (net, log) = train(net, &ds, &ds, &cfg).unwrap();
    let fin = validation_metrics(&net, &ds, &ds.norm).unwrap().0;
    assert!(fin < 0.01 * initial, "final {fin} vs initial {initial}");
    assert_eq!(log.best().unwrap().val_mse, fin);
}

#[test]
fn one_epoch_and_determinism() {
    let ds = toy_dataset(40, 2);
    let (tr, va) = crate::dataset::split(&ds, 0.7, 3).unwrap();
    let cfg = TrainConfig { learning_rate: 0.01, batch_size: 8, max_epochs: 1, seed: 4, ..TrainConfig::default() };
    let run = || train(Network::<f32>::new(&small_specs(true), 2, 2, 4, 4).unwrap(), &tr, &va, &cfg).unwrap();
    let (a, log) = run();
    let (b, _) = run();
    assert_eq!(log.epochs.len(), 1);
    assert_eq!(a.params_flat(), b.params_flat());
}

#[test]
fn early_stop_restores_best_snapshot() {
    let ds = toy_dataset(40, 5);
    let (tr, va) = crate::dataset::split(&ds, 0.5, 1).unwrap();
    // A large step makes validation worsen quickly.
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 4, max_epochs: 200, patience: 3, ..TrainConfig::default() };
    let (net, log) = train(Network::<f64>::new(&small_specs(false), 2, 2, 4, 1).unwrap(), &tr, &va, &cfg).unwrap();
    let best = log.best().unwrap();
    let (mse, _) = validation_metrics(&net, &va, &tr.norm).unwrap();
    assert!((mse - best.val_mse).abs() < 1e-12);
    if log.stopped_early {
        assert_eq!(log.epochs.len(), log.best_epoch + 3);
    }
}

#[test]
fn empty_sets_are_rejected() {
    let ds = toy_dataset(4, 1);
    let mut empty = ds.clone();
    empty.samples.clear();
    let net = Network::<f64>::new(&small_specs(false), 2, 2, 4, 0).unwrap();
    assert!(matches!(train(net.clone(), &empty, &ds, &TrainConfig::default()), Err(crate::Error::Empty(_))));
    assert!(matches!(train(net, &ds, &empty, &TrainConfig::default()), Err(crate::Error::Empty(_))));
}

#[test]
fn divergence_aborts() {
    let ds = toy_dataset(8, 1);
    let linear = [LayerSpec::Input, LayerSpec::FullyConnected { units: 4, relu: false }, LayerSpec::RegressionOutput];
    let net = Network::<f64>::new(&linear, 2, 2, 4, 2).unwrap();
    let cfg = TrainConfig { learning_rate: 50.0, batch_size: 8, max_epochs: 500, patience: 500, ..TrainConfig::default() };
    assert!(matches!(train(net, &ds, &ds, &cfg), Err(crate::Error::Numerical(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ds = toy_dataset(20, 7);
    let mut ds = ds;
    ds.config.m = 2;
    let cfg = TrainConfig { learning_rate: 0.01, batch_size: 4, max_epochs: 2, ..TrainConfig::default() };
    let (trained, log) = fit(&ds, &small_specs(true), &cfg, |_| {}).unwrap();
    let ck = Checkpoint { net: trained, training: cfg, log };
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let mut bad = bytes.clone();
    bad.truncate(bytes.len() - 3);
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(crate::Error::Format { .. })));
    bad = bytes;
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(crate::Error::Format { offset: 0, .. })));
}

#[test]
fn label_unpacking_inverts_packing() {
    let config = ScenarioConfig::desk();
    let ch = crate::channel::draw_channels(&config, &mut seeded(8)).unwrap();
    let (zd, zc) = build_labels(&ch.users[0]);
    assert_eq!(unpack_direct(&zd).unwrap(), ch.users[0].h_direct);
    let g = unpack_cascaded(&zc, config.m, config.l).unwrap();
    assert_eq!(g, ch.users[0].g_cascaded);
    assert_eq!((g.nrows(), g.ncols()), (16, 8));
}

#[test]
fn mismatched_network_is_a_config_error() {
    let ds = toy_dataset(4, 1);
    let net = Network::<f32>::new(&small_specs(false), 2, 2, 4, 0).unwrap();
    let layout = InputLayout::of_dataset(&ds);
    // desk M = 16 needs 32 outputs for the direct channel
    assert!(matches!(TrainedNet::new(net, ds.norm, layout), Err(crate::Error::Config(_))));
}

#[test]
fn preset_has_nine_layers() {
    let p = channelnet_preset();
    assert_eq!(p.len(), 9);
    let net = Network::<f32>::new(&p, 4, 4, 32, 0).unwrap();
    assert_eq!(net.widths(), vec![256, 256, 256, 1024, 2048, 32]);
}
