use approx::assert_abs_diff_eq;
use gracaps::dataset::LabeledImageSet;
use gracaps::model::margin_loss;
use gracaps::trainer::{
    evaluate, metrics_csv, perturb_capsule_sweep, reconstruction_loss, sweep_deltas, AdamConfig, Decoder,
    TrainConfig, TrainState,
};
use gracaps::{Aggregation, CapsNet, ConvSpec, Error, ModelConfig};
use gracaps_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        input_side: 7,
        input_channels: 1,
        conv: vec![
            ConvSpec { out_channels: 6, kernel: 3, stride: 1 },
            ConvSpec { out_channels: 8, kernel: 3, stride: 1 },
        ],
        heads: 2,
        grid_side: 3,
        capsule_dim_in: 4,
        capsule_dim_out: 4,
        classes: 3,
        sigma: 1.0,
        aggregation: Aggregation::GraphPool,
        routing_iterations: 3,
        normalize_adjacency: false,
        decoder_hidden: vec![16, 16],
    }
}

/// Class `c` lights a 2×2 block at one of three corners, plus noise.
fn blocks(n: usize, seed: u64) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners = [(0, 0), (0, 5), (5, 2)];
    let mut data = Vec::with_capacity(n * 49);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 3;
        let mut img = vec![0.0f32; 49];
        for v in img.iter_mut() {
            *v = rng.gen_range(0.0..0.2);
        }
        let (y0, x0) = corners[c];
        for y in y0..y0 + 2 {
            for x in x0..x0 + 2 {
                img[y * 7 + x] = 1.0;
            }
        }
        data.extend(img);
        labels.push(c);
    }
    LabeledImageSet::new("blocks", Tensor::new([n, 1, 7, 7], data).unwrap(), labels).unwrap()
}

fn fast(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        adam: AdamConfig { lr: 1e-2, decay: 1.0, ..AdamConfig::default() },
        max_shift: 0,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn learns_a_separable_toy_task() {
    let data = blocks(64, 1);
    let mut state = TrainState::init(tiny(), 7).unwrap();
    // 4 steps per epoch: 200 steps at most.
    state.train(&data, None, &fast(50), |_| {}).unwrap();
    let ev = evaluate(&state.model, None, &data, 32, 0.0).unwrap();
    assert_eq!(ev.accuracy, 1.0, "per class {:?}", ev.per_class);
    assert_eq!(state.adam.step, 200);
    assert_eq!(state.epoch, 50);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = blocks(32, 2);
    let mut state = TrainState::init(tiny(), 1).unwrap();
    let before = (state.model.clone(), state.decoder.clone());
    let cfg = TrainConfig { adam: AdamConfig { lr: 0.0, ..AdamConfig::default() }, ..fast(2) };
    state.train(&data, None, &cfg, |_| {}).unwrap();
    assert_eq!(state.model, before.0);
    assert_eq!(state.decoder, before.1);
    assert_eq!(state.adam.step, 4);
}

#[test]
fn same_seed_same_run() {
    let data = blocks(48, 3);
    let test = blocks(12, 4);
    let run = || {
        let mut state = TrainState::init(tiny(), 11).unwrap();
        let cfg = TrainConfig { max_shift: 1, ..fast(3) };
        state.train(&data, Some(&test), &cfg, |_| {}).unwrap();
        state
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.metrics.len(), 6);
}

#[test]
fn split_training_equals_one_run() {
    let data = blocks(32, 5);
    let mut whole = TrainState::init(tiny(), 2).unwrap();
    whole.train(&data, None, &fast(4), |_| {}).unwrap();
    let mut parts = TrainState::init(tiny(), 2).unwrap();
    parts.train(&data, None, &fast(2), |_| {}).unwrap();
    // Resume through a checkpoint round trip.
    let ck = gracaps::checkpoint::Checkpoint::decode(&parts.to_checkpoint().encode()).unwrap();
    let mut resumed = TrainState::from_checkpoint(&ck).unwrap();
    resumed.train(&data, None, &fast(2), |_| {}).unwrap();
    assert_eq!(resumed.model, whole.model);
    assert_eq!(resumed.adam, whole.adam);
}

#[test]
fn reconstruction_loss_is_weighted_mean_square() {
    let tape = Tape::<f64>::new();
    let recon = tape.constant(Tensor::full([2, 4], 0.5));
    let images = tape.constant(Tensor::zeros([2, 1, 2, 2]));
    let loss = reconstruction_loss(recon, images, 0.0005).unwrap().value().item().unwrap();
    assert_abs_diff_eq!(loss, 0.0005 * 0.25, epsilon = 1e-15);
}

#[test]
fn decoder_sees_only_the_target_capsule() {
    let cfg = tiny();
    let decoder = Decoder::<f64>::new(&cfg, 0);
    let tape = Tape::<f64>::new();
    let bound = decoder.bind(&tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let caps = Tensor::<f64>::new([2, 3, 4], (0..24).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
    let v = tape.param(caps);
    let out = decoder.reconstruct(&bound, v, &[1, 2]).unwrap();
    assert!(out.value().data().iter().all(|&p| p > 0.0 && p < 1.0));
    out.sum_all().backward().unwrap();
    let g = v.grad().unwrap();
    for (b, target) in [(0, 1), (1, 2)] {
        for c in 0..3 {
            let row: Vec<f64> = (0..4).map(|k| g.get(&[b, c, k]).unwrap()).collect();
            if c == target {
                assert!(row.iter().any(|&x| x != 0.0));
            } else {
                assert!(row.iter().all(|&x| x == 0.0), "class {c} leaked into example {b}");
            }
        }
    }
}

#[test]
fn capsule_sweep_has_eleven_frames_and_zero_offset_is_plain() {
    let deltas = sweep_deltas();
    assert_eq!(deltas.len(), 11);
    assert_abs_diff_eq!(deltas[0], -0.25, epsilon = 1e-12);
    assert_abs_diff_eq!(deltas[10], 0.25, epsilon = 1e-12);
    assert_eq!(deltas[5], 0.0);

    let cfg = tiny();
    let model = CapsNet::<f32>::new(cfg.clone(), 4).unwrap();
    let decoder = Decoder::<f32>::new(&cfg, 4);
    let image = blocks(1, 6).image(0).unwrap();
    let frames = perturb_capsule_sweep(&model, &decoder, &image, 2).unwrap();
    assert_eq!(frames.len(), 11);
    let inf = model.infer(&image.reshape([1, 1, 7, 7]).unwrap()).unwrap();
    let plain = decoder.decode(&inf.capsules, &inf.predictions()).unwrap().select(0).unwrap();
    assert_eq!(frames[5], plain);
    assert_ne!(frames[0], plain);
    assert!(perturb_capsule_sweep(&model, &decoder, &image, 4).is_err());
}

#[test]
fn evaluation_counts_and_rejects_empty_sets() {
    let data = blocks(9, 7);
    let model = CapsNet::<f32>::new(tiny(), 0).unwrap();
    let ev = evaluate(&model, None, &data, 4, 0.0).unwrap();
    assert_eq!(ev.n, 9);
    assert_eq!(ev.predictions, model.predict(data.images()).unwrap());
    assert_eq!(ev.correct, ev.predictions.iter().zip(data.labels()).filter(|(p, y)| p == y).count());

    // Margin loss part agrees with a direct batch computation.
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let v = model.forward(&bound, tape.constant(data.images().clone())).unwrap().capsules;
    let direct = margin_loss(v, data.labels()).unwrap().value().item().unwrap();
    assert_abs_diff_eq!(ev.loss, f64::from(direct), epsilon = 1e-6);

    let empty = data.take(0).unwrap();
    assert!(evaluate(&model, None, &empty, 4, 0.0).is_err());
}

#[test]
fn labels_beyond_the_class_count_are_rejected() {
    let mut cfg = tiny();
    cfg.classes = 2;
    let mut state = TrainState::init(cfg, 0).unwrap();
    let err = state.train(&blocks(6, 8), None, &fast(1), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Config { ref field, .. } if field == "classes"), "{err}");
}

#[test]
fn diverging_run_reports_the_step() {
    let data = blocks(16, 9);
    let mut state = TrainState::init(tiny(), 0).unwrap();
    for (_, t) in state.model.params_mut().iter_mut() {
        t.data_mut()[0] = f32::NAN;
    }
    let err = state.train(&data, None, &fast(1), |_| {}).unwrap_err();
    match err {
        Error::NonFinite { epoch, step, ref origin } => {
            assert_eq!((epoch, step), (0, 0));
            assert!(!origin.is_empty());
        }
        other => panic!("expected a non-finite error, got {other}"),
    }
}

#[test]
fn train_config_validation_names_the_field() {
    let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config { ref field, .. }) if field == "batch_size"));
    let bad = TrainConfig { adam: AdamConfig { beta1: 1.0, ..AdamConfig::default() }, ..TrainConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config { ref field, .. }) if field == "beta1"));
}
