//! Network building blocks, training loop contracts and evaluation.

use kgs_core::autodiff::Tape;
use kgs_core::network::model::gate_coefficients;
use kgs_core::network::{
    build_dataset, evaluate, graph_conv_fused, train_epoch, visual_gate, Ablation, Mode, Model, RunConfig,
};
use kgs_core::synth::{generate, SyntheticTaskSpec, TaskKind};
use kgs_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], range: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-range..range)).collect()).unwrap()
}

fn dataset(task: TaskKind, per_class: usize, seed: u64) -> Vec<(String, kgs_core::skeleton::SkeletonSequence)> {
    let spec = SyntheticTaskSpec {
        task,
        samples_per_class: per_class,
        noise_std: 0.01,
        seed,
        ..SyntheticTaskSpec::default()
    };
    generate(&spec).unwrap().into_iter().enumerate().map(|(i, s)| (format!("s{i}"), s)).collect()
}

#[test]
fn gate_lies_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let y = tape.constant(random(&mut rng, &[2, 4, 3, 5], 1.0));
    let f = tape.constant(random(&mut rng, &[2, 6, 3], 50.0));
    let w = tape.constant(random(&mut rng, &[6, 4], 5.0));
    let b = tape.constant(random(&mut rng, &[4], 5.0));
    let g = gate_coefficients(&mut tape, y, f, w, b).unwrap();
    assert!(tape.value(g).data().iter().all(|&x| (0.0..=1.0).contains(&x)));

    // with no residual the gated output lies between Y and 2Y
    let zero = tape.constant(Tensor::zeros(&[2, 4, 3, 5]));
    let out = visual_gate(&mut tape, y, f, w, b, zero).unwrap();
    for (&o, &x) in tape.value(out).data().iter().zip(tape.value(y).data()) {
        let (lo, hi) = if x >= 0.0 { (x, 2.0 * x) } else { (2.0 * x, x) };
        assert!(o >= lo - 1e-15 && o <= hi + 1e-15);
    }
}

#[test]
fn graph_conv_is_linear_in_its_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x1, x2) = (random(&mut rng, &[2, 3, 4, 5], 1.0), random(&mut rng, &[2, 3, 4, 5], 1.0));
    let adjacency: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[5, 5], 1.0)).collect();
    let weights: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[6, 3, 1], 1.0)).collect();
    let prior = random(&mut rng, &[5, 5], 1.0);
    let apply = |x: &Tensor| {
        let mut tape = Tape::new();
        let x = tape.constant(x.clone());
        let a: Vec<_> = adjacency.iter().map(|t| tape.constant(t.clone())).collect();
        let w: Vec<_> = weights.iter().map(|t| tape.constant(t.clone())).collect();
        let beta = tape.constant(Tensor::scalar(0.3));
        let p = tape.constant(prior.clone());
        let y = graph_conv_fused(&mut tape, x, &a, beta, Some(p), &w).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (1.7, -0.4);
    let mixed = Tensor::new(
        x1.shape().to_vec(),
        x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + b * q).collect(),
    )
    .unwrap();
    let (y1, y2, ym) = (apply(&x1), apply(&x2), apply(&mixed));
    assert_eq!(ym.shape(), &[2, 6, 4, 5]);
    for ((p, q), m) in y1.data().iter().zip(y2.data()).zip(ym.data()) {
        assert!((a * p + b * q - m).abs() < 1e-12);
    }
}

#[test]
fn forward_shapes_follow_the_config() {
    let run = RunConfig::default();
    let model = Model::new(run.model.clone()).unwrap();
    let samples = build_dataset(&dataset(TaskKind::SpeedDiscrimination, 2, 0), &model).unwrap();
    let batch: Vec<_> = samples.iter().collect();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, Mode::Eval).unwrap();
    assert_eq!(tape.shape(out.logits), &[4, 2]);
    assert_eq!(out.a_learn.len(), run.model.num_blocks);
    assert!(out.a_learn.iter().all(|subsets| subsets.len() == run.model.subsets));
}

#[test]
fn zero_learning_rate_epoch_leaves_parameters_unchanged() {
    let run = RunConfig::default();
    let mut model = Model::new(run.model.clone()).unwrap();
    let samples = build_dataset(&dataset(TaskKind::TrajectoryClasses, 4, 1), &model).unwrap();
    let before: Vec<Vec<f64>> = model.params.iter().map(|p| p.value.data().to_vec()).collect();
    // the warm-up starts at lr = 0
    let metrics = train_epoch(&samples, &mut model, 0, &run).unwrap();
    assert_eq!(metrics.lr, 0.0);
    let after: Vec<Vec<f64>> = model.params.iter().map(|p| p.value.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn loss_decreases_on_a_separable_toy_set() {
    let mut run = RunConfig::default();
    run.train.batch_size = 5;
    let mut model = Model::new(run.model.clone()).unwrap();
    let samples = build_dataset(&dataset(TaskKind::TrajectoryClasses, 10, 2), &model).unwrap();
    assert_eq!(samples.len(), 20);
    let losses: Vec<f64> = (0..10).map(|e| train_epoch(&samples, &mut model, e, &run).unwrap().loss_ce).collect();
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 2, "losses {losses:?}");
    assert!(losses[9] < losses[0], "losses {losses:?}");
}

#[test]
fn untrained_model_is_near_chance() {
    let run = RunConfig::default();
    let model = Model::new(run.model.clone()).unwrap();
    let samples = build_dataset(&dataset(TaskKind::TrajectoryClasses, 50, 3), &model).unwrap();
    let n = samples.len() as u64;
    let acc = evaluate(&model, &samples, 16).unwrap();
    let binom = Binomial::new(0.5, n).unwrap();
    let (lo, hi) = (binom.inverse_cdf(0.005), binom.inverse_cdf(0.995));
    let correct = (acc * n as f64).round() as u64;
    assert!((lo..=hi).contains(&correct), "{correct}/{n} outside [{lo}, {hi}]");
}

#[test]
fn ablation_switches() {
    let mut config = RunConfig::default().model;
    config.ablation = Ablation::parse("pt").unwrap();
    let model = Model::new(config.clone()).unwrap();
    for id in model.beta_ids() {
        let beta = model.params.get(id);
        assert_eq!(beta.value.item(), 0.0);
        assert!(!beta.trainable);
    }
    config.ablation = Ablation::parse("kgsm").unwrap();
    assert!(Model::new(config.clone()).unwrap().render_config().isotropic);

    // without the gate, the gate parameters receive no gradient
    config.ablation = Ablation::parse("vcg").unwrap();
    let mut model = Model::new(config).unwrap();
    let samples = build_dataset(&dataset(TaskKind::SpeedDiscrimination, 2, 4), &model).unwrap();
    let batch: Vec<_> = samples.iter().collect();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, Mode::Train).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, &batch.iter().map(|s| s.label).collect::<Vec<_>>()).unwrap();
    model.params.zero_grad();
    tape.backward(loss, &mut model.params).unwrap();
    for p in model.params.iter().filter(|p| p.name.contains(".gate.")) {
        assert!(p.grad.data().iter().all(|&g| g == 0.0), "{} has a gradient", p.name);
    }
    assert!(Ablation::parse("everything").is_err());
}
