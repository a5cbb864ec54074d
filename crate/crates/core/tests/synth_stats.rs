//! Statistical properties of the synthetic tasks.

use kgs_core::synth::{generate, generate_speed_task, split_dataset, SyntheticTaskSpec, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Angle bin of joint 0 at one uniformly chosen frame of each sample, per class.
fn angle_histograms(per_class: usize, bins: usize) -> [Vec<f64>; 2] {
    let spec = SyntheticTaskSpec {
        task: TaskKind::SpeedDiscrimination,
        samples_per_class: per_class,
        seed: 21,
        ..SyntheticTaskSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hist = [vec![0.0; bins], vec![0.0; bins]];
    for seq in generate_speed_task(&spec).unwrap() {
        let t = rng.gen_range(0..seq.frames());
        let p = seq.joint(t, 0);
        let frac = (p[1].atan2(p[0]) + std::f64::consts::PI) / std::f64::consts::TAU;
        let bin = ((frac * bins as f64) as usize).min(bins - 1);
        hist[seq.label.unwrap()][bin] += 1.0;
    }
    hist
}

#[test]
fn speed_classes_share_the_position_marginal() {
    let bins = 8;
    let [a, b] = angle_histograms(400, bins);
    let (na, nb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let mut stat = 0.0;
    for k in 0..bins {
        let pooled = (a[k] + b[k]) / (na + nb);
        for (obs, n) in [(a[k], na), (b[k], nb)] {
            let expected = pooled * n;
            stat += (obs - expected).powi(2) / expected;
        }
    }
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
    assert!(p > 1e-3, "homogeneity rejected: χ² = {stat}, p = {p}");
}

#[test]
fn every_task_is_balanced_and_labeled() {
    for task in [TaskKind::SpeedDiscrimination, TaskKind::CorrelationTopology, TaskKind::TrajectoryClasses] {
        let spec = SyntheticTaskSpec { task, samples_per_class: 7, noise_std: 0.02, seed: 4, ..SyntheticTaskSpec::default() };
        let seqs = generate(&spec).unwrap();
        assert_eq!(seqs.len(), 14);
        for class in 0..2 {
            assert_eq!(seqs.iter().filter(|s| s.label == Some(class)).count(), 7);
        }
        assert!(seqs.iter().all(|s| s.frames() == spec.frames && s.joints() == spec.joints));
        assert!(seqs.iter().all(|s| s.positions().iter().all(|x| x.is_finite())));
    }
}

#[test]
fn split_is_stratified_and_disjoint() {
    let items: Vec<(usize, usize)> = (0..30).map(|i| (i, i % 3)).collect();
    let (train, test) = split_dataset(&items, |x| x.1, 0.7, 9).unwrap();
    assert_eq!(train.len() + test.len(), 30);
    for class in 0..3 {
        assert_eq!(train.iter().filter(|x| x.1 == class).count(), 7);
    }
    assert!(train.iter().all(|x| !test.contains(x)));
}
