//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kgs_core::cli::{self, Cli};
use kgs_core::network::{build_dataset, evaluate, lambda, lr_schedule, train_epoch, Ablation, LossConfig, Model, RunConfig};
use kgs_core::skeleton::{prepare, NormalizationParams, SkeletonSequence};
use kgs_core::splat::{build_covariance, build_primitives, render_sequence, RenderConfig, Sym2};
use kgs_core::synth::{generate, split_dataset, write_dataset, SyntheticTaskSpec, TaskKind};
use kgs_core::topology::{bhattacharyya_distance, build_prior_adjacency};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

// 1. covariance algebra

fn random_velocity(rng: &mut ChaCha8Rng) -> [f64; 2] {
    if rng.gen_bool(0.02) {
        return [0.0, 0.0];
    }
    // normalized frames lie in a unit ball, so per-frame speed is at most 2
    let speed = 10f64.powf(rng.gen_range(-6.0..2f64.log10()));
    let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    [speed * angle.cos(), speed * angle.sin()]
}

fn covariance_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let config = RenderConfig::default();
    let velocities: Vec<[f64; 2]> = (0..10_000).map(|_| random_velocity(&mut rng)).collect();
    let start = Instant::now();
    let prims: Vec<_> = velocities.iter().map(|&v| build_covariance(v, &config)).collect();
    let elapsed = start.elapsed();
    let s_base = config.log_scale.exp();
    let mut worst_identity: f64 = 0.0;
    let mut worst_eigen: f64 = 0.0;
    for (v, prim) in velocities.iter().zip(&prims) {
        let s_x = s_base * (1.0 + config.alpha * v[0].hypot(v[1]).tanh());
        let (sx2, sy2) = (s_x * s_x, s_base * s_base);
        let sigma = prim.sigma;
        let det_err = (sigma.det() - sx2 * sy2).abs() / (sx2 * sy2);
        let tr_err = (sigma.trace() - (sx2 + sy2)).abs() / (sx2 + sy2);
        worst_identity = worst_identity.max(det_err).max(tr_err);
        let eig = Matrix2::new(sigma.xx, sigma.xy, sigma.xy, sigma.yy).symmetric_eigen();
        let (lo, hi) = {
            let e = eig.eigenvalues;
            (e[0].min(e[1]), e[0].max(e[1]))
        };
        worst_eigen = worst_eigen.max((hi - sx2).abs().max((lo - sy2).abs()));
        check(lo >= 0.0 && sigma.xx >= 0.0 && sigma.yy >= 0.0, || format!("not PSD for v = {v:?}: {sigma:?}"))?;
        let aspect = (hi / lo).sqrt();
        check(aspect < 1.0 + config.alpha, || format!("aspect {aspect} ≥ 1+α for v = {v:?}"))?;
    }
    check(worst_identity <= 1e-12, || format!("det/trace relative error {worst_identity:.3e}"))?;
    check(worst_eigen <= 1e-9, || format!("eigenvalue error {worst_eigen:.3e}"))?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("identities {worst_identity:.1e}, eigenvalues {worst_eigen:.1e}, {elapsed:.2?}"))
}

// 2. Bhattacharyya distance

fn random_spd(rng: &mut ChaCha8Rng) -> Sym2 {
    let (a, b, c) = (rng.gen_range(0.05..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.05..2.0));
    // L Lᵀ with L = [[a, 0], [b, c]]
    Sym2::new(a * a, a * b, b * b + c * c)
}

fn random_mu(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]
}

/// Sum of per-axis 1-D Bhattacharyya distances.
fn diagonal_oracle(mu_i: [f64; 2], var_i: [f64; 2], mu_j: [f64; 2], var_j: [f64; 2]) -> f64 {
    (0..2)
        .map(|k| {
            let s = var_i[k] + var_j[k];
            let d = mu_i[k] - mu_j[k];
            d * d / (4.0 * s) + 0.5 * (s / (2.0 * (var_i[k] * var_j[k]).sqrt())).ln()
        })
        .sum()
}

fn bhattacharyya_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pairs: Vec<_> = (0..10_000)
        .map(|_| (random_mu(&mut rng), random_spd(&mut rng), random_mu(&mut rng), random_spd(&mut rng)))
        .collect();
    let diag: Vec<_> = (0..10_000)
        .map(|_| {
            let var = |rng: &mut ChaCha8Rng| [rng.gen_range(0.01..3.0), rng.gen_range(0.01..3.0)];
            (random_mu(&mut rng), var(&mut rng), random_mu(&mut rng), var(&mut rng))
        })
        .collect();
    let start = Instant::now();
    let mut worst_sym: f64 = 0.0;
    for (mi, si, mj, sj) in &pairs {
        let dij = bhattacharyya_distance(*mi, si, *mj, sj).map_err(|e| e.to_string())?;
        let dji = bhattacharyya_distance(*mj, sj, *mi, si).map_err(|e| e.to_string())?;
        let dii = bhattacharyya_distance(*mi, si, *mi, si).map_err(|e| e.to_string())?;
        check(dij >= 0.0, || format!("negative distance {dij}"))?;
        check(dii == 0.0, || format!("D(i,i) = {dii}"))?;
        worst_sym = worst_sym.max((dij - dji).abs());
    }
    let mut worst_oracle: f64 = 0.0;
    for (mi, vi, mj, vj) in &diag {
        let d = bhattacharyya_distance(*mi, &Sym2::new(vi[0], 0.0, vi[1]), *mj, &Sym2::new(vj[0], 0.0, vj[1]))
            .map_err(|e| e.to_string())?;
        worst_oracle = worst_oracle.max((d - diagonal_oracle(*mi, *vi, *mj, *vj)).abs());
    }
    let elapsed = start.elapsed();
    check(worst_sym <= 1e-12, || format!("asymmetry {worst_sym:.3e}"))?;
    check(worst_oracle <= 1e-10, || format!("diagonal oracle error {worst_oracle:.3e}"))?;

    let eye = Sym2::identity();
    let examples = [
        (bhattacharyya_distance([0.3, -0.2], &eye, [0.3, -0.2], &eye), 0.0),
        (bhattacharyya_distance([0.0, 0.0], &eye, [2.0, 0.0], &eye), 0.5),
        (bhattacharyya_distance([0.0, 0.0], &eye, [0.0, 0.0], &eye.scaled(4.0)), 0.5 * (6.25f64 / 4.0).ln()),
    ];
    for (got, want) in examples {
        let got = got.map_err(|e| e.to_string())?;
        check((got - want).abs() <= 1e-9, || format!("worked example {got} vs {want}"))?;
    }
    let third = 0.5 * (6.25f64 / 4.0).ln();
    check((third - 0.223144).abs() < 5e-7, || format!("worked example {third} does not round to 0.223144"))?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("asymmetry {worst_sym:.1e}, oracle {worst_oracle:.1e}, {elapsed:.2?}"))
}

// 3. gradient check

fn gradient_suite() -> Outcome {
    let run = RunConfig::default();
    let m = &run.model;
    check(
        m.num_blocks == 4 && m.channels_per_stage == [8, 16, 32] && m.num_joints == 5 && m.num_classes == 2,
        || "default config is not the toy network".into(),
    )?;
    let start = Instant::now();
    let report = cli::gradcheck(&run, 0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    for g in &report.groups {
        check(g.max_rel_error < 1e-4, || format!("group {} max relative error {:.3e}", g.name, g.max_rel_error))?;
    }
    within(elapsed, Duration::from_secs(300))?;
    Ok(format!("{} groups, worst {:.1e}, {elapsed:.2?}", report.groups.len(), report.worst()))
}

// 4. schedules

fn schedule_suite() -> Outcome {
    let c = LossConfig::default();
    let points = [0usize, 1, 5, 9, 10, 39, 40, 59, 60, 100];
    for &t in &points {
        let want_lambda = 0.2 * (t as f64 / 5.0).min(1.0);
        let want_lr = if t < 10 {
            0.05 * t as f64 / 10.0
        } else if t < 40 {
            0.05
        } else if t < 60 {
            0.005
        } else {
            0.0005
        };
        check(lambda(t, &c) == want_lambda, || format!("λ({t}) = {} ≠ {want_lambda}", lambda(t, &c)))?;
        check(lr_schedule(t, &c) == want_lr, || format!("lr({t}) = {} ≠ {want_lr}", lr_schedule(t, &c)))?;
    }
    check(lambda(0, &c) == 0.0 && lambda(5, &c) == 0.2, || "λ anchors".into())?;
    Ok(format!("{} epochs exact", points.len()))
}

// 5, 6. training

type Labeled = Vec<(String, SkeletonSequence)>;

fn task_split(spec: &SyntheticTaskSpec, train_fraction: f64) -> Result<(Labeled, Labeled), String> {
    let seqs: Labeled = generate(spec)
        .map_err(|e| e.to_string())?
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("{}_{i}", spec.task.name()), s))
        .collect();
    let (train, test) = split_dataset(&seqs, |s| s.1.label.unwrap_or(0), train_fraction, spec.seed).map_err(|e| e.to_string())?;
    Ok((train, test))
}

/// Trains from scratch and returns Top-1 test accuracy.
fn fit(run: &RunConfig, train: &Labeled, test: &Labeled) -> Result<f64, String> {
    let mut model = Model::new(run.model.clone()).map_err(|e| e.to_string())?;
    let train_set = build_dataset(train, &model).map_err(|e| e.to_string())?;
    let test_set = build_dataset(test, &model).map_err(|e| e.to_string())?;
    for epoch in 0..run.train.epochs {
        train_epoch(&train_set, &mut model, epoch, run).map_err(|e| format!("epoch {epoch}: {e}"))?;
    }
    evaluate(&model, &test_set, run.train.batch_size).map_err(|e| e.to_string())
}

fn with_ablation(run: &RunConfig, ablation: &str) -> RunConfig {
    let mut run = run.clone();
    run.model.ablation = Ablation::parse(ablation).expect("known ablation");
    run
}

fn anisotropy_ablation() -> Outcome {
    let spec = SyntheticTaskSpec {
        task: TaskKind::SpeedDiscrimination,
        samples_per_class: 150,
        noise_std: 0.01,
        seed: 1,
        ..SyntheticTaskSpec::default()
    };
    let (train, test) = task_split(&spec, 2.0 / 3.0)?;
    check(train.len() == 200 && test.len() == 100, || format!("split {}/{}", train.len(), test.len()))?;
    let run = RunConfig::default();
    let start = Instant::now();
    let iso = fit(&with_ablation(&run, "kgsm"), &train, &test).map_err(|e| format!("isotropic run: {e}"))?;
    let full = fit(&run, &train, &test).map_err(|e| format!("full run (isotropic accuracy {iso:.3}): {e}"))?;
    let elapsed = start.elapsed();
    let summary = format!("full {full:.3}, isotropic {iso:.3}, {elapsed:.0?}");
    check(full - iso >= 0.20, || format!("margin below 20 points: {summary}"))?;
    check((0.35..=0.75).contains(&iso), || format!("isotropic outside [0.35, 0.75]: {summary}"))?;
    within(elapsed, Duration::from_secs(15 * 60))?;
    Ok(summary)
}

fn component_ablation() -> Outcome {
    let variants = ["none", "kgsm", "pt", "vcg"];
    let tasks = [TaskKind::SpeedDiscrimination, TaskKind::CorrelationTopology, TaskKind::TrajectoryClasses];
    let seeds = [0u64, 1, 2];
    let mut totals = [0.0; 4];
    let mut failures: Vec<String> = Vec::new();
    for &seed in &seeds {
        for &task in &tasks {
            let spec = SyntheticTaskSpec {
                task,
                samples_per_class: 20,
                noise_std: 0.01,
                seed,
                ..SyntheticTaskSpec::default()
            };
            let (train, test) = task_split(&spec, 2.0 / 3.0)?;
            for (total, variant) in totals.iter_mut().zip(variants) {
                let mut run = with_ablation(&RunConfig::default(), variant);
                run.train.epochs = 30;
                run.train.seed = seed;
                run.model.init_seed = seed;
                match fit(&run, &train, &test) {
                    Ok(acc) => *total += acc,
                    Err(e) => failures.push(format!("{variant}/{}/seed {seed}: {e}", task.name())),
                }
            }
        }
    }
    if !failures.is_empty() {
        return Err(format!("{} of 36 runs failed: {}", failures.len(), failures.join("; ")));
    }
    let n = (seeds.len() * tasks.len()) as f64;
    let means: Vec<f64> = totals.iter().map(|t| t / n).collect();
    let summary = format!(
        "full {:.3}, -kgsm {:.3}, -pt {:.3}, -vcg {:.3}",
        means[0], means[1], means[2], means[3]
    );
    check(means[1..].iter().all(|&m| means[0] >= m), || summary.clone())?;
    Ok(summary)
}

// 7. topology semantics

fn rigid_pair_fraction(noise_std: f64) -> Result<(usize, usize), String> {
    let spec = SyntheticTaskSpec {
        task: TaskKind::CorrelationTopology,
        samples_per_class: 100,
        noise_std,
        seed: 7,
        ..SyntheticTaskSpec::default()
    };
    let seqs = generate(&spec).map_err(|e| e.to_string())?;
    let mut wins = 0;
    for seq in &seqs {
        let c = seq.label.expect("labeled");
        let kin = prepare(seq, &NormalizationParams::default()).map_err(|e| e.to_string())?;
        let grids = build_primitives(&kin, &RenderConfig::for_channels(seq.channels())).map_err(|e| e.to_string())?;
        let prior = build_prior_adjacency(&grids).map_err(|e| e.to_string())?;
        if prior.get(0, 1 + c) > prior.get(0, 2 - c) {
            wins += 1;
        }
    }
    Ok((wins, seqs.len()))
}

fn topology_semantics() -> Outcome {
    let (clean, n_clean) = rigid_pair_fraction(0.0)?;
    let (noisy, n_noisy) = rigid_pair_fraction(0.02)?;
    let summary = format!("noise-free {clean}/{n_clean}, noise 0.02 {noisy}/{n_noisy}");
    check(clean == n_clean, || summary.clone())?;
    check(noisy as f64 >= 0.95 * n_noisy as f64, || summary.clone())?;
    Ok(summary)
}

// 8. rendering speed

fn render_speed() -> Outcome {
    let (frames, joints) = (64, 25);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut positions = Vec::with_capacity(frames * joints * 3);
    let base: Vec<f64> = (0..joints * 3).map(|_| rng.gen_range(-0.8..0.8)).collect();
    for t in 0..frames {
        for (k, b) in base.iter().enumerate() {
            positions.push(b + 0.3 * (0.2 * t as f64 + k as f64).sin());
        }
    }
    let seq = SkeletonSequence::new(frames, joints, 3, positions, None).map_err(|e| e.to_string())?;
    let kin = prepare(&seq, &NormalizationParams::default()).map_err(|e| e.to_string())?;
    let config = RenderConfig::default();
    check(config.views.len() == 3 && config.height == 32 && config.width == 32 && config.truncation_sigmas == 3.0, || {
        "default render config changed".into()
    })?;
    let mut times = Vec::new();
    for _ in 0..7 {
        let start = Instant::now();
        let (stack, _) = render_sequence(&kin, &config).map_err(|e| e.to_string())?;
        times.push(start.elapsed());
        check(stack.values.len() == 3 * frames * 32 * 32, || "unexpected heatmap size".into())?;
    }
    times.sort();
    let median = times[times.len() / 2];
    within(median, Duration::from_millis(50))?;
    Ok(format!("median {median:.2?} over {} runs", times.len()))
}

// 9. determinism

fn train_once(config: &Path, data: &Path, out: &Path) -> Result<Vec<u8>, String> {
    let cli = Cli::try_parse_from([
        "kgs",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .map_err(|e| e.to_string())?;
    cli::run(cli, &mut std::io::sink()).map_err(|e| e.to_string())?;
    std::fs::read(out.join(cli::METRICS_FILE)).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SyntheticTaskSpec {
        samples_per_class: 6,
        noise_std: 0.01,
        seed: 3,
        ..SyntheticTaskSpec::default()
    };
    let data_dir = dir.path().join("data");
    let manifest = write_dataset(&data_dir, &spec, &generate(&spec).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut run = RunConfig::default();
    run.train.epochs = 4;
    run.train.batch_size = 4;
    run.train.seed = 5;
    let config = dir.path().join("run.toml");
    std::fs::write(&config, run.to_toml()).map_err(|e| e.to_string())?;
    let a = train_once(&config, &manifest, &dir.path().join("a"))?;
    let b = train_once(&config, &manifest, &dir.path().join("b"))?;
    let rows = a.iter().filter(|&&c| c == b'\n').count();
    check(rows == 5, || format!("expected header + 4 rows, got {rows} lines"))?;
    check(a == b, || "metrics CSVs differ".into())?;
    Ok(format!("{} bytes identical", a.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("covariance algebra", covariance_suite),
        ("bhattacharyya distance", bhattacharyya_suite),
        ("gradient check", gradient_suite),
        ("schedules", schedule_suite),
        ("anisotropy ablation", anisotropy_ablation),
        ("component ablation", component_ablation),
        ("topology semantics", topology_semantics),
        ("render speed", render_speed),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::var("KGS_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, criterion)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        match criterion() {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
