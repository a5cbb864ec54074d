//! Property tests for normalization, splat covariances, rasterization and the
//! Bhattacharyya prior.

use kgs_core::skeleton::{compute_velocity, normalize_sequence, prepare, NormalizationParams, SkeletonSequence};
use kgs_core::splat::{
    build_covariance, build_primitives, render_frame, render_sequence, render_sequence_with_grad, Aggregation,
    GaussianPrimitive2D, PrimitiveGrid, RenderConfig, Sym2, View,
};
use kgs_core::topology::{bhattacharyya_distance, build_prior_adjacency};
use kgs_core::KgsError;
use proptest::prelude::*;

fn sequence(frames: usize, joints: usize, data: Vec<f64>) -> SkeletonSequence {
    SkeletonSequence::new(frames, joints, 3, data, None).unwrap()
}

fn arb_sequence() -> impl Strategy<Value = SkeletonSequence> {
    (2usize..6, 2usize..7).prop_flat_map(|(t, v)| {
        prop::collection::vec(-5.0f64..5.0, t * v * 3).prop_map(move |data| sequence(t, v, data))
    })
}

fn rotate(v: [f64; 2], phi: f64) -> [f64; 2] {
    let (s, c) = phi.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn rotate_sym(m: &Sym2, phi: f64) -> Sym2 {
    let (s, c) = phi.sin_cos();
    // R M Rᵀ
    let (a, b, d) = (m.xx, m.xy, m.yy);
    Sym2::new(
        c * c * a - 2.0 * s * c * b + s * s * d,
        s * c * (a - d) + (c * c - s * s) * b,
        s * s * a + 2.0 * s * c * b + c * c * d,
    )
}

fn prim(mu: [f64; 2], sigma: Sym2) -> GaussianPrimitive2D {
    GaussianPrimitive2D {
        mu,
        sigma,
        theta: 0.0,
        scales: (sigma.xx.max(sigma.yy).sqrt(), sigma.xx.min(sigma.yy).sqrt()),
    }
}

proptest! {
    #[test]
    fn normalized_frames_are_centered_and_bounded(seq in arb_sequence()) {
        let params = NormalizationParams::default();
        let out = normalize_sequence(&seq, &params).unwrap();
        for t in 0..out.frames() {
            let mut center = [0.0; 3];
            let mut radius: f64 = 0.0;
            for v in 0..out.joints() {
                let p = out.joint(t, v);
                for k in 0..3 {
                    center[k] += p[k] / out.joints() as f64;
                }
                radius = radius.max(p.iter().map(|x| x * x).sum::<f64>().sqrt());
            }
            prop_assert!(center.iter().all(|c| c.abs() < 1e-12));
            prop_assert!(radius <= params.target_half_extent + 1e-12);
        }
    }

    #[test]
    fn velocities_are_forward_differences(seq in arb_sequence()) {
        let kin = compute_velocity(&seq).unwrap();
        let (t_count, v_count) = (seq.frames(), seq.joints());
        for t in 0..t_count {
            let next = if t + 1 < t_count { t + 1 } else { t };
            let prev = if t + 1 < t_count { t } else { t - 1 };
            for v in 0..v_count {
                for k in 0..3 {
                    let want = seq.joint(next, v)[k] - seq.joint(prev, v)[k];
                    prop_assert_eq!(kin.velocity(t, v)[k], want);
                }
            }
        }
    }

    #[test]
    fn covariance_rotates_with_velocity(speed in 1e-3f64..2.0, angle in -3.1f64..3.1, phi in -3.1f64..3.1) {
        let config = RenderConfig::default();
        let v = [speed * angle.cos(), speed * angle.sin()];
        let rotated = build_covariance(rotate(v, phi), &config).sigma;
        let expected = rotate_sym(&build_covariance(v, &config).sigma, phi);
        let scale = config.base_scale().powi(2);
        prop_assert!((rotated.xx - expected.xx).abs() < 1e-12 * scale * 10.0);
        prop_assert!((rotated.xy - expected.xy).abs() < 1e-12 * scale * 10.0);
        prop_assert!((rotated.yy - expected.yy).abs() < 1e-12 * scale * 10.0);
    }

    #[test]
    fn covariance_does_not_depend_on_velocity_sign(vx in -2.0f64..2.0, vy in -2.0f64..2.0) {
        let config = RenderConfig::default();
        let a = build_covariance([vx, vy], &config).sigma;
        let b = build_covariance([-vx, -vy], &config).sigma;
        prop_assert!((a.xx - b.xx).abs() < 1e-15 && (a.xy - b.xy).abs() < 1e-15 && (a.yy - b.yy).abs() < 1e-15);
    }

    #[test]
    fn truncation_error_is_bounded(
        mus in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -2.0f64..2.0, -2.0f64..2.0), 1..6),
        k in 1.0f64..3.0,
    ) {
        let truncated = RenderConfig { truncation_sigmas: k, ..RenderConfig::default() };
        let full = RenderConfig { truncation_sigmas: 1e3, ..RenderConfig::default() };
        let prims: Vec<_> = mus
            .iter()
            .map(|&(x, y, vx, vy)| GaussianPrimitive2D { mu: [x, y], ..build_covariance([vx, vy], &truncated) })
            .collect();
        let a = render_frame(&prims, &truncated);
        let b = render_frame(&prims, &full);
        let bound = (-0.5 * k * k).exp();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x <= y);
            prop_assert!(y - x <= bound, "gap {} above exp(-k²/2) = {}", y - x, bound);
        }
    }

    #[test]
    fn bhattacharyya_symmetric_and_nonnegative(
        a in (0.05f64..2.0, -1.0f64..1.0, 0.05f64..2.0),
        b in (0.05f64..2.0, -1.0f64..1.0, 0.05f64..2.0),
        mi in (-2.0f64..2.0, -2.0f64..2.0),
        mj in (-2.0f64..2.0, -2.0f64..2.0),
    ) {
        let si = Sym2::new(a.0 * a.0, a.0 * a.1, a.1 * a.1 + a.2 * a.2);
        let sj = Sym2::new(b.0 * b.0, b.0 * b.1, b.1 * b.1 + b.2 * b.2);
        let dij = bhattacharyya_distance([mi.0, mi.1], &si, [mj.0, mj.1], &sj).unwrap();
        let dji = bhattacharyya_distance([mj.0, mj.1], &sj, [mi.0, mi.1], &si).unwrap();
        prop_assert!(dij >= 0.0);
        prop_assert!((dij - dji).abs() <= 1e-12 * dij.max(1.0));
    }

    #[test]
    fn affinity_decreases_with_separation(d1 in 0.0f64..3.0, extra in 1e-3f64..3.0) {
        let s = Sym2::new(0.2, 0.05, 0.1);
        let near = bhattacharyya_distance([0.0, 0.0], &s, [d1, 0.0], &s).unwrap();
        let far = bhattacharyya_distance([0.0, 0.0], &s, [d1 + extra, 0.0], &s).unwrap();
        prop_assert!((-far).exp() < (-near).exp());
    }

    #[test]
    fn prior_is_symmetric_with_unit_diagonal(seq in arb_sequence()) {
        let kin = prepare(&seq, &NormalizationParams::default()).unwrap();
        let grids = build_primitives(&kin, &RenderConfig::default()).unwrap();
        let prior = build_prior_adjacency(&grids).unwrap();
        for i in 0..prior.joints {
            prop_assert_eq!(prior.get(i, i), 1.0);
            for j in 0..prior.joints {
                prop_assert_eq!(prior.get(i, j), prior.get(j, i));
                prop_assert!(prior.get(i, j) > 0.0 && prior.get(i, j) <= 1.0);
            }
        }
    }
}

#[test]
fn log_scale_gradient_matches_finite_differences() {
    let data: Vec<f64> = (0..4 * 3 * 3).map(|i| ((i * 37 % 11) as f64 - 5.0) / 6.0).collect();
    let kin = prepare(&sequence(4, 3, data), &NormalizationParams::default()).unwrap();
    for aggregation in [Aggregation::Max, Aggregation::ClampedSum] {
        let config = RenderConfig { log_scale: -1.7, aggregation, ..RenderConfig::default() };
        let (_, grad) = render_sequence_with_grad(&kin, &config).unwrap();
        let h = 1e-6;
        let at = |ls: f64| render_sequence(&kin, &RenderConfig { log_scale: ls, ..config.clone() }).unwrap().0.values;
        let (plus, minus) = (at(config.log_scale + h), at(config.log_scale - h));
        let mut worst: f64 = 0.0;
        for ((p, m), g) in plus.iter().zip(&minus).zip(&grad) {
            let numeric = (p - m) / (2.0 * h);
            worst = worst.max((numeric - g).abs());
        }
        assert!(worst < 1e-6, "{aggregation:?}: worst absolute error {worst:e}");
    }
}

#[test]
fn two_joint_prior_matches_worked_example() {
    let eye = Sym2::identity();
    let grid = PrimitiveGrid {
        view: View::XY,
        frames: 3,
        joints: 2,
        primitives: (0..3).flat_map(|_| [prim([0.0, 0.0], eye), prim([2.0, 0.0], eye)]).collect(),
    };
    let prior = build_prior_adjacency(&[grid]).unwrap();
    assert!((prior.get(0, 1) - (-0.5f64).exp()).abs() < 1e-15);
    assert!((prior.get(0, 1) - 0.606531).abs() < 1e-6);
}

#[test]
fn single_joint_prior_is_one() {
    let grid = PrimitiveGrid {
        view: View::XY,
        frames: 1,
        joints: 1,
        primitives: vec![prim([0.1, 0.1], Sym2::identity())],
    };
    assert_eq!(build_prior_adjacency(&[grid]).unwrap().matrix, vec![1.0]);
}

#[test]
fn non_positive_definite_covariance_is_a_matrix_error() {
    let bad = Sym2::new(1.0, 2.0, 1.0);
    let err = bhattacharyya_distance([0.0, 0.0], &bad, [0.0, 0.0], &Sym2::identity()).unwrap_err();
    assert!(matches!(err, KgsError::Matrix(_)));
}

#[test]
fn single_gaussian_peaks_at_its_mean_pixel() {
    let config = RenderConfig { height: 9, width: 9, ..RenderConfig::default() };
    let sigma = build_covariance([0.0, 0.0], &config).sigma;
    let img = render_frame(&[prim([0.0, 0.0], sigma)], &config);
    let peak = img.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(peak, 1.0);
    assert_eq!(img[4 * 9 + 4], 1.0);
}
