use super::graph::exp_se3_graph;
use super::*;
use crate::autodiff::{grad_check, Tape, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const TOL: f64 = 1e-9;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tangent(r: &mut ChaCha8Rng, max_angle: f64) -> Vec6<f64> {
    let mut xi = [0.0; 6];
    for v in xi.iter_mut().take(3) {
        *v = r.gen_range(-1.0..1.0);
    }
    let n = vnorm([xi[0], xi[1], xi[2]]);
    if n > 0.0 {
        let scale = r.gen_range(0.0..max_angle) / n;
        for v in xi.iter_mut().take(3) {
            *v *= scale;
        }
    }
    for v in xi.iter_mut().skip(3) {
        *v = r.gen_range(-2.0..2.0);
    }
    xi
}

fn random_pose(r: &mut ChaCha8Rng) -> Pose<f64> {
    exp_se3(&random_tangent(r, 2.9)).unwrap()
}

fn pose_close(a: &Pose<f64>, b: &Pose<f64>, tol: f64) -> bool {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max((a.rotation.0[i][j] - b.rotation.0[i][j]).abs());
        }
        worst = worst.max((a.translation[i] - b.translation[i]).abs());
    }
    worst < tol
}

#[test]
fn exp_zero_is_identity() {
    let p = exp_se3(&[0.0; 6]).unwrap();
    assert!(pose_close(&p, &Pose::identity(), 1e-15));
}

#[test]
fn exp_pure_translation() {
    let p = exp_se3(&[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
    assert_eq!(p.translation, [1.0, 2.0, 3.0]);
    assert!(pose_close(
        &Pose::new(p.rotation, [0.0; 3]),
        &Pose::identity(),
        1e-15
    ));
}

#[test]
fn exp_quarter_turn_about_z() {
    let p = exp_se3(&[0.0, 0.0, PI / 2.0, 0.0, 0.0, 0.0]).unwrap();
    let moved = p.transform([1.0, 0.0, 0.0]);
    assert!(vnorm(vsub(moved, [0.0, 1.0, 0.0])) < TOL);
}

#[test]
fn exp_rejects_non_finite() {
    assert!(exp_se3(&[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
}

#[test]
fn log_identity_is_zero() {
    let xi = log_se3(&Pose::<f64>::identity()).unwrap();
    assert_eq!(xi, [0.0; 6]);
}

#[test]
fn log_near_pi_rejected() {
    let p = exp_se3(&[PI, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    assert!(matches!(log_se3(&p), Err(Error::NearPiRotation { .. })));
}

#[test]
fn exp_log_roundtrip_1000_random() {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let xi = random_tangent(&mut r, 3.0);
        let back = log_se3(&exp_se3(&xi).unwrap()).unwrap();
        for i in 0..6 {
            worst = worst.max((xi[i] - back[i]).abs());
        }
    }
    assert!(worst <= TOL, "worst roundtrip error {worst}");
}

#[test]
fn exp_log_roundtrip_small_angles() {
    let mut r = rng(12);
    for _ in 0..200 {
        let mut xi = random_tangent(&mut r, 1e-7);
        xi[3] = 0.5;
        let back = log_se3(&exp_se3(&xi).unwrap()).unwrap();
        for i in 0..6 {
            assert!((xi[i] - back[i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn compose_identity_is_neutral() {
    let mut r = rng(13);
    let p = random_pose(&mut r);
    assert!(pose_close(&Pose::identity().compose(&p), &p, 1e-15));
    assert!(pose_close(&p.compose(&Pose::identity()), &p, 1e-15));
}

#[test]
fn compose_with_inverse_is_identity() {
    let mut r = rng(14);
    for _ in 0..100 {
        let p = random_pose(&mut r);
        assert!(pose_close(
            &p.compose(&p.inverse()),
            &Pose::identity(),
            TOL
        ));
    }
}

#[test]
fn composition_is_associative() {
    let mut r = rng(15);
    for _ in 0..100 {
        let (a, b, c) = (
            random_pose(&mut r),
            random_pose(&mut r),
            random_pose(&mut r),
        );
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        assert!(pose_close(&left, &right, TOL));
    }
}

#[test]
fn pose_validate_catches_bad_rotation() {
    let mut p = Pose::<f64>::identity();
    p.rotation.0[0][0] = 1.5;
    assert!(p.validate(1e-9).is_err());
    assert!(Pose::<f64>::identity().validate(1e-9).is_ok());
}

#[test]
fn quaternion_roundtrip() {
    let mut r = rng(16);
    for _ in 0..500 {
        let p = random_pose(&mut r);
        let q = mat_to_quat(&p.rotation);
        let m = quat_to_mat(&q);
        assert!(pose_close(
            &Pose::new(m, [0.0; 3]),
            &Pose::new(p.rotation, [0.0; 3]),
            1e-12
        ));
    }
}

// --- tape side ---

#[test]
fn graph_transform_matches_plain_and_trivials() {
    let tape: Tape<f64> = Tape::new();
    let points = vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-0.5, 0.25, 4.0]];
    let cloud = GraphCloud::from_points(&tape, &points, false).unwrap();

    let id = GraphPose::identity(&tape);
    assert_eq!(id.transform(&cloud).values(), points);

    let shift = GraphPose::constant(
        &tape,
        &Pose::new(Mat3::identity(), [1.0, 0.0, 0.0]),
    );
    assert_eq!(shift.transform(&cloud).values()[0], [1.0, 0.0, 0.0]);

    let mut r = rng(17);
    let p = random_pose(&mut r);
    let gp = GraphPose::constant(&tape, &p);
    let out = gp.transform(&cloud).values();
    for (i, &pt) in points.iter().enumerate() {
        assert!(vnorm(vsub(out[i], p.transform(pt))) < 1e-15);
    }
}

#[test]
fn graph_exp_matches_plain_exp() {
    let mut r = rng(18);
    for _ in 0..200 {
        let xi = random_tangent(&mut r, 3.0);
        let plain = exp_se3(&xi).unwrap();
        let tape: Tape<f64> = Tape::new();
        let vars = xi.map(|v| tape.constant(v));
        let graph = exp_se3_graph(&vars).value();
        assert!(pose_close(&plain, &graph, 1e-14));
    }
    // Small-angle branch.
    let xi = [1e-9, -2e-9, 1e-9, 0.3, -0.1, 0.2];
    let tape: Tape<f64> = Tape::new();
    let vars = xi.map(|v| tape.constant(v));
    assert!(pose_close(
        &exp_se3(&xi).unwrap(),
        &exp_se3_graph(&vars).value(),
        1e-14
    ));
}

#[test]
fn graph_compose_matches_plain() {
    let mut r = rng(19);
    let (a, b) = (random_pose(&mut r), random_pose(&mut r));
    let tape: Tape<f64> = Tape::new();
    let ga = GraphPose::constant(&tape, &a);
    let gb = GraphPose::constant(&tape, &b);
    assert!(pose_close(&ga.compose(&gb).value(), &a.compose(&b), 1e-14));
}

#[test]
fn transform_gradient_wrt_points_matches_fd() {
    let mut r = rng(20);
    let p = random_pose(&mut r);
    let flat: Vec<f64> = (0..12).map(|_| r.gen_range(-2.0..2.0)).collect();
    let n = flat.len() / 3;
    let xs: Vec<usize> = (0..n).map(|i| 3 * i).collect();
    let ys: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
    let zs: Vec<usize> = (0..n).map(|i| 3 * i + 2).collect();
    let err = grad_check(
        |tape, leaf| {
            let cloud = GraphCloud::from_columns(
                leaf.gather(&xs),
                leaf.gather(&ys),
                leaf.gather(&zs),
            );
            let gp = GraphPose::constant(tape, &p);
            let out = gp.transform(&cloud);
            Ok(out.x.square().sum() + out.y.square().sum() + out.z.square().sum())
        },
        &Value::vector(flat),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn exp_gradient_wrt_tangent_matches_fd() {
    let mut r = rng(21);
    let points: Vec<[f64; 3]> = (0..5)
        .map(|_| [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)])
        .collect();
    for xi0 in [
        [0.3, -0.2, 0.5, 0.8, -1.0, 0.1],
        [1e-5, 2e-5, -1e-5, 0.5, 0.2, -0.3], // series branch
    ] {
        let err = grad_check(
            |tape, leaf| {
                let xi: [_; 6] = [0, 1, 2, 3, 4, 5].map(|i| leaf.gather(&[i]).sum());
                let gp = exp_se3_graph(&xi);
                let cloud = GraphCloud::from_points(tape, &points, false)?;
                let out = gp.transform(&cloud);
                Ok(out.x.square().sum() + out.y.square().sum() + out.z.square().sum())
            },
            &Value::vector(xi0.to_vec()),
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "rel err {err} at {xi0:?}");
    }
}

#[test]
fn transform_composes_like_poses() {
    let mut r = rng(22);
    let (a, b) = (random_pose(&mut r), random_pose(&mut r));
    let points: Vec<[f64; 3]> = (0..8)
        .map(|_| [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)])
        .collect();
    let tape: Tape<f64> = Tape::new();
    let cloud = GraphCloud::from_points(&tape, &points, false).unwrap();
    let (ga, gb) = (GraphPose::constant(&tape, &a), GraphPose::constant(&tape, &b));
    let via_compose = ga.compose(&gb).transform(&cloud).values();
    let via_chain = ga.transform(&gb.transform(&cloud)).values();
    for i in 0..points.len() {
        assert!(vnorm(vsub(via_compose[i], via_chain[i])) < TOL);
    }
}

#[test]
fn transform_then_inverse_recovers_cloud() {
    let mut r = rng(23);
    let p = random_pose(&mut r);
    let points: Vec<[f64; 3]> = (0..8)
        .map(|_| [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)])
        .collect();
    let tape: Tape<f64> = Tape::new();
    let cloud = GraphCloud::from_points(&tape, &points, false).unwrap();
    let gp = GraphPose::constant(&tape, &p);
    let ginv = GraphPose::constant(&tape, &p.inverse());
    let back = ginv.transform(&gp.transform(&cloud)).values();
    for i in 0..points.len() {
        assert!(vnorm(vsub(back[i], points[i])) < TOL);
    }
}

#[test]
fn f32_pose_math_works() {
    let xi: Vec6<f32> = [0.1, 0.2, -0.1, 1.0, 0.5, -0.25];
    let p = exp_se3(&xi).unwrap();
    let back = log_se3(&p).unwrap();
    for i in 0..6 {
        assert!((xi[i] - back[i]).abs() < 1e-5);
    }
}
