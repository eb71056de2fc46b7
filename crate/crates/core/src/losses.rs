//! Training objectives: task loss with regularization, the trajectory-error
//! loss over two odometry branches, their weighted combination, and the
//! soft above-ground mask that makes point selection differentiable.
//!
//! The reference branch is self-supervised: its trajectory comes from
//! registering the reference scans themselves, computed off-tape so it is a
//! constant of the step (stop-gradient). Being deterministic in the scans
//! and config, it can be computed once per mini-sequence and reused across
//! epochs ([`reference_trajectory`]).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::GraphCloud;
use crate::nn::KdTree;
use crate::registration::SoftLmConfig;
use crate::trajectory::{ate_on_tape, chain_odometry_on_tape, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    SquaredError,
    AbsoluteError,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the trajectory loss. `None` auto-balances at the first
    /// epoch that computes it: `gamma = 0.1 * l_model / l_slam`.
    pub gamma: Option<f64>,
    /// Weight of the squared-norm parameter regularizer.
    pub beta: f64,
    pub base_loss: BaseLoss,
    /// Height above the (predicted or true) ground elevation at which a
    /// point counts as above ground (meters).
    pub mask_tau: f64,
    /// Softness of the above-ground mask (meters).
    pub mask_temperature: f64,
    /// Optional rotation term weight inside the trajectory loss.
    pub w_rot: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: None,
            beta: 0.0,
            base_loss: BaseLoss::SquaredError,
            mask_tau: 0.2,
            mask_temperature: 0.05,
            w_rot: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.gamma {
            if !(g >= 0.0) || !g.is_finite() {
                return Err(Error::invalid_config("loss.gamma", "must be >= 0"));
            }
        }
        if !(self.beta >= 0.0) {
            return Err(Error::invalid_config("loss.beta", "must be >= 0"));
        }
        if !(self.mask_temperature > 0.0) {
            return Err(Error::invalid_config(
                "loss.mask_temperature",
                "must be positive",
            ));
        }
        if !(self.w_rot >= 0.0) {
            return Err(Error::invalid_config("loss.w_rot", "must be >= 0"));
        }
        if !self.mask_tau.is_finite() {
            return Err(Error::invalid_config("loss.mask_tau", "must be finite"));
        }
        Ok(())
    }
}

/// Mean elementwise loss plus `beta * sum(theta^2)`.
pub fn model_loss<'t>(
    predictions: Var<'t, f64>,
    targets: Var<'t, f64>,
    theta: &[Var<'t, f64>],
    cfg: &LossConfig,
) -> Result<Var<'t, f64>> {
    if predictions.shape() != targets.shape() {
        return Err(Error::LengthMismatch {
            context: "model loss predictions vs targets".into(),
            expected: targets.shape().len(),
            got: predictions.shape().len(),
        });
    }
    let diff = predictions - targets;
    let data = match cfg.base_loss {
        BaseLoss::SquaredError => diff.square().mean(),
        BaseLoss::AbsoluteError => diff.abs().mean(),
    };
    Ok(data + regularizer(predictions.tape(), theta) * cfg.beta)
}

/// `sum(theta^2)` over all parameter nodes.
pub fn regularizer<'t>(tape: &'t Tape<f64>, theta: &[Var<'t, f64>]) -> Var<'t, f64> {
    let mut acc = tape.constant(0.0);
    for p in theta {
        acc = acc + p.square().sum();
    }
    acc
}

/// Literal weighted sum of the two losses.
pub fn combined_loss<'t>(
    l_model: Var<'t, f64>,
    l_slam: Var<'t, f64>,
    gamma: f64,
) -> Var<'t, f64> {
    l_model + l_slam * gamma
}

/// Resolve the configured gamma, auto-balancing from the first computed
/// loss values when unset.
pub fn resolve_gamma(configured: Option<f64>, l_model: f64, l_slam: f64) -> f64 {
    match configured {
        Some(g) => g,
        None => {
            if l_slam > 1e-12 {
                0.1 * l_model / l_slam
            } else {
                0.0
            }
        }
    }
}

/// Soft above-ground selection: `sigmoid((z - (e + tau)) / temperature)`.
/// Monotone up in the point height, down in the elevation; gradients reach
/// predicted elevations through it.
pub fn soft_above_ground_mask<'t>(
    point_z: Var<'t, f64>,
    cell_elevation: Var<'t, f64>,
    tau: f64,
    temperature: f64,
) -> Var<'t, f64> {
    assert!(temperature > 0.0, "mask temperature must be positive");
    ((point_z - cell_elevation - tau) / temperature).sigmoid()
}

/// Evaluation-time hard twin of the mask.
pub fn hard_above_ground(z: f64, elevation: f64, tau: f64) -> bool {
    z > elevation + tau
}

/// One scan of the differentiable branch.
pub struct PredictedScan<'t> {
    pub cloud: GraphCloud<'t, f64>,
    pub weights: Option<Var<'t, f64>>,
}

/// One scan of the reference branch (plain values; never on the tape).
#[derive(Debug, Clone)]
pub struct ReferenceScan {
    pub points: Vec<[f64; 3]>,
    pub weights: Option<Vec<f64>>,
}

/// Chain the reference scans into their trajectory, off-tape. Deterministic
/// in (scans, config); cache per mini-sequence and reuse across epochs.
///
/// Clouds are expected to be pre-downsampled the same way as the predicted
/// branch so identical inputs produce identical trajectories.
pub fn reference_trajectory(
    scans: &[ReferenceScan],
    cfg: &SoftLmConfig,
) -> Result<Trajectory<f64>> {
    if scans.len() < 2 {
        return Err(Error::TooFewScans {
            context: "reference trajectory".into(),
            needed: 2,
            got: scans.len(),
        });
    }
    let tape: Tape<f64> = Tape::new();
    let mut clouds = Vec::with_capacity(scans.len());
    let mut weights = Vec::with_capacity(scans.len());
    for s in scans {
        clouds.push(GraphCloud::from_points(&tape, &s.points, false)?);
        weights.push(match &s.weights {
            Some(w) => Some(tape.vector(w.clone(), false)?),
            None => None,
        });
    }
    let poses = chain_odometry_on_tape(&tape, &clouds, &weights, cfg)?;
    Trajectory::from_poses(
        poses.iter().map(|p| p.value()).collect(),
        (0..scans.len()).collect(),
    )
}

/// Trajectory error between the differentiable branch and a precomputed
/// reference trajectory: chain the predicted scans on the tape, then take
/// the mean squared waypoint distance (plus the optional rotation term).
pub fn slam_loss_with_reference<'t>(
    tape: &'t Tape<f64>,
    predicted: &[PredictedScan<'t>],
    reference: &Trajectory<f64>,
    reg_cfg: &SoftLmConfig,
    loss_cfg: &LossConfig,
) -> Result<Var<'t, f64>> {
    if predicted.len() != reference.len() {
        return Err(Error::LengthMismatch {
            context: "slam loss branches".into(),
            expected: reference.len(),
            got: predicted.len(),
        });
    }
    if predicted.len() < 2 {
        return Err(Error::TooFewScans {
            context: "slam loss".into(),
            needed: 2,
            got: predicted.len(),
        });
    }
    let clouds: Vec<_> = predicted.iter().map(|p| p.cloud).collect();
    let weights: Vec<_> = predicted.iter().map(|p| p.weights).collect();
    let poses = chain_odometry_on_tape(tape, &clouds, &weights, reg_cfg)?;
    ate_on_tape(tape, &poses, reference, loss_cfg.w_rot)
}

/// Full trajectory loss: reference branch computed off-tape (stop-gradient),
/// predicted branch chained on the tape.
pub fn slam_loss<'t>(
    tape: &'t Tape<f64>,
    predicted: &[PredictedScan<'t>],
    reference: &[ReferenceScan],
    reg_cfg: &SoftLmConfig,
    loss_cfg: &LossConfig,
) -> Result<Var<'t, f64>> {
    let ref_traj = reference_trajectory(reference, reg_cfg)?;
    slam_loss_with_reference(tape, predicted, &ref_traj, reg_cfg, loss_cfg)
}

/// Differentiable Chamfer distance with the nearest-neighbor matching
/// frozen at the current values: both directional terms gather the matched
/// partner and average squared distances.
pub fn chamfer_on_tape<'t>(
    a: &GraphCloud<'t, f64>,
    b: &GraphCloud<'t, f64>,
) -> Result<Var<'t, f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::empty("chamfer input cloud"));
    }
    let a_pts = a.values();
    let b_pts = b.values();
    let tree_a = KdTree::build(&a_pts)?;
    let tree_b = KdTree::build(&b_pts)?;
    let a_to_b: Vec<usize> = a_pts.iter().map(|&p| tree_b.nearest(p).0).collect();
    let b_to_a: Vec<usize> = b_pts.iter().map(|&p| tree_a.nearest(p).0).collect();

    let term = |src: &GraphCloud<'t, f64>, dst: &GraphCloud<'t, f64>, idx: &[usize]| {
        let q = dst.gather(idx);
        let dx = src.x - q.x;
        let dy = src.y - q.y;
        let dz = src.z - q.z;
        (dx.square() + dy.square() + dz.square()).mean()
    };
    Ok(term(a, b, &a_to_b) + term(b, a, &b_to_a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Value;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn structured_points(n: usize, r: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    r.gen_range(-4.0..4.0),
                    r.gen_range(-4.0..4.0),
                    r.gen_range(-2.0..2.0),
                ]
            })
            .collect()
    }

    fn quick_cfg() -> SoftLmConfig {
        SoftLmConfig {
            iterations: 6,
            voxel_leaf: 0.02,
            max_points: 4096,
            ..SoftLmConfig::default()
        }
    }

    #[test]
    fn model_loss_trivial_cases() {
        let tape: Tape<f64> = Tape::new();
        let cfg = LossConfig::default();
        let p = tape.vector(vec![1.0, 2.0, 3.0], true).unwrap();
        let t = tape.vector(vec![1.0, 2.0, 3.0], false).unwrap();
        assert_eq!(model_loss(p, t, &[], &cfg).unwrap().scalar_value(), 0.0);

        let p = tape.scalar(2.0);
        let t = tape.constant(0.0);
        assert_eq!(model_loss(p, t, &[], &cfg).unwrap().scalar_value(), 4.0);
    }

    #[test]
    fn model_loss_regularizer_value() {
        let tape: Tape<f64> = Tape::new();
        let cfg = LossConfig {
            beta: 0.1,
            ..LossConfig::default()
        };
        let p = tape.vector(vec![0.0, 0.0], true).unwrap();
        let t = tape.vector(vec![0.0, 0.0], false).unwrap();
        let theta = [tape.lift(Value::vector(vec![1.0, -2.0]), true).unwrap()];
        let loss = model_loss(p, t, &theta, &cfg).unwrap();
        assert!((loss.scalar_value() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn model_loss_rejects_shape_mismatch() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.vector(vec![1.0, 2.0], true).unwrap();
        let t = tape.vector(vec![1.0], false).unwrap();
        assert!(matches!(
            model_loss(p, t, &[], &LossConfig::default()),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn combined_loss_values_and_gradient_split() {
        let tape: Tape<f64> = Tape::new();
        let lm = tape.scalar(1.0);
        let ls = tape.scalar(2.0);
        assert_eq!(combined_loss(lm, ls, 0.0).scalar_value(), 1.0);
        let c = combined_loss(lm, ls, 0.5);
        assert_eq!(c.scalar_value(), 2.0);
        tape.backward(c).unwrap();
        assert_eq!(lm.grad().as_scalar(), 1.0);
        assert_eq!(ls.grad().as_scalar(), 0.5);
    }

    #[test]
    fn gamma_resolution() {
        assert_eq!(resolve_gamma(Some(0.7), 1.0, 1.0), 0.7);
        assert!((resolve_gamma(None, 2.0, 0.5) - 0.4).abs() < 1e-15);
        assert_eq!(resolve_gamma(None, 2.0, 0.0), 0.0);
    }

    #[test]
    fn mask_point_values_and_monotonicity() {
        let tape: Tape<f64> = Tape::new();
        let tau = 0.2;
        let temp = 0.05;
        let z = tape.vector(vec![1.2, 5.0, 1.1], false).unwrap();
        let e = tape.vector(vec![1.0, 1.0, 1.0], true).unwrap();
        let w = soft_above_ground_mask(z, e, tau, temp);
        let w = w.value();
        assert!((w.data()[0] - 0.5).abs() < 1e-12); // exactly at e + tau
        assert!(w.data()[1] > 1.0 - 1e-9); // far above
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((w.data()[2] - sig(-2.0)).abs() < 1e-12); // 0.1 below threshold
        assert!((w.data()[2] - 0.1192).abs() < 1e-4);

        // Gradient with respect to elevation is non-positive everywhere.
        let tape2: Tape<f64> = Tape::new();
        let mut r = rng(60);
        let zs: Vec<f64> = (0..50).map(|_| r.gen_range(-2.0..2.0)).collect();
        let es: Vec<f64> = (0..50).map(|_| r.gen_range(-2.0..2.0)).collect();
        let z = tape2.vector(zs, false).unwrap();
        let e = tape2.vector(es, true).unwrap();
        let w = soft_above_ground_mask(z, e, tau, temp);
        tape2.backward(w.sum()).unwrap();
        assert!(e.grad().data().iter().all(|&g| g <= 0.0));
    }

    #[test]
    fn mask_converges_to_hard_rule() {
        let mut r = rng(61);
        let tau = 0.2;
        for _ in 0..200 {
            let z: f64 = r.gen_range(-2.0..2.0);
            let e: f64 = r.gen_range(-2.0..2.0);
            if (z - (e + tau)).abs() <= 1e-3 {
                continue; // boundary band excluded
            }
            let tape: Tape<f64> = Tape::new();
            let zv = tape.vector(vec![z], false).unwrap();
            let ev = tape.vector(vec![e], false).unwrap();
            let w = soft_above_ground_mask(zv, ev, tau, 1e-4).value().data()[0];
            let hard = hard_above_ground(z, e, tau);
            assert_eq!(w > 0.5, hard, "z {z} e {e}");
            assert!(if hard { w > 0.999 } else { w < 0.001 });
        }
    }

    #[test]
    fn slam_loss_identical_branches_is_zero() {
        let mut r = rng(62);
        let scans: Vec<Vec<[f64; 3]>> = (0..3).map(|_| structured_points(150, &mut r)).collect();
        // Consecutive scans shifted so registration has work to do.
        let seq: Vec<Vec<[f64; 3]>> = scans
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.iter()
                    .map(|p| [p[0] + 0.1 * i as f64, p[1], p[2]])
                    .collect()
            })
            .collect();
        let tape: Tape<f64> = Tape::new();
        let predicted: Vec<PredictedScan<'_>> = seq
            .iter()
            .map(|s| PredictedScan {
                cloud: GraphCloud::from_points(&tape, s, true).unwrap(),
                weights: None,
            })
            .collect();
        let reference: Vec<ReferenceScan> = seq
            .iter()
            .map(|s| ReferenceScan {
                points: s.clone(),
                weights: None,
            })
            .collect();
        let loss = slam_loss(
            &tape,
            &predicted,
            &reference,
            &quick_cfg(),
            &LossConfig::default(),
        )
        .unwrap();
        assert!(loss.scalar_value() <= 1e-9, "loss {}", loss.scalar_value());
    }

    #[test]
    fn slam_loss_rigid_shift_of_predicted_is_zero() {
        // Every predicted scan shifted by the same offset: both branches
        // re-anchor at the identity, and with translation-only relative
        // motion the chained trajectories coincide.
        let mut r = rng(63);
        let base = structured_points(150, &mut r);
        let seq: Vec<Vec<[f64; 3]>> = (0..3)
            .map(|i| {
                base.iter()
                    .map(|p| [p[0] + 0.15 * i as f64, p[1], p[2]])
                    .collect()
            })
            .collect();
        let shifted: Vec<Vec<[f64; 3]>> = seq
            .iter()
            .map(|s| s.iter().map(|p| [p[0] + 0.3, p[1], p[2]]).collect())
            .collect();
        let tape: Tape<f64> = Tape::new();
        let predicted: Vec<PredictedScan<'_>> = shifted
            .iter()
            .map(|s| PredictedScan {
                cloud: GraphCloud::from_points(&tape, s, true).unwrap(),
                weights: None,
            })
            .collect();
        let reference: Vec<ReferenceScan> = seq
            .iter()
            .map(|s| ReferenceScan {
                points: s.clone(),
                weights: None,
            })
            .collect();
        let loss = slam_loss(
            &tape,
            &predicted,
            &reference,
            &quick_cfg(),
            &LossConfig::default(),
        )
        .unwrap();
        assert!(loss.scalar_value() <= 1e-9, "loss {}", loss.scalar_value());
    }

    #[test]
    fn slam_loss_positive_under_perturbation_with_valid_gradient() {
        let mut r = rng(64);
        let base = structured_points(80, &mut r);
        let mut seq: Vec<Vec<[f64; 3]>> = (0..2)
            .map(|i| {
                base.iter()
                    .map(|p| [p[0] + 0.1 * i as f64, p[1], p[2]])
                    .collect()
            })
            .collect();
        let reference: Vec<ReferenceScan> = seq
            .iter()
            .map(|s| ReferenceScan {
                points: s.clone(),
                weights: None,
            })
            .collect();
        // Perturb the second predicted scan.
        for p in seq[1].iter_mut() {
            p[0] += r.gen_range(-0.2..0.2);
            p[1] += r.gen_range(-0.2..0.2);
            p[2] += r.gen_range(-0.2..0.2);
        }
        let cfg = quick_cfg();
        let loss_cfg = LossConfig::default();
        let ref_traj = reference_trajectory(&reference, &cfg).unwrap();

        let build = |pts: &[Vec<[f64; 3]>],
                     tape: &Tape<f64>|
         -> Vec<GraphCloud<'_, f64>> {
            pts.iter()
                .map(|s| GraphCloud::from_points(tape, s, true).unwrap())
                .collect()
        };

        let tape: Tape<f64> = Tape::new();
        let clouds = build(&seq, &tape);
        let predicted: Vec<PredictedScan<'_>> = clouds
            .iter()
            .map(|&cloud| PredictedScan {
                cloud,
                weights: None,
            })
            .collect();
        let loss =
            slam_loss_with_reference(&tape, &predicted, &ref_traj, &cfg, &loss_cfg).unwrap();
        let base_loss = loss.scalar_value();
        assert!(base_loss > 0.0);
        tape.backward(loss).unwrap();
        let gx = clouds[1].x.grad();
        assert!(gx.data().iter().any(|&g| g != 0.0));
        assert!(gx.data().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn slam_loss_reference_inputs_get_no_gradient() {
        let mut r = rng(65);
        let base = structured_points(60, &mut r);
        let seq: Vec<Vec<[f64; 3]>> = (0..2)
            .map(|i| {
                base.iter()
                    .map(|p| [p[0] + 0.1 * i as f64, p[1] + 0.03 * i as f64, p[2]])
                    .collect()
            })
            .collect();
        let tape: Tape<f64> = Tape::new();
        // Reference points lifted as constants on the same tape; the branch
        // consumes their values, and constants never accumulate gradient.
        let ref_consts: Vec<GraphCloud<'_, f64>> = seq
            .iter()
            .map(|s| GraphCloud::from_points(&tape, s, false).unwrap())
            .collect();
        let reference: Vec<ReferenceScan> = ref_consts
            .iter()
            .map(|c| ReferenceScan {
                points: c.values(),
                weights: None,
            })
            .collect();
        let mut perturbed = seq.clone();
        for p in perturbed[1].iter_mut() {
            p[2] += 0.05;
        }
        let predicted: Vec<PredictedScan<'_>> = perturbed
            .iter()
            .map(|s| PredictedScan {
                cloud: GraphCloud::from_points(&tape, s, true).unwrap(),
                weights: None,
            })
            .collect();
        let loss = slam_loss(
            &tape,
            &predicted,
            &reference,
            &quick_cfg(),
            &LossConfig::default(),
        )
        .unwrap();
        tape.backward(loss).unwrap();
        for c in &ref_consts {
            assert!(c.x.grad().data().iter().all(|&g| g == 0.0));
            assert!(c.y.grad().data().iter().all(|&g| g == 0.0));
            assert!(c.z.grad().data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn chamfer_on_tape_matches_plain_and_differentiates() {
        let mut r = rng(66);
        let a = structured_points(120, &mut r);
        let b = structured_points(90, &mut r);
        let tape: Tape<f64> = Tape::new();
        let ca = GraphCloud::from_points(&tape, &a, true).unwrap();
        let cb = GraphCloud::from_points(&tape, &b, false).unwrap();
        let d = chamfer_on_tape(&ca, &cb).unwrap();
        let plain = crate::trajectory::chamfer(&a, &b).unwrap();
        assert!((d.scalar_value() - plain).abs() < 1e-12);
        tape.backward(d).unwrap();
        assert!(ca.x.grad().data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn reference_trajectory_is_deterministic() {
        let mut r = rng(67);
        let base = structured_points(100, &mut r);
        let scans: Vec<ReferenceScan> = (0..3)
            .map(|i| ReferenceScan {
                points: base
                    .iter()
                    .map(|p| [p[0] + 0.1 * i as f64, p[1], p[2]])
                    .collect(),
                weights: None,
            })
            .collect();
        let cfg = quick_cfg();
        let a = reference_trajectory(&scans, &cfg).unwrap();
        let b = reference_trajectory(&scans, &cfg).unwrap();
        assert_eq!(a.poses(), b.poses());
    }

}
