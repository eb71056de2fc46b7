//! Differentiable pairwise point-cloud alignment.
//!
//! A fixed number of Levenberg-Marquardt iterations is unrolled onto the
//! tape. The two discrete decisions of classical LM are replaced by smooth
//! logistic functions so gradients can flow through the whole solve:
//!
//! - the damping factor moves between `lambda_min` and `lambda_max` driven
//!   by the gap between the current error norm `r0` and the lookahead error
//!   norm `r1` ([`soft_damping`]);
//! - the step is applied with gate `sigmoid(r0 - r1)` instead of a hard
//!   accept/reject, on the manifold: `x_{t+1} = exp(g * delta) ∘ x_t`
//!   ([`soft_update`]).
//!
//! Correspondences are refreshed every iteration; the matching indices are
//! constants of the step (matching is not differentiable) while the match
//! distances, residual weights, and everything downstream stay on the tape.

pub mod reference;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Value, Var};
use crate::error::{Error, Result};
use crate::geometry::{exp_se3_graph, GraphCloud, GraphPose, Pose, Vec6};
use crate::nn::KdTree;
use crate::scan::{voxel_downsample, LabeledScan};

/// Solver configuration. `init` is the starting iterate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftLmConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Shape parameter multiplying the exponential in the damping logistic.
    pub d: f64,
    /// Sharpness of the damping switch.
    pub sigma: f64,
    /// Unroll depth; the solver runs exactly this many iterations.
    pub iterations: usize,
    /// Distance at which a correspondence weight crosses one half (meters).
    pub max_corr_dist: f64,
    /// Softness of the correspondence down-weighting (meters).
    pub corr_temperature: f64,
    /// Voxel leaf for the pre-registration downsample (meters).
    pub voxel_leaf: f64,
    /// Hard cap on points per cloud entering the solver.
    pub max_points: usize,
    pub init: Pose<f64>,
}

impl Default for SoftLmConfig {
    fn default() -> Self {
        SoftLmConfig {
            lambda_min: 1e-4,
            lambda_max: 1e2,
            d: 1.0,
            sigma: 10.0,
            iterations: 30,
            max_corr_dist: 1.0,
            corr_temperature: 0.05,
            voxel_leaf: 0.3,
            max_points: 2048,
            init: Pose::identity(),
        }
    }
}

impl SoftLmConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid_config(
                    format!("registration.{field}"),
                    reason,
                ))
            }
        };
        check(self.lambda_min >= 0.0, "lambda_min", "must be >= 0")?;
        check(
            self.lambda_max > self.lambda_min,
            "lambda_max",
            "must exceed lambda_min",
        )?;
        check(self.d > 0.0, "d", "must be positive")?;
        check(self.sigma > 0.0, "sigma", "must be positive")?;
        check(self.iterations >= 1, "iterations", "must be at least 1")?;
        check(self.max_corr_dist > 0.0, "max_corr_dist", "must be positive")?;
        check(
            self.corr_temperature > 0.0,
            "corr_temperature",
            "must be positive",
        )?;
        check(self.voxel_leaf > 0.0, "voxel_leaf", "must be positive")?;
        check(self.max_points >= 4, "max_points", "must be at least 4")?;
        self.init
            .validate(1e-6)
            .map_err(|e| Error::invalid_config("registration.init", e.to_string()))
    }
}

/// Snapshot of one unrolled iteration (values, not tape nodes).
#[derive(Debug, Clone)]
pub struct SolverState {
    /// Iterate the step was computed at.
    pub iterate: Pose<f64>,
    /// Error norm at the iterate.
    pub r0: f64,
    /// Error norm at the full-step lookahead.
    pub r1: f64,
    pub delta: Vec6<f64>,
    /// Damping used for this step.
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub relative_pose: Pose<f64>,
    pub final_residual: f64,
    pub per_iteration_residuals: Vec<f64>,
    pub trace: Vec<SolverState>,
}

/// Source-to-target match indices of one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
}

/// Tape-level registration output. `pose` maps source coordinates onto the
/// target cloud and is differentiable with respect to every tape input it
/// saw (source and target coordinates, point weights).
pub struct GraphRegistration<'t> {
    pub pose: GraphPose<'t, f64>,
    pub final_residual: Var<'t, f64>,
    pub per_iteration_residuals: Vec<Var<'t, f64>>,
    /// One entry per iteration plus one for the final residual evaluation;
    /// feed back through `frozen_matches` to re-evaluate the solve as a
    /// smooth function (finite-difference probes).
    pub matches: Vec<MatchSet>,
    pub trace: Vec<SolverState>,
}

/// Match every source point to its nearest target point and weight the pair
/// by `sigmoid((max_dist - d_i) / temperature)`, times `point_weights_in`
/// when given. Indices are constants of the step; the weights stay
/// differentiable through the distances.
pub fn find_correspondences<'t>(
    source_world: &GraphCloud<'t, f64>,
    target: &GraphCloud<'t, f64>,
    index: &KdTree<f64>,
    max_dist: f64,
    temperature: f64,
    point_weights_in: Option<Var<'t, f64>>,
    frozen: Option<&MatchSet>,
) -> Result<(MatchSet, Var<'t, f64>)> {
    let n = source_world.len();
    if n == 0 {
        return Err(Error::empty("source cloud"));
    }
    if index.len() < 4 {
        return Err(Error::TooFewCorrespondences {
            needed: 4,
            got: index.len(),
        });
    }
    let match_set = match frozen {
        Some(m) => {
            if m.pairs.len() != n {
                return Err(Error::LengthMismatch {
                    context: "frozen match set".into(),
                    expected: n,
                    got: m.pairs.len(),
                });
            }
            m.clone()
        }
        None => {
            let pairs = source_world
                .values()
                .into_iter()
                .enumerate()
                .map(|(i, p)| (i, index.nearest(p).0))
                .collect();
            MatchSet { pairs }
        }
    };
    let tgt_idx: Vec<usize> = match_set.pairs.iter().map(|&(_, t)| t).collect();
    let q = target.gather(&tgt_idx);
    let dx = source_world.x - q.x;
    let dy = source_world.y - q.y;
    let dz = source_world.z - q.z;
    let d = (dx.square() + dy.square() + dz.square()).sqrt();
    let mut w = ((-d + max_dist) / temperature).sigmoid();
    if let Some(pw) = point_weights_in {
        w = w * pw;
    }
    Ok((match_set, w))
}

/// Weighted residual norm `sqrt(sum_i ||w_i (y_i - q_i)||^2)` for a given
/// match set.
fn weighted_residual_norm<'t>(
    y: &GraphCloud<'t, f64>,
    target: &GraphCloud<'t, f64>,
    match_set: &MatchSet,
    weights: Var<'t, f64>,
) -> Var<'t, f64> {
    let tgt_idx: Vec<usize> = match_set.pairs.iter().map(|&(_, t)| t).collect();
    let q = target.gather(&tgt_idx);
    let dx = y.x - q.x;
    let dy = y.y - q.y;
    let dz = y.z - q.z;
    let u = weights.square();
    ((dx.square() + dy.square() + dz.square()) * u).sum().sqrt()
}

/// Plain 6x6 Cholesky solve; `None` when a pivot falls below
/// `1e-12 * max_diag` (rank deficiency).
fn cholesky6(a: &[[f64; 6]; 6], b: &[f64; 6]) -> Option<[f64; 6]> {
    let max_diag = (0..6).map(|i| a[i][i]).fold(0.0f64, f64::max);
    if !(max_diag > 0.0) {
        return None;
    }
    let mut l = [[0.0f64; 6]; 6];
    for j in 0..6 {
        let mut s = a[j][j];
        for k in 0..j {
            s -= l[j][k] * l[j][k];
        }
        if s <= 1e-12 * max_diag {
            return None;
        }
        l[j][j] = s.sqrt();
        for i in (j + 1)..6 {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / l[j][j];
        }
    }
    let mut y = [0.0f64; 6];
    for i in 0..6 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0f64; 6];
    for i in (0..6).rev() {
        let mut s = y[i];
        for k in (i + 1)..6 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Some(x)
}

/// Cholesky solve unrolled onto the tape. Pivots are checked by value; the
/// caller has already established positive definiteness of the undamped
/// system, so failures here mean a damped pivot collapsed numerically.
fn cholesky6_graph<'t>(
    a: &[[Var<'t, f64>; 6]; 6],
    b: &[Var<'t, f64>; 6],
) -> Result<[Var<'t, f64>; 6]> {
    let mut l = *a; // placeholder entries, overwritten column by column
    for j in 0..6 {
        let mut s = a[j][j];
        for k in 0..j {
            s = s - l[j][k].square();
        }
        if s.scalar_value() <= 0.0 {
            return Err(Error::DegenerateGeometry {
                detail: format!("damped normal equations lost definiteness at pivot {j}"),
            });
        }
        l[j][j] = s.sqrt();
        for i in (j + 1)..6 {
            let mut s = a[i][j];
            for k in 0..j {
                s = s - l[i][k] * l[j][k];
            }
            l[i][j] = s / l[j][j];
        }
    }
    let mut y = *b;
    for i in 0..6 {
        let mut s = b[i];
        for k in 0..i {
            s = s - l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = y;
    for i in (0..6).rev() {
        let mut s = y[i];
        for k in (i + 1)..6 {
            s = s - l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Ok(x)
}

/// One damped Gauss-Newton step from weighted point-to-point residuals
/// `e_i = w_i (y_i - q_i)`. Returns the tangent step solving
/// `(J^T J + lambda diag(J^T J)) delta = -J^T e` and the error norm
/// `r = sqrt(sum ||e_i||^2)` at the iterate.
///
/// The Jacobian is the analytic one for a left perturbation `[omega, v]`:
/// `J_i = w_i [ -[y_i]x | I ]`. Rank deficiency of the undamped system
/// (collinear geometry) is detected by value and reported.
pub fn gauss_newton_delta<'t>(
    y: &GraphCloud<'t, f64>,
    target: &GraphCloud<'t, f64>,
    match_set: &MatchSet,
    weights: Var<'t, f64>,
    lambda: Var<'t, f64>,
) -> Result<([Var<'t, f64>; 6], Var<'t, f64>)> {
    let effective = weights
        .value()
        .data()
        .iter()
        .filter(|&&w| w > 0.01)
        .count();
    if effective < 3 {
        return Err(Error::TooFewCorrespondences {
            needed: 3,
            got: effective,
        });
    }

    let tgt_idx: Vec<usize> = match_set.pairs.iter().map(|&(_, t)| t).collect();
    let q = target.gather(&tgt_idx);
    let (a, b, c) = (y.x, y.y, y.z);
    let dx = a - q.x;
    let dy = b - q.y;
    let dz = c - q.z;
    let u = weights.square();

    let r0 = ((dx.square() + dy.square() + dz.square()) * u).sum().sqrt();

    // Symmetric 6x6 normal matrix, [omega | v] ordering.
    let s = |v: Var<'t, f64>| (v * u).sum();
    let uaa = s(a.square());
    let ubb = s(b.square());
    let ucc = s(c.square());
    let uab = s(a * b);
    let uac = s(a * c);
    let ubc = s(b * c);
    let ua = s(a);
    let ub = s(b);
    let uc = s(c);
    let usum = u.sum();
    let zero = weights.tape().constant(0.0);

    let h03 = zero;
    let h04 = -uc;
    let h05 = ub;
    let h13 = uc;
    let h14 = zero;
    let h15 = -ua;
    let h23 = -ub;
    let h24 = ua;
    let h25 = zero;

    let h = [
        [ubb + ucc, -uab, -uac, h03, h04, h05],
        [-uab, uaa + ucc, -ubc, h13, h14, h15],
        [-uac, -ubc, uaa + ubb, h23, h24, h25],
        [h03, h13, h23, usum, zero, zero],
        [h04, h14, h24, zero, usum, zero],
        [h05, h15, h25, zero, zero, usum],
    ];

    // J^T e: rotation part sum w^2 (y x d), translation part sum w^2 d.
    let g = [
        s(b * dz - c * dy),
        s(c * dx - a * dz),
        s(a * dy - b * dx),
        s(dx),
        s(dy),
        s(dz),
    ];

    // Value-side rank check on the undamped system.
    let mut hv = [[0.0f64; 6]; 6];
    for i in 0..6 {
        for j in 0..6 {
            hv[i][j] = h[i][j].scalar_value();
        }
    }
    if cholesky6(&hv, &[0.0; 6]).is_none() {
        return Err(Error::DegenerateGeometry {
            detail: "rank-deficient normal equations (collinear or weightless geometry)".into(),
        });
    }

    let mut damped = h;
    for (i, row) in damped.iter_mut().enumerate() {
        row[i] = h[i][i] * (lambda + 1.0);
    }
    let rhs = g.map(|gi| -gi);
    let delta = cholesky6_graph(&damped, &rhs)?;
    Ok((delta, r0))
}

/// Logistic interpolation of the damping factor between its bounds, driven
/// by the lookahead error gap. Fully differentiable in both error norms;
/// the exponent is clamped so extreme sharpness saturates cleanly instead
/// of overflowing.
pub fn soft_damping<'t>(
    tape: &'t Tape<f64>,
    r0: Var<'t, f64>,
    r1: Var<'t, f64>,
    cfg: &SoftLmConfig,
) -> Var<'t, f64> {
    let exponent = ((r1 - r0) * (-cfg.sigma)).clamp(-500.0, 500.0);
    let denom = exponent.exp() * cfg.d + 1.0;
    tape.constant(cfg.lambda_max - cfg.lambda_min) / denom + cfg.lambda_min
}

/// Value-level mirror of [`soft_damping`].
pub fn soft_damping_value(r0: f64, r1: f64, cfg: &SoftLmConfig) -> f64 {
    let exponent = (-cfg.sigma * (r1 - r0)).clamp(-500.0, 500.0);
    cfg.lambda_min + (cfg.lambda_max - cfg.lambda_min) / (1.0 + cfg.d * exponent.exp())
}

/// Gated manifold update `x_{t+1} = exp(g * delta) ∘ x_t` with
/// `g = sigmoid(r0 - r1)`: an improving lookahead gets more than half the
/// step, a worsening one less.
pub fn soft_update<'t>(
    x_t: &GraphPose<'t, f64>,
    delta: &[Var<'t, f64>; 6],
    r0: Var<'t, f64>,
    r1: Var<'t, f64>,
) -> GraphPose<'t, f64> {
    let gate = (r0 - r1).sigmoid();
    let gated = delta.map(|d| d * gate);
    exp_se3_graph(&gated).compose(x_t)
}

/// Unrolled soft-LM registration on the tape.
///
/// Runs exactly `cfg.iterations` iterations. Per iteration: refresh
/// correspondences at the current iterate, take the error norm `r0` and the
/// damped step, evaluate the full-step lookahead `r1` under the same
/// matches and weights, update the damping, apply the gated step. One extra
/// correspondence refresh evaluates the final residual.
///
/// `frozen_matches`, when given, must hold `iterations + 1` match sets from
/// a previous run's `matches`; the solve then becomes a smooth function of
/// the input coordinates (used by finite-difference probes).
pub fn register_pair_on_tape<'t>(
    tape: &'t Tape<f64>,
    source: &GraphCloud<'t, f64>,
    source_point_weights: Option<Var<'t, f64>>,
    target: &GraphCloud<'t, f64>,
    cfg: &SoftLmConfig,
    frozen_matches: Option<&[MatchSet]>,
) -> Result<GraphRegistration<'t>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::empty("source cloud"));
    }
    if target.is_empty() {
        return Err(Error::empty("target cloud"));
    }
    if let Some(w) = source_point_weights {
        let got = w.shape().len();
        if got != source.len() {
            return Err(Error::LengthMismatch {
                context: "source point weights".into(),
                expected: source.len(),
                got,
            });
        }
    }
    if let Some(f) = frozen_matches {
        if f.len() != cfg.iterations + 1 {
            return Err(Error::LengthMismatch {
                context: "frozen match schedule".into(),
                expected: cfg.iterations + 1,
                got: f.len(),
            });
        }
    }

    let index = KdTree::build(&target.values())?;
    let mut pose = GraphPose::constant(tape, &cfg.init);
    let mut lambda = tape.constant(cfg.lambda_min);
    let mut per_iteration_residuals = Vec::with_capacity(cfg.iterations);
    let mut matches = Vec::with_capacity(cfg.iterations + 1);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for t in 0..cfg.iterations {
        let y = pose.transform(source);
        let (match_set, weights) = find_correspondences(
            &y,
            target,
            &index,
            cfg.max_corr_dist,
            cfg.corr_temperature,
            source_point_weights,
            frozen_matches.map(|f| &f[t]),
        )?;
        let (delta, r0) = gauss_newton_delta(&y, target, &match_set, weights, lambda)?;
        let candidate = exp_se3_graph(&delta).compose(&pose);
        let y1 = candidate.transform(source);
        let r1 = weighted_residual_norm(&y1, target, &match_set, weights);

        trace.push(SolverState {
            iterate: pose.value(),
            r0: r0.scalar_value(),
            r1: r1.scalar_value(),
            delta: delta.map(|d| d.scalar_value()),
            lambda: lambda.scalar_value(),
        });

        lambda = soft_damping(tape, r0, r1, cfg);
        pose = soft_update(&pose, &delta, r0, r1);
        per_iteration_residuals.push(r0);
        matches.push(match_set);
    }

    let y = pose.transform(source);
    let (final_set, final_weights) = find_correspondences(
        &y,
        target,
        &index,
        cfg.max_corr_dist,
        cfg.corr_temperature,
        source_point_weights,
        frozen_matches.map(|f| &f[cfg.iterations]),
    )?;
    let final_residual = weighted_residual_norm(&y, target, &final_set, final_weights);
    matches.push(final_set);

    Ok(GraphRegistration {
        pose,
        final_residual,
        per_iteration_residuals,
        matches,
        trace,
    })
}

/// Downsample both scans, run the unrolled solver on a private tape, and
/// return plain values. The differentiable entry point is
/// [`register_pair_on_tape`]; training paths build their own tape so
/// gradients reach the model outputs.
pub fn register_pair(
    source: &LabeledScan,
    target: &LabeledScan,
    cfg: &SoftLmConfig,
    source_point_weights: Option<&[f64]>,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    source.validate()?;
    target.validate()?;
    if let Some(w) = source_point_weights {
        if w.len() != source.len() {
            return Err(Error::LengthMismatch {
                context: "source point weights".into(),
                expected: source.len(),
                got: w.len(),
            });
        }
    }
    let (src, src_idx) = voxel_downsample(source, cfg.voxel_leaf, cfg.max_points)?;
    let (tgt, _) = voxel_downsample(target, cfg.voxel_leaf, cfg.max_points)?;

    let tape: Tape<f64> = Tape::new();
    let source_cloud = GraphCloud::from_points(&tape, &src.points, false)?;
    let target_cloud = GraphCloud::from_points(&tape, &tgt.points, false)?;
    let weights = match source_point_weights {
        Some(w) => Some(tape.lift(
            Value::vector(src_idx.iter().map(|&i| w[i]).collect()),
            false,
        )?),
        None => None,
    };
    let reg = register_pair_on_tape(&tape, &source_cloud, weights, &target_cloud, cfg, None)?;
    Ok(RegistrationResult {
        relative_pose: reg.pose.value(),
        final_residual: reg.final_residual.scalar_value(),
        per_iteration_residuals: reg
            .per_iteration_residuals
            .iter()
            .map(|r| r.scalar_value())
            .collect(),
        trace: reg.trace,
    })
}
