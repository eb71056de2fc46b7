//! Discrete-switching Levenberg-Marquardt baseline.
//!
//! Same correspondence rule, weights, residuals, and normal equations as
//! the unrolled solver, but classical control flow: a step is accepted only
//! if the lookahead error improves, and the damping factor is halved on
//! accept / doubled on reject (clamped to the configured bounds). Plain
//! double-precision arithmetic, no tape. Serves as the independent
//! comparison point for the soft solver at high switch sharpness.

use super::{cholesky6, RegistrationResult, SoftLmConfig, SolverState};
use crate::error::{Error, Result};
use crate::geometry::{exp_se3, vcross, Pose};
use crate::nn::KdTree;
use crate::scan::voxel_downsample_indices;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Matched {
    weights: Vec<f64>,
    targets: Vec<[f64; 3]>,
}

fn match_points(
    world: &[[f64; 3]],
    index: &KdTree<f64>,
    cfg: &SoftLmConfig,
    point_weights: Option<&[f64]>,
) -> Matched {
    let mut weights = Vec::with_capacity(world.len());
    let mut targets = Vec::with_capacity(world.len());
    for (i, &p) in world.iter().enumerate() {
        let (j, d2) = index.nearest(p);
        let d = d2.sqrt();
        let mut w = sigmoid((cfg.max_corr_dist - d) / cfg.corr_temperature);
        if let Some(pw) = point_weights {
            w *= pw[i];
        }
        weights.push(w);
        targets.push(index.points()[j]);
    }
    Matched { weights, targets }
}

fn residual_norm(world: &[[f64; 3]], m: &Matched) -> f64 {
    let mut s = 0.0;
    for (i, &p) in world.iter().enumerate() {
        let w2 = m.weights[i] * m.weights[i];
        for k in 0..3 {
            let d = p[k] - m.targets[i][k];
            s += w2 * d * d;
        }
    }
    s.sqrt()
}

fn normal_equations(world: &[[f64; 3]], m: &Matched) -> ([[f64; 6]; 6], [f64; 6]) {
    let mut h = [[0.0f64; 6]; 6];
    let mut g = [0.0f64; 6];
    for (i, &y) in world.iter().enumerate() {
        let u = m.weights[i] * m.weights[i];
        let d = [
            y[0] - m.targets[i][0],
            y[1] - m.targets[i][1],
            y[2] - m.targets[i][2],
        ];
        let (a, b, c) = (y[0], y[1], y[2]);
        h[0][0] += u * (b * b + c * c);
        h[1][1] += u * (a * a + c * c);
        h[2][2] += u * (a * a + b * b);
        h[0][1] -= u * a * b;
        h[0][2] -= u * a * c;
        h[1][2] -= u * b * c;
        h[0][4] -= u * c;
        h[0][5] += u * b;
        h[1][3] += u * c;
        h[1][5] -= u * a;
        h[2][3] -= u * b;
        h[2][4] += u * a;
        h[3][3] += u;
        h[4][4] += u;
        h[5][5] += u;
        let yxd = vcross(y, d);
        for k in 0..3 {
            g[k] += u * yxd[k];
            g[3 + k] += u * d[k];
        }
    }
    for i in 0..6 {
        for j in (i + 1)..6 {
            h[j][i] = h[i][j];
        }
    }
    (h, g)
}

fn transform_all(pose: &Pose<f64>, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    points.iter().map(|&p| pose.transform(p)).collect()
}

/// Register two raw point sets with hard LM switching. Both sets are
/// downsampled with the configured leaf and cap, like the soft solver.
pub fn register_pair_hard(
    source: &[[f64; 3]],
    target: &[[f64; 3]],
    cfg: &SoftLmConfig,
    source_point_weights: Option<&[f64]>,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::empty("registration input"));
    }
    let src_idx = voxel_downsample_indices(source, cfg.voxel_leaf, cfg.max_points)?;
    let tgt_idx = voxel_downsample_indices(target, cfg.voxel_leaf, cfg.max_points)?;
    let src: Vec<[f64; 3]> = src_idx.iter().map(|&i| source[i]).collect();
    let tgt: Vec<[f64; 3]> = tgt_idx.iter().map(|&i| target[i]).collect();
    let weights: Option<Vec<f64>> =
        source_point_weights.map(|w| src_idx.iter().map(|&i| w[i]).collect());

    let index = KdTree::build(&tgt)?;
    let mut pose = cfg.init;
    let mut lambda = cfg.lambda_min;
    let mut residuals = Vec::with_capacity(cfg.iterations);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for _ in 0..cfg.iterations {
        let world = transform_all(&pose, &src);
        let matched = match_points(&world, &index, cfg, weights.as_deref());
        let r0 = residual_norm(&world, &matched);
        let (h, g) = normal_equations(&world, &matched);

        if cholesky6(&h, &[0.0; 6]).is_none() {
            return Err(Error::DegenerateGeometry {
                detail: "rank-deficient normal equations (collinear or weightless geometry)"
                    .into(),
            });
        }
        let mut damped = h;
        for i in 0..6 {
            damped[i][i] = h[i][i] * (1.0 + lambda);
        }
        let rhs = [-g[0], -g[1], -g[2], -g[3], -g[4], -g[5]];
        let delta = cholesky6(&damped, &rhs).ok_or_else(|| Error::DegenerateGeometry {
            detail: "damped normal equations lost definiteness".into(),
        })?;

        let candidate = exp_se3(&delta)?.compose(&pose);
        let world1 = transform_all(&candidate, &src);
        let r1 = residual_norm(&world1, &matched);

        trace.push(SolverState {
            iterate: pose,
            r0,
            r1,
            delta,
            lambda,
        });

        if r1 < r0 {
            pose = candidate;
            lambda = (lambda * 0.5).max(cfg.lambda_min);
        } else {
            lambda = (lambda * 2.0).min(cfg.lambda_max);
        }
        residuals.push(r0);
    }

    let world = transform_all(&pose, &src);
    let matched = match_points(&world, &index, cfg, weights.as_deref());
    let final_residual = residual_norm(&world, &matched);

    Ok(RegistrationResult {
        relative_pose: pose,
        final_residual,
        per_iteration_residuals: residuals,
        trace,
    })
}
