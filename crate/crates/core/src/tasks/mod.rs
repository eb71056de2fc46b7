//! Trainable desk-scale models and the interleaved training schedule.
//!
//! Two tasks exercise the trajectory-error signal end to end:
//!
//! - elevation: a pillar-grid regressor predicts per-cell ground height;
//!   its trajectory branch weights the input points by the soft
//!   above-ground mask from predicted elevations, against a reference
//!   branch masked by true elevations;
//! - displacement: a per-point network moves each point of a dynamic scan,
//!   trained to reconstruct the paired static scan (Chamfer), with the
//!   trajectory branch registering its outputs against the static scans.
//!
//! The trajectory loss only enters every `k`-th epoch after a warmup, like
//! the interleaved schedule the full-scale setups use.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::GraphCloud;
use crate::losses::{
    self, chamfer_on_tape, combined_loss, model_loss, reference_trajectory, regularizer,
    resolve_gamma, slam_loss_with_reference, soft_above_ground_mask, LossConfig, PredictedScan,
    ReferenceScan,
};
use crate::registration::SoftLmConfig;
use crate::scan::{voxel_downsample, LabeledScan, PointLabel};
use crate::synthworld::{FramePair, Sequence};
use crate::trajectory::{chain_odometry, chamfer, Trajectory};

// ---------------------------------------------------------------------------
// pillar grid

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub cell_size: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x_range: [-32.0, 32.0],
            y_range: [-32.0, 32.0],
            cell_size: 2.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) {
            return Err(Error::invalid_config("grid.cell_size", "must be positive"));
        }
        for (name, range) in [("x_range", self.x_range), ("y_range", self.y_range)] {
            let w = range[1] - range[0];
            if !(w > 0.0) {
                return Err(Error::invalid_config(
                    format!("grid.{name}"),
                    "must be ascending",
                ));
            }
            let cells = w / self.cell_size;
            if (cells - cells.round()).abs() > 1e-9 {
                return Err(Error::invalid_config(
                    format!("grid.{name}"),
                    "width must be a positive multiple of cell_size",
                ));
            }
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        ((self.x_range[1] - self.x_range[0]) / self.cell_size).round() as usize
    }

    pub fn ny(&self) -> usize {
        ((self.y_range[1] - self.y_range[0]) / self.cell_size).round() as usize
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let ix = ((x - self.x_range[0]) / self.cell_size).floor();
        let iy = ((y - self.y_range[0]) / self.cell_size).floor();
        if ix < 0.0 || iy < 0.0 || ix >= self.nx() as f64 || iy >= self.ny() as f64 {
            return None;
        }
        Some(iy as usize * self.nx() + ix as usize)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CellFeatures {
    pub count: usize,
    pub mean_z: f64,
    pub min_z: f64,
    pub max_z: f64,
    pub mean_range: f64,
}

#[derive(Debug, Clone)]
pub struct PillarGrid {
    pub features: Vec<Option<CellFeatures>>,
    /// Per input point: its cell id, or `None` when outside the grid.
    pub point_cell: Vec<Option<usize>>,
    pub dropped: usize,
    /// Ascending ids of non-empty cells; model outputs follow this order.
    pub occupied: Vec<usize>,
}

/// Deterministic cell assignment `floor((x - x_min) / cell)`; points
/// outside the grid are dropped and counted.
pub fn pillarize(scan: &LabeledScan, grid: &GridSpec) -> Result<PillarGrid> {
    grid.validate()?;
    scan.validate()?;
    let n_cells = grid.nx() * grid.ny();
    struct Acc {
        count: usize,
        sum_z: f64,
        min_z: f64,
        max_z: f64,
        sum_range: f64,
    }
    let mut acc: HashMap<usize, Acc> = HashMap::new();
    let mut point_cell = Vec::with_capacity(scan.len());
    let mut dropped = 0usize;
    for p in &scan.points {
        match grid.cell_of(p[0], p[1]) {
            Some(c) => {
                point_cell.push(Some(c));
                let e = acc.entry(c).or_insert(Acc {
                    count: 0,
                    sum_z: 0.0,
                    min_z: f64::INFINITY,
                    max_z: f64::NEG_INFINITY,
                    sum_range: 0.0,
                });
                e.count += 1;
                e.sum_z += p[2];
                e.min_z = e.min_z.min(p[2]);
                e.max_z = e.max_z.max(p[2]);
                e.sum_range += (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            }
            None => {
                point_cell.push(None);
                dropped += 1;
            }
        }
    }
    let mut features = vec![None; n_cells];
    for (c, a) in &acc {
        features[*c] = Some(CellFeatures {
            count: a.count,
            mean_z: a.sum_z / a.count as f64,
            min_z: a.min_z,
            max_z: a.max_z,
            mean_range: a.sum_range / a.count as f64,
        });
    }
    let mut occupied: Vec<usize> = acc.keys().copied().collect();
    occupied.sort_unstable();
    Ok(PillarGrid {
        features,
        point_cell,
        dropped,
        occupied,
    })
}

pub(crate) fn feature_vector(f: &CellFeatures) -> [f64; 5] {
    [
        f.count as f64 / 64.0,
        f.mean_z,
        f.min_z,
        f.max_z,
        f.mean_range / 32.0,
    ]
}

// ---------------------------------------------------------------------------
// models

const ELEV_IN: usize = 5;
const ELEV_HIDDEN: usize = 16;
const ELEV_PARAMS: usize = ELEV_IN * ELEV_HIDDEN + ELEV_HIDDEN + ELEV_HIDDEN + 1;

const DISP_HIDDEN: usize = 32;
const DISP_PARAMS: usize = 3 * DISP_HIDDEN
    + DISP_HIDDEN
    + DISP_HIDDEN * DISP_HIDDEN
    + DISP_HIDDEN
    + DISP_HIDDEN * 3
    + 3;

/// Correction magnitude bound of the displacement model (meters).
pub const CORRECTION_CLAMP: f64 = 2.0;

fn uniform_init(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Per-cell ground-height regressor: dense 5 -> 16 (tanh) -> 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationModel {
    params: Vec<f64>,
}

impl ElevationModel {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = uniform_init(&mut rng, ELEV_IN * ELEV_HIDDEN + ELEV_HIDDEN, 0.45);
        params.extend(uniform_init(&mut rng, ELEV_HIDDEN + 1, 0.1));
        ElevationModel { params }
    }

    pub fn zeros() -> Self {
        ElevationModel {
            params: vec![0.0; ELEV_PARAMS],
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn to_arrays(&self) -> BTreeMap<String, Vec<f64>> {
        let mut m = BTreeMap::new();
        let w1_end = ELEV_IN * ELEV_HIDDEN;
        let b1_end = w1_end + ELEV_HIDDEN;
        let w2_end = b1_end + ELEV_HIDDEN;
        m.insert("w1".into(), self.params[..w1_end].to_vec());
        m.insert("b1".into(), self.params[w1_end..b1_end].to_vec());
        m.insert("w2".into(), self.params[b1_end..w2_end].to_vec());
        m.insert("b2".into(), self.params[w2_end..].to_vec());
        m
    }

    pub fn from_arrays(arrays: &BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let mut params = Vec::with_capacity(ELEV_PARAMS);
        for (name, len) in [
            ("w1", ELEV_IN * ELEV_HIDDEN),
            ("b1", ELEV_HIDDEN),
            ("w2", ELEV_HIDDEN),
            ("b2", 1),
        ] {
            let arr = arrays.get(name).ok_or_else(|| Error::BadFile {
                path: "checkpoint".into(),
                reason: format!("missing array `{name}`"),
            })?;
            if arr.len() != len {
                return Err(Error::LengthMismatch {
                    context: format!("checkpoint array `{name}`"),
                    expected: len,
                    got: arr.len(),
                });
            }
            params.extend_from_slice(arr);
        }
        Ok(ElevationModel { params })
    }

    /// Plain forward pass over per-cell features (normalization applied
    /// internally, matching the tape forward).
    pub fn forward_values(&self, features: &[CellFeatures]) -> Vec<f64> {
        let feats: Vec<[f64; 5]> = features.iter().map(feature_vector).collect();
        forward_elevation_normalized(self, &feats)
    }
}

/// Forward pass on the tape over the occupied cells of a pillar grid.
/// `params` are the lifted parameter leaves; returns one elevation per
/// occupied cell, in `grid.occupied` order.
pub fn elevation_forward<'t>(
    tape: &'t Tape<f64>,
    params: &[Var<'t, f64>],
    grid: &PillarGrid,
) -> Result<Var<'t, f64>> {
    assert_eq!(params.len(), ELEV_PARAMS, "elevation parameter count");
    if grid.occupied.is_empty() {
        return Err(Error::empty("pillar grid (no occupied cells)"));
    }
    let c = grid.occupied.len();
    let mut cols = Vec::with_capacity(ELEV_IN);
    for k in 0..ELEV_IN {
        let data: Vec<f64> = grid
            .occupied
            .iter()
            .map(|&cell| feature_vector(grid.features[cell].as_ref().expect("occupied"))[k])
            .collect();
        cols.push(tape.vector(data, false)?);
    }
    let w1 = &params[..ELEV_IN * ELEV_HIDDEN];
    let b1 = &params[ELEV_IN * ELEV_HIDDEN..ELEV_IN * ELEV_HIDDEN + ELEV_HIDDEN];
    let w2 = &params[ELEV_IN * ELEV_HIDDEN + ELEV_HIDDEN..ELEV_IN * ELEV_HIDDEN + 2 * ELEV_HIDDEN];
    let b2 = params[ELEV_PARAMS - 1];

    let mut out = b2 * tape.constant(1.0);
    let _ = c;
    for j in 0..ELEV_HIDDEN {
        let mut pre = cols[0] * w1[j * ELEV_IN];
        for k in 1..ELEV_IN {
            pre = pre + cols[k] * w1[j * ELEV_IN + k];
        }
        let h = (pre + b1[j]).tanh();
        out = out + h * w2[j];
    }
    Ok(out)
}

/// Fill empty cells with the mean of filled neighbors, dilating until the
/// grid is covered; anything still unreached (fully empty grid) becomes 0.
/// Not differentiable; excluded from losses.
pub fn fill_empty_cells(grid: &GridSpec, occupied: &[usize], values: &[f64]) -> Vec<f64> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut full = vec![f64::NAN; nx * ny];
    for (pos, &cell) in occupied.iter().enumerate() {
        full[cell] = values[pos];
    }
    loop {
        let mut next = full.clone();
        let mut changed = false;
        for iy in 0..ny {
            for ix in 0..nx {
                let c = iy * nx + ix;
                if full[c].is_nan() {
                    let mut sum = 0.0;
                    let mut cnt = 0usize;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
                            if jx < 0 || jy < 0 || jx >= nx as i64 || jy >= ny as i64 {
                                continue;
                            }
                            let v = full[jy as usize * nx + jx as usize];
                            if !v.is_nan() {
                                sum += v;
                                cnt += 1;
                            }
                        }
                    }
                    if cnt > 0 {
                        next[c] = sum / cnt as f64;
                        changed = true;
                    }
                }
            }
        }
        full = next;
        if !changed {
            break;
        }
    }
    for v in full.iter_mut() {
        if v.is_nan() {
            *v = 0.0;
        }
    }
    full
}

/// Per-point displacement network: dense 3 -> 32 -> 32 -> 3 with tanh
/// hidden activations; the output correction is clamped to +-2 m and added
/// to the input point.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementModel {
    params: Vec<f64>,
}

impl DisplacementModel {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = uniform_init(
            &mut rng,
            3 * DISP_HIDDEN + DISP_HIDDEN,
            1.0 / (3.0f64).sqrt(),
        );
        params.extend(uniform_init(
            &mut rng,
            DISP_HIDDEN * DISP_HIDDEN + DISP_HIDDEN,
            1.0 / (DISP_HIDDEN as f64).sqrt(),
        ));
        // Small final layer: the model starts near the identity map.
        params.extend(uniform_init(&mut rng, DISP_HIDDEN * 3 + 3, 0.01));
        DisplacementModel { params }
    }

    pub fn zeros() -> Self {
        DisplacementModel {
            params: vec![0.0; DISP_PARAMS],
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn to_arrays(&self) -> BTreeMap<String, Vec<f64>> {
        let mut m = BTreeMap::new();
        let mut off = 0usize;
        for (name, len) in Self::layout() {
            m.insert(name.to_string(), self.params[off..off + len].to_vec());
            off += len;
        }
        m
    }

    pub fn from_arrays(arrays: &BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let mut params = Vec::with_capacity(DISP_PARAMS);
        for (name, len) in Self::layout() {
            let arr = arrays.get(name).ok_or_else(|| Error::BadFile {
                path: "checkpoint".into(),
                reason: format!("missing array `{name}`"),
            })?;
            if arr.len() != len {
                return Err(Error::LengthMismatch {
                    context: format!("checkpoint array `{name}`"),
                    expected: len,
                    got: arr.len(),
                });
            }
            params.extend_from_slice(arr);
        }
        Ok(DisplacementModel { params })
    }

    fn layout() -> [(&'static str, usize); 6] {
        [
            ("w1", 3 * DISP_HIDDEN),
            ("b1", DISP_HIDDEN),
            ("w2", DISP_HIDDEN * DISP_HIDDEN),
            ("b2", DISP_HIDDEN),
            ("w3", DISP_HIDDEN * 3),
            ("b3", 3),
        ]
    }

    pub fn forward_values(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let p = &self.params;
        let (w1, rest) = p.split_at(3 * DISP_HIDDEN);
        let (b1, rest) = rest.split_at(DISP_HIDDEN);
        let (w2, rest) = rest.split_at(DISP_HIDDEN * DISP_HIDDEN);
        let (b2, rest) = rest.split_at(DISP_HIDDEN);
        let (w3, b3) = rest.split_at(DISP_HIDDEN * 3);
        points
            .iter()
            .map(|pt| {
                let mut h1 = [0.0f64; DISP_HIDDEN];
                for j in 0..DISP_HIDDEN {
                    let mut a = b1[j];
                    for k in 0..3 {
                        a += w1[j * 3 + k] * pt[k];
                    }
                    h1[j] = a.tanh();
                }
                let mut h2 = [0.0f64; DISP_HIDDEN];
                for j in 0..DISP_HIDDEN {
                    let mut a = b2[j];
                    for (k, h) in h1.iter().enumerate() {
                        a += w2[j * DISP_HIDDEN + k] * h;
                    }
                    h2[j] = a.tanh();
                }
                let mut out = *pt;
                for j in 0..3 {
                    let mut a = b3[j];
                    for (k, h) in h2.iter().enumerate() {
                        a += w3[j * DISP_HIDDEN + k] * h;
                    }
                    out[j] += a.clamp(-CORRECTION_CLAMP, CORRECTION_CLAMP);
                }
                out
            })
            .collect()
    }
}

/// Displacement forward pass on the tape: input columns (usually constants)
/// to corrected output columns, differentiable in the parameters and the
/// input coordinates.
pub fn displacement_forward<'t>(
    params: &[Var<'t, f64>],
    cloud: &GraphCloud<'t, f64>,
) -> GraphCloud<'t, f64> {
    assert_eq!(params.len(), DISP_PARAMS, "displacement parameter count");
    let w1 = &params[..3 * DISP_HIDDEN];
    let mut off = 3 * DISP_HIDDEN;
    let b1 = &params[off..off + DISP_HIDDEN];
    off += DISP_HIDDEN;
    let w2 = &params[off..off + DISP_HIDDEN * DISP_HIDDEN];
    off += DISP_HIDDEN * DISP_HIDDEN;
    let b2 = &params[off..off + DISP_HIDDEN];
    off += DISP_HIDDEN;
    let w3 = &params[off..off + DISP_HIDDEN * 3];
    off += DISP_HIDDEN * 3;
    let b3 = &params[off..off + 3];

    let inputs = [cloud.x, cloud.y, cloud.z];
    let mut h1 = Vec::with_capacity(DISP_HIDDEN);
    for j in 0..DISP_HIDDEN {
        let mut a = inputs[0] * w1[j * 3];
        for (k, col) in inputs.iter().enumerate().skip(1) {
            a = a + *col * w1[j * 3 + k];
        }
        h1.push((a + b1[j]).tanh());
    }
    let mut h2 = Vec::with_capacity(DISP_HIDDEN);
    for j in 0..DISP_HIDDEN {
        let mut a = h1[0] * w2[j * DISP_HIDDEN];
        for (k, h) in h1.iter().enumerate().skip(1) {
            a = a + *h * w2[j * DISP_HIDDEN + k];
        }
        h2.push((a + b2[j]).tanh());
    }
    let mut out = Vec::with_capacity(3);
    for j in 0..3 {
        let mut a = h2[0] * w3[j * DISP_HIDDEN];
        for (k, h) in h2.iter().enumerate().skip(1) {
            a = a + *h * w3[j * DISP_HIDDEN + k];
        }
        let correction = (a + b3[j]).clamp(-CORRECTION_CLAMP, CORRECTION_CLAMP);
        out.push(inputs[j] + correction);
    }
    GraphCloud::from_columns(out[0], out[1], out[2])
}

fn lift_params<'t>(tape: &'t Tape<f64>, params: &[f64]) -> Vec<Var<'t, f64>> {
    params.iter().map(|&p| tape.scalar(p)).collect()
}

// ---------------------------------------------------------------------------
// segmentation scoring

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    /// Per-cell elevation MSE over cells that contain ground points.
    pub mse: f64,
    /// Mean of the ground-class and non-ground-class IoU.
    pub miou: f64,
    /// Precision of the non-ground class.
    pub precision: f64,
    /// Recall of the non-ground class.
    pub recall: f64,
}

/// Per-cell target: mean true elevation of the ground-labeled points in the
/// cell; `None` where the cell holds no ground points.
pub fn cell_ground_targets(scan: &LabeledScan, grid: &PillarGrid) -> Result<Vec<Option<f64>>> {
    let labels = scan.labels.as_ref().ok_or_else(|| Error::BadFile {
        path: "scan".into(),
        reason: "elevation task needs labeled scans".into(),
    })?;
    let elev = scan.true_elevation.as_ref().ok_or_else(|| Error::BadFile {
        path: "scan".into(),
        reason: "elevation task needs the true-elevation sidecar".into(),
    })?;
    let mut sums: HashMap<usize, (f64, usize)> = HashMap::new();
    for (i, cell) in grid.point_cell.iter().enumerate() {
        if let Some(c) = cell {
            if labels[i] == PointLabel::Ground {
                let e = sums.entry(*c).or_insert((0.0, 0));
                e.0 += elev[i];
                e.1 += 1;
            }
        }
    }
    Ok(grid
        .occupied
        .iter()
        .map(|c| sums.get(c).map(|(s, n)| s / *n as f64))
        .collect())
}

/// Hard segmentation by the threshold rule plus the evaluation metrics.
/// `cell_elevation` is the full grid (empty cells filled); points outside
/// the grid are excluded from the confusion counts.
pub fn segment_and_score(
    scan: &LabeledScan,
    grid: &PillarGrid,
    grid_spec: &GridSpec,
    cell_elevation: &[f64],
    tau: f64,
) -> Result<(Vec<Option<bool>>, SegMetrics)> {
    let labels = scan.labels.as_ref().ok_or_else(|| Error::BadFile {
        path: "scan".into(),
        reason: "segmentation scoring needs labeled scans".into(),
    })?;
    if cell_elevation.len() != grid_spec.nx() * grid_spec.ny() {
        return Err(Error::LengthMismatch {
            context: "cell elevation grid".into(),
            expected: grid_spec.nx() * grid_spec.ny(),
            got: cell_elevation.len(),
        });
    }
    let mut pred = Vec::with_capacity(scan.len());
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (i, cell) in grid.point_cell.iter().enumerate() {
        match cell {
            Some(c) => {
                let non_ground = losses::hard_above_ground(
                    scan.points[i][2],
                    cell_elevation[*c],
                    tau,
                );
                pred.push(Some(non_ground));
                let truth_non_ground = labels[i] != PointLabel::Ground;
                match (non_ground, truth_non_ground) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            None => pred.push(None),
        }
    }

    let targets = cell_ground_targets(scan, grid)?;
    let mut mse = 0.0;
    let mut cells = 0usize;
    for (pos, target) in targets.iter().enumerate() {
        if let Some(t) = target {
            let d = cell_elevation[grid.occupied[pos]] - t;
            mse += d * d;
            cells += 1;
        }
    }
    let mse = if cells > 0 { mse / cells as f64 } else { 0.0 };

    let ratio = |num: usize, den: usize| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let iou_non_ground = ratio(tp, tp + fp + fn_);
    let iou_ground = ratio(tn, tn + fp + fn_);
    let metrics = SegMetrics {
        mse,
        miou: 0.5 * (iou_ground + iou_non_ground),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
    };
    Ok((pred, metrics))
}

// ---------------------------------------------------------------------------
// schedule and training

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// Epochs before the trajectory loss is ever evaluated.
    pub warmup: usize,
    /// The trajectory loss joins every k-th epoch after warmup.
    #[serde(rename = "k")]
    pub slam_period: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub seed: u64,
    /// Length of the contiguous mini-sequences the loss is assembled over.
    #[serde(rename = "s")]
    pub mini_sequence_length: usize,
    /// Global gradient-norm clip; `null` disables.
    pub grad_clip: Option<f64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 40,
            warmup: 5,
            slam_period: 2,
            learning_rate: 0.02,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            seed: 0,
            mini_sequence_length: 4,
            grad_clip: Some(10.0),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid_config("schedule.epochs", "must be positive"));
        }
        if self.warmup >= self.epochs {
            return Err(Error::invalid_config(
                "schedule.warmup",
                "must be below epochs",
            ));
        }
        if self.slam_period == 0 {
            return Err(Error::invalid_config("schedule.k", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid_config(
                "schedule.learning_rate",
                "must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid_config(
                "schedule.momentum",
                "must be in [0, 1)",
            ));
        }
        if self.mini_sequence_length < 2 {
            return Err(Error::invalid_config(
                "schedule.s",
                "mini-sequences need at least 2 frames",
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid_config(
                    "schedule.grad_clip",
                    "must be positive when set",
                ));
            }
        }
        Ok(())
    }

    /// Whether the trajectory loss is evaluated at this (0-based) epoch.
    pub fn slam_active(&self, epoch: usize) -> bool {
        epoch >= self.warmup && (epoch - self.warmup) % self.slam_period == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Elevation,
    Displacement,
}

/// Registration settings for the per-epoch holdout odometry metric; lighter
/// than the training solve so evaluation stays cheap.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub registration: SoftLmConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            registration: SoftLmConfig {
                iterations: 12,
                max_points: 256,
                ..SoftLmConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub task: TaskKind,
    pub schedule: TrainSchedule,
    pub loss: LossConfig,
    pub registration: SoftLmConfig,
    pub grid: GridSpec,
    pub eval: EvalConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        self.registration.validate()?;
        self.grid.validate()?;
        self.eval.registration.validate()
    }
}

/// Training data: paired frames plus the ground-truth trajectory; the first
/// `n_train` frames train, the remainder is held out for metrics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub frames: Vec<FramePair>,
    pub trajectory: Trajectory<f64>,
    pub n_train: usize,
}

impl Dataset {
    pub fn from_sequence(seq: Sequence, n_train: usize) -> Result<Self> {
        if seq.frames.len() < 4 {
            return Err(Error::TooFewScans {
                context: "dataset".into(),
                needed: 4,
                got: seq.frames.len(),
            });
        }
        if n_train < 2 || n_train > seq.frames.len() {
            return Err(Error::invalid_config(
                "n_train",
                "need at least 2 training frames and no more than the sequence",
            ));
        }
        for (i, f) in seq.frames.iter().enumerate() {
            if f.dynamic.frame_index != i || f.static_scan.frame_index != i {
                return Err(Error::NonContiguousFrames { after: i.saturating_sub(1) });
            }
        }
        Ok(Dataset {
            frames: seq.frames,
            trajectory: seq.trajectory,
            n_train,
        })
    }

    pub fn holdout(&self) -> &[FramePair] {
        &self.frames[self.n_train..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_model: f64,
    pub l_slam: Option<f64>,
    pub combined: f64,
    pub mse: Option<f64>,
    pub miou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub chamfer: Option<f64>,
    pub ate: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum TrainedModel {
    Elevation(ElevationModel),
    Displacement(DisplacementModel),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
    /// Trajectory-loss weight actually used (resolved if it was automatic),
    /// `None` when no epoch computed the trajectory loss.
    pub gamma: Option<f64>,
}

/// Per-frame precomputed training inputs (constants of the whole run).
struct FrameCache {
    /// Pillarization of the dynamic scan (elevation task).
    grid: Option<PillarGrid>,
    /// Positions (into `grid.occupied`) and values of the cell targets.
    elev_targets: (Vec<usize>, Vec<f64>),
    /// Downsampled dynamic scan restricted to in-grid points.
    dyn_ds: LabeledScan,
    /// Per ds-point position of its cell in `grid.occupied`.
    dyn_ds_cell_pos: Vec<usize>,
    /// Reference mask weights from true elevations (constants).
    ref_mask: Vec<f64>,
    /// Downsampled static scan (displacement task).
    static_ds: LabeledScan,
}

fn window_ranges(n: usize, s: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + s).min(n);
        // Never leave a trailing single frame: attach it to this window.
        if n - end == 1 {
            end = n;
        }
        out.push(start..end);
        start = end;
    }
    out
}

fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Train a task model with the interleaved schedule. Deterministic for a
/// fixed seed on a fixed floating-point environment.
pub fn train(dataset: &Dataset, setup: &TrainSetup) -> Result<TrainOutcome> {
    setup.validate()?;
    if dataset.n_train < setup.schedule.mini_sequence_length.min(2) {
        return Err(Error::invalid_config(
            "n_train",
            "too few training frames for the mini-sequence length",
        ));
    }

    let elevation = matches!(setup.task, TaskKind::Elevation);
    let tau = setup.loss.mask_tau;
    let temp = setup.loss.mask_temperature;

    // Frame-constant preprocessing.
    let mut cache = Vec::with_capacity(dataset.n_train);
    for pair in &dataset.frames[..dataset.n_train] {
        let (grid, elev_targets, dyn_ds, dyn_ds_cell_pos, ref_mask) = if elevation {
            let grid = pillarize(&pair.dynamic, &setup.grid)?;
            let targets = cell_ground_targets(&pair.dynamic, &grid)?;
            let (positions, values): (Vec<usize>, Vec<f64>) = targets
                .iter()
                .enumerate()
                .filter_map(|(pos, t)| t.map(|v| (pos, v)))
                .unzip();
            // Cell-position lookup for occupied cells.
            let mut cell_pos: HashMap<usize, usize> = HashMap::new();
            for (pos, &cell) in grid.occupied.iter().enumerate() {
                cell_pos.insert(cell, pos);
            }
            let (ds, ds_idx) = voxel_downsample(
                &pair.dynamic,
                setup.registration.voxel_leaf,
                setup.registration.max_points,
            )?;
            // Keep only ds points that fall in an occupied grid cell.
            let mut keep = Vec::new();
            for (k, &orig) in ds_idx.iter().enumerate() {
                if let Some(c) = grid.point_cell[orig] {
                    debug_assert!(cell_pos.contains_key(&c));
                    keep.push((k, cell_pos[&c]));
                }
            }
            let kept_local: Vec<usize> = keep.iter().map(|&(k, _)| k).collect();
            let ds = ds.select(&kept_local);
            let positions_per_point: Vec<usize> = keep.iter().map(|&(_, p)| p).collect();
            let ref_mask: Vec<f64> = ds
                .points
                .iter()
                .zip(ds.true_elevation.as_ref().ok_or_else(|| Error::BadFile {
                    path: "scan".into(),
                    reason: "elevation task needs the true-elevation sidecar".into(),
                })?)
                .map(|(p, &e)| {
                    let x = (p[2] - (e + tau)) / temp;
                    1.0 / (1.0 + (-x).exp())
                })
                .collect();
            (Some(grid), (positions, values), ds, positions_per_point, ref_mask)
        } else {
            let (ds, _) = voxel_downsample(
                &pair.dynamic,
                setup.registration.voxel_leaf,
                setup.registration.max_points,
            )?;
            (None, (Vec::new(), Vec::new()), ds, Vec::new(), Vec::new())
        };
        let (static_ds, _) = voxel_downsample(
            &pair.static_scan,
            setup.registration.voxel_leaf,
            setup.registration.max_points,
        )?;
        cache.push(FrameCache {
            grid,
            elev_targets,
            dyn_ds,
            dyn_ds_cell_pos,
            ref_mask,
            static_ds,
        });
    }

    let windows = window_ranges(dataset.n_train, setup.schedule.mini_sequence_length);
    let mut ref_trajectories: HashMap<usize, Trajectory<f64>> = HashMap::new();

    let mut params: Vec<f64> = match setup.task {
        TaskKind::Elevation => ElevationModel::init(setup.schedule.seed).params,
        TaskKind::Displacement => DisplacementModel::init(setup.schedule.seed).params,
    };
    let mut velocity = vec![0.0f64; params.len()];
    let momentum = match setup.schedule.optimizer {
        OptimizerKind::Sgd => 0.0,
        OptimizerKind::SgdMomentum => setup.schedule.momentum,
    };

    let mut gamma: Option<f64> = setup.loss.gamma;
    let mut gamma_used: Option<f64> = None;
    let mut history = Vec::with_capacity(setup.schedule.epochs);

    for epoch in 0..setup.schedule.epochs {
        let slam = setup.schedule.slam_active(epoch);
        let mut epoch_model = 0.0;
        let mut epoch_slam = 0.0;
        let mut epoch_combined = 0.0;

        for window in &windows {
            let tape: Tape<f64> = Tape::new();
            let lifted = lift_params(&tape, &params);
            let frames = &cache[window.clone()];

            // Model loss over the window.
            let mut data_terms = tape.constant(0.0);
            let mut predicted_scans: Vec<PredictedScan<'_>> = Vec::new();
            for f in frames {
                match setup.task {
                    TaskKind::Elevation => {
                        let grid = f.grid.as_ref().expect("elevation cache");
                        let pred = elevation_forward(&tape, &lifted, grid)?;
                        let (positions, values) = &f.elev_targets;
                        if !positions.is_empty() {
                            let sel = pred.gather(positions);
                            let tgt = tape.vector(values.clone(), false)?;
                            data_terms = data_terms + model_loss(sel, tgt, &[], &setup.loss)?;
                        }
                        if slam {
                            let cloud =
                                GraphCloud::from_points(&tape, &f.dyn_ds.points, false)?;
                            let elev_per_point = pred.gather(&f.dyn_ds_cell_pos);
                            let mask =
                                soft_above_ground_mask(cloud.z, elev_per_point, tau, temp);
                            predicted_scans.push(PredictedScan {
                                cloud,
                                weights: Some(mask),
                            });
                        }
                    }
                    TaskKind::Displacement => {
                        let input = GraphCloud::from_points(&tape, &f.dyn_ds.points, false)?;
                        let out = displacement_forward(&lifted, &input);
                        let target =
                            GraphCloud::from_points(&tape, &f.static_ds.points, false)?;
                        data_terms = data_terms + chamfer_on_tape(&out, &target)?;
                        if slam {
                            predicted_scans.push(PredictedScan {
                                cloud: out,
                                weights: None,
                            });
                        }
                    }
                }
            }
            let n_frames = window.len() as f64;
            let l_model =
                data_terms / n_frames + regularizer(&tape, &lifted) * setup.loss.beta;

            let total = if slam {
                let ref_traj = match ref_trajectories.get(&window.start) {
                    Some(t) => t.clone(),
                    None => {
                        let scans: Vec<ReferenceScan> = frames
                            .iter()
                            .map(|f| match setup.task {
                                TaskKind::Elevation => ReferenceScan {
                                    points: f.dyn_ds.points.clone(),
                                    weights: Some(f.ref_mask.clone()),
                                },
                                TaskKind::Displacement => ReferenceScan {
                                    points: f.static_ds.points.clone(),
                                    weights: None,
                                },
                            })
                            .collect();
                        let t = reference_trajectory(&scans, &setup.registration)?;
                        ref_trajectories.insert(window.start, t.clone());
                        t
                    }
                };
                let l_slam = slam_loss_with_reference(
                    &tape,
                    &predicted_scans,
                    &ref_traj,
                    &setup.registration,
                    &setup.loss,
                )?;
                let (lm, ls) = (l_model.scalar_value(), l_slam.scalar_value());
                let g = *gamma.get_or_insert_with(|| resolve_gamma(None, lm, ls));
                gamma_used = Some(g);
                epoch_slam += ls * n_frames;
                combined_loss(l_model, l_slam, g)
            } else {
                l_model
            };

            let total_value = total.scalar_value();
            if !total_value.is_finite() {
                return Err(Error::TrainDiverged { epoch });
            }
            epoch_model += l_model.scalar_value() * n_frames;
            epoch_combined += total_value * n_frames;

            tape.backward(total)?;
            let mut grads: Vec<f64> = lifted.iter().map(|p| p.grad().as_scalar()).collect();
            if let Some(clip) = setup.schedule.grad_clip {
                let norm = global_norm(&grads);
                if norm > clip {
                    let scale = clip / norm;
                    for g in grads.iter_mut() {
                        *g *= scale;
                    }
                }
            }
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
                *v = momentum * *v - setup.schedule.learning_rate * g;
                *p += *v;
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::TrainDiverged { epoch });
            }
        }

        let n_train = dataset.n_train as f64;
        let record = evaluate_epoch(
            dataset,
            setup,
            &params,
            EpochRecord {
                epoch,
                l_model: epoch_model / n_train,
                l_slam: slam.then_some(epoch_slam / n_train),
                combined: epoch_combined / n_train,
                mse: None,
                miou: None,
                precision: None,
                recall: None,
                chamfer: None,
                ate: None,
            },
        )?;
        history.push(record);
    }

    let model = match setup.task {
        TaskKind::Elevation => TrainedModel::Elevation(ElevationModel { params }),
        TaskKind::Displacement => TrainedModel::Displacement(DisplacementModel { params }),
    };
    Ok(TrainOutcome {
        model,
        history,
        gamma: gamma_used,
    })
}

/// Holdout metrics for one parameter vector; fills the metric columns of
/// the given record.
fn evaluate_epoch(
    dataset: &Dataset,
    setup: &TrainSetup,
    params: &[f64],
    mut record: EpochRecord,
) -> Result<EpochRecord> {
    let holdout = dataset.holdout();
    if holdout.is_empty() {
        return Ok(record);
    }
    match setup.task {
        TaskKind::Elevation => {
            let model = ElevationModel {
                params: params.to_vec(),
            };
            let m = evaluate_elevation(&model, holdout, &setup.grid, setup.loss.mask_tau)?;
            record.mse = Some(m.mse);
            record.miou = Some(m.miou);
            record.precision = Some(m.precision);
            record.recall = Some(m.recall);
        }
        TaskKind::Displacement => {
            let model = DisplacementModel {
                params: params.to_vec(),
            };
            let (ch, ate) = evaluate_displacement(&model, dataset, &setup.eval)?;
            record.chamfer = Some(ch);
            record.ate = ate;
        }
    }
    Ok(record)
}

/// Mean holdout segmentation metrics of an elevation model.
pub fn evaluate_elevation(
    model: &ElevationModel,
    frames: &[FramePair],
    grid_spec: &GridSpec,
    tau: f64,
) -> Result<SegMetrics> {
    if frames.is_empty() {
        return Err(Error::empty("evaluation frames"));
    }
    let mut acc = SegMetrics {
        mse: 0.0,
        miou: 0.0,
        precision: 0.0,
        recall: 0.0,
    };
    for pair in frames {
        let grid = pillarize(&pair.dynamic, grid_spec)?;
        let feats: Vec<[f64; 5]> = grid
            .occupied
            .iter()
            .map(|&c| feature_vector(grid.features[c].as_ref().expect("occupied")))
            .collect();
        // forward_values consumes normalized features.
        let values = forward_elevation_normalized(model, &feats);
        let full = fill_empty_cells(grid_spec, &grid.occupied, &values);
        let (_, m) = segment_and_score(&pair.dynamic, &grid, grid_spec, &full, tau)?;
        acc.mse += m.mse;
        acc.miou += m.miou;
        acc.precision += m.precision;
        acc.recall += m.recall;
    }
    let n = frames.len() as f64;
    Ok(SegMetrics {
        mse: acc.mse / n,
        miou: acc.miou / n,
        precision: acc.precision / n,
        recall: acc.recall / n,
    })
}

/// Forward pass over already-normalized feature rows.
fn forward_elevation_normalized(model: &ElevationModel, feats: &[[f64; 5]]) -> Vec<f64> {
    let p = model.params();
    let (w1, rest) = p.split_at(ELEV_IN * ELEV_HIDDEN);
    let (b1, rest) = rest.split_at(ELEV_HIDDEN);
    let (w2, b2) = rest.split_at(ELEV_HIDDEN);
    feats
        .iter()
        .map(|f| {
            let mut out = b2[0];
            for j in 0..ELEV_HIDDEN {
                let mut pre = b1[j];
                for (k, fk) in f.iter().enumerate() {
                    pre += w1[j * ELEV_IN + k] * fk;
                }
                out += w2[j] * pre.tanh();
            }
            out
        })
        .collect()
}

/// Holdout Chamfer (full scans) and odometry ATE of a displacement model's
/// outputs against the ground-truth trajectory segment. ATE needs at least
/// two holdout frames.
pub fn evaluate_displacement(
    model: &DisplacementModel,
    dataset: &Dataset,
    eval: &EvalConfig,
) -> Result<(f64, Option<f64>)> {
    let holdout = dataset.holdout();
    if holdout.is_empty() {
        return Err(Error::empty("evaluation frames"));
    }
    let mut ch_acc = 0.0;
    let mut predicted_scans = Vec::with_capacity(holdout.len());
    for pair in holdout {
        let predicted = model.forward_values(&pair.dynamic.points);
        ch_acc += chamfer(&predicted, &pair.static_scan.points)?;
        predicted_scans.push(LabeledScan::bare(predicted, pair.dynamic.frame_index));
    }
    let ch = ch_acc / holdout.len() as f64;

    let ate = if holdout.len() >= 2 {
        let est = chain_odometry(&predicted_scans, &eval.registration, None)?;
        let gt_poses: Vec<_> = dataset.trajectory.poses()[dataset.n_train..].to_vec();
        let gt = Trajectory::from_poses(
            gt_poses,
            holdout.iter().map(|p| p.dynamic.frame_index).collect(),
        )?;
        Some(est.ate(&gt)?)
    } else {
        None
    };
    Ok((ch, ate))
}

#[cfg(test)]
mod tests;
