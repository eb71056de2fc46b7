//! Synthetic labeled LiDAR sequences: an analytic world (parametric ground
//! surface plus axis-aligned boxes, some moving), a spinning multi-beam
//! sensor model, and known ego trajectories.
//!
//! Scans are expressed in the ego frame of their pose. Ego poses are planar
//! (z = 0, yaw only), so ego-frame z equals world z and the per-point true
//! elevation is directly comparable with point heights.
//!
//! Rendering is deterministic: the per-frame RNG stream draws exactly the
//! same values for each (beam, azimuth) ray regardless of what the ray
//! hits, so a world rendered with and without its dynamic boxes yields
//! bit-identical points wherever both runs hit static geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{vnorm, Pose};
use crate::scan::{LabeledScan, PointLabel};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicBoxSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
    /// Meters per frame; the box center advances by `frame * velocity`.
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSpec {
    pub beams: usize,
    pub azimuth_steps: usize,
    /// Degrees, lowest to highest beam.
    pub vertical_fov_deg: [f64; 2],
    pub max_range: f64,
    pub range_noise_sigma: f64,
    pub dropout_prob: f64,
    /// Mount height above the ego origin (meters).
    pub height: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        SensorSpec {
            beams: 32,
            azimuth_steps: 360,
            vertical_fov_deg: [-25.0, 5.0],
            max_range: 60.0,
            range_noise_sigma: 0.0,
            dropout_prob: 0.0,
            height: 1.8,
        }
    }
}

/// World description: ground surface `e(x, y) = a0 + a1 x + a2 y +
/// a3 sin(a4 x)`, boxes, sensor, seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub ground: [f64; 5],
    pub static_boxes: Vec<BoxSpec>,
    pub dynamic_boxes: Vec<DynamicBoxSpec>,
    pub sensor: SensorSpec,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            ground: [0.0, 0.0, 0.0, 0.0, 0.0],
            static_boxes: Vec::new(),
            dynamic_boxes: Vec::new(),
            sensor: SensorSpec::default(),
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn elevation(&self, x: f64, y: f64) -> f64 {
        let [a0, a1, a2, a3, a4] = self.ground;
        a0 + a1 * x + a2 * y + a3 * (a4 * x).sin()
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sensor;
        let field = |f: &str| format!("world.sensor.{f}");
        if s.beams == 0 {
            return Err(Error::invalid_config(field("beams"), "must be positive"));
        }
        if s.azimuth_steps == 0 {
            return Err(Error::invalid_config(
                field("azimuth_steps"),
                "must be positive",
            ));
        }
        if !(s.max_range > 0.0) {
            return Err(Error::invalid_config(field("max_range"), "must be positive"));
        }
        if !(s.range_noise_sigma >= 0.0) {
            return Err(Error::invalid_config(
                field("range_noise_sigma"),
                "must be >= 0",
            ));
        }
        if !(0.0..1.0).contains(&s.dropout_prob) {
            return Err(Error::invalid_config(
                field("dropout_prob"),
                "must be in [0, 1)",
            ));
        }
        if !(s.height > 0.0) {
            return Err(Error::invalid_config(field("height"), "must be positive"));
        }
        if s.vertical_fov_deg[0] >= s.vertical_fov_deg[1] && s.beams > 1 {
            return Err(Error::invalid_config(
                field("vertical_fov_deg"),
                "lower bound must be below upper bound",
            ));
        }
        if s.vertical_fov_deg[0] >= 0.0 {
            return Err(Error::invalid_config(
                field("vertical_fov_deg"),
                "needs downward-looking beams to guarantee ground returns",
            ));
        }
        // The sensor must clear the ground everywhere it can see, or scans
        // could come back empty.
        let [a0, a1, a2, a3, _] = self.ground;
        let bound = a0 + (a1.abs() + a2.abs()) * s.max_range + a3.abs();
        if bound >= s.height {
            return Err(Error::invalid_config(
                "world.ground",
                "ground can reach the sensor height within range; lower the \
                 coefficients or raise sensor.height",
            ));
        }
        for (i, b) in self.static_boxes.iter().enumerate() {
            if b.size.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::invalid_config(
                    format!("world.static_boxes[{i}].size"),
                    "extents must be positive",
                ));
            }
        }
        for (i, b) in self.dynamic_boxes.iter().enumerate() {
            if b.size.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::invalid_config(
                    format!("world.dynamic_boxes[{i}].size"),
                    "extents must be positive",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajKind {
    Straight,
    Arc {
        #[serde(default = "default_arc_radius")]
        radius: f64,
    },
    Figure {
        #[serde(default = "default_figure_scale")]
        scale: f64,
    },
}

fn default_arc_radius() -> f64 {
    10.0
}

fn default_figure_scale() -> f64 {
    12.0
}

impl Default for TrajKind {
    fn default() -> Self {
        TrajKind::Straight
    }
}

fn yaw_pose(x: f64, y: f64, yaw: f64) -> Pose<f64> {
    let (s, c) = yaw.sin_cos();
    Pose::new(
        crate::geometry::Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]),
        [x, y, 0.0],
    )
}

/// Smooth planar ego path: first pose identity, heading tangent to the
/// path, `speed` meters of travel per frame.
pub fn ego_trajectory(kind: TrajKind, n_frames: usize, speed: f64) -> Result<Trajectory<f64>> {
    if n_frames < 2 {
        return Err(Error::invalid_config(
            "n_frames",
            "trajectory needs at least 2 frames",
        ));
    }
    if !(speed > 0.0) {
        return Err(Error::invalid_config("speed", "must be positive"));
    }
    let poses: Vec<Pose<f64>> = match kind {
        TrajKind::Straight => (0..n_frames)
            .map(|i| yaw_pose(i as f64 * speed, 0.0, 0.0))
            .collect(),
        TrajKind::Arc { radius } => {
            if !(radius > 0.0) {
                return Err(Error::invalid_config("traj.radius", "must be positive"));
            }
            let r = radius;
            (0..n_frames)
                .map(|i| {
                    let phi = i as f64 * speed / r;
                    yaw_pose(r * phi.sin(), r * (1.0 - phi.cos()), phi)
                })
                .collect()
        }
        TrajKind::Figure { scale } => {
            if !(scale > 0.0) {
                return Err(Error::invalid_config("traj.scale", "must be positive"));
            }
            let l = scale;
            (0..n_frames)
                .map(|i| {
                    let s = i as f64 * speed / l;
                    let x = l * s.sin();
                    let y = l * s.sin() * s.cos();
                    let dx = s.cos();
                    let dy = (2.0 * s).cos();
                    yaw_pose(x, y, dy.atan2(dx))
                })
                .collect()
        }
    };
    Trajectory::from_poses(poses, (0..n_frames).collect())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (frame as u64).wrapping_mul(0x9E37)))
}

/// Standard normal via Box-Muller on the ChaCha stream; two uniforms per
/// draw keeps the stream layout independent of the sampled value.
fn draw_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
    label: PointLabel,
}

impl Aabb {
    fn new(center: [f64; 3], size: [f64; 3], label: PointLabel) -> Self {
        let lo = [0, 1, 2].map(|k| center[k] - 0.5 * size[k]);
        let hi = [0, 1, 2].map(|k| center[k] + 0.5 * size[k]);
        Aabb { lo, hi, label }
    }

    /// Entry distance of the ray, if it hits within (t_min, t_max).
    fn hit(&self, origin: [f64; 3], dir: [f64; 3], t_min: f64, t_max: f64) -> Option<f64> {
        let mut near = t_min;
        let mut far = t_max;
        for k in 0..3 {
            if dir[k].abs() < 1e-12 {
                if origin[k] < self.lo[k] || origin[k] > self.hi[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let (mut t0, mut t1) = ((self.lo[k] - origin[k]) * inv, (self.hi[k] - origin[k]) * inv);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            near = near.max(t0);
            far = far.min(t1);
            if near > far {
                return None;
            }
        }
        Some(near)
    }
}

const MIN_RANGE: f64 = 0.05;
const BISECT_TOL: f64 = 1e-6;

/// First ground crossing along the ray: coarse march to bracket the sign
/// change, then bisection to `BISECT_TOL` meters (the sinusoidal term has
/// no closed-form intersection).
fn ground_hit(world: &WorldSpec, origin: [f64; 3], dir: [f64; 3], t_max: f64) -> Option<f64> {
    let f = |t: f64| {
        let x = origin[0] + t * dir[0];
        let y = origin[1] + t * dir[1];
        origin[2] + t * dir[2] - world.elevation(x, y)
    };
    let steps = (96.0 + t_max * world.ground[4].abs() * 4.0).min(512.0) as usize;
    let dt = (t_max - MIN_RANGE) / steps as f64;
    let mut t_prev = MIN_RANGE;
    if f(t_prev) <= 0.0 {
        return None; // sensor at or below ground: treat as no return
    }
    for i in 1..=steps {
        let t = MIN_RANGE + i as f64 * dt;
        let ft = f(t);
        if ft <= 0.0 {
            let (mut lo, mut hi) = (t_prev, t);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < BISECT_TOL {
                    break;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        t_prev = t;
    }
    None
}

/// Ray-cast one frame. Dynamic boxes are advanced by `frame * velocity`;
/// `include_dynamic = false` renders the paired static-only scan.
fn render(world: &WorldSpec, pose: &Pose<f64>, frame: usize, include_dynamic: bool) -> LabeledScan {
    let s = &world.sensor;
    let mut boxes: Vec<Aabb> = world
        .static_boxes
        .iter()
        .map(|b| Aabb::new(b.center, b.size, PointLabel::Static))
        .collect();
    if include_dynamic {
        for b in &world.dynamic_boxes {
            let center = [0, 1, 2].map(|k| b.center[k] + frame as f64 * b.velocity[k]);
            boxes.push(Aabb::new(center, b.size, PointLabel::Dynamic));
        }
    }

    let origin = pose.transform([0.0, 0.0, s.height]);
    let ego_from_world = pose.inverse();
    let mut rng = frame_rng(world.seed, frame);

    // Upper bound on the ground surface within range of this origin.
    let ground_ceiling = {
        let [_, a1, a2, a3, _] = world.ground;
        world.elevation(origin[0], origin[1])
            + (a1.abs() + a2.abs()) * s.max_range
            + 2.0 * a3.abs()
    };

    let n_rays = s.beams * s.azimuth_steps;
    let mut points = Vec::with_capacity(n_rays / 2);
    let mut labels = Vec::with_capacity(n_rays / 2);
    let mut elevations = Vec::with_capacity(n_rays / 2);

    for beam in 0..s.beams {
        let el_deg = if s.beams == 1 {
            s.vertical_fov_deg[0]
        } else {
            s.vertical_fov_deg[0]
                + beam as f64 * (s.vertical_fov_deg[1] - s.vertical_fov_deg[0])
                    / (s.beams as f64 - 1.0)
        };
        let el = el_deg.to_radians();
        let (sin_el, cos_el) = el.sin_cos();
        for step in 0..s.azimuth_steps {
            // Fixed draws per ray keep the stream aligned between the
            // dynamic and static renders of the same frame.
            let noise = draw_normal(&mut rng) * s.range_noise_sigma;
            let drop: f64 = rng.gen();

            if drop < s.dropout_prob {
                continue;
            }

            let az = 2.0 * std::f64::consts::PI * step as f64 / s.azimuth_steps as f64;
            let (sin_az, cos_az) = az.sin_cos();
            let dir_sensor = [cos_el * cos_az, cos_el * sin_az, sin_el];
            let dir = pose.rotation.mul_vec(dir_sensor);

            let mut best: Option<(f64, PointLabel)> = None;
            if dir[2] < 0.0 || origin[2] <= ground_ceiling {
                if let Some(t) = ground_hit(world, origin, dir, s.max_range) {
                    best = Some((t, PointLabel::Ground));
                }
            }
            for b in &boxes {
                let cap = best.map_or(s.max_range, |(t, _)| t);
                if let Some(t) = b.hit(origin, dir, MIN_RANGE, cap) {
                    best = Some((t, b.label));
                }
            }

            let Some((t, label)) = best else { continue };
            let t = t + noise;
            if t <= MIN_RANGE || t > s.max_range {
                continue;
            }
            let world_pt = [0, 1, 2].map(|k| origin[k] + t * dir[k]);
            points.push(ego_from_world.transform(world_pt));
            labels.push(label);
            elevations.push(world.elevation(world_pt[0], world_pt[1]));
        }
    }

    LabeledScan {
        points,
        labels: Some(labels),
        true_elevation: Some(elevations),
        frame_index: frame,
    }
}

pub fn render_scan(world: &WorldSpec, pose: &Pose<f64>, frame: usize) -> LabeledScan {
    render(world, pose, frame, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub dynamic: LabeledScan,
    pub static_scan: LabeledScan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<FramePair>,
    pub trajectory: Trajectory<f64>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Render a full sequence along an ego path: per frame one scan with the
/// dynamic boxes and one paired static scan from the same RNG stream.
pub fn make_sequence(
    world: &WorldSpec,
    kind: TrajKind,
    n_frames: usize,
    speed: f64,
) -> Result<Sequence> {
    world.validate()?;
    let trajectory = ego_trajectory(kind, n_frames, speed)?;
    let mut frames = Vec::with_capacity(n_frames);
    for (i, pose) in trajectory.poses().iter().enumerate() {
        let dynamic = render(world, pose, i, true);
        let static_scan = render(world, pose, i, false);
        if dynamic.is_empty() || static_scan.is_empty() {
            return Err(Error::empty(format!(
                "rendered scan at frame {i} (world geometry out of view)"
            )));
        }
        frames.push(FramePair {
            dynamic,
            static_scan,
        });
    }
    Ok(Sequence { frames, trajectory })
}
