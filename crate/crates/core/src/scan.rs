//! LiDAR frames and the voxel downsampling applied before registration.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLabel {
    Ground,
    Static,
    Dynamic,
}

impl PointLabel {
    pub fn code(self) -> u8 {
        match self {
            PointLabel::Ground => 0,
            PointLabel::Static => 1,
            PointLabel::Dynamic => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PointLabel::Ground),
            1 => Some(PointLabel::Static),
            2 => Some(PointLabel::Dynamic),
            _ => None,
        }
    }
}

/// One LiDAR frame in its own sensor frame. Labels and per-point true ground
/// elevation are present for synthesized data and absent for bare scan files.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScan {
    pub points: Vec<[f64; 3]>,
    pub labels: Option<Vec<PointLabel>>,
    pub true_elevation: Option<Vec<f64>>,
    pub frame_index: usize,
}

impl LabeledScan {
    pub fn bare(points: Vec<[f64; 3]>, frame_index: usize) -> Self {
        LabeledScan {
            points,
            labels: None,
            true_elevation: None,
            frame_index,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::empty(format!("scan {}", self.frame_index)));
        }
        if self
            .points
            .iter()
            .any(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::non_finite(format!("scan {}", self.frame_index)));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(Error::LengthMismatch {
                    context: "scan labels".into(),
                    expected: self.points.len(),
                    got: labels.len(),
                });
            }
        }
        if let Some(elev) = &self.true_elevation {
            if elev.len() != self.points.len() {
                return Err(Error::LengthMismatch {
                    context: "scan elevation sidecar".into(),
                    expected: self.points.len(),
                    got: elev.len(),
                });
            }
            if elev.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite("scan elevation sidecar"));
            }
        }
        Ok(())
    }

    /// New scan keeping only `indices` (ascending), carrying labels and
    /// elevations along.
    pub fn select(&self, indices: &[usize]) -> LabeledScan {
        LabeledScan {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            true_elevation: self
                .true_elevation
                .as_ref()
                .map(|e| indices.iter().map(|&i| e[i]).collect()),
            frame_index: self.frame_index,
        }
    }
}

/// Voxel downsampling that keeps real points: per occupied voxel the point
/// nearest the voxel's centroid survives, so labels and elevations stay
/// attached. If more than `max_points` voxels remain, a deterministic stride
/// over the index-ordered selection cuts the count down. Returns the selected
/// original indices (ascending). Idempotent for a fixed leaf size.
pub fn voxel_downsample_indices(
    points: &[[f64; 3]],
    leaf: f64,
    max_points: usize,
) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::empty("downsample input"));
    }
    if leaf <= 0.0 {
        return Err(Error::invalid_config("voxel_leaf", "must be positive"));
    }
    if max_points == 0 {
        return Err(Error::invalid_config("max_points", "must be positive"));
    }

    use std::collections::HashMap;
    let key = |p: &[f64; 3]| -> (i64, i64, i64) {
        (
            (p[0] / leaf).floor() as i64,
            (p[1] / leaf).floor() as i64,
            (p[2] / leaf).floor() as i64,
        )
    };

    let mut cells: HashMap<(i64, i64, i64), ([f64; 3], usize)> = HashMap::new();
    for p in points {
        let e = cells.entry(key(p)).or_insert(([0.0; 3], 0));
        for k in 0..3 {
            e.0[k] += p[k];
        }
        e.1 += 1;
    }

    let mut best: HashMap<(i64, i64, i64), (f64, usize)> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        let k = key(p);
        let (sum, count) = cells[&k];
        let c = count as f64;
        let centroid = [sum[0] / c, sum[1] / c, sum[2] / c];
        let d2 = (0..3).map(|a| (p[a] - centroid[a]).powi(2)).sum::<f64>();
        let entry = best.entry(k).or_insert((f64::INFINITY, usize::MAX));
        if d2 < entry.0 || (d2 == entry.0 && i < entry.1) {
            *entry = (d2, i);
        }
    }

    let mut selected: Vec<usize> = best.values().map(|&(_, i)| i).collect();
    selected.sort_unstable();

    if selected.len() > max_points {
        let n = selected.len();
        selected = (0..max_points)
            .map(|i| selected[i * n / max_points])
            .collect();
    }
    Ok(selected)
}

pub fn voxel_downsample(
    scan: &LabeledScan,
    leaf: f64,
    max_points: usize,
) -> Result<(LabeledScan, Vec<usize>)> {
    let indices = voxel_downsample_indices(&scan.points, leaf, max_points)?;
    Ok((scan.select(&indices), indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scan(n: usize, seed: u64) -> LabeledScan {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        LabeledScan::bare(points, 0)
    }

    #[test]
    fn downsample_is_idempotent() {
        let scan = random_scan(2000, 3);
        let (once, _) = voxel_downsample(&scan, 0.5, 10_000).unwrap();
        let (twice, idx) = voxel_downsample(&once, 0.5, 10_000).unwrap();
        assert_eq!(once, twice);
        assert_eq!(idx, (0..once.len()).collect::<Vec<_>>());
    }

    #[test]
    fn downsample_respects_max_points() {
        let scan = random_scan(2000, 4);
        let (out, idx) = voxel_downsample(&scan, 0.01, 256).unwrap();
        assert_eq!(out.len(), 256);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn downsample_keeps_labels_attached() {
        let mut scan = random_scan(50, 5);
        scan.labels = Some(
            (0..50)
                .map(|i| {
                    if i % 2 == 0 {
                        PointLabel::Ground
                    } else {
                        PointLabel::Static
                    }
                })
                .collect(),
        );
        scan.true_elevation = Some((0..50).map(|i| i as f64).collect());
        let (out, idx) = voxel_downsample(&scan, 0.4, 10_000).unwrap();
        let labels = out.labels.unwrap();
        let elev = out.true_elevation.unwrap();
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(labels[k], scan.labels.as_ref().unwrap()[i]);
            assert_eq!(elev[k], i as f64);
            assert_eq!(out.points[k], scan.points[i]);
        }
    }

    #[test]
    fn validate_catches_mismatched_sidecars() {
        let mut scan = random_scan(10, 6);
        scan.labels = Some(vec![PointLabel::Ground; 9]);
        assert!(scan.validate().is_err());
    }
}
