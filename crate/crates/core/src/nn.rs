//! Exact nearest-neighbor search over 3D points.
//!
//! A straightforward kd-tree with cycling split axes. Queries return exactly
//! the brute-force answer, ties broken toward the smaller point index, so it
//! can back metric computations that are checked against O(N*M) oracles.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct KdNode {
    /// Index into the point set; this point lives on the splitting plane.
    point: usize,
    axis: usize,
    left: Option<Box<KdNode>>,
    right: Option<Box<KdNode>>,
}

pub struct KdTree<S> {
    points: Vec<[S; 3]>,
    root: Option<Box<KdNode>>,
}

fn dist2<S: Scalar>(a: [S; 3], b: [S; 3]) -> S {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl<S: Scalar> KdTree<S> {
    pub fn build(points: &[[S; 3]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::empty("nearest-neighbor point set"));
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::non_finite("nearest-neighbor point set"));
        }
        let mut indices: Vec<usize> = (0..points.len()).collect();
        let root = Self::split(points, &mut indices, 0);
        Ok(KdTree {
            points: points.to_vec(),
            root,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[S; 3]] {
        &self.points
    }

    fn split(points: &[[S; 3]], indices: &mut [usize], depth: usize) -> Option<Box<KdNode>> {
        if indices.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = indices.len() / 2;
        indices.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .expect("finite coordinates")
                .then(a.cmp(&b))
        });
        let point = indices[mid];
        let (left, right) = indices.split_at_mut(mid);
        let right = &mut right[1..];
        Some(Box::new(KdNode {
            point,
            axis,
            left: Self::split(points, left, depth + 1),
            right: Self::split(points, right, depth + 1),
        }))
    }

    /// Index of the nearest point and the squared distance to it.
    pub fn nearest(&self, query: [S; 3]) -> (usize, S) {
        let mut best = (usize::MAX, S::infinity());
        Self::search(
            &self.points,
            self.root.as_deref().expect("non-empty tree"),
            query,
            &mut best,
        );
        best
    }

    fn search(points: &[[S; 3]], node: &KdNode, query: [S; 3], best: &mut (usize, S)) {
        let d2 = dist2(points[node.point], query);
        if d2 < best.1 || (d2 == best.1 && node.point < best.0) {
            *best = (node.point, d2);
        }
        let delta = query[node.axis] - points[node.point][node.axis];
        let (near, far) = if delta < S::zero() {
            (&node.left, &node.right)
        } else {
            (&node.right, &node.left)
        };
        if let Some(n) = near {
            Self::search(points, n, query, best);
        }
        // The far side can only win (or tie toward a smaller index) when the
        // splitting plane is within the current best radius.
        if let Some(f) = far {
            if delta * delta <= best.1 {
                Self::search(points, f, query, best);
            }
        }
    }
}

/// Reference nearest neighbor: first index attaining the minimum distance.
pub fn nearest_brute_force<S: Scalar>(points: &[[S; 3]], query: [S; 3]) -> (usize, S) {
    let mut best = (usize::MAX, S::infinity());
    for (i, &p) in points.iter().enumerate() {
        let d2 = dist2(p, query);
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points: Vec<[f64; 3]> = (0..100)
            .map(|_| {
                [
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                ]
            })
            .collect();
        let tree = KdTree::build(&points).unwrap();
        for _ in 0..500 {
            let q = [
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
            ];
            let (bi, bd) = nearest_brute_force(&points, q);
            let (ti, td) = tree.nearest(q);
            assert_eq!(bi, ti);
            assert_eq!(bd, td);
        }
        // Self-queries hit the point itself at distance zero.
        for (i, &p) in points.iter().enumerate() {
            assert_eq!(tree.nearest(p), (i, 0.0));
        }
    }

    #[test]
    fn duplicate_points_tie_break_to_smaller_index() {
        let points = vec![[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        let tree = KdTree::build(&points).unwrap();
        assert_eq!(tree.nearest([1.0, 1.0, 1.0]).0, 0);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(KdTree::<f64>::build(&[]).is_err());
        assert!(KdTree::build(&[[f64::NAN, 0.0, 0.0]]).is_err());
    }
}
