//! Static 3D kd-tree with exact k-nearest, nearest and radius queries.
//!
//! All results are ordered by `(squared distance, index)`, so equal distances
//! resolve to the lower point index and match a brute-force scan exactly.

use std::cmp::Ordering;

use nalgebra::Vector3;

use crate::scalar::Scalar;

const LEAF_SIZE: usize = 8;

/// Squared Euclidean distance, accumulated x, y, z in that order.
#[inline]
pub fn dist2<T: Scalar>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn key_cmp<T: Scalar>(a: &(usize, T), b: &(usize, T)) -> Ordering {
    a.1.partial_cmp(&b.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

pub struct KdTree<T: Scalar> {
    points: Vec<Vector3<T>>,
    /// Point indices arranged as an implicit balanced tree.
    order: Vec<usize>,
    /// Split axis per implicit node, keyed by the node's median slot.
    axis: Vec<u8>,
}

impl<T: Scalar> KdTree<T> {
    pub fn build(points: &[Vector3<T>]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            axis: vec![0; points.len()],
        };
        tree.build_range(0, points.len());
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vector3<T> {
        &self.points[i]
    }

    fn build_range(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF_SIZE {
            return;
        }
        // split along the widest extent
        let mut min = Vector3::repeat(T::max_value().unwrap());
        let mut max = -min;
        for &i in &self.order[lo..hi] {
            let p = &self.points[i];
            for d in 0..3 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        let ext = max - min;
        let axis = crate::geom::argmax3(&ext);
        let mid = (lo + hi) / 2;
        let pts = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a][axis]
                .partial_cmp(&pts[b][axis])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        self.axis[mid] = axis as u8;
        self.build_range(lo, mid);
        self.build_range(mid + 1, hi);
    }

    /// The `k` nearest points to `q`, optionally skipping index `exclude`.
    pub fn knn(&self, q: &Vector3<T>, k: usize, exclude: Option<usize>) -> Vec<(usize, T)> {
        let mut best: Vec<(usize, T)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_range(0, self.points.len(), q, k, exclude, &mut best);
        }
        best
    }

    fn knn_range(
        &self,
        lo: usize,
        hi: usize,
        q: &Vector3<T>,
        k: usize,
        exclude: Option<usize>,
        best: &mut Vec<(usize, T)>,
    ) {
        let offer = |i: usize, best: &mut Vec<(usize, T)>| {
            if Some(i) == exclude {
                return;
            }
            let cand = (i, dist2(q, &self.points[i]));
            if best.len() == k && key_cmp(&cand, best.last().unwrap()) != Ordering::Less {
                return;
            }
            let pos = best.partition_point(|e| key_cmp(e, &cand) == Ordering::Less);
            best.insert(pos, cand);
            best.truncate(k);
        };
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                offer(i, best);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let pivot = self.order[mid];
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - self.points[pivot][axis];
        let (near, far) = if diff <= T::zero() {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_range(near.0, near.1, q, k, exclude, best);
        offer(pivot, best);
        if best.len() < k || diff * diff <= best.last().unwrap().1 {
            self.knn_range(far.0, far.1, q, k, exclude, best);
        }
    }

    /// Nearest point and its squared distance.
    pub fn nearest(&self, q: &Vector3<T>) -> Option<(usize, T)> {
        self.knn(q, 1, None).into_iter().next()
    }

    /// All points with squared distance `<= r²`, ordered by (distance, index).
    pub fn within_radius(&self, q: &Vector3<T>, r: T) -> Vec<(usize, T)> {
        let mut out = Vec::new();
        self.radius_range(0, self.points.len(), q, r * r, &mut out);
        out.sort_by(key_cmp);
        out
    }

    fn radius_range(&self, lo: usize, hi: usize, q: &Vector3<T>, r2: T, out: &mut Vec<(usize, T)>) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                let d = dist2(q, &self.points[i]);
                if d <= r2 {
                    out.push((i, d));
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let pivot = self.order[mid];
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - self.points[pivot][axis];
        let d = dist2(q, &self.points[pivot]);
        if d <= r2 {
            out.push((pivot, d));
        }
        if diff <= T::zero() || diff * diff <= r2 {
            self.radius_range(lo, mid, q, r2, out);
        }
        if diff >= T::zero() || diff * diff <= r2 {
            self.radius_range(mid + 1, hi, q, r2, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(pts: &[Vector3<f64>], q: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<(usize, f64)> = (0..pts.len())
            .filter(|&j| j != q)
            .map(|j| {
                let d = pts[q] - pts[j];
                (j, d.x * d.x + d.y * d.y + d.z * d.z)
            })
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.into_iter().take(k).map(|e| e.0).collect()
    }

    #[test]
    fn knn_matches_brute_force_with_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..50 {
            let n = rng.random_range(2..150);
            // coarse grid coordinates produce many exact distance ties
            let pts: Vec<Vector3<f64>> = (0..n)
                .map(|_| {
                    if trial % 2 == 0 {
                        Vector3::new(
                            rng.random_range(0..4) as f64,
                            rng.random_range(0..4) as f64,
                            rng.random_range(0..2) as f64,
                        )
                    } else {
                        Vector3::new(rng.random(), rng.random(), rng.random())
                    }
                })
                .collect();
            let tree = KdTree::build(&pts);
            for q in 0..n {
                let k = rng.random_range(1..7);
                let got: Vec<usize> = tree.knn(&pts[q], k, Some(q)).into_iter().map(|e| e.0).collect();
                assert_eq!(got, brute_knn(&pts, q, k));
            }
        }
    }

    #[test]
    fn radius_query_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vector3<f64>> = (0..300).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let tree = KdTree::build(&pts);
        for q in pts.iter().take(40) {
            let r = 0.2;
            let got: Vec<usize> = tree.within_radius(q, r).into_iter().map(|e| e.0).collect();
            let mut want: Vec<(usize, f64)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, dist2(q, p)))
                .filter(|e| e.1 <= r * r)
                .collect();
            want.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            assert_eq!(got, want.into_iter().map(|e| e.0).collect::<Vec<_>>());
        }
    }
}
