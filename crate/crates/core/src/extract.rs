//! From a trained cloud to parametric edges: oriented points, chain
//! clustering with two alignment tests, and line/Bézier fitting with model
//! selection.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{argmax3, bernstein3, EdgeGaussian, EdgeKind, OrientedPoint, ParametricEdge};
use crate::scalar::Scalar;
use crate::spatial::KdTree;

/// Normal-equation condition number above which the curve fit is abandoned.
pub const MAX_CONDITION: f64 = 1e12;
/// Weight of the newest direction in the chain heading average.
pub const HEADING_WEIGHT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractConfig {
    /// Minimum absolute cosine for both alignment tests.
    pub theta: f64,
    /// Neighbor radius as a multiple of the median nearest-neighbor distance.
    pub neighbor_radius_factor: f64,
    pub min_cluster_size: usize,
    /// Curve is chosen iff `e_c <= delta * e_l`.
    pub delta: f64,
    pub opacity_filter: f64,
    /// Minimum cluster size for attempting a curve fit; smaller clusters are lines.
    pub bezier_samples: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            theta: 0.8,
            neighbor_radius_factor: 8.0,
            min_cluster_size: 5,
            delta: 0.5,
            opacity_filter: 0.5,
            bezier_samples: 8,
        }
    }
}

impl ExtractConfig {
    /// Curved-object preset: looser alignment, curves preferred.
    pub fn curved() -> Self {
        Self {
            theta: 0.6,
            delta: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::InvalidInput(format!("theta {} outside (0, 1]", self.theta)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidInput(format!("delta {} must be positive", self.delta)));
        }
        if !(self.neighbor_radius_factor > 0.0) {
            return Err(Error::InvalidInput("neighbor radius factor must be positive".into()));
        }
        Ok(())
    }
}

/// Ordered point indices of one chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeCluster {
    pub indices: Vec<usize>,
}

/// One oriented point per Gaussian with activated opacity `>= opacity_filter`.
pub fn to_oriented_points<T: Scalar>(cloud: &[EdgeGaussian<T>], opacity_filter: T) -> Result<Vec<OrientedPoint<T>>> {
    let pts: Vec<_> = cloud
        .iter()
        .filter(|g| g.opacity() >= opacity_filter)
        .map(|g| OrientedPoint {
            position: g.mean,
            direction: g.principal_direction(),
        })
        .collect();
    if pts.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no Gaussian has opacity >= {opacity_filter}"
        )));
    }
    Ok(pts)
}

/// Lower median of the nearest-neighbor distances; zero for fewer than two points.
pub fn median_nn_distance<T: Scalar>(points: &[Vector3<T>], tree: &KdTree<T>) -> T {
    if points.len() < 2 {
        return T::zero();
    }
    let mut d: Vec<T> = points
        .iter()
        .enumerate()
        .map(|(i, p)| tree.knn(p, 1, Some(i))[0].1.sqrt())
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    d[(d.len() - 1) / 2]
}

/// Both alignment tests between the last chain point and a candidate.
/// Coincident positions pass the second test.
fn aligned<T: Scalar>(last: &OrientedPoint<T>, cand: &OrientedPoint<T>, theta: T) -> bool {
    if cand.direction.dot(&last.direction).abs() < theta {
        return false;
    }
    let step = cand.position - last.position;
    let len = step.norm();
    len <= T::zero() || (cand.direction.dot(&step) / len).abs() >= theta
}

/// Greedy bidirectional chain growth from the lowest unvisited index.
pub fn cluster<T: Scalar>(points: &[OrientedPoint<T>], cfg: &ExtractConfig) -> Vec<EdgeCluster> {
    let positions: Vec<Vector3<T>> = points.iter().map(|p| p.position).collect();
    let tree = KdTree::build(&positions);
    let radius = T::lit(cfg.neighbor_radius_factor) * median_nn_distance(&positions, &tree);
    let theta = T::lit(cfg.theta);
    let mut visited = vec![false; points.len()];
    let mut clusters = Vec::new();

    // `heading` is a running average of the chain's oriented directions. A
    // candidate must lie ahead of it and align with it, which keeps chains
    // from reversing or creeping around corners through diagonal points.
    let grow = |from: usize, heading: Option<Vector3<T>>, visited: &mut Vec<bool>| -> (Vec<usize>, Option<Vector3<T>>) {
        let mut out = Vec::new();
        let mut last = from;
        let mut heading = heading;
        let mut first = None;
        loop {
            let next = tree
                .within_radius(&positions[last], radius)
                .into_iter()
                .map(|(j, _)| j)
                .find(|&j| {
                    let step = positions[j] - positions[last];
                    !visited[j]
                        && heading.is_none_or(|h| step.dot(&h) > T::zero() && points[j].direction.dot(&h).abs() >= theta)
                        && aligned(&points[last], &points[j], theta)
                });
            let Some(j) = next else {
                return (out, first);
            };
            let step = positions[j] - positions[last];
            let d = points[j].direction;
            let reference = heading.unwrap_or(step);
            let d = if d.dot(&reference) < T::zero() { -d } else { d };
            if heading.is_some() || step.norm_squared() > T::zero() {
                heading = Some(match heading {
                    Some(h) => (h * T::lit(1.0 - HEADING_WEIGHT) + d * T::lit(HEADING_WEIGHT)).normalize(),
                    None => d,
                });
                first.get_or_insert(d);
            }
            visited[j] = true;
            out.push(j);
            last = j;
        }
    };

    for seed in 0..points.len() {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        let (forward, first) = grow(seed, None, &mut visited);
        let (backward, _) = grow(seed, first.map(|s| -s), &mut visited);
        let mut indices: Vec<usize> = backward.into_iter().rev().collect();
        indices.push(seed);
        indices.extend(forward);
        if indices.len() >= cfg.min_cluster_size {
            // Suppress the aligned points the chain stepped past so they do not
            // seed a duplicate chain alongside it.
            for &i in &indices {
                for (j, _) in tree.within_radius(&positions[i], radius) {
                    if !visited[j] && points[j].direction.dot(&points[i].direction).abs() >= theta {
                        visited[j] = true;
                    }
                }
            }
            clusters.push(EdgeCluster { indices });
        }
    }
    clusters
}

fn centroid<T: Scalar>(points: &[Vector3<T>]) -> Vector3<T> {
    points.iter().fold(Vector3::zeros(), |a, p| a + p) / T::from_count(points.len())
}

/// Principal-axis line fit. Returns the segment spanning the extreme
/// projections and the mean perpendicular distance.
pub fn fit_line<T: Scalar>(points: &[Vector3<T>]) -> Result<(ParametricEdge<T>, T)> {
    if points.len() < 2 {
        return Err(Error::InvalidInput("line fit needs at least 2 points".into()));
    }
    let c = centroid(points);
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - c;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let top = argmax3(&eig.eigenvalues);
    if !(eig.eigenvalues[top] > T::zero()) {
        return Err(Error::Degenerate("all cluster points coincide".into()));
    }
    let mut axis: Vector3<T> = eig.eigenvectors.column(top).into_owned().normalize();
    // sign convention: the first point lies on the negative side, so the fit is rigidly equivariant
    let first = (points[0] - c).dot(&axis);
    let last = (points[points.len() - 1] - c).dot(&axis);
    if first > T::zero() || (first == T::zero() && last < T::zero()) {
        axis = -axis;
    }
    let mut lo = T::max_value().unwrap();
    let mut hi = -lo;
    let mut residual = T::zero();
    for p in points {
        let d = p - c;
        let t = d.dot(&axis);
        lo = lo.min(t);
        hi = hi.max(t);
        residual += (d - axis * t).norm();
    }
    let edge = ParametricEdge::line(c + axis * lo, c + axis * hi);
    Ok((edge, residual / T::from_count(points.len())))
}

/// Normalized cumulative chord lengths of an ordered point chain.
pub fn chord_parameters<T: Scalar>(points: &[Vector3<T>]) -> Result<Vec<T>> {
    let mut t = Vec::with_capacity(points.len());
    let mut acc = T::zero();
    t.push(acc);
    for w in points.windows(2) {
        acc += (w[1] - w[0]).norm();
        t.push(acc);
    }
    if !(acc > T::zero()) {
        return Err(Error::Degenerate("chain has zero length".into()));
    }
    Ok(t.into_iter().map(|v| v / acc).collect())
}

/// Cubic Bézier fit with endpoints anchored at the chain ends and chord-length
/// parameters. `Ok(None)` means the normal equations were too ill-conditioned
/// and the caller should use the line model.
pub fn fit_bezier<T: Scalar>(points: &[Vector3<T>]) -> Result<Option<(ParametricEdge<T>, T)>> {
    if points.len() < 4 {
        return Err(Error::InvalidInput("Bézier fit needs at least 4 points".into()));
    }
    let t = chord_parameters(points)?;
    let c0 = points[0];
    let c3 = points[points.len() - 1];
    let mut a = Matrix2::<T>::zeros();
    let mut r1 = Vector3::zeros();
    let mut r2 = Vector3::zeros();
    for (p, &ti) in points.iter().zip(&t) {
        let b = bernstein3(ti);
        let rest = p - c0 * b[0] - c3 * b[3];
        a[(0, 0)] += b[1] * b[1];
        a[(0, 1)] += b[1] * b[2];
        a[(1, 1)] += b[2] * b[2];
        r1 += rest * b[1];
        r2 += rest * b[2];
    }
    a[(1, 0)] = a[(0, 1)];
    let eig = a.symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig[0].min(eig[1]), eig[0].max(eig[1]));
    if !(lo > T::zero()) || hi / lo > T::lit(MAX_CONDITION) {
        return Ok(None);
    }
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(0, 1)];
    let c1 = (r1 * a[(1, 1)] - r2 * a[(0, 1)]) / det;
    let c2 = (r2 * a[(0, 0)] - r1 * a[(0, 1)]) / det;
    let edge = ParametricEdge::bezier(c0, c1, c2, c3);
    let residual = points
        .iter()
        .zip(&t)
        .map(|(p, &ti)| (p - edge.evaluate(ti)).norm())
        .fold(T::zero(), |a, b| a + b)
        / T::from_count(points.len());
    Ok(Some((edge, residual)))
}

/// Curve iff `e_c <= delta * e_l`.
pub fn select_model<T: Scalar>(e_c: T, e_l: T, delta: T) -> EdgeKind {
    if e_c <= delta * e_l {
        EdgeKind::Curve
    } else {
        EdgeKind::Line
    }
}

/// A fitted cluster with both residuals (`e_c` absent when no curve was fitted).
#[derive(Clone, Debug)]
pub struct FittedEdge<T: Scalar> {
    pub edge: ParametricEdge<T>,
    pub cluster: EdgeCluster,
    pub line_residual: T,
    pub curve_residual: Option<T>,
}

/// Fit one ordered cluster and pick the model.
pub fn fit_cluster<T: Scalar>(points: &[Vector3<T>], cfg: &ExtractConfig) -> Result<(ParametricEdge<T>, T, Option<T>)> {
    let (line, e_l) = fit_line(points)?;
    if points.len() < cfg.bezier_samples.max(4) {
        return Ok((line, e_l, None));
    }
    let Some((curve, e_c)) = fit_bezier(points)? else {
        return Ok((line, e_l, None));
    };
    // exactly straight clusters stay lines even though 0 <= delta * 0
    let (a, b) = (line.start(), line.end());
    let straight = e_l <= T::lit(1e-9) * (b - a).norm();
    let kind = if straight {
        EdgeKind::Line
    } else {
        select_model(e_c, e_l, T::lit(cfg.delta))
    };
    Ok(match kind {
        EdgeKind::Curve => (curve, e_l, Some(e_c)),
        EdgeKind::Line => (line, e_l, Some(e_c)),
    })
}

/// Full extraction with per-cluster diagnostics, ordered by cluster seed.
pub fn extract_detailed<T: Scalar>(cloud: &[EdgeGaussian<T>], cfg: &ExtractConfig) -> Result<Vec<FittedEdge<T>>> {
    cfg.validate()?;
    let points = match to_oriented_points(cloud, T::lit(cfg.opacity_filter)) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("nothing to extract: {e}");
            return Ok(Vec::new());
        }
    };
    let clusters = cluster(&points, cfg);
    let fitted: Vec<Option<FittedEdge<T>>> = clusters
        .into_par_iter()
        .map(|c| {
            let pts: Vec<Vector3<T>> = c.indices.iter().map(|&i| points[i].position).collect();
            match fit_cluster(&pts, cfg) {
                Ok((edge, e_l, e_c)) => Some(FittedEdge {
                    edge,
                    cluster: c,
                    line_residual: e_l,
                    curve_residual: e_c,
                }),
                Err(e) => {
                    log::warn!("skipping cluster seeded at point {}: {e}", c.indices[0]);
                    None
                }
            }
        })
        .collect();
    Ok(fitted.into_iter().flatten().collect())
}

pub fn extract<T: Scalar>(cloud: &[EdgeGaussian<T>], cfg: &ExtractConfig) -> Result<Vec<ParametricEdge<T>>> {
    Ok(extract_detailed(cloud, cfg)?.into_iter().map(|f| f.edge).collect())
}
