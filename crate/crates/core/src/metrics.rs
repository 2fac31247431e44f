//! Point-sampled edge evaluation: accuracy, completeness and
//! precision/recall/F-score at distance thresholds.

use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::ParametricEdge;
use crate::scalar::Scalar;
use crate::spatial::KdTree;

pub const METRICS_FORMAT: &str = "edgegs-metrics/v1";
/// Polyline resolution used to measure and resample Bézier curves.
pub const BEZIER_POLYLINE_SEGMENTS: usize = 256;

/// Points along `edge` at equal arc-length steps no longer than `spacing`,
/// both endpoints included.
pub fn sample_edge<T: Scalar>(edge: &ParametricEdge<T>, spacing: T) -> Result<Vec<Vector3<T>>> {
    if !(spacing > T::zero()) {
        return Err(Error::InvalidInput("sampling spacing must be positive".into()));
    }
    let poly: Vec<Vector3<T>> = match edge {
        ParametricEdge::LineSegment { p0, p1 } => vec![*p0, *p1],
        ParametricEdge::CubicBezier { .. } => (0..=BEZIER_POLYLINE_SEGMENTS)
            .map(|i| edge.evaluate(T::from_count(i) / T::from_count(BEZIER_POLYLINE_SEGMENTS)))
            .collect(),
    };
    let mut cum = Vec::with_capacity(poly.len());
    let mut acc = T::zero();
    cum.push(acc);
    for w in poly.windows(2) {
        acc += (w[1] - w[0]).norm();
        cum.push(acc);
    }
    let total = acc;
    let n = (total / spacing).ceil().as_f64().max(1.0) as usize;
    let mut out = Vec::with_capacity(n + 1);
    let mut seg = 0;
    for i in 0..=n {
        if i == n {
            out.push(poly[poly.len() - 1]);
            break;
        }
        let s = total * T::from_count(i) / T::from_count(n);
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let u = if len > T::zero() { (s - cum[seg]) / len } else { T::zero() };
        out.push(poly[seg] + (poly[seg + 1] - poly[seg]) * u);
    }
    Ok(out)
}

/// Samples of every edge, sorted lexicographically so downstream sums do not
/// depend on edge order.
pub fn sample_edges<T: Scalar>(edges: &[ParametricEdge<T>], spacing: T) -> Result<Vec<Vector3<T>>> {
    let mut pts = Vec::new();
    for e in edges {
        pts.extend(sample_edge(e, spacing)?);
    }
    pts.sort_by(|a, b| {
        let key = |v: &Vector3<T>| [v.x.as_f64(), v.y.as_f64(), v.z.as_f64()];
        let (ka, kb) = (key(a), key(b));
        ka[0].total_cmp(&kb[0]).then(ka[1].total_cmp(&kb[1])).then(ka[2].total_cmp(&kb[2]))
    });
    Ok(pts)
}

/// Distance from each point of `a` to its nearest point in `b`.
pub fn nearest_distances<T: Scalar>(a: &[Vector3<T>], b: &[Vector3<T>]) -> Result<Vec<T>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("nearest-distance query on an empty point set".into()));
    }
    let tree = KdTree::build(b);
    Ok(a.iter().map(|p| tree.nearest(p).unwrap().1.sqrt()).collect())
}

/// Mean over `a` of the distance to the nearest point of `b`.
pub fn chamfer_directional<T: Scalar>(a: &[Vector3<T>], b: &[Vector3<T>]) -> Result<T> {
    let d = nearest_distances(a, b)?;
    Ok(d.iter().fold(T::zero(), |s, v| s + *v) / T::from_count(d.len()))
}

fn fraction_within<T: Scalar>(d: &[T], tau: T) -> f64 {
    100.0 * d.iter().filter(|v| **v <= tau).count() as f64 / d.len() as f64
}

/// Harmonic mean, zero when both inputs are zero.
pub fn fscore(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Precision, recall and F-score (percent) at threshold `tau`.
/// An empty prediction scores zero.
pub fn precision_recall<T: Scalar>(pred: &[Vector3<T>], gt: &[Vector3<T>], tau: T) -> Result<(f64, f64, f64)> {
    if !(tau > T::zero()) {
        return Err(Error::InvalidInput("threshold must be positive".into()));
    }
    if gt.is_empty() {
        return Err(Error::InvalidInput("ground-truth point set is empty".into()));
    }
    if pred.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let p = fraction_within(&nearest_distances(pred, gt)?, tau);
    let r = fraction_within(&nearest_distances(gt, pred)?, tau);
    Ok((p, r, fscore(p, r)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub spacing: f64,
    pub thresholds: Vec<f64>,
    /// Rescale so the ground-truth bounding box's longest side is 1.
    pub normalize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            spacing: 0.005,
            thresholds: vec![0.005, 0.01, 0.02],
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScores {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub format: String,
    /// Mean prediction-to-GT distance; `None` for an empty prediction.
    pub accuracy: Option<f64>,
    /// Mean GT-to-prediction distance; `None` for an empty prediction.
    pub completeness: Option<f64>,
    pub scores: Vec<ThresholdScores>,
    pub spacing: f64,
    /// Factor applied to all coordinates before measuring.
    pub scale: f64,
    pub pred_edges: usize,
    pub gt_edges: usize,
    pub pred_points: usize,
    pub gt_points: usize,
}

impl MetricReport {
    pub fn at(&self, tau: f64) -> Option<&ThresholdScores> {
        self.scores.iter().find(|s| s.tau == tau)
    }
}

/// Axis-aligned bounds of edges evaluated on a fine parameter grid.
fn bounds<T: Scalar>(edges: &[ParametricEdge<T>]) -> Option<(Vector3<T>, Vector3<T>)> {
    let mut it = edges.iter().flat_map(|e| {
        (0..=BEZIER_POLYLINE_SEGMENTS).map(move |i| e.evaluate(T::from_count(i) / T::from_count(BEZIER_POLYLINE_SEGMENTS)))
    });
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), p| (lo.inf(&p), hi.sup(&p))))
}

/// Scale factor that maps the ground truth's longest bounding-box side to 1.
pub fn normalization_scale<T: Scalar>(gt: &[ParametricEdge<T>]) -> Result<T> {
    let (lo, hi) = bounds(gt).ok_or_else(|| Error::InvalidInput("no ground-truth edges".into()))?;
    let side = (hi - lo).max();
    if !(side > T::zero()) {
        return Err(Error::Degenerate("ground-truth bounding box has zero extent".into()));
    }
    Ok(T::one() / side)
}

pub fn evaluate<T: Scalar>(pred: &[ParametricEdge<T>], gt: &[ParametricEdge<T>], cfg: &EvalConfig) -> Result<MetricReport> {
    if gt.is_empty() {
        return Err(Error::InvalidInput("no ground-truth edges".into()));
    }
    let scale = if cfg.normalize { normalization_scale(gt)? } else { T::one() };
    let rescale = |edges: &[ParametricEdge<T>]| -> Vec<ParametricEdge<T>> {
        edges.iter().map(|e| e.map_points(|p| p * scale)).collect()
    };
    let spacing = T::lit(cfg.spacing);
    let pred_pts = sample_edges(&rescale(pred), spacing)?;
    let gt_pts = sample_edges(&rescale(gt), spacing)?;
    let (accuracy, completeness, d_pred, d_gt) = if pred_pts.is_empty() {
        (None, None, Vec::new(), Vec::new())
    } else {
        let d_pred = nearest_distances(&pred_pts, &gt_pts)?;
        let d_gt = nearest_distances(&gt_pts, &pred_pts)?;
        let mean = |d: &[T]| d.iter().map(|v| v.as_f64()).sum::<f64>() / d.len() as f64;
        (Some(mean(&d_pred)), Some(mean(&d_gt)), d_pred, d_gt)
    };
    let scores = cfg
        .thresholds
        .iter()
        .map(|&tau| {
            let (precision, recall) = if d_pred.is_empty() {
                (0.0, 0.0)
            } else {
                (fraction_within(&d_pred, T::lit(tau)), fraction_within(&d_gt, T::lit(tau)))
            };
            ThresholdScores {
                tau,
                precision,
                recall,
                fscore: fscore(precision, recall),
            }
        })
        .collect();
    Ok(MetricReport {
        format: METRICS_FORMAT.into(),
        accuracy,
        completeness,
        scores,
        spacing: cfg.spacing,
        scale: scale.as_f64(),
        pred_edges: pred.len(),
        gt_edges: gt.len(),
        pred_points: pred_pts.len(),
        gt_points: gt_pts.len(),
    })
}

/// Acc/Comp in thousandths of the normalized unit (mm for a 1 m box), then
/// R, P and F per threshold.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = |tau: f64| format!("{}", (tau * 1000.0).round());
        let mut head = vec!["Acc".to_string(), "Comp".to_string()];
        for prefix in ["R", "P", "F"] {
            for s in &self.scores {
                head.push(format!("{prefix}{}", label(s.tau)));
            }
        }
        let mm = |v: Option<f64>| v.map(|v| format!("{:.1}", v * 1000.0)).unwrap_or_else(|| "-".into());
        let mut row = vec![mm(self.accuracy), mm(self.completeness)];
        row.extend(self.scores.iter().map(|s| format!("{:.1}", s.recall)));
        row.extend(self.scores.iter().map(|s| format!("{:.1}", s.precision)));
        row.extend(self.scores.iter().map(|s| format!("{:.1}", s.fscore)));
        let line = |cells: &[String]| cells.iter().map(|c| format!("{c:>7}")).collect::<String>();
        writeln!(f, "{}", line(&head))?;
        write!(f, "{}", line(&row))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn sampling_examples() {
        let seg = ParametricEdge::line(v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0));
        let s = sample_edge(&seg, 0.25).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s[4], v(1.0, 0.0, 0.0));
        assert_eq!(sample_edge(&seg, 3.0).unwrap(), vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)]);
        assert!(sample_edge(&seg, 0.0).is_err());

        // Bézier with unevenly spaced collinear control points traces the same segment
        let b = ParametricEdge::bezier(v(0.0, 0.0, 0.0), v(0.1, 0.0, 0.0), v(0.8, 0.0, 0.0), v(1.0, 0.0, 0.0));
        let sb = sample_edge(&b, 0.25).unwrap();
        assert_eq!(sb.len(), s.len());
        for (a, c) in s.iter().zip(&sb) {
            assert!((a - c).norm() < 1e-6);
        }
    }

    #[test]
    fn spacing_is_respected_on_curves() {
        let b = ParametricEdge::bezier(v(0.0, 0.0, 0.0), v(1.0, 2.0, 0.0), v(3.0, 2.0, 0.0), v(4.0, 0.0, 1.0));
        let s = sample_edge(&b, 0.05).unwrap();
        for w in s.windows(2) {
            assert!((w[1] - w[0]).norm() <= 0.05 + 1e-12);
        }
        assert_eq!(s[0], b.start());
        assert_relative_eq!(s[s.len() - 1], b.end(), epsilon = 1e-15);
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![v(0.0, 0.0, 0.0)];
        let b = vec![v(1.0, 0.0, 0.0)];
        assert_eq!(chamfer_directional(&a, &b).unwrap(), 1.0);
        assert_eq!(chamfer_directional(&b, &b).unwrap(), 0.0);
        assert!(chamfer_directional(&a, &[]).is_err());
    }

    #[test]
    fn precision_recall_examples() {
        let gt = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)];
        assert_eq!(precision_recall(&gt, &gt, 0.01).unwrap(), (100.0, 100.0, 100.0));
        let pred = vec![v(0.0, 0.005, 0.0), v(0.5, 0.0, 0.0)];
        assert_eq!(precision_recall(&pred, &gt, 0.01).unwrap().0, 50.0);
        assert_eq!(precision_recall(&[], &gt, 0.01).unwrap(), (0.0, 0.0, 0.0));
        assert!(precision_recall(&pred, &[], 0.01).is_err());
    }

    #[test]
    fn evaluation_ignores_edge_order_and_normalizes() {
        let gt = vec![
            ParametricEdge::line(v(0.0, 0.0, 0.0), v(2.0, 0.0, 0.0)),
            ParametricEdge::line(v(0.0, 0.0, 0.0), v(0.0, 1.0, 0.0)),
        ];
        let pred = vec![
            ParametricEdge::line(v(0.0, 0.01, 0.0), v(2.0, 0.01, 0.0)),
            ParametricEdge::bezier(v(0.0, 0.0, 0.0), v(0.0, 0.3, 0.0), v(0.02, 0.6, 0.0), v(0.0, 1.0, 0.0)),
        ];
        let cfg = EvalConfig::default();
        let a = evaluate(&pred, &gt, &cfg).unwrap();
        let b = evaluate(&[pred[1], pred[0]], &gt, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scale, 0.5);
        assert!(a.to_string().lines().next().unwrap().contains("R20"));
        let empty = evaluate(&[], &gt, &cfg).unwrap();
        assert_eq!(empty.accuracy, None);
        assert!(empty.scores.iter().all(|s| s.precision == 0.0 && s.recall == 0.0));
    }

    fn brute(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Vec<f64> {
        a.iter()
            .map(|p| {
                b.iter()
                    .map(|q| crate::spatial::dist2(p, q))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    }

    #[test]
    fn nearest_distances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let a: Vec<_> = (0..50).map(|_| v(rng.random(), rng.random(), rng.random())).collect();
            let b: Vec<_> = (0..50).map(|_| v(rng.random(), rng.random(), rng.random())).collect();
            let d = brute(&a, &b);
            assert_eq!(nearest_distances(&a, &b).unwrap(), d);
            assert_eq!(chamfer_directional(&a, &b).unwrap(), d.iter().sum::<f64>() / 50.0);
        }
    }

    fn cloud() -> impl Strategy<Value = Vec<Vector3<f64>>> {
        prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(x, y, z)| v(x, y, z)), 1..40)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn monotone_and_symmetric(a in cloud(), b in cloud(), t1 in 0.01..0.3f64, dt in 0.0..0.3f64, dup in 0usize..40) {
            let t2 = t1 + dt;
            let (p1, r1, _) = precision_recall(&a, &b, t1).unwrap();
            let (p2, r2, _) = precision_recall(&a, &b, t2).unwrap();
            prop_assert!(p1 <= p2 && r1 <= r2);
            let (ps, rs, _) = precision_recall(&b, &a, t1).unwrap();
            prop_assert_eq!(p1, rs);
            prop_assert_eq!(r1, ps);
            prop_assert_eq!(chamfer_directional(&a, &a).unwrap(), 0.0);
            // a duplicated reconstruction is not penalized
            let mut a2 = a.clone();
            a2.extend_from_slice(&a);
            prop_assert_eq!(precision_recall(&a2, &b, t1).unwrap().0, p1);
            let mut b2 = b.clone();
            b2.push(b[dup % b.len()]);
            prop_assert_eq!(precision_recall(&a, &b2, t1).unwrap().0, p1);
        }
    }
}
