//! Synthetic scenes: ground-truth edge sets, camera rings and rasterized
//! edge maps standing in for detector output.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{CameraView, ParametricEdge, RigidTransform};
use crate::image::GrayImage;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    /// The 12 edges of the cube `[-0.5, 0.5]³`.
    Cube,
    /// Cube edges plus four cubic Béziers lying on cube faces.
    Mixed,
    /// Piecewise cubic approximation of a two-turn helix.
    HelixCurves,
}

impl SceneKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Cube => "cube",
            Self::Mixed => "mixed",
            Self::HelixCurves => "helix_curves",
        }
    }
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cube" => Ok(Self::Cube),
            "mixed" => Ok(Self::Mixed),
            "helix" | "helix_curves" => Ok(Self::HelixCurves),
            other => Err(Error::InvalidInput(format!("unknown scene kind {other:?}"))),
        }
    }
}

fn v<T: Scalar>(x: f64, y: f64, z: f64) -> Vector3<T> {
    Vector3::new(T::lit(x), T::lit(y), T::lit(z))
}

fn cube_edges<T: Scalar>() -> Vec<ParametricEdge<T>> {
    let mut edges = Vec::with_capacity(12);
    let h = 0.5;
    for axis in 0..3 {
        for &a in &[-h, h] {
            for &b in &[-h, h] {
                let mut p0 = [0.0; 3];
                let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
                p0[u] = a;
                p0[w] = b;
                p0[axis] = -h;
                let mut p1 = p0;
                p1[axis] = h;
                edges.push(ParametricEdge::line(v(p0[0], p0[1], p0[2]), v(p1[0], p1[1], p1[2])));
            }
        }
    }
    edges
}

/// Face curves as (face normal axis, face sign, in-plane control points).
const FACE_CURVES: [(usize, f64, [[f64; 2]; 4]); 4] = [
    (2, 0.5, [[-0.3, -0.2], [-0.15, 0.35], [0.15, 0.35], [0.3, -0.2]]),
    (2, -0.5, [[-0.25, 0.3], [0.3, 0.3], [0.3, -0.3], [-0.25, -0.3]]),
    (0, 0.5, [[-0.3, -0.3], [0.35, -0.2], [-0.35, 0.2], [0.3, 0.3]]),
    (1, -0.5, [[-0.3, 0.0], [-0.1, 0.45], [0.1, -0.45], [0.3, 0.0]]),
];

fn face_curves<T: Scalar>(rng: &mut ChaCha8Rng) -> Vec<ParametricEdge<T>> {
    FACE_CURVES
        .iter()
        .map(|(axis, sign, ctrl)| {
            let pts: Vec<Vector3<T>> = ctrl
                .iter()
                .map(|c| {
                    let mut p = [0.0; 3];
                    p[*axis] = *sign;
                    p[(axis + 1) % 3] = c[0] + rng.random_range(-0.02..0.02);
                    p[(axis + 2) % 3] = c[1] + rng.random_range(-0.02..0.02);
                    v(p[0], p[1], p[2])
                })
                .collect();
            ParametricEdge::bezier(pts[0], pts[1], pts[2], pts[3])
        })
        .collect()
}

fn helix<T: Scalar>(rng: &mut ChaCha8Rng) -> Vec<ParametricEdge<T>> {
    let radius = 0.4;
    let turns = 2.0;
    let height = 0.8;
    let segments_per_turn = 8;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let n = (turns * segments_per_turn as f64) as usize;
    let dtheta = std::f64::consts::TAU / segments_per_turn as f64;
    let rise = height / n as f64;
    let point = |th: f64, z: f64| [radius * (th + phase).cos(), radius * (th + phase).sin(), z];
    let tangent = |th: f64| [-radius * (th + phase).sin(), radius * (th + phase).cos(), rise / dtheta];
    (0..n)
        .map(|i| {
            let t0 = i as f64 * dtheta;
            let t1 = t0 + dtheta;
            let z0 = -height / 2.0 + i as f64 * rise;
            let p0 = point(t0, z0);
            let p3 = point(t1, z0 + rise);
            // Hermite to Bézier: handles along the tangent, a third of the parameter step
            let k = dtheta / 3.0;
            let (d0, d1) = (tangent(t0), tangent(t1));
            let c1 = [p0[0] + k * d0[0], p0[1] + k * d0[1], p0[2] + k * d0[2]];
            let c2 = [p3[0] - k * d1[0], p3[1] - k * d1[1], p3[2] - k * d1[2]];
            ParametricEdge::bezier(
                v(p0[0], p0[1], p0[2]),
                v(c1[0], c1[1], c1[2]),
                v(c2[0], c2[1], c2[2]),
                v(p3[0], p3[1], p3[2]),
            )
        })
        .collect()
}

/// Ground-truth edges for a scene kind; deterministic per seed.
pub fn make_scene<T: Scalar>(kind: SceneKind, seed: u64) -> Vec<ParametricEdge<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SceneKind::Cube => cube_edges(),
        SceneKind::Mixed => {
            let mut e = cube_edges();
            e.extend(face_curves(&mut rng));
            e
        }
        SceneKind::HelixCurves => helix(&mut rng),
    }
}

/// Pinhole intrinsics and image size shared by a camera ring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> Intrinsics<T> {
    /// Square image with the principal point at the center of the pixel grid.
    pub fn square(size: usize, focal: f64) -> Self {
        let c = T::lit((size as f64 - 1.0) / 2.0);
        Self {
            fx: T::lit(focal),
            fy: T::lit(focal),
            cx: c,
            cy: c,
            width: size,
            height: size,
        }
    }
}

/// World-to-camera transform for a camera at `eye` looking at `target`.
///
/// Camera axes follow the x-right, y-down, z-forward convention with world +z
/// as the up hint. When the viewing direction is parallel to +z the up hint
/// switches to world +y.
pub fn look_at<T: Scalar>(eye: &Vector3<T>, target: &Vector3<T>) -> Result<RigidTransform<T>> {
    let forward = target - eye;
    let dist = forward.norm();
    if dist <= T::zero() {
        return Err(Error::Degenerate("camera coincides with its look-at point".into()));
    }
    let forward = forward / dist;
    let mut up = Vector3::z();
    if forward.cross(&up).norm() < T::lit(1e-6) {
        up = Vector3::y();
    }
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -(rotation * eye);
    Ok(RigidTransform { rotation, translation })
}

/// `n` cameras at equal azimuth steps (starting at 0°) on a circle of the
/// given radius and elevation around `lookat`.
pub fn camera_ring<T: Scalar>(
    n: usize,
    radius: T,
    elevation_deg: T,
    lookat: Vector3<T>,
    intrinsics: Intrinsics<T>,
) -> Result<Vec<CameraView<T>>> {
    if n < 2 {
        return Err(Error::InvalidInput("camera ring needs at least 2 views".into()));
    }
    if radius <= T::zero() {
        return Err(Error::InvalidInput("camera ring radius must be positive".into()));
    }
    let el = elevation_deg * T::pi() / T::lit(180.0);
    (0..n)
        .map(|i| {
            let az = T::two_pi() * T::from_count(i) / T::from_count(n);
            let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let eye = lookat + dir * radius;
            let pose = look_at(&eye, &lookat)?;
            CameraView::new(
                intrinsics.fx,
                intrinsics.fy,
                intrinsics.cx,
                intrinsics.cy,
                intrinsics.width,
                intrinsics.height,
                pose,
            )
        })
        .collect()
}

/// Projected 2D polyline pieces of an edge; pieces crossing the near plane are dropped.
fn project_polyline<T: Scalar>(edge: &ParametricEdge<T>, cam: &CameraView<T>) -> Vec<(Vector2<T>, Vector2<T>)> {
    let samples = match edge {
        ParametricEdge::LineSegment { .. } => 16,
        ParametricEdge::CubicBezier { .. } => 128,
    };
    let pts: Vec<Option<Vector2<T>>> = (0..=samples)
        .map(|i| {
            let t = T::from_count(i) / T::from_count(samples);
            cam.project_point(&edge.evaluate(t)).ok().map(|(px, _)| px)
        })
        .collect();
    pts.windows(2)
        .filter_map(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        })
        .collect()
}

fn point_segment_distance<T: Scalar>(p: &Vector2<T>, a: &Vector2<T>, b: &Vector2<T>) -> T {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > T::zero() {
        ((p - a).dot(&ab) / len2).max(T::zero()).min(T::one())
    } else {
        T::zero()
    };
    (p - (a + ab * t)).norm()
}

/// Wireframe edge map: pixels within `thickness_px / 2` of a projected edge
/// are 1; with `soft`, intensity then falls off linearly over one pixel.
/// No surface occlusion.
pub fn render_gt_edge_map<T: Scalar>(
    edges: &[ParametricEdge<T>],
    cam: &CameraView<T>,
    thickness_px: T,
    soft: bool,
) -> Result<GrayImage<T>> {
    if thickness_px < T::one() {
        return Err(Error::InvalidInput("edge thickness must be at least 1 px".into()));
    }
    let (w, h) = (cam.width, cam.height);
    let mut img = GrayImage::zeros(w, h);
    let half = thickness_px / T::lit(2.0);
    let reach = if soft { half + T::one() } else { half };
    for edge in edges {
        for (a, b) in project_polyline(edge, cam) {
            let lo_x = (a.x.min(b.x) - reach).floor().as_f64().max(0.0);
            let hi_x = (a.x.max(b.x) + reach).ceil().as_f64().min(w as f64 - 1.0);
            let lo_y = (a.y.min(b.y) - reach).floor().as_f64().max(0.0);
            let hi_y = (a.y.max(b.y) + reach).ceil().as_f64().min(h as f64 - 1.0);
            if !(lo_x <= hi_x && lo_y <= hi_y) {
                continue;
            }
            for y in lo_y as usize..=hi_y as usize {
                for x in lo_x as usize..=hi_x as usize {
                    let p = Vector2::new(T::from_count(x), T::from_count(y));
                    let d = point_segment_distance(&p, &a, &b);
                    let val = if d <= half {
                        T::one()
                    } else if soft && d < reach {
                        reach - d
                    } else {
                        continue;
                    };
                    if val > img.get(x, y) {
                        img.set(x, y, val);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Settings for [`build_scene`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSettings {
    pub views: usize,
    pub image_size: usize,
    pub focal: f64,
    pub ring_radius: f64,
    pub elevation_deg: f64,
    pub thickness_px: f64,
    pub soft: bool,
}

impl Default for SceneSettings {
    fn default() -> Self {
        Self {
            views: 50,
            image_size: 256,
            focal: 350.0,
            ring_radius: 3.0,
            elevation_deg: 30.0,
            thickness_px: 2.0,
            soft: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene<T: Scalar> {
    pub name: String,
    pub gt_edges: Vec<ParametricEdge<T>>,
    pub cameras: Vec<CameraView<T>>,
    pub bbox_min: Vector3<T>,
    pub bbox_max: Vector3<T>,
}

/// Axis-aligned bounds of densely sampled edge points.
pub fn edge_bounds<T: Scalar>(edges: &[ParametricEdge<T>]) -> Option<(Vector3<T>, Vector3<T>)> {
    let mut it = edges.iter().flat_map(|e| (0..=64).map(move |i| e.evaluate(T::from_count(i) / T::lit(64.0))));
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), p| (lo.inf(&p), hi.sup(&p))))
}

/// Ground truth, camera ring around the origin and rasterized edge maps.
pub fn build_scene<T: Scalar>(kind: SceneKind, seed: u64, settings: &SceneSettings) -> Result<SyntheticScene<T>> {
    let gt_edges = make_scene::<T>(kind, seed);
    let (bbox_min, bbox_max) = edge_bounds(&gt_edges).expect("scene kinds are non-empty");
    let rig = camera_ring(
        settings.views,
        T::lit(settings.ring_radius),
        T::lit(settings.elevation_deg),
        Vector3::zeros(),
        Intrinsics::square(settings.image_size, settings.focal),
    )?;
    let cameras = rig
        .into_iter()
        .map(|cam| {
            let target = render_gt_edge_map(&gt_edges, &cam, T::lit(settings.thickness_px), settings.soft)?;
            cam.with_target(target)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        name: kind.name().to_string(),
        gt_edges,
        cameras,
        bbox_min,
        bbox_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scene_sizes() {
        let cube = make_scene::<f64>(SceneKind::Cube, 0);
        assert_eq!(cube.len(), 12);
        assert!(cube.iter().all(|e| matches!(e, ParametricEdge::LineSegment { .. })));
        assert!(cube.iter().all(|e| ((e.end() - e.start()).norm() - 1.0).abs() < 1e-15));
        let mixed = make_scene::<f64>(SceneKind::Mixed, 3);
        assert_eq!(mixed.iter().filter(|e| matches!(e, ParametricEdge::CubicBezier { .. })).count(), 4);
        assert_eq!(mixed.len(), 16);
        assert_eq!(mixed, make_scene::<f64>(SceneKind::Mixed, 3));
        assert_ne!(mixed, make_scene::<f64>(SceneKind::Mixed, 4));
        let helix = make_scene::<f64>(SceneKind::HelixCurves, 1);
        assert_eq!(helix.len(), 16);
        for w in helix.windows(2) {
            assert!((w[0].end() - w[1].start()).norm() < 1e-12);
        }
    }

    #[test]
    fn ring_azimuths_and_lookat() {
        let intr = Intrinsics::<f64>::square(64, 80.0);
        let cams = camera_ring(4, 2.0, 0.0, Vector3::new(0.1, 0.2, 0.3), intr).unwrap();
        let centers: Vec<_> = cams.iter().map(|c| c.world_to_cam.center() - Vector3::new(0.1, 0.2, 0.3)).collect();
        assert_relative_eq!(centers[0], Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(centers[1], Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(centers[2], Vector3::new(-2.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(centers[3], Vector3::new(0.0, -2.0, 0.0), epsilon = 1e-12);
        let many = camera_ring(50, 3.0, 30.0, Vector3::new(0.1, 0.2, 0.3), intr).unwrap();
        assert_eq!(many.len(), 50);
        for c in &many {
            let (px, _) = c.project_point(&Vector3::new(0.1, 0.2, 0.3)).unwrap();
            assert!((px.x - c.cx).abs() < 1e-6 && (px.y - c.cy).abs() < 1e-6);
            assert!(c.world_to_cam.orthonormality_error() < 1e-12);
        }
        // straight down: up hint falls back
        let top = camera_ring(3, 2.0, 90.0, Vector3::zeros(), intr).unwrap();
        assert!(top[0].world_to_cam.rotation.iter().all(|v: &f64| v.is_finite()));
        assert!(camera_ring(1, 2.0, 0.0, Vector3::zeros(), intr).is_err());
    }

    fn front_cam() -> CameraView<f64> {
        let pose = look_at(&Vector3::new(0.0, -3.0, 0.0), &Vector3::zeros()).unwrap();
        let i = Intrinsics::<f64>::square(65, 100.0);
        CameraView::new(i.fx, i.fy, i.cx, i.cy, i.width, i.height, pose).unwrap()
    }

    #[test]
    fn centered_edge_makes_a_band() {
        // horizontal world edge through the optical axis projects to row 32
        let e = [ParametricEdge::line(Vector3::new(-0.5, 0.0, 0.0), Vector3::new(0.5, 0.0, 0.0))];
        let img = render_gt_edge_map(&e, &front_cam(), 2.0, false).unwrap();
        for x in 20..45 {
            assert_eq!(img.get(x, 31), 1.0);
            assert_eq!(img.get(x, 32), 1.0);
            assert_eq!(img.get(x, 33), 1.0);
            assert_eq!(img.get(x, 30), 0.0);
            assert_eq!(img.get(x, 34), 0.0);
        }
        let thin = render_gt_edge_map(&e, &front_cam(), 1.0, false).unwrap();
        let thick = render_gt_edge_map(&e, &front_cam(), 3.0, false).unwrap();
        assert!(thin.data.iter().zip(&thick.data).all(|(a, b)| *a <= *b));
        assert!(thick.data.iter().sum::<f64>() > thin.data.iter().sum::<f64>());
    }

    #[test]
    fn edge_behind_camera_is_invisible() {
        let e = [ParametricEdge::line(Vector3::new(-0.5, -5.0, 0.0), Vector3::new(0.5, -5.0, 0.0))];
        let img = render_gt_edge_map(&e, &front_cam(), 2.0, true).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
    }
}
