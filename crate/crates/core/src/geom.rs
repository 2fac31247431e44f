//! Camera model, rotation algebra and the Gaussian covariance factorization.
//!
//! Quaternions are scalar-first `(w, x, y, z)` and may be stored
//! unnormalized; every consumer normalizes before use.

use nalgebra::{Matrix3, Quaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::scalar::{sigmoid, Scalar};

/// Depth at or below which [`CameraView::project_point`] reports the point as behind the camera.
pub const MIN_PROJECT_DEPTH: f64 = 1e-8;

/// One oriented edge point, stored as pre-activation parameters.
///
/// Activated scale is `exp(log_scale)`, activated opacity is
/// `sigmoid(opacity_raw)`. Intensity is fixed to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeGaussian<T: Scalar> {
    pub mean: Vector3<T>,
    pub rot: Quaternion<T>,
    pub log_scale: Vector3<T>,
    pub opacity_raw: T,
}

impl<T: Scalar> EdgeGaussian<T> {
    pub fn new(mean: Vector3<T>, rot: Quaternion<T>, log_scale: Vector3<T>, opacity_raw: T) -> Self {
        Self {
            mean,
            rot,
            log_scale,
            opacity_raw,
        }
    }

    pub fn scales(&self) -> Vector3<T> {
        self.log_scale.map(|s| s.exp())
    }

    pub fn opacity(&self) -> T {
        sigmoid(self.opacity_raw)
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        rotation_matrix(&self.rot)
    }

    pub fn covariance(&self) -> Matrix3<T> {
        covariance(&self.rot, &self.log_scale)
    }

    pub fn principal_direction(&self) -> Vector3<T> {
        principal_direction(self)
    }

    /// Flattened raw parameters: mean(3), rot(w,x,y,z), log_scale(3), opacity_raw.
    pub fn to_params(&self) -> [T; PARAMS_PER_GAUSSIAN] {
        let m = &self.mean;
        let q = &self.rot;
        let s = &self.log_scale;
        [
            m.x, m.y, m.z, q.w, q.i, q.j, q.k, s.x, s.y, s.z, self.opacity_raw,
        ]
    }

    pub fn from_params(p: &[T; PARAMS_PER_GAUSSIAN]) -> Self {
        Self {
            mean: Vector3::new(p[0], p[1], p[2]),
            rot: Quaternion::new(p[3], p[4], p[5], p[6]),
            log_scale: Vector3::new(p[7], p[8], p[9]),
            opacity_raw: p[10],
        }
    }
}

/// Number of raw scalars per Gaussian.
pub const PARAMS_PER_GAUSSIAN: usize = 11;

/// Unit-norm copy of `q`; the zero quaternion maps to identity.
pub fn normalize_quat<T: Scalar>(q: &Quaternion<T>) -> Quaternion<T> {
    let n = q.norm();
    if n > T::zero() {
        q / n
    } else {
        Quaternion::identity()
    }
}

/// Rotation matrix of the normalized quaternion.
pub fn rotation_matrix<T: Scalar>(q: &Quaternion<T>) -> Matrix3<T> {
    let q = normalize_quat(q);
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let one = T::one();
    let two = T::lit(2.0);
    Matrix3::new(
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    )
}

/// Pull a gradient on the rotation matrix back to the raw (unnormalized) quaternion.
pub fn rotation_matrix_vjp<T: Scalar>(q: &Quaternion<T>, d_r: &Matrix3<T>) -> Quaternion<T> {
    let n = q.norm();
    if n <= T::zero() {
        return Quaternion::new(T::zero(), T::zero(), T::zero(), T::zero());
    }
    let qn = q / n;
    let (w, x, y, z) = (qn.w, qn.i, qn.j, qn.k);
    let g = |r: usize, c: usize| d_r[(r, c)];
    let two = T::lit(2.0);
    let dw = two * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = two
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - two * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - two * x * g(2, 2));
    let dy = two
        * (-two * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - two * y * g(2, 2));
    let dz = two
        * (-two * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - two * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    // d(q/|q|)/dq = (I - q̂ q̂ᵀ) / |q|
    let dn = Quaternion::new(dw, dx, dy, dz);
    let dot = dn.coords.dot(&qn.coords);
    (dn - qn * dot) / n
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance<T: Scalar>(rot: &Quaternion<T>, log_scale: &Vector3<T>) -> Matrix3<T> {
    let r = rotation_matrix(rot);
    let m = r * Matrix3::from_diagonal(&log_scale.map(|s| s.exp()));
    let sigma = m * m.transpose();
    // exact symmetry
    (sigma + sigma.transpose()) * T::lit(0.5)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax3<T: Scalar>(v: &Vector3<T>) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Rotation column belonging to the largest scale (ties: lowest axis index).
pub fn principal_direction<T: Scalar>(g: &EdgeGaussian<T>) -> Vector3<T> {
    let axis = argmax3(&g.log_scale);
    rotation_matrix(&g.rot).column(axis).into_owned()
}

/// Rigid world-to-camera transform `x_cam = R x_world + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform<T: Scalar> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Scalar> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Largest deviation of `RᵀR` from identity.
    pub fn orthonormality_error(&self) -> T {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        e.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
    }
}

/// Pinhole camera with its supervising edge map.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView<T: Scalar> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    pub world_to_cam: RigidTransform<T>,
    pub target: GrayImage<T>,
}

impl<T: Scalar> CameraView<T> {
    pub fn new(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        width: usize,
        height: usize,
        world_to_cam: RigidTransform<T>,
    ) -> Result<Self> {
        if fx <= T::zero() || fy <= T::zero() {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_cam,
            target: GrayImage::zeros(width, height),
        })
    }

    pub fn with_target(mut self, target: GrayImage<T>) -> Result<Self> {
        if target.width != self.width || target.height != self.height {
            return Err(Error::Dimension(format!(
                "target {}x{} for a {}x{} camera",
                target.width, target.height, self.width, self.height
            )));
        }
        self.target = target;
        Ok(self)
    }

    /// Project a world point to pixel coordinates and depth.
    pub fn project_point(&self, p: &Vector3<T>) -> Result<(Vector2<T>, T)> {
        let c = self.world_to_cam.apply(p);
        if c.z <= T::lit(MIN_PROJECT_DEPTH) {
            return Err(Error::BehindCamera(c.z.as_f64()));
        }
        Ok((self.project_cam(&c), c.z))
    }

    /// Project a point already expressed in camera coordinates (no depth check).
    #[inline]
    pub fn project_cam(&self, c: &Vector3<T>) -> Vector2<T> {
        Vector2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy)
    }
}

/// Position plus unit direction; the sign of the direction carries no meaning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedPoint<T: Scalar> {
    pub position: Vector3<T>,
    pub direction: Vector3<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Line,
    Curve,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParametricEdge<T: Scalar> {
    LineSegment { p0: Vector3<T>, p1: Vector3<T> },
    CubicBezier { ctrl: [Vector3<T>; 4] },
}

impl<T: Scalar> ParametricEdge<T> {
    pub fn line(p0: Vector3<T>, p1: Vector3<T>) -> Self {
        Self::LineSegment { p0, p1 }
    }

    pub fn bezier(c0: Vector3<T>, c1: Vector3<T>, c2: Vector3<T>, c3: Vector3<T>) -> Self {
        Self::CubicBezier {
            ctrl: [c0, c1, c2, c3],
        }
    }

    pub fn kind(&self) -> EdgeKind {
        match self {
            Self::LineSegment { .. } => EdgeKind::Line,
            Self::CubicBezier { .. } => EdgeKind::Curve,
        }
    }

    /// Defining points: the two endpoints or the four control points.
    pub fn points(&self) -> Vec<Vector3<T>> {
        match self {
            Self::LineSegment { p0, p1 } => vec![*p0, *p1],
            Self::CubicBezier { ctrl } => ctrl.to_vec(),
        }
    }

    pub fn from_points(kind: EdgeKind, pts: &[Vector3<T>]) -> Result<Self> {
        match (kind, pts.len()) {
            (EdgeKind::Line, 2) => Ok(Self::line(pts[0], pts[1])),
            (EdgeKind::Curve, 4) => Ok(Self::bezier(pts[0], pts[1], pts[2], pts[3])),
            (k, n) => Err(Error::InvalidInput(format!("{n} points for a {k:?} edge"))),
        }
    }

    pub fn evaluate(&self, t: T) -> Vector3<T> {
        match self {
            Self::LineSegment { p0, p1 } => p0 + (p1 - p0) * t,
            Self::CubicBezier { ctrl } => bezier_point(ctrl, t),
        }
    }

    pub fn start(&self) -> Vector3<T> {
        self.evaluate(T::zero())
    }

    pub fn end(&self) -> Vector3<T> {
        self.evaluate(T::one())
    }

    /// Checks the non-degeneracy invariant (distinct endpoints).
    pub fn validate(&self) -> Result<()> {
        if (self.end() - self.start()).norm() <= T::zero() {
            return Err(Error::Degenerate("edge endpoints coincide".into()));
        }
        Ok(())
    }

    pub fn map_points(&self, f: impl Fn(&Vector3<T>) -> Vector3<T>) -> Self {
        match self {
            Self::LineSegment { p0, p1 } => Self::line(f(p0), f(p1)),
            Self::CubicBezier { ctrl } => Self::CubicBezier {
                ctrl: [f(&ctrl[0]), f(&ctrl[1]), f(&ctrl[2]), f(&ctrl[3])],
            },
        }
    }
}

/// Cubic Bernstein basis at `t`.
#[inline]
pub fn bernstein3<T: Scalar>(t: T) -> [T; 4] {
    let s = T::one() - t;
    let three = T::lit(3.0);
    [s * s * s, three * s * s * t, three * s * t * t, t * t * t]
}

#[inline]
pub fn bezier_point<T: Scalar>(ctrl: &[Vector3<T>; 4], t: T) -> Vector3<T> {
    let b = bernstein3(t);
    ctrl[0] * b[0] + ctrl[1] * b[1] + ctrl[2] * b[2] + ctrl[3] * b[3]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rot_z90() -> Quaternion<f64> {
        let h = std::f64::consts::FRAC_PI_4;
        Quaternion::new(h.cos(), 0.0, 0.0, h.sin())
    }

    fn ln3(a: f64, b: f64, c: f64) -> Vector3<f64> {
        Vector3::new(a.ln(), b.ln(), c.ln())
    }

    #[test]
    fn covariance_examples() {
        let s = covariance(&Quaternion::identity(), &ln3(2.0, 1.0, 1.0));
        assert_relative_eq!(s, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-12);

        let s = covariance(&rot_z90(), &ln3(2.0, 1.0, 1.0));
        assert_relative_eq!(s, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), epsilon = 1e-12);

        let q = Quaternion::new(0.3, -1.2, 0.7, 2.0);
        assert_relative_eq!(covariance(&q, &Vector3::zeros()), Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn principal_direction_examples() {
        let mut g = EdgeGaussian::new(Vector3::zeros(), Quaternion::identity(), ln3(3.0, 1.0, 1.0), 0.0);
        assert_relative_eq!(g.principal_direction(), Vector3::x(), epsilon = 1e-15);
        g.rot = rot_z90();
        assert_relative_eq!(g.principal_direction(), Vector3::y(), epsilon = 1e-12);
        g.rot = Quaternion::identity();
        g.log_scale = Vector3::zeros();
        assert_eq!(g.principal_direction(), Vector3::x());
    }

    fn cam() -> CameraView<f64> {
        CameraView::new(100.0, 100.0, 50.0, 50.0, 100, 100, RigidTransform::identity()).unwrap()
    }

    #[test]
    fn project_point_examples() {
        let (px, d) = cam().project_point(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((px.x, px.y, d), (50.0, 50.0, 2.0));
        let (px, d) = cam().project_point(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!((px.x, px.y, d), (100.0, 50.0, 2.0));
        assert!(matches!(
            cam().project_point(&Vector3::new(1.0, 1.0, 0.0)),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn camera_rejects_bad_focal_and_target() {
        assert!(CameraView::new(0.0, 1.0, 0.0, 0.0, 4, 4, RigidTransform::<f64>::identity()).is_err());
        assert!(cam().with_target(GrayImage::zeros(3, 3)).is_err());
    }

    #[test]
    fn rotation_vjp_matches_finite_differences() {
        let q = Quaternion::new(0.9, -0.3, 0.5, 1.4);
        let w = Matrix3::new(0.3, -1.0, 0.2, 0.7, 0.1, -0.4, 1.1, 0.5, -0.8);
        let f = |q: &Quaternion<f64>| rotation_matrix(q).component_mul(&w).sum();
        let g = rotation_matrix_vjp(&q, &w);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp.coords[k] += h;
            qm.coords[k] -= h;
            let fd = (f(&qp) - f(&qm)) / (2.0 * h);
            assert_relative_eq!(g.coords[k], fd, epsilon = 1e-8);
        }
    }

    fn arb_gaussian() -> impl Strategy<Value = EdgeGaussian<f64>> {
        (
            prop::array::uniform4(-1.0f64..1.0),
            prop::array::uniform3(-3.0f64..1.0),
        )
            .prop_filter("nonzero quaternion", |(q, _)| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
            .prop_map(|(q, s)| {
                EdgeGaussian::new(
                    Vector3::zeros(),
                    Quaternion::new(q[0], q[1], q[2], q[3]),
                    Vector3::new(s[0], s[1], s[2]),
                    0.0,
                )
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn covariance_is_symmetric_psd(g in arb_gaussian()) {
            let s = g.covariance();
            prop_assert!((s - s.transpose()).amax() <= 1e-12);
            let eig = s.symmetric_eigen();
            prop_assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12));
            let mut got: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = g.scales().iter().map(|s| s * s).collect();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
        }

        #[test]
        fn principal_direction_is_top_eigenvector(g in arb_gaussian()) {
            let d = g.principal_direction();
            let lambda = g.scales().max().powi(2);
            prop_assert!((d.norm() - 1.0).abs() < 1e-12);
            prop_assert!((g.covariance() * d - d * lambda).norm() < 1e-9);
        }

        #[test]
        fn projection_is_scale_consistent(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.5f64..5.0) {
            let p = Vector3::new(x, y, z);
            let (a, da) = cam().project_point(&p).unwrap();
            let (b, db) = cam().project_point(&(p * 2.0)).unwrap();
            prop_assert!((a - b).norm() < 1e-9);
            prop_assert!((db - 2.0 * da).abs() < 1e-12);
        }
    }
}
