//! Differentiable splat rasterizer for grayscale edge maps.
//!
//! Forward: EWA projection of every Gaussian to a 2D splat, depth sort
//! (index tie-break), per-pixel front-to-back compositing with unit
//! intensity. Backward: analytic gradients of a per-pixel upstream signal
//! with respect to every raw Gaussian parameter. The backward pass walks each
//! pixel's splats front to back again and uses the stored pixel value to
//! recover the contribution of everything behind the current splat.
//!
//! Pixel `(x, y)` is sampled at image coordinates `(x, y)`.

use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{rotation_matrix, rotation_matrix_vjp, CameraView, EdgeGaussian, PARAMS_PER_GAUSSIAN};
use crate::image::GrayImage;
use crate::scalar::{sigmoid, Scalar};

/// Screen-space dilation added to every projected covariance (pixels²).
pub const LOW_PASS: f64 = 0.3;
/// Upper clamp on the per-pixel splat alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Splats at or in front of this camera-space depth are culled.
pub const NEAR_PLANE: f64 = 1e-4;
/// Compositing stops once transmittance falls below this value.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Splats whose projected covariance determinant is below this are skipped.
pub const MIN_DET: f64 = 1e-12;
/// Half-width of the splat footprint in standard deviations.
pub const SIGMA_EXTENT: f64 = 3.0;

/// Rows are split into this many fixed bands for backward accumulation; the
/// per-band partial sums are reduced in band order so results do not depend
/// on the thread count.
const BACKWARD_BANDS: usize = 4;

/// One Gaussian projected into a view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D<T: Scalar> {
    pub mean2d: Vector2<T>,
    /// Projected covariance including the low-pass dilation.
    pub cov2d: Matrix2<T>,
    pub conic: Matrix2<T>,
    pub depth: T,
    /// Activated opacity.
    pub opacity: T,
    pub source_index: usize,
    /// Inclusive pixel ranges covered by the 3σ bounding box.
    pub x_range: (usize, usize),
    pub y_range: (usize, usize),
    cam_point: Vector3<T>,
    jacobian: Matrix2x3<T>,
}

/// EWA projection; `None` when the Gaussian is culled.
pub fn project_gaussian<T: Scalar>(
    cam: &CameraView<T>,
    g: &EdgeGaussian<T>,
    source_index: usize,
) -> Option<Splat2D<T>> {
    let t = cam.world_to_cam.apply(&g.mean);
    if t.z <= T::lit(NEAR_PLANE) {
        return None;
    }
    let jac = projection_jacobian(cam, &t);
    let tw = jac * cam.world_to_cam.rotation;
    let sigma = g.covariance();
    let raw = tw * sigma * tw.transpose();
    let low = T::lit(LOW_PASS);
    let cov = Matrix2::new(raw[(0, 0)] + low, raw[(0, 1)], raw[(0, 1)], raw[(1, 1)] + low);
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    if !(det >= T::lit(MIN_DET)) {
        return None;
    }
    let conic = Matrix2::new(cov[(1, 1)] / det, -cov[(0, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det);
    let mean2d = cam.project_cam(&t);
    let ext = T::lit(SIGMA_EXTENT);
    let x_range = pixel_range(mean2d.x, ext * cov[(0, 0)].sqrt(), cam.width)?;
    let y_range = pixel_range(mean2d.y, ext * cov[(1, 1)].sqrt(), cam.height)?;
    Some(Splat2D {
        mean2d,
        cov2d: cov,
        conic,
        depth: t.z,
        opacity: g.opacity(),
        source_index,
        x_range,
        y_range,
        cam_point: t,
        jacobian: jac,
    })
}

/// Affine Jacobian of the perspective projection at camera point `t`.
fn projection_jacobian<T: Scalar>(cam: &CameraView<T>, t: &Vector3<T>) -> Matrix2x3<T> {
    let iz = T::one() / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        T::zero(),
        -cam.fx * t.x * iz2,
        T::zero(),
        cam.fy * iz,
        -cam.fy * t.y * iz2,
    )
}

/// Integer pixel centers within `[center - radius, center + radius]`, clipped to the image.
fn pixel_range<T: Scalar>(center: T, radius: T, size: usize) -> Option<(usize, usize)> {
    if size == 0 {
        return None;
    }
    let lo = (center - radius).ceil().as_f64();
    let hi = (center + radius).floor().as_f64();
    let lo = lo.max(0.0);
    let hi = hi.min((size - 1) as f64);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize))
}

/// Forward rendering result plus the state the backward pass needs.
#[derive(Clone, Debug)]
pub struct RenderOutput<T: Scalar> {
    pub image: GrayImage<T>,
    /// Visible splats in compositing order.
    pub splats: Vec<Splat2D<T>>,
    fingerprint: u64,
    cloud_len: usize,
}

impl<T: Scalar> RenderOutput<T> {
    pub fn visible_count(&self) -> usize {
        self.splats.len()
    }
}

/// Per-pixel candidate lists in compositing order (CSR layout).
struct PixelBins {
    offsets: Vec<u32>,
    entries: Vec<u32>,
}

impl PixelBins {
    fn build<T: Scalar>(splats: &[Splat2D<T>], width: usize, height: usize) -> Self {
        let mut counts = vec![0u32; width * height + 1];
        for s in splats {
            for y in s.y_range.0..=s.y_range.1 {
                let row = y * width;
                for x in s.x_range.0..=s.x_range.1 {
                    counts[row + x + 1] += 1;
                }
            }
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let offsets = counts;
        let mut cursor: Vec<u32> = offsets[..width * height].to_vec();
        let mut entries = vec![0u32; *offsets.last().unwrap() as usize];
        for (si, s) in splats.iter().enumerate() {
            for y in s.y_range.0..=s.y_range.1 {
                let row = y * width;
                for x in s.x_range.0..=s.x_range.1 {
                    let c = &mut cursor[row + x];
                    entries[*c as usize] = si as u32;
                    *c += 1;
                }
            }
        }
        Self { offsets, entries }
    }

    #[inline]
    fn pixel(&self, idx: usize) -> &[u32] {
        &self.entries[self.offsets[idx] as usize..self.offsets[idx + 1] as usize]
    }
}

#[inline]
fn splat_alpha<T: Scalar>(s: &Splat2D<T>, px: T, py: T) -> (T, T, bool, Vector2<T>) {
    let d = Vector2::new(px - s.mean2d.x, py - s.mean2d.y);
    let c = &s.conic;
    let half = T::lit(0.5);
    let power = -half * (c[(0, 0)] * d.x * d.x + c[(1, 1)] * d.y * d.y) - c[(0, 1)] * d.x * d.y;
    let g = power.exp();
    let raw = s.opacity * g;
    let max = T::lit(ALPHA_MAX);
    if raw > max {
        (max, g, true, d)
    } else {
        (raw, g, false, d)
    }
}

fn fingerprint<T: Scalar>(cloud: &[EdgeGaussian<T>], cam: &CameraView<T>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    let mut put = |v: T| v.as_f64().to_bits().hash(&mut h);
    for g in cloud {
        for v in g.to_params() {
            put(v);
        }
    }
    for v in [cam.fx, cam.fy, cam.cx, cam.cy] {
        put(v);
    }
    for v in cam.world_to_cam.rotation.iter().chain(cam.world_to_cam.translation.iter()) {
        put(*v);
    }
    cam.width.hash(&mut h);
    cam.height.hash(&mut h);
    h.finish()
}

/// Project, depth-sort and keep the visible splats.
pub fn project_cloud<T: Scalar>(cloud: &[EdgeGaussian<T>], cam: &CameraView<T>) -> Vec<Splat2D<T>> {
    let mut splats: Vec<Splat2D<T>> = cloud
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(cam, g, i))
        .collect();
    splats.sort_by(|a, b| {
        a.depth
            .as_f64()
            .total_cmp(&b.depth.as_f64())
            .then(a.source_index.cmp(&b.source_index))
    });
    splats
}

/// Render the cloud into `cam`'s image plane.
pub fn render<T: Scalar>(cloud: &[EdgeGaussian<T>], cam: &CameraView<T>) -> RenderOutput<T> {
    render_with(cloud, cam, true)
}

/// Render without the transmittance early-out; test oracle for the early-out bound.
pub fn render_exhaustive<T: Scalar>(cloud: &[EdgeGaussian<T>], cam: &CameraView<T>) -> GrayImage<T> {
    render_with(cloud, cam, false).image
}

fn render_with<T: Scalar>(cloud: &[EdgeGaussian<T>], cam: &CameraView<T>, early_out: bool) -> RenderOutput<T> {
    let (w, h) = (cam.width, cam.height);
    let splats = project_cloud(cloud, cam);
    let bins = PixelBins::build(&splats, w, h);
    let mut image = GrayImage::zeros(w, h);
    let t_min = T::lit(MIN_TRANSMITTANCE);
    if w > 0 {
        image.data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            let py = T::from_count(y);
            for (x, out) in row.iter_mut().enumerate() {
                let px = T::from_count(x);
                let mut trans = T::one();
                let mut value = T::zero();
                for &si in bins.pixel(y * w + x) {
                    let (a, ..) = splat_alpha(&splats[si as usize], px, py);
                    value += a * trans;
                    trans *= T::one() - a;
                    if early_out && trans < t_min {
                        break;
                    }
                }
                *out = value;
            }
        });
    }
    RenderOutput {
        image,
        splats,
        fingerprint: fingerprint(cloud, cam),
        cloud_len: cloud.len(),
    }
}

/// Gradients of a scalar loss with respect to every raw Gaussian parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGradients<T: Scalar> {
    /// Layout per Gaussian as in [`EdgeGaussian::to_params`].
    pub params: Vec<[T; PARAMS_PER_GAUSSIAN]>,
    /// Gradient with respect to the projected 2D mean (pixels), per Gaussian.
    pub mean2d: Vec<Vector2<T>>,
    pub visible: Vec<bool>,
}

impl<T: Scalar> CloudGradients<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            params: vec![[T::zero(); PARAMS_PER_GAUSSIAN]; n],
            mean2d: vec![Vector2::zeros(); n],
            visible: vec![false; n],
        }
    }
}

#[derive(Clone, Copy)]
struct SplatAccum<T: Scalar> {
    mean2d: Vector2<T>,
    conic: Matrix2<T>,
    alpha: T,
}

impl<T: Scalar> SplatAccum<T> {
    fn zero() -> Self {
        Self {
            mean2d: Vector2::zeros(),
            conic: Matrix2::zeros(),
            alpha: T::zero(),
        }
    }
}

/// Back-propagate per-pixel gradients `upstream` (dL/dI) through the render
/// stored in `fwd`, which must come from `render(cloud, cam)` on the same state.
pub fn render_backward<T: Scalar>(
    cloud: &[EdgeGaussian<T>],
    cam: &CameraView<T>,
    fwd: &RenderOutput<T>,
    upstream: &GrayImage<T>,
) -> Result<CloudGradients<T>> {
    if fwd.cloud_len != cloud.len() || fwd.fingerprint != fingerprint(cloud, cam) {
        return Err(Error::Contract(
            "render_backward called with a cloud or camera that differs from the forward pass".into(),
        ));
    }
    if !upstream.same_shape(&fwd.image) {
        return Err(Error::Dimension("upstream gradient image does not match render".into()));
    }
    let (w, h) = (cam.width, cam.height);
    let splats = &fwd.splats;
    let bins = PixelBins::build(splats, w, h);
    let t_min = T::lit(MIN_TRANSMITTANCE);
    let rows_per_band = h.div_ceil(BACKWARD_BANDS).max(1);

    let band_accums: Vec<Vec<SplatAccum<T>>> = (0..BACKWARD_BANDS)
        .into_par_iter()
        .map(|band| {
            let mut acc = vec![SplatAccum::zero(); splats.len()];
            let y0 = band * rows_per_band;
            let y1 = ((band + 1) * rows_per_band).min(h);
            for y in y0..y1 {
                let py = T::from_count(y);
                for x in 0..w {
                    let idx = y * w + x;
                    let up = upstream.data[idx];
                    if up == T::zero() {
                        continue;
                    }
                    let px = T::from_count(x);
                    let total = fwd.image.data[idx];
                    let mut trans = T::one();
                    let mut accumulated = T::zero();
                    for &si in bins.pixel(idx) {
                        let s = &splats[si as usize];
                        let (a, g, clamped, d) = splat_alpha(s, px, py);
                        accumulated += a * trans;
                        let behind = total - accumulated;
                        let d_alpha = up * (trans - behind / (T::one() - a));
                        if !clamped {
                            let acc = &mut acc[si as usize];
                            acc.alpha += d_alpha * g;
                            // a = opacity * exp(power)
                            let d_power = d_alpha * a;
                            let c = &s.conic;
                            // d power / d mean2d = conic * d
                            acc.mean2d += Vector2::new(
                                c[(0, 0)] * d.x + c[(0, 1)] * d.y,
                                c[(1, 0)] * d.x + c[(1, 1)] * d.y,
                            ) * d_power;
                            let mhalf = -T::lit(0.5) * d_power;
                            acc.conic += Matrix2::new(d.x * d.x, d.x * d.y, d.x * d.y, d.y * d.y) * mhalf;
                        }
                        trans *= T::one() - a;
                        if trans < t_min {
                            break;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut totals = vec![SplatAccum::zero(); splats.len()];
    for band in &band_accums {
        for (t, b) in totals.iter_mut().zip(band) {
            t.mean2d += b.mean2d;
            t.conic += b.conic;
            t.alpha += b.alpha;
        }
    }

    let mut out = CloudGradients::zeros(cloud.len());
    for (s, acc) in splats.iter().zip(&totals) {
        let i = s.source_index;
        out.visible[i] = true;
        out.mean2d[i] = acc.mean2d;
        out.params[i] = chain_to_params(cam, &cloud[i], s, acc);
    }
    Ok(out)
}

/// Chain splat-level gradients (2D mean, conic, activated opacity) down to raw parameters.
fn chain_to_params<T: Scalar>(
    cam: &CameraView<T>,
    g: &EdgeGaussian<T>,
    s: &Splat2D<T>,
    acc: &SplatAccum<T>,
) -> [T; PARAMS_PER_GAUSSIAN] {
    let two = T::lit(2.0);
    let op = sigmoid(g.opacity_raw);
    let d_opacity_raw = acc.alpha * op * (T::one() - op);

    // conic = cov⁻¹  =>  dL/dcov = -conic · dL/dconic · conic
    let d_cov = -(s.conic * acc.conic * s.conic);
    let d_cov = (d_cov + d_cov.transpose()) * T::lit(0.5);

    let w = &cam.world_to_cam.rotation;
    let jac = &s.jacobian;
    let tw = jac * w;
    let rot = rotation_matrix(&g.rot);
    let scales = g.scales();
    let m = rot * Matrix3::from_diagonal(&scales);
    let sigma = m * m.transpose();

    // cov = TW Σ TWᵀ + low-pass
    let d_sigma = tw.transpose() * d_cov * tw;
    let d_tw = d_cov * tw * sigma * two;
    let d_jac = d_tw * w.transpose();

    // Σ = M Mᵀ, M = R S
    let d_m = d_sigma * m * two;
    let d_rot = d_m * Matrix3::from_diagonal(&scales);
    let mut d_log_scale = Vector3::zeros();
    for b in 0..3 {
        let mut v = T::zero();
        for a in 0..3 {
            v += d_m[(a, b)] * rot[(a, b)];
        }
        d_log_scale[b] = v * scales[b];
    }
    let d_q = rotation_matrix_vjp(&g.rot, &d_rot);

    // camera-space point: through the 2D mean and through the Jacobian
    let t = &s.cam_point;
    let iz = T::one() / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_t = jac.transpose() * acc.mean2d;
    let (fx, fy) = (cam.fx, cam.fy);
    d_t.x += d_jac[(0, 2)] * (-fx * iz2);
    d_t.y += d_jac[(1, 2)] * (-fy * iz2);
    d_t.z += d_jac[(0, 0)] * (-fx * iz2)
        + d_jac[(0, 2)] * (two * fx * t.x * iz3)
        + d_jac[(1, 1)] * (-fy * iz2)
        + d_jac[(1, 2)] * (two * fy * t.y * iz3);
    let d_mean = w.transpose() * d_t;

    [
        d_mean.x,
        d_mean.y,
        d_mean.z,
        d_q.w,
        d_q.i,
        d_q.j,
        d_q.k,
        d_log_scale.x,
        d_log_scale.y,
        d_log_scale.z,
        d_opacity_raw,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::RigidTransform;
    use crate::scalar::logit;
    use approx::assert_relative_eq;
    use nalgebra::Quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(w: usize, f: f64) -> CameraView<f64> {
        let c = (w as f64 - 1.0) / 2.0;
        CameraView::new(f, f, c, c, w, w, RigidTransform::identity()).unwrap()
    }

    fn iso(mean: Vector3<f64>, s: f64, alpha: f64) -> EdgeGaussian<f64> {
        EdgeGaussian::new(mean, Quaternion::identity(), Vector3::repeat(s.ln()), logit(alpha))
    }

    #[test]
    fn on_axis_projection() {
        let cam = CameraView::new(200.0, 200.0, 16.0, 16.0, 33, 33, RigidTransform::identity()).unwrap();
        let s = project_gaussian(&cam, &iso(Vector3::new(0.0, 0.0, 2.0), 0.01, 0.5), 0).unwrap();
        assert_eq!(s.mean2d, Vector2::new(16.0, 16.0));
        assert_relative_eq!(s.cov2d, Matrix2::identity() * 1.3, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let c = cam(32, 50.0);
        assert!(project_gaussian(&c, &iso(Vector3::new(0.0, 0.0, -1.0), 0.1, 0.5), 0).is_none());
        assert!(project_gaussian(&c, &iso(Vector3::new(0.0, 0.0, 5e-5), 0.1, 0.5), 0).is_none());
    }

    #[test]
    fn far_off_image_is_culled() {
        let c = cam(32, 50.0);
        assert!(project_gaussian(&c, &iso(Vector3::new(10.0, 0.0, 1.0), 0.01, 0.5), 0).is_none());
    }

    #[test]
    fn doubling_depth_quarters_covariance() {
        let c = cam(64, 100.0);
        let low = Matrix2::identity() * LOW_PASS;
        let a = project_gaussian(&c, &iso(Vector3::new(0.0, 0.0, 2.0), 0.05, 0.5), 0).unwrap();
        let b = project_gaussian(&c, &iso(Vector3::new(0.0, 0.0, 4.0), 0.05, 0.5), 0).unwrap();
        assert_relative_eq!((b.cov2d - low) * 4.0, a.cov2d - low, epsilon = 1e-12);
    }

    #[test]
    fn empty_cloud_renders_black() {
        let out = render::<f64>(&[], &cam(8, 10.0));
        assert!(out.image.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_splat_center_value_is_opacity() {
        let c = cam(33, 100.0);
        let out = render(&[iso(Vector3::new(0.0, 0.0, 2.0), 0.02, 0.8)], &c);
        assert_relative_eq!(out.image.get(16, 16), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn two_coincident_splats_composite() {
        let c = cam(33, 100.0);
        // Same projected footprint center, different depths.
        let near = iso(Vector3::new(0.0, 0.0, 2.0), 0.02, 0.5);
        let far = iso(Vector3::new(0.0, 0.0, 4.0), 0.04, 0.5);
        let out = render(&[far, near], &c);
        assert_relative_eq!(out.image.get(16, 16), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn permutation_leaves_image_bit_identical() {
        let scene = random_scene(&mut ChaCha8Rng::seed_from_u64(3), 20);
        let c = cam(32, 40.0);
        let a = render(&scene, &c).image;
        let mut rev = scene.clone();
        rev.reverse();
        rev.swap(0, 7);
        assert_eq!(a, render(&rev, &c).image);
    }

    #[test]
    fn pixel_values_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = cam(32, 40.0);
        for _ in 0..20 {
            let mut scene = random_scene(&mut rng, 20);
            for g in &mut scene {
                g.opacity_raw = 8.0;
            }
            let img = render(&scene, &c).image;
            assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn early_out_error_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cam(32, 40.0);
        for _ in 0..10 {
            let mut scene = random_scene(&mut rng, 40);
            for g in &mut scene {
                g.mean.x *= 0.2;
                g.mean.y *= 0.2;
                g.opacity_raw = rng.random_range(2.0..6.0);
            }
            let fast = render(&scene, &c).image;
            let full = render_exhaustive(&scene, &c);
            for (a, b) in fast.data.iter().zip(&full.data) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    pub(crate) fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<EdgeGaussian<f64>> {
        (0..n)
            .map(|_| {
                EdgeGaussian::new(
                    Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(1.5..2.5)),
                    Quaternion::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ),
                    Vector3::new(
                        rng.random_range(-3.5..-2.0),
                        rng.random_range(-4.0..-2.5),
                        rng.random_range(-4.0..-2.5),
                    ),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let scene = random_scene(&mut ChaCha8Rng::seed_from_u64(9), 10);
        let c = cam(32, 40.0);
        let fwd = render(&scene, &c);
        let g = render_backward(&scene, &c, &fwd, &GrayImage::zeros(32, 32)).unwrap();
        assert!(g.params.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn culled_gaussian_gets_zero_gradient() {
        let mut scene = random_scene(&mut ChaCha8Rng::seed_from_u64(2), 5);
        scene.push(iso(Vector3::new(0.0, 0.0, -3.0), 0.05, 0.5));
        let c = cam(32, 40.0);
        let fwd = render(&scene, &c);
        let up = GrayImage::filled(32, 32, 1.0);
        let g = render_backward(&scene, &c, &fwd, &up).unwrap();
        assert!(!g.visible[5]);
        assert!(g.params[5].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_stale_forward_state() {
        let mut scene = random_scene(&mut ChaCha8Rng::seed_from_u64(4), 5);
        let c = cam(16, 20.0);
        let fwd = render(&scene, &c);
        scene[0].mean.x += 1e-3;
        let up = GrayImage::filled(16, 16, 1.0);
        assert!(matches!(render_backward(&scene, &c, &fwd, &up), Err(Error::Contract(_))));
    }

    #[test]
    fn single_pixel_mean_gradient_matches_finite_differences() {
        let c = cam(32, 40.0);
        let g0 = EdgeGaussian::new(
            Vector3::new(0.013, -0.021, 2.0),
            Quaternion::new(0.9, 0.2, -0.3, 0.1),
            Vector3::new(-2.5, -3.2, -3.0),
            0.4,
        );
        let (px, py) = (17usize, 14usize);
        let mut up = GrayImage::zeros(32, 32);
        up.set(px, py, 1.0);
        let fwd = render(&[g0], &c);
        let grad = render_backward(&[g0], &c, &fwd, &up).unwrap();
        let h = 1e-5;
        for k in 0..3 {
            let mut gp = g0;
            let mut gm = g0;
            gp.mean[k] += h;
            gm.mean[k] -= h;
            let fd = (render(&[gp], &c).image.get(px, py) - render(&[gm], &c).image.get(px, py)) / (2.0 * h);
            let an = grad.params[0][k];
            assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-8), "axis {k}: {an} vs {fd}");
        }
    }

    /// Reference backward that stores every pixel's contributor list (alpha,
    /// transmittance) and applies the back-to-front recursion.
    fn stored_list_alpha_grads(
        scene: &[EdgeGaussian<f64>],
        c: &CameraView<f64>,
        up: &GrayImage<f64>,
    ) -> Vec<f64> {
        let splats = project_cloud(scene, c);
        let mut d_opacity = vec![0.0; scene.len()];
        for y in 0..c.height {
            for x in 0..c.width {
                let mut list = Vec::new();
                let mut trans = 1.0;
                for s in &splats {
                    if x < s.x_range.0 || x > s.x_range.1 || y < s.y_range.0 || y > s.y_range.1 {
                        continue;
                    }
                    let (a, g, clamped, _) = splat_alpha(s, x as f64, y as f64);
                    list.push((s.source_index, a, g, clamped, trans));
                    trans *= 1.0 - a;
                    if trans < MIN_TRANSMITTANCE {
                        break;
                    }
                }
                // normalized intensity composited behind the current splat
                let mut behind = 0.0;
                for &(i, a, g, clamped, t) in list.iter().rev() {
                    let d_a = up.get(x, y) * t * (1.0 - behind);
                    if !clamped {
                        let op = scene[i].opacity();
                        d_opacity[i] += d_a * g * op * (1.0 - op);
                    }
                    behind = a + (1.0 - a) * behind;
                }
            }
        }
        d_opacity
    }

    #[test]
    fn recomputed_backward_matches_stored_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = cam(24, 30.0);
        for _ in 0..5 {
            let scene = random_scene(&mut rng, 12);
            let up = GrayImage::from_vec(24, 24, (0..576).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let fwd = render(&scene, &c);
            let got = render_backward(&scene, &c, &fwd, &up).unwrap();
            let want = stored_list_alpha_grads(&scene, &c, &up);
            for (g, w) in got.params.iter().zip(&want) {
                assert!((g[10] - w).abs() < 1e-10 * w.abs().max(1.0), "{} vs {}", g[10], w);
            }
        }
    }
}
