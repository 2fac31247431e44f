//! Per-view training objective: render, masked L1, optional regularizers,
//! and the combined gradient on every raw Gaussian parameter.

use nalgebra::{Matrix3, Vector3};

use crate::error::Result;
use crate::geom::{argmax3, rotation_matrix_vjp, CameraView, EdgeGaussian};
use crate::losses::{self, KnnGraph, PixelMask};
use crate::render::{self, CloudGradients};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<T> {
    pub proj: T,
    pub orient: T,
    pub shape: T,
    pub total: T,
}

/// Regularizer inputs for a step where they are active.
#[derive(Clone, Copy, Debug)]
pub struct Regularization<'a, T> {
    pub graph: &'a KnnGraph,
    pub lambda_orient: T,
    pub lambda_shape: T,
}

/// Forward-only evaluation of the total loss for one view.
pub fn view_loss<T: Scalar>(
    cloud: &[EdgeGaussian<T>],
    cam: &CameraView<T>,
    mask: &PixelMask,
    reg: Option<Regularization<'_, T>>,
) -> Result<LossTerms<T>> {
    let out = render::render(cloud, cam);
    let proj = losses::masked_l1(&out.image, &cam.target, mask)?;
    let (orient, shape) = match reg {
        Some(r) => {
            let dirs: Vec<_> = cloud.iter().map(|g| g.principal_direction()).collect();
            let scales: Vec<_> = cloud.iter().map(|g| g.log_scale).collect();
            (losses::orientation_loss(&dirs, r.graph), losses::shape_loss(&scales))
        }
        None => (T::zero(), T::zero()),
    };
    Ok(combine(proj, orient, shape, reg))
}

fn combine<T: Scalar>(proj: T, orient: T, shape: T, reg: Option<Regularization<'_, T>>) -> LossTerms<T> {
    let total = match reg {
        Some(r) => losses::total_loss(proj, orient, shape, r.lambda_orient, r.lambda_shape),
        None => proj,
    };
    LossTerms {
        proj,
        orient,
        shape,
        total,
    }
}

/// Total loss for one view and its gradient.
pub fn view_loss_and_grad<T: Scalar>(
    cloud: &[EdgeGaussian<T>],
    cam: &CameraView<T>,
    mask: &PixelMask,
    reg: Option<Regularization<'_, T>>,
) -> Result<(LossTerms<T>, CloudGradients<T>)> {
    let out = render::render(cloud, cam);
    let (proj, upstream) = losses::masked_l1_with_grad(&out.image, &cam.target, mask)?;
    let mut grads = render::render_backward(cloud, cam, &out, &upstream)?;
    let (orient, shape) = match reg {
        Some(r) => add_regularizer_grads(cloud, r, &mut grads),
        None => (T::zero(), T::zero()),
    };
    Ok((combine(proj, orient, shape, reg), grads))
}

/// Add the weighted orientation and shape gradients; returns the raw term values.
pub fn add_regularizer_grads<T: Scalar>(
    cloud: &[EdgeGaussian<T>],
    reg: Regularization<'_, T>,
    grads: &mut CloudGradients<T>,
) -> (T, T) {
    let dirs: Vec<Vector3<T>> = cloud.iter().map(|g| g.principal_direction()).collect();
    let scales: Vec<Vector3<T>> = cloud.iter().map(|g| g.log_scale).collect();
    let (orient, d_dirs) = losses::orientation_loss_with_grad(&dirs, reg.graph);
    let (shape, d_scales) = losses::shape_loss_with_grad(&scales);
    for (i, g) in cloud.iter().enumerate() {
        // the principal direction is column `axis` of R(q)
        let axis = argmax3(&g.log_scale);
        let mut d_r = Matrix3::zeros();
        d_r.set_column(axis, &(d_dirs[i] * reg.lambda_orient));
        let d_q = rotation_matrix_vjp(&g.rot, &d_r);
        let p = &mut grads.params[i];
        p[3] += d_q.w;
        p[4] += d_q.i;
        p[5] += d_q.j;
        p[6] += d_q.k;
        for c in 0..3 {
            p[7 + c] += d_scales[i][c] * reg.lambda_shape;
        }
    }
    (orient, shape)
}
