//! Training objectives: masked projection loss, neighbor orientation
//! agreement, elongation prior, and their weighted sum.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::argmax3;
use crate::image::GrayImage;
use crate::scalar::Scalar;
use crate::spatial::KdTree;

/// Pixels above this value count as edge evidence.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.1;
/// Background pixels drawn when a map has no edge pixels at all.
pub const DEGENERATE_MASK_SIZE: usize = 256;
pub const DEFAULT_K: usize = 4;

/// Binary participation mask for the projection loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl PixelMask {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Mask built from one edge map plus whether the degenerate fallback was used.
#[derive(Clone, Debug)]
pub struct MaskBuild {
    pub mask: PixelMask,
    pub edge_pixels: usize,
    pub degenerate: bool,
}

/// Mark every edge pixel plus an equal number of uniformly sampled background pixels.
pub fn build_mask<T: Scalar>(target: &GrayImage<T>, edge_threshold: T, seed: u64) -> MaskBuild {
    let n = target.len();
    let mut bits = vec![false; n];
    let mut background = Vec::with_capacity(n);
    let mut edges = 0usize;
    for (i, &v) in target.data.iter().enumerate() {
        if v > edge_threshold {
            bits[i] = true;
            edges += 1;
        } else {
            background.push(i);
        }
    }
    let degenerate = edges == 0;
    let wanted = if degenerate {
        log::warn!("edge map has no pixels above {edge_threshold}; sampling background only");
        DEGENERATE_MASK_SIZE.min(n)
    } else {
        edges.min(background.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for j in rand::seq::index::sample(&mut rng, background.len(), wanted) {
        bits[background[j]] = true;
    }
    MaskBuild {
        mask: PixelMask {
            width: target.width,
            height: target.height,
            bits,
        },
        edge_pixels: edges,
        degenerate,
    }
}

fn check_shapes<T: Scalar>(rendered: &GrayImage<T>, target: &GrayImage<T>, mask: &PixelMask) -> Result<usize> {
    if !rendered.same_shape(target) || rendered.width != mask.width || rendered.height != mask.height {
        return Err(Error::Dimension("rendered, target and mask must share dimensions".into()));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::InvalidInput("empty mask".into()));
    }
    Ok(count)
}

/// Mean absolute difference over the masked pixels.
pub fn masked_l1<T: Scalar>(rendered: &GrayImage<T>, target: &GrayImage<T>, mask: &PixelMask) -> Result<T> {
    let count = check_shapes(rendered, target, mask)?;
    let mut sum = T::zero();
    for ((&r, &t), &m) in rendered.data.iter().zip(&target.data).zip(&mask.bits) {
        if m {
            sum += (r - t).abs();
        }
    }
    Ok(sum / T::from_count(count))
}

/// [`masked_l1`] and its gradient with respect to the rendered image.
pub fn masked_l1_with_grad<T: Scalar>(
    rendered: &GrayImage<T>,
    target: &GrayImage<T>,
    mask: &PixelMask,
) -> Result<(T, GrayImage<T>)> {
    let value = masked_l1(rendered, target, mask)?;
    let inv = T::one() / T::from_count(mask.count());
    let mut grad = GrayImage::zeros(rendered.width, rendered.height);
    for (i, g) in grad.data.iter_mut().enumerate() {
        if mask.bits[i] {
            let r = rendered.data[i] - target.data[i];
            *g = if r > T::zero() {
                inv
            } else if r < T::zero() {
                -inv
            } else {
                T::zero()
            };
        }
    }
    Ok((value, grad))
}

/// Nearest-neighbor lists by mean position, self excluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
}

/// Exact k-nearest-neighbor graph; ties resolve to the lower index.
pub fn knn<T: Scalar>(means: &[Vector3<T>], k: usize) -> Result<KnnGraph> {
    if means.len() < 2 {
        return Err(Error::InvalidInput(format!("knn needs at least 2 points, got {}", means.len())));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let tree = KdTree::build(means);
    let neighbors = (0..means.len())
        .map(|i| tree.knn(&means[i], k, Some(i)).into_iter().map(|(j, _)| j).collect())
        .collect();
    Ok(KnnGraph { k, neighbors })
}

/// One minus the mean absolute cosine between each direction and its neighbors'.
pub fn orientation_loss<T: Scalar>(dirs: &[Vector3<T>], graph: &KnnGraph) -> T {
    orientation_terms(dirs, graph, None)
}

/// [`orientation_loss`] and its gradient with respect to every direction.
pub fn orientation_loss_with_grad<T: Scalar>(dirs: &[Vector3<T>], graph: &KnnGraph) -> (T, Vec<Vector3<T>>) {
    let mut grad = vec![Vector3::zeros(); dirs.len()];
    let value = orientation_terms(dirs, graph, Some(&mut grad));
    (value, grad)
}

fn orientation_terms<T: Scalar>(dirs: &[Vector3<T>], graph: &KnnGraph, mut grad: Option<&mut Vec<Vector3<T>>>) -> T {
    let n = dirs.len();
    if n == 0 {
        return T::zero();
    }
    let inv_n = T::one() / T::from_count(n);
    let mut total = T::zero();
    for (i, nbrs) in graph.neighbors.iter().enumerate().take(n) {
        if nbrs.is_empty() {
            continue;
        }
        let inv_k = T::one() / T::from_count(nbrs.len());
        let mut s = T::zero();
        for &j in nbrs {
            let dot = dirs[i].dot(&dirs[j]);
            s += dot.abs();
            if let Some(g) = grad.as_deref_mut() {
                let sign = if dot > T::zero() {
                    T::one()
                } else if dot < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                let c = -inv_n * inv_k * sign;
                g[i] += dirs[j] * c;
                g[j] += dirs[i] * c;
            }
        }
        total += s * inv_k;
    }
    T::one() - total * inv_n
}

/// Indices of the largest and second-largest scale (ties: lowest index first).
pub fn top_two_axes<T: Scalar>(log_scale: &Vector3<T>) -> (usize, usize) {
    let first = argmax3(log_scale);
    let mut second = usize::MAX;
    for i in 0..3 {
        if i != first && (second == usize::MAX || log_scale[i] > log_scale[second]) {
            second = i;
        }
    }
    (first, second)
}

/// Mean ratio of second-largest to largest activated scale.
pub fn shape_loss<T: Scalar>(log_scales: &[Vector3<T>]) -> T {
    shape_loss_with_grad(log_scales).0
}

/// [`shape_loss`] and its gradient with respect to the log-scales.
pub fn shape_loss_with_grad<T: Scalar>(log_scales: &[Vector3<T>]) -> (T, Vec<Vector3<T>>) {
    let n = log_scales.len();
    let mut grad = vec![Vector3::zeros(); n];
    if n == 0 {
        return (T::zero(), grad);
    }
    let inv_n = T::one() / T::from_count(n);
    let mut total = T::zero();
    for (s, g) in log_scales.iter().zip(grad.iter_mut()) {
        let (a, b) = top_two_axes(s);
        let ratio = (s[b] - s[a]).exp();
        total += ratio;
        g[b] += ratio * inv_n;
        g[a] -= ratio * inv_n;
    }
    (total * inv_n, grad)
}

/// Weighted sum of the three terms.
pub fn total_loss<T: Scalar>(l_proj: T, l_orient: T, l_shape: T, lambda_orient: T, lambda_shape: T) -> T {
    l_proj + lambda_orient * l_orient + lambda_shape * l_shape
}
