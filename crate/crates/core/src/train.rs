//! Optimization loop: initialization, learning-rate schedule, staged
//! regularizers and adaptive density control.

use std::time::Instant;

use nalgebra::{Quaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraView, EdgeGaussian, PARAMS_PER_GAUSSIAN};
use crate::losses::{self, KnnGraph};
use crate::objective::{self, LossTerms, Regularization};
use crate::optim::{Adam, Block, Group};
use crate::scalar::{logit, Scalar};

pub const CHECKPOINT_FORMAT: &str = "edgegs-checkpoint/v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    pub cull_opacity: f64,
    /// Threshold on the view-averaged 2D mean-gradient norm. The gradient is
    /// taken in normalized device units (pixel gradient times half the image
    /// size) and rescaled as if the projection loss averaged over every pixel
    /// rather than the masked ones.
    pub grad_threshold: f64,
    /// Epochs between density-control passes.
    pub every: usize,
    pub stop_epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub position_only_epochs: usize,
    pub regularizer_start_epoch: usize,
    /// Regularizers enter on optimizer steps divisible by this.
    pub regularizer_every: usize,
    pub lambda_orient: f64,
    pub lambda_shape: f64,
    pub k: usize,
    pub lr: LearningRates,
    pub position_lr_decay: f64,
    pub position_lr_decay_every: usize,
    pub position_lr_decay_times: usize,
    pub density: DensityConfig,
    pub edge_threshold: f64,
    pub init_count: usize,
    pub init_scale: f64,
    pub init_opacity: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::object()
    }
}

impl TrainConfig {
    /// Object-level defaults.
    pub fn object() -> Self {
        Self {
            epochs: 500,
            position_only_epochs: 30,
            regularizer_start_epoch: 300,
            regularizer_every: 10,
            lambda_orient: 0.1,
            lambda_shape: 0.1,
            k: losses::DEFAULT_K,
            lr: LearningRates {
                position: 1e-3,
                rotation: 1e-3,
                scale: 2e-4,
                opacity: 3e-2,
            },
            position_lr_decay: 0.75,
            position_lr_decay_every: 10,
            position_lr_decay_times: 5,
            density: DensityConfig {
                cull_opacity: 0.05,
                grad_threshold: 2e-4,
                every: 10,
                stop_epoch: 250,
            },
            edge_threshold: losses::DEFAULT_EDGE_THRESHOLD,
            init_count: 10_000,
            init_scale: 0.004,
            init_opacity: 0.08,
            seed: 0,
        }
    }

    /// Large-scene preset: weaker regularizers.
    pub fn scene() -> Self {
        Self {
            lambda_orient: 0.01,
            lambda_shape: 0.01,
            ..Self::object()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "object" => Ok(Self::object()),
            "scene" => Ok(Self::scene()),
            other => Err(Error::InvalidInput(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.position_only_epochs < self.regularizer_start_epoch && self.regularizer_start_epoch < self.epochs) {
            return bad("need position_only_epochs < regularizer_start_epoch < epochs");
        }
        let lr = &self.lr;
        if !(lr.position > 0.0 && lr.rotation > 0.0 && lr.scale > 0.0 && lr.opacity > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.regularizer_every == 0 || self.k == 0 || self.density.every == 0 || self.position_lr_decay_every == 0 {
            return bad("intervals and k must be at least 1");
        }
        if !(self.init_scale > 0.0 && self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("initial scale must be positive and initial opacity in (0, 1)");
        }
        Ok(())
    }

    /// Position learning rate for `epoch`: decayed every `position_lr_decay_every`
    /// epochs, at most `position_lr_decay_times` times.
    pub fn position_lr(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.position_lr_decay_every).min(self.position_lr_decay_times);
        self.lr.position * self.position_lr_decay.powi(decays as i32)
    }

    fn density_due(&self, epoch: usize) -> bool {
        epoch >= self.position_only_epochs
            && epoch < self.density.stop_epoch
            && (epoch + 1).is_multiple_of(self.density.every)
    }
}

/// Where initial Gaussian centers come from.
pub enum InitMode<'a, T: Scalar> {
    Random { n: usize, min: Vector3<T>, max: Vector3<T> },
    FromPoints(&'a [Vector3<T>]),
}

fn random_unit_quaternion<T: Scalar>(rng: &mut ChaCha8Rng) -> Quaternion<T> {
    loop {
        let c: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return Quaternion::new(T::lit(c[0] / n), T::lit(c[1] / n), T::lit(c[2] / n), T::lit(c[3] / n));
        }
    }
}

pub fn init_cloud<T: Scalar>(mode: InitMode<'_, T>, cfg: &TrainConfig) -> Result<Vec<EdgeGaussian<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means: Vec<Vector3<T>> = match mode {
        InitMode::Random { n, min, max } => {
            if n == 0 {
                return Err(Error::InvalidInput("random init needs at least one point".into()));
            }
            if (0..3).any(|d| !(min[d] <= max[d])) {
                return Err(Error::InvalidInput("init box min exceeds max".into()));
            }
            (0..n)
                .map(|_| {
                    Vector3::from_fn(|d, _| min[d] + (max[d] - min[d]) * T::lit(rng.random::<f64>()))
                })
                .collect()
        }
        InitMode::FromPoints(pts) => {
            if pts.is_empty() {
                return Err(Error::InvalidInput("init point list is empty".into()));
            }
            pts.to_vec()
        }
    };
    let log_scale = Vector3::repeat(T::lit(cfg.init_scale.ln()));
    let opacity_raw = logit(T::lit(cfg.init_opacity));
    Ok(means
        .into_iter()
        .map(|m| EdgeGaussian::new(m, random_unit_quaternion(&mut rng), log_scale, opacity_raw))
        .collect())
}

/// Result of one density-control pass.
#[derive(Clone, Debug)]
pub struct DensityOutcome<T: Scalar> {
    /// Survivors in their original order, then clones in source order.
    pub cloud: Vec<EdgeGaussian<T>>,
    pub kept: Vec<bool>,
    pub culled: usize,
    pub cloned: usize,
}

/// Cull low-opacity Gaussians, then clone survivors whose mean 2D gradient
/// exceeds the threshold. The clone is offset by a sample from the source's
/// covariance and both copies shrink by 1.6.
pub fn density_control<T: Scalar>(
    cloud: &[EdgeGaussian<T>],
    mean_grad: &[T],
    cfg: &DensityConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DensityOutcome<T>> {
    if mean_grad.len() != cloud.len() {
        return Err(Error::Dimension("gradient accumulators do not match the cloud".into()));
    }
    let cull = T::lit(cfg.cull_opacity);
    let kept: Vec<bool> = cloud.iter().map(|g| !(g.opacity() < cull)).collect();
    let shrink = T::lit(1.6f64.ln());
    let threshold = T::lit(cfg.grad_threshold);
    let mut survivors = Vec::with_capacity(cloud.len());
    let mut clones = Vec::new();
    for (i, g) in cloud.iter().enumerate() {
        if !kept[i] {
            continue;
        }
        if mean_grad[i] > threshold {
            let z = Vector3::from_fn(|_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
            let offset = g.rotation_matrix() * g.scales().component_mul(&z);
            let mut a = *g;
            a.log_scale -= Vector3::repeat(shrink);
            let mut b = a;
            b.mean += offset;
            survivors.push(a);
            clones.push(b);
        } else {
            survivors.push(*g);
        }
    }
    if survivors.is_empty() {
        return Err(Error::Collapsed("density control culled every Gaussian".into()));
    }
    let culled = cloud.len() - survivors.len();
    let cloned = clones.len();
    survivors.extend(clones);
    Ok(DensityOutcome {
        cloud: survivors,
        kept,
        culled,
        cloned,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub proj: f64,
    /// Mean over the steps where the term was active; 0 otherwise.
    pub orient: f64,
    pub shape: f64,
    pub total: f64,
    pub gaussians: usize,
    pub position_lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn initial_proj(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.proj)
    }

    pub fn final_proj(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.proj)
    }
}

/// Versioned dump of the optimizer state. Values are stored as `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    /// Epoch the next step belongs to.
    pub epoch: usize,
    /// Steps already taken within `epoch`.
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub config: TrainConfig,
    pub gaussians: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
    pub adam_m: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
    pub adam_v: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
    pub adam_steps: [u64; 4],
    /// Position learning rate used in each epoch started so far.
    pub position_lr: Vec<f64>,
}

impl Checkpoint {
    pub fn cloud<T: Scalar>(&self) -> Vec<EdgeGaussian<T>> {
        self.gaussians
            .iter()
            .map(|p| EdgeGaussian::from_params(&p.map(T::lit)))
            .collect()
    }

    pub fn check_format(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Version {
                found: self.format.clone(),
                expected: CHECKPOINT_FORMAT.into(),
            });
        }
        Ok(())
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Default)]
struct EpochSums {
    proj: f64,
    orient: f64,
    shape: f64,
    total: f64,
    steps: usize,
    reg_steps: usize,
}

/// Stateful training loop; one [`Trainer::step`] is one view.
pub struct Trainer<'a, T: Scalar> {
    views: &'a [CameraView<T>],
    cfg: TrainConfig,
    cloud: Vec<EdgeGaussian<T>>,
    adam: Adam<T>,
    epoch: usize,
    cursor: usize,
    global_step: u64,
    order: Vec<usize>,
    grad_sum: Vec<T>,
    grad_count: Vec<u32>,
    graph: Option<KnnGraph>,
    sums: EpochSums,
    started: Option<Instant>,
    position_lr: Vec<f64>,
    report: TrainReport,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(views: &'a [CameraView<T>], cloud: Vec<EdgeGaussian<T>>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if views.len() < 2 {
            return Err(Error::InvalidInput("training needs at least 2 views".into()));
        }
        if cloud.is_empty() {
            return Err(Error::InvalidInput("training needs a nonempty cloud".into()));
        }
        let n = cloud.len();
        Ok(Self {
            views,
            cfg,
            cloud,
            adam: Adam::new(n),
            epoch: 0,
            cursor: 0,
            global_step: 0,
            order: Vec::new(),
            grad_sum: vec![T::zero(); n],
            grad_count: vec![0; n],
            graph: None,
            sums: EpochSums::default(),
            started: None,
            position_lr: Vec::new(),
            report: TrainReport::default(),
        })
    }

    pub fn cloud(&self) -> &[EdgeGaussian<T>] {
        &self.cloud
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn into_parts(self) -> (Vec<EdgeGaussian<T>>, TrainReport) {
        (self.cloud, self.report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let f = |b: &Block<T>| b.map(|v| v.as_f64());
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            epoch: self.epoch,
            step_in_epoch: self.cursor,
            global_step: self.global_step,
            config: self.cfg,
            gaussians: self.cloud.iter().map(|g| f(&g.to_params())).collect(),
            adam_m: self.adam.m.iter().map(f).collect(),
            adam_v: self.adam.v.iter().map(f).collect(),
            adam_steps: self.adam.steps,
            position_lr: self.position_lr.clone(),
        }
    }

    fn begin_epoch(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, self.epoch as u64, 0x5eed));
        self.order = (0..self.views.len()).collect();
        self.order.shuffle(&mut rng);
        self.sums = EpochSums::default();
        self.started = Some(Instant::now());
        self.position_lr.push(self.cfg.position_lr(self.epoch));
    }

    /// One optimizer step on the next view of the current epoch.
    pub fn step(&mut self) -> Result<LossTerms<T>> {
        if self.is_done() {
            return Err(Error::Contract("training already finished".into()));
        }
        if self.cursor == 0 {
            self.begin_epoch();
        }
        let view = self.order[self.cursor];
        let cam = &self.views[view];
        let mask_seed = mix_seed(self.cfg.seed, self.epoch as u64, 1 + view as u64);
        let mask = losses::build_mask(&cam.target, T::lit(self.cfg.edge_threshold), mask_seed).mask;

        let reg_active = self.epoch >= self.cfg.regularizer_start_epoch
            && self.global_step.is_multiple_of(self.cfg.regularizer_every as u64)
            && self.cloud.len() >= 2;
        if reg_active {
            let means: Vec<_> = self.cloud.iter().map(|g| g.mean).collect();
            self.graph = Some(losses::knn(&means, self.cfg.k)?);
        }
        let reg = match (&self.graph, reg_active) {
            (Some(graph), true) => Some(Regularization {
                graph,
                lambda_orient: T::lit(self.cfg.lambda_orient),
                lambda_shape: T::lit(self.cfg.lambda_shape),
            }),
            _ => None,
        };
        let (terms, grads) = objective::view_loss_and_grad(&self.cloud, cam, &mask, reg)?;
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {} at epoch {}, step {}, view {view}",
                terms.total, self.epoch, self.global_step
            )));
        }
        if let Some(i) = grads.params.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!(
                "gradient of Gaussian {i} at epoch {}, step {}, view {view}",
                self.epoch, self.global_step
            )));
        }

        let pixels = cam.width * cam.height;
        let per_pixel = T::from_count(mask.count()) / T::from_count(pixels);
        let half = nalgebra::Vector2::new(T::from_count(cam.width), T::from_count(cam.height)) * (T::lit(0.5) * per_pixel);
        for (i, vis) in grads.visible.iter().enumerate() {
            if *vis {
                self.grad_sum[i] += grads.mean2d[i].component_mul(&half).norm();
                self.grad_count[i] += 1;
            }
        }

        let mut params: Vec<Block<T>> = self.cloud.iter().map(|g| g.to_params()).collect();
        let pos_lr = T::lit(self.cfg.position_lr(self.epoch));
        self.adam.step(Group::Position, pos_lr, &mut params, &grads.params);
        if self.epoch >= self.cfg.position_only_epochs {
            let lr = &self.cfg.lr;
            self.adam.step(Group::Rotation, T::lit(lr.rotation), &mut params, &grads.params);
            self.adam.step(Group::Scale, T::lit(lr.scale), &mut params, &grads.params);
            self.adam.step(Group::Opacity, T::lit(lr.opacity), &mut params, &grads.params);
        }
        for (g, p) in self.cloud.iter_mut().zip(&params) {
            *g = EdgeGaussian::from_params(p);
        }

        self.sums.proj += terms.proj.as_f64();
        self.sums.total += terms.total.as_f64();
        self.sums.steps += 1;
        if reg.is_some() {
            self.sums.orient += terms.orient.as_f64();
            self.sums.shape += terms.shape.as_f64();
            self.sums.reg_steps += 1;
        }
        self.global_step += 1;
        self.cursor += 1;
        if self.cursor == self.views.len() {
            self.finish_epoch()?;
        }
        Ok(terms)
    }

    fn finish_epoch(&mut self) -> Result<()> {
        let s = self.sums;
        let reg_mean = |v: f64| if s.reg_steps > 0 { v / s.reg_steps as f64 } else { 0.0 };
        self.report.epochs.push(EpochRecord {
            epoch: self.epoch,
            proj: s.proj / s.steps as f64,
            orient: reg_mean(s.orient),
            shape: reg_mean(s.shape),
            total: s.total / s.steps as f64,
            gaussians: self.cloud.len(),
            position_lr: self.cfg.position_lr(self.epoch),
            seconds: self.started.map(|t| t.elapsed().as_secs_f64()).unwrap_or(0.0),
        });
        if self.cfg.density_due(self.epoch) {
            self.run_density_control()?;
        }
        log::debug!(
            "epoch {} proj {:.5} gaussians {}",
            self.epoch,
            s.proj / s.steps as f64,
            self.cloud.len()
        );
        self.epoch += 1;
        self.cursor = 0;
        Ok(())
    }

    fn run_density_control(&mut self) -> Result<()> {
        let mean_grad: Vec<T> = self
            .grad_sum
            .iter()
            .zip(&self.grad_count)
            .map(|(s, &c)| if c > 0 { *s / T::from_count(c as usize) } else { T::zero() })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, self.epoch as u64, 0xde45));
        let out = density_control(&self.cloud, &mean_grad, &self.cfg.density, &mut rng)?;
        self.adam.retain(&out.kept);
        self.adam.extend_zeroed(out.cloned);
        log::debug!("density control: culled {}, cloned {}", out.culled, out.cloned);
        self.cloud = out.cloud;
        self.grad_sum = vec![T::zero(); self.cloud.len()];
        self.grad_count = vec![0; self.cloud.len()];
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let target = self.epoch + 1;
        while self.epoch < target {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(())
    }
}

/// Train to completion.
pub fn train<T: Scalar>(
    views: &[CameraView<T>],
    cloud: Vec<EdgeGaussian<T>>,
    cfg: &TrainConfig,
) -> Result<(Vec<EdgeGaussian<T>>, TrainReport)> {
    let mut trainer = Trainer::new(views, cloud, *cfg)?;
    trainer.run()?;
    Ok(trainer.into_parts())
}
