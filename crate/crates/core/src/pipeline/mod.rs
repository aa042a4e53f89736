//! Loss, training, iterative localization and evaluation metrics.

mod eval;
mod model;
mod train;

pub use eval::{
    evaluate, read_results_csv, write_results_csv, IterationMetrics, MetricsReport, ResultRow,
    METRICS_HEADER,
};
pub use model::{NetworkConfig, PoetNetwork, META_RECORD};
pub use train::{
    make_sample, train, Dataset, Frame, Optimizer, OptimizerKind, StepLog, TrainConfig, TrainSample,
};

use crate::error::{Error, Result};
use crate::geometry::{
    compose_refined_pose, quaternion_distance_tensor, relative_pose, CameraIntrinsics, Pose7D,
};
use crate::maprender::{render_depth, DepthImage, PerturbationRange, PointMap, RgbImage};
use crate::poet::decode_pose;
use crate::rng::{derive_seed, seeded};
use crate::tensor::{Real, Tensor};

/// At most this many refinement iterations.
pub const MAX_STAGES: usize = 3;

/// Perturbation ranges of the three refinement stages, coarse to fine
/// (meters, degrees).
pub const STAGE_RANGES: [(f64, f64); MAX_STAGES] = [(2.0, 10.0), (1.0, 2.0), (0.6, 2.0)];

pub fn stage_range(stage: usize) -> Result<PerturbationRange> {
    let (t, r) = STAGE_RANGES
        .get(stage.wrapping_sub(1))
        .ok_or_else(|| Error::invalid(format!("stage must be 1..={MAX_STAGES}, got {stage}")))?;
    PerturbationRange::new(*t, *r)
}

/// Sum over decoder layers of smooth-L1 on the translation plus the
/// quaternion distance on the rotation. `preds` are raw `[7]` outputs.
pub fn localization_loss<T: Real>(
    preds: &[Tensor<T>],
    target: &Pose7D,
    layers: usize,
) -> Result<Tensor<T>> {
    if preds.len() != layers || layers == 0 {
        return Err(Error::invalid(format!(
            "loss needs {layers} layer predictions, got {}",
            preds.len()
        )));
    }
    let t = Tensor::from_f64(vec![3], &target.t)?;
    let q = Tensor::from_f64(vec![4], &target.q)?;
    let mut total: Option<Tensor<T>> = None;
    for p in preds {
        if p.shape() != [7] {
            return Err(Error::shape(
                "loss",
                format!("prediction must be [7], got {:?}", p.shape()),
            ));
        }
        let term = p
            .slice_last(0, 3)?
            .smooth_l1(&t)?
            .add(&quaternion_distance_tensor(&q, &p.slice_last(3, 7)?)?)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Translation error in centimeters and rotation error in degrees (full
/// angle, twice the quaternion half-angle) of `est` against `gt`, measured
/// on `E = H(gt)·H(est)⁻¹`.
pub fn pose_error(est: &Pose7D, gt: &Pose7D) -> (f64, f64) {
    let e = relative_pose(est, gt);
    (
        e.translation_norm() * 100.0,
        e.rotation_angle().to_degrees(),
    )
}

/// Everything an estimator may look at for one refinement step.
pub struct EstimatorInput<'a> {
    pub image: &'a RgbImage,
    pub depth: &'a DepthImage,
    /// Pose the depth was rendered at.
    pub render_pose: &'a Pose7D,
    pub intrinsics: &'a CameraIntrinsics,
}

/// Predicts the relative pose from the rendered viewpoint to the camera.
pub trait RelativePoseEstimator {
    fn estimate(&mut self, input: &EstimatorInput<'_>) -> Result<Pose7D>;
}

/// A trained network used at inference: `nq` queries, last head only.
pub struct NetworkEstimator<'a> {
    pub net: &'a PoetNetwork<f32>,
    pub nq: usize,
    pub rng: crate::rng::Rng,
    /// Set when a head produced a degenerate quaternion.
    pub degenerate: bool,
}

impl<'a> NetworkEstimator<'a> {
    pub fn new(net: &'a PoetNetwork<f32>, nq: usize, seed: u64) -> Self {
        NetworkEstimator {
            net,
            nq,
            rng: seeded(derive_seed(seed, 0x10c)),
            degenerate: false,
        }
    }

    /// All per-layer predictions, first to last.
    pub fn predict_all(&mut self, image: &RgbImage, depth: &DepthImage) -> Result<Vec<Pose7D>> {
        let p = self.net.store.bind(false);
        let q = self.net.sample_queries(self.nq, &mut self.rng)?;
        let preds = self.net.forward(&p, image, depth, &q)?;
        Ok(preds
            .iter()
            .map(|raw| {
                let (pose, flag) = decode_pose(&raw.to_f64_vec());
                self.degenerate |= flag;
                pose
            })
            .collect())
    }
}

impl RelativePoseEstimator for NetworkEstimator<'_> {
    fn estimate(&mut self, input: &EstimatorInput<'_>) -> Result<Pose7D> {
        let all = self.predict_all(input.image, input.depth)?;
        Ok(*all.last().expect("at least one layer"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    /// Initial pose followed by the pose after each iteration.
    pub poses: Vec<Pose7D>,
    /// `(cm, degrees)` per entry of `poses`, when ground truth was given.
    pub errors: Option<Vec<(f64, f64)>>,
}

/// Renders, estimates and refines once per stage, starting from `p0`.
pub fn localize(
    image: &RgbImage,
    map: &PointMap,
    intrinsics: &CameraIntrinsics,
    p0: &Pose7D,
    stages: &mut [&mut dyn RelativePoseEstimator],
    gt: Option<&Pose7D>,
) -> Result<LocalizationResult> {
    if stages.is_empty() || stages.len() > MAX_STAGES {
        return Err(Error::invalid(format!(
            "localization runs 1 to {MAX_STAGES} stages, got {}",
            stages.len()
        )));
    }
    let mut poses = vec![*p0];
    for est in stages.iter_mut() {
        let current = *poses.last().expect("non-empty");
        let depth = render_depth(map, &current, intrinsics)?;
        let delta = est.estimate(&EstimatorInput {
            image,
            depth: &depth,
            render_pose: &current,
            intrinsics,
        })?;
        poses.push(compose_refined_pose(&current, &delta));
    }
    let errors = gt.map(|g| poses.iter().map(|p| pose_error(p, g)).collect());
    Ok(LocalizationResult { poses, errors })
}
