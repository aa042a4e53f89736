//! Run-time sampled training with deep supervision.

use rand::Rng as _;

use super::localization_loss;
use super::model::PoetNetwork;
use crate::error::{Error, Result};
use crate::geometry::{compose_refined_pose, CameraIntrinsics, Pose7D};
use crate::maprender::{
    mirror_horizontal, render_depth, sample_perturbation, DepthImage, PerturbationRange, PointMap,
    RgbImage,
};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensor::{ParamStore, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: RgbImage,
    /// Ground-truth world-to-camera pose.
    pub pose: Pose7D,
}

/// A map, a camera and posed images of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub map: PointMap,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
}

/// One network input with its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: RgbImage,
    pub depth: DepthImage,
    /// `P̂Δ` with `H(Pgt) = H(P̂Δ)·H(P0)`, where depth was rendered at `P0`.
    pub target: Pose7D,
}

/// Samples `P̂Δ` within `range`, renders the map at
/// `P0 = pose(H(P̂Δ)⁻¹·H(Pgt))` and, with probability `mirror_prob`, mirrors
/// the pair.
pub fn make_sample(
    data: &Dataset,
    frame: usize,
    range: &PerturbationRange,
    mirror_prob: f64,
    rng: &mut Rng,
) -> Result<TrainSample> {
    let f = &data.frames[frame];
    let target = sample_perturbation(range, rng);
    let p0 = compose_refined_pose(&f.pose, &target.inverse());
    let depth = render_depth(&data.map, &p0, &data.intrinsics)?;
    if mirror_prob > 0.0 && rng.random_bool(mirror_prob) {
        let (image, depth, target, _) =
            mirror_horizontal(&f.image, &depth, &target, &data.intrinsics)?;
        return Ok(TrainSample {
            image,
            depth,
            target,
        });
    }
    Ok(TrainSample {
        image: f.image.clone(),
        depth,
        target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Gradient descent with momentum 0.9.
    Sgd,
}

/// Optimizer state for one parameter store.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
    Sgd {
        lr: f64,
        momentum: f64,
        velocity: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
            OptimizerKind::Sgd => Optimizer::Sgd {
                lr,
                momentum: 0.9,
                velocity: Vec::new(),
            },
        }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<f64>>]) {
        let ids: Vec<_> = store.ids().collect();
        let zeros = |store: &ParamStore<T>| {
            ids.iter()
                .map(|&id| vec![0.0; store.entry(id).value.len()])
                .collect::<Vec<_>>()
        };
        match self {
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                if m.is_empty() {
                    *m = zeros(store);
                    *v = zeros(store);
                }
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (i, &id) in ids.iter().enumerate() {
                    let Some(g) = &grads[i] else { continue };
                    let (mi, vi) = (&mut m[i], &mut v[i]);
                    for (j, w) in store.value_mut(id).iter_mut().enumerate() {
                        mi[j] = *beta1 * mi[j] + (1.0 - *beta1) * g[j];
                        vi[j] = *beta2 * vi[j] + (1.0 - *beta2) * g[j] * g[j];
                        let update = *lr * (mi[j] / c1) / ((vi[j] / c2).sqrt() + *eps);
                        *w = T::lit(w.as_f64() - update);
                    }
                }
            }
            Optimizer::Sgd {
                lr,
                momentum,
                velocity,
            } => {
                if velocity.is_empty() {
                    *velocity = zeros(store);
                }
                for (i, &id) in ids.iter().enumerate() {
                    let Some(g) = &grads[i] else { continue };
                    let vel = &mut velocity[i];
                    for (j, w) in store.value_mut(id).iter_mut().enumerate() {
                        vel[j] = *momentum * vel[j] + g[j];
                        *w = T::lit(w.as_f64() - *lr * vel[j]);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub range: PerturbationRange,
    pub steps: usize,
    /// Samples per update; gradients are averaged.
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub mirror_prob: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(range: PerturbationRange, steps: usize, seed: u64) -> Self {
        TrainConfig {
            range,
            steps,
            batch: 1,
            lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            mirror_prob: 0.5,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// Deep-supervision loss, averaged over the batch.
    pub loss: f64,
    /// Loss of the last decoder layer alone.
    pub last_layer_loss: f64,
}

/// Trains `net` in place. `on_step` sees every step's losses as they are
/// produced. A non-finite loss aborts with [`Error::Divergence`].
pub fn train<T: Real>(
    net: &mut PoetNetwork<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if data.frames.is_empty() {
        return Err(Error::invalid("training needs at least one frame"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if !(0.0..=1.0).contains(&cfg.mirror_prob) {
        return Err(Error::invalid(format!(
            "mirror probability {} outside [0, 1]",
            cfg.mirror_prob
        )));
    }
    let mut rng = seeded(derive_seed(cfg.seed, 0x7a1));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let layers = net.config.poet.layers;
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; net.store.len()];
        let (mut loss_sum, mut last_sum) = (0.0, 0.0);
        for _ in 0..cfg.batch {
            let frame = rng.random_range(0..data.frames.len());
            let sample = make_sample(data, frame, &cfg.range, cfg.mirror_prob, &mut rng)?;
            let params = net.store.bind(true);
            let queries = net.sample_queries(1, &mut rng)?;
            let preds = net.forward(&params, &sample.image, &sample.depth, &queries)?;
            let loss = localization_loss(&preds, &sample.target, layers)?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            loss_sum += value;
            last_sum += localization_loss(&preds[layers - 1..], &sample.target, 1)?
                .item()
                .as_f64();
            loss.backward()?;
            for (a, g) in acc.iter_mut().zip(params.take_gradients()) {
                let Some(g) = g else { continue };
                match a {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y.as_f64()),
                    None => *a = Some(g.iter().map(|y| y.as_f64()).collect()),
                }
            }
        }
        let scale = 1.0 / cfg.batch as f64;
        for g in acc.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
        opt.step(&mut net.store, &acc);
        let log = StepLog {
            step,
            loss: loss_sum * scale,
            last_layer_loss: last_sum * scale,
        };
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}
