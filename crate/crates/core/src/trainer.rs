//! Batch-size-one training: forward, Hungarian matching, composite loss,
//! backward, clipped gradient step. Includes the overfit harness that
//! trains on a fixed scene list and evaluates on the same scenes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{
    composite_loss, gaussian_heatmap_render, FocalParams, HeatmapFocalParams, LossBreakdown, LossConfig, LossWeights,
};
use crate::metrics::{default_sigmas, evaluate, ApReport, DtInstance, EvalParams, GtInstance};
use crate::model::{forward, Model, ModelConfig, ModelParams};
use crate::rng::RngState;
use crate::synth::Scene;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Plain gradient descent.
    Sgd,
    /// Heavy-ball momentum `v ← μv + g`, `θ ← θ − lr·v`.
    Momentum(f64),
    /// Bias-corrected first and second moment estimates.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub heatmap: HeatmapFocalParams,
    /// Gaussian radius of heatmap targets, in patch-grid cells.
    pub heatmap_sigma: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub log_every: usize,
    /// Detections at or above this score are kept for evaluation.
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for TrainConfig {
    /// The desk-scale recipe: Adam at 1.5e-3 with unit loss weights and a
    /// milder focal term (α = 0.5, γ = 1) than the loss defaults.
    fn default() -> Self {
        Self {
            steps: 5000,
            learning_rate: 1.5e-3,
            optimizer: Optimizer::ADAM,
            seed: 0,
            weights: LossWeights {
                lambda1: 1.0,
                lambda2: 1.0,
                lambda3: 1.0,
            },
            focal: FocalParams { alpha: 0.5, gamma: 1.0 },
            heatmap: HeatmapFocalParams::default(),
            heatmap_sigma: 1.0,
            clip_norm: Some(1.0),
            log_every: 50,
            score_threshold: 0.5,
            max_detections: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive and finite");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        self.validate_step()
    }

    /// Checks needed by a single step; a zero learning rate is allowed here.
    fn validate_step(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative and finite");
        }
        match self.optimizer {
            Optimizer::Sgd => {}
            Optimizer::Momentum(mu) => {
                if !(0.0..1.0).contains(&mu) {
                    return bad("momentum must be in [0, 1)");
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                    return bad("adam betas must be in [0, 1) and eps positive");
                }
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad("clip_norm must be positive");
            }
        }
        if !(self.heatmap_sigma > 0.0 && self.heatmap_sigma.is_finite()) {
            return bad("heatmap_sigma must be positive");
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || self.max_detections == 0 {
            return bad("score_threshold must be in [0, 1] and max_detections positive");
        }
        self.weights.validate()?;
        self.focal.validate()
    }
}

/// OKS sigmas for `k` keypoints: the COCO or mini-skeleton table when `k`
/// matches one, else 0.1 for every keypoint.
pub fn sigmas_for(k: usize) -> Vec<f64> {
    default_sigmas(k).unwrap_or_else(|| vec![0.1; k])
}

/// A scene converted to training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Tensor,
    /// Ground truths in the normalised frame: `x / width`, `y / height`,
    /// `area / (width · height)`.
    pub gts: Vec<GtInstance>,
    /// `[grid_h, grid_w, K]` Gaussian targets.
    pub heatmap: Tensor,
}

/// Maps a pixel coordinate to patch-grid coordinates, where grid cell `c`
/// is centred on its patch.
fn to_grid(v: f64, patch: usize) -> f64 {
    (v - (patch as f64 - 1.0) / 2.0) / patch as f64
}

pub fn prepare_sample(scene: &Scene, model: &ModelConfig, heatmap_sigma: f64) -> Result<TrainSample> {
    let (h, w) = (scene.height() as f64, scene.width() as f64);
    if scene.image.shape() != [model.image_h, model.image_w, model.channels] {
        return Err(Error::ShapeMismatch {
            op: "prepare_sample",
            lhs: scene.image.shape().to_vec(),
            rhs: vec![model.image_h, model.image_w, model.channels],
        });
    }
    if scene.gts.len() > model.num_queries {
        return Err(Error::InvalidConfig(format!(
            "{} people exceed {} queries",
            scene.gts.len(),
            model.num_queries
        )));
    }
    if scene.gts.iter().any(|g| g.keypoints.len() != model.num_keypoints) {
        return Err(Error::Schema("keypoint count differs from the model".into()));
    }
    if scene.gts.iter().any(|g| g.visible_count() > 0 && !(g.area > 0.0)) {
        return Err(Error::Schema("ground truth with visible keypoints has non-positive area".into()));
    }
    let gts = scene
        .gts
        .iter()
        .map(|g| GtInstance {
            image_id: g.image_id,
            keypoints: g.keypoints.iter().map(|k| [k[0] / w, k[1] / h, k[2]]).collect(),
            area: g.area / (w * h),
            iscrowd: g.iscrowd,
        })
        .collect();
    let grid: Vec<Vec<[f64; 3]>> = scene
        .gts
        .iter()
        .map(|g| {
            g.keypoints
                .iter()
                .map(|k| [to_grid(k[0], model.patch), to_grid(k[1], model.patch), k[2]])
                .collect()
        })
        .collect();
    let (gh, gw) = model.grid();
    Ok(TrainSample {
        image: scene.image.clone(),
        gts,
        heatmap: gaussian_heatmap_render(&grid, model.num_keypoints, gh, gw, heatmap_sigma),
    })
}

/// Per-parameter optimiser memory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    steps: u64,
    velocity: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

/// Loss and gradients for one sample, gradients keyed by parameter name.
pub fn loss_and_gradients(
    params: &ModelParams,
    sample: &TrainSample,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let g = Graph::new();
    let bound = params.bind(&g, true);
    let out = forward(&g, &sample.image, model, &bound)?;
    let sigmas = sigmas_for(model.num_keypoints);
    let lc = LossConfig {
        weights: &cfg.weights,
        focal: &cfg.focal,
        heatmap: &cfg.heatmap,
        sigmas: &sigmas,
    };
    let terms = composite_loss(&g, &out.pose, out.heatmap, &sample.gts, &sample.heatmap, &lc)?;
    let mut grads = g.backward(terms.total)?;
    let named = bound
        .iter()
        .map(|(name, &v)| {
            let shape = params.get(name).map(|t| t.shape().to_vec()).unwrap_or_default();
            (name.clone(), grads.take(v).unwrap_or_else(|| Tensor::zeros(&shape)))
        })
        .collect();
    Ok((terms.breakdown, named))
}

/// One forward/backward pass and parameter update. Returns the loss before
/// the update.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    sample: &TrainSample,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    cfg.validate_step()?;
    let (loss, mut grads) = loss_and_gradients(params, sample, model, cfg)?;
    if let Some(limit) = cfg.clip_norm {
        let norm = libm::sqrt(grads.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>());
        if norm > limit {
            let s = limit / norm;
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    let lr = cfg.learning_rate;
    state.steps += 1;
    let t = state.steps as f64;
    for (name, p) in params.iter_mut() {
        let grad = &grads[name];
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (x, d) in p.data_mut().iter_mut().zip(grad.data()) {
                    *x -= lr * d;
                }
            }
            Optimizer::Momentum(mu) => {
                let v = state
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(grad.shape()));
                for ((x, vel), d) in p.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                    *vel = mu * *vel + d;
                    *x -= lr * *vel;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let zeros = || Tensor::zeros(grad.shape());
                let m = state.velocity.entry(name.clone()).or_insert_with(zeros);
                let v = state.second.entry(name.clone()).or_insert_with(zeros);
                let (c1, c2) = (1.0 - libm::pow(beta1, t), 1.0 - libm::pow(beta2, t));
                for (((x, m), v), d) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad.data()) {
                    *m = beta1 * *m + (1.0 - beta1) * d;
                    *v = beta2 * *v + (1.0 - beta2) * d * d;
                    *x -= lr * (*m / c1) / (libm::sqrt(*v / c2) + eps);
                }
            }
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    /// Loss of every step, in order.
    pub steps: Vec<LossBreakdown>,
    /// [`ModelParams::checksum`] after the last step.
    pub checksum: u64,
}

impl TrainTrace {
    /// `(step, loss)` pairs at multiples of `log_every`, plus the last step.
    pub fn logged(&self, log_every: usize) -> Vec<(usize, LossBreakdown)> {
        let n = self.steps.len();
        self.steps
            .iter()
            .enumerate()
            .filter(|(i, _)| (i + 1) % log_every.max(1) == 0 || i + 1 == n)
            .map(|(i, l)| (i + 1, *l))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitResult {
    pub model: Model,
    pub trace: TrainTrace,
    pub report: ApReport,
}

/// Detections for each scene, in pixels.
pub fn predict_scenes(model: &Model, scenes: &[Scene], threshold: f64, max_det: usize) -> Result<Vec<DtInstance>> {
    let mut dts = Vec::new();
    for s in scenes {
        let (out, _) = model.predict(&s.image)?;
        dts.extend(out.to_detections(s.image_id, s.width() as f64, s.height() as f64, threshold, max_det));
    }
    Ok(dts)
}

/// Keypoint AP of `model` on `scenes`.
pub fn evaluate_model(model: &Model, scenes: &[Scene], threshold: f64, max_det: usize) -> Result<ApReport> {
    let dts = predict_scenes(model, scenes, threshold, max_det)?;
    let gts: Vec<GtInstance> = scenes.iter().flat_map(|s| s.gts.iter().cloned()).collect();
    let mut params = EvalParams::coco(sigmas_for(model.cfg.num_keypoints));
    params.max_detections = max_det;
    evaluate(&gts, &dts, &params)
}

/// Trains from a seeded initialisation for `cfg.steps` steps, visiting the
/// scenes in a fresh seeded order every epoch, then evaluates on the same
/// scenes.
pub fn overfit(dataset: &[Scene], cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<OverfitResult> {
    overfit_with(dataset, cfg, model_cfg, |_, _| {})
}

/// [`overfit`] with a callback after every step.
pub fn overfit_with(
    dataset: &[Scene],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<OverfitResult> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset must not be empty".into()));
    }
    let samples = dataset
        .iter()
        .map(|s| prepare_sample(s, model_cfg, cfg.heatmap_sigma))
        .collect::<Result<Vec<_>>>()?;
    let seed = RngState::new(cfg.seed);
    let mut params = ModelParams::init(model_cfg, &seed.split(0))?;
    let mut order_rng = seed.split(1).stream(0);
    let mut state = OptimizerState::default();
    let mut order: Vec<usize> = Vec::new();
    let mut steps = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if step % samples.len() == 0 {
            order = (0..samples.len()).collect();
            order.shuffle(&mut order_rng);
        }
        let loss = train_step(&mut params, &mut state, &samples[order[step % samples.len()]], model_cfg, cfg)?;
        if !loss.total.is_finite() || !params.is_finite() {
            return Err(Error::NonFiniteLoss(step + 1));
        }
        on_step(step + 1, &loss);
        steps.push(loss);
    }
    let trace = TrainTrace {
        steps,
        checksum: params.checksum(),
    };
    let model = Model::new(model_cfg.clone(), params)?;
    let report = evaluate_model(&model, dataset, cfg.score_threshold, cfg.max_detections)?;
    Ok(OverfitResult { model, trace, report })
}
