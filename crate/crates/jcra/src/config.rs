//! The JSON configuration document accepted by `train-toy`, `bench`,
//! `infer` and `eval`. Every section and every field is optional; omitted
//! values keep their defaults and unknown keys are rejected.

use std::path::Path;

use jcra_core::metrics::{AreaRange, EvalParams};
use jcra_core::model::ModelConfig;
use jcra_core::synth::{DatasetSpec, Skeleton};
use jcra_core::trainer::{sigmas_for, Optimizer, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{read, Error, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: Option<ModelSection>,
    pub train: Option<TrainSection>,
    pub loss_weights: Option<WeightsSection>,
    pub eval: Option<EvalSection>,
    pub dataset: Option<DatasetSection>,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub image_h: Option<usize>,
    pub image_w: Option<usize>,
    pub channels: Option<usize>,
    pub patch: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub sample_points: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub num_queries: Option<usize>,
    pub num_keypoints: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub refinement_decoder: Option<bool>,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerSection {
    Sgd,
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalSection {
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapSection {
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub optimizer: Option<OptimizerSection>,
    pub seed: Option<u64>,
    pub focal: Option<FocalSection>,
    pub heatmap: Option<HeatmapSection>,
    pub heatmap_sigma: Option<f64>,
    /// `null` disables clipping.
    #[serde(default, deserialize_with = "explicit_null")]
    pub clip_norm: Option<Option<f64>>,
    pub log_every: Option<usize>,
    pub score_threshold: Option<f64>,
    pub max_detections: Option<usize>,
}

fn explicit_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<Option<f64>>, D::Error> {
    Option::<f64>::deserialize(d).map(Some)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub lambda3: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub oks_thresholds: Option<Vec<f64>>,
    pub sigmas: Option<Vec<f64>>,
    pub max_detections: Option<usize>,
    /// `[lo, hi)` in squared pixels.
    pub medium: Option<[f64; 2]>,
    pub large: Option<[f64; 2]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub seed: Option<u64>,
    pub scenes: Option<usize>,
    pub min_persons: Option<usize>,
    pub max_persons: Option<usize>,
    pub overlap_allowed: Option<bool>,
}

pub const DEFAULT_DATASET_SEED: u64 = 2024;
pub const DEFAULT_SCENES: usize = 50;

/// Every setting after defaults and overrides are merged.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalParams,
    pub dataset: DatasetSpec,
}

impl Default for Config {
    fn default() -> Self {
        ConfigFile::default().resolve().expect("defaults are valid")
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Mini skeleton for four keypoints, COCO order for seventeen.
pub fn skeleton_for(k: usize) -> Result<Skeleton> {
    match k {
        4 => Ok(Skeleton::mini()),
        17 => Ok(Skeleton::coco17()),
        _ => Err(Error::Schema(format!("no synthetic skeleton with {k} keypoints (use 4 or 17)"))),
    }
}

impl ModelSection {
    pub fn apply(&self, m: &mut ModelConfig) {
        set(&mut m.image_h, self.image_h);
        set(&mut m.image_w, self.image_w);
        set(&mut m.channels, self.channels);
        set(&mut m.patch, self.patch);
        set(&mut m.d_model, self.d_model);
        set(&mut m.heads, self.heads);
        set(&mut m.sample_points, self.sample_points);
        set(&mut m.encoder_layers, self.encoder_layers);
        set(&mut m.decoder_layers, self.decoder_layers);
        set(&mut m.num_queries, self.num_queries);
        set(&mut m.num_keypoints, self.num_keypoints);
        set(&mut m.ffn_dim, self.ffn_dim);
        set(&mut m.refinement_decoder, self.refinement_decoder);
    }

    /// Every field filled from `m`.
    pub fn full(m: &ModelConfig) -> Self {
        Self {
            image_h: Some(m.image_h),
            image_w: Some(m.image_w),
            channels: Some(m.channels),
            patch: Some(m.patch),
            d_model: Some(m.d_model),
            heads: Some(m.heads),
            sample_points: Some(m.sample_points),
            encoder_layers: Some(m.encoder_layers),
            decoder_layers: Some(m.decoder_layers),
            num_queries: Some(m.num_queries),
            num_keypoints: Some(m.num_keypoints),
            ffn_dim: Some(m.ffn_dim),
            refinement_decoder: Some(m.refinement_decoder),
        }
    }
}

impl EvalSection {
    pub fn apply(&self, p: &mut EvalParams) {
        set(&mut p.oks_thresholds, self.oks_thresholds.clone());
        set(&mut p.sigmas, self.sigmas.clone());
        set(&mut p.max_detections, self.max_detections);
        set(&mut p.medium, self.medium.map(|[lo, hi]| AreaRange { lo, hi }));
        set(&mut p.large, self.large.map(|[lo, hi]| AreaRange { lo, hi }));
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        Self::parse(std::str::from_utf8(&bytes).map_err(|_| Error::Schema("config: not UTF-8".into()))?)
    }

    /// Defaults (toy model, the training recipe, the COCO protocol and a
    /// 50-scene dataset with seed 2024) overlaid with this document.
    pub fn resolve(&self) -> Result<Config> {
        let mut model = ModelConfig::toy();
        if let Some(m) = &self.model {
            m.apply(&mut model);
        }
        model.validate()?;

        let mut train = TrainConfig::default();
        if let Some(t) = &self.train {
            set(&mut train.steps, t.steps);
            set(&mut train.learning_rate, t.learning_rate);
            if let Some(o) = t.optimizer {
                train.optimizer = match o {
                    OptimizerSection::Sgd => Optimizer::Sgd,
                    OptimizerSection::Momentum { momentum } => Optimizer::Momentum(momentum),
                    OptimizerSection::Adam { beta1, beta2, eps } => Optimizer::Adam { beta1, beta2, eps },
                };
            }
            set(&mut train.seed, t.seed);
            if let Some(f) = &t.focal {
                set(&mut train.focal.alpha, f.alpha);
                set(&mut train.focal.gamma, f.gamma);
            }
            if let Some(h) = &t.heatmap {
                set(&mut train.heatmap.gamma, h.gamma);
                set(&mut train.heatmap.beta, h.beta);
            }
            set(&mut train.heatmap_sigma, t.heatmap_sigma);
            set(&mut train.clip_norm, t.clip_norm);
            set(&mut train.log_every, t.log_every);
            set(&mut train.score_threshold, t.score_threshold);
            set(&mut train.max_detections, t.max_detections);
        }
        if let Some(w) = &self.loss_weights {
            set(&mut train.weights.lambda1, w.lambda1);
            set(&mut train.weights.lambda2, w.lambda2);
            set(&mut train.weights.lambda3, w.lambda3);
        }
        train.validate()?;

        let mut eval = EvalParams::coco(sigmas_for(model.num_keypoints));
        eval.max_detections = train.max_detections;
        if let Some(e) = &self.eval {
            e.apply(&mut eval);
        }
        eval.validate()?;
        if eval.sigmas.len() != model.num_keypoints || eval.max_detections == 0 {
            return Err(Error::Schema(format!(
                "eval: need {} sigmas and max_detections >= 1",
                model.num_keypoints
            )));
        }

        let mut dataset = DatasetSpec::toy(DEFAULT_DATASET_SEED, DEFAULT_SCENES);
        dataset.height = model.image_h;
        dataset.width = model.image_w;
        dataset.channels = model.channels;
        if let Some(d) = &self.dataset {
            set(&mut dataset.seed, d.seed);
            set(&mut dataset.scenes, d.scenes);
            set(&mut dataset.min_persons, d.min_persons);
            set(&mut dataset.max_persons, d.max_persons);
            set(&mut dataset.overlap_allowed, d.overlap_allowed);
        }
        if dataset.scenes == 0 || dataset.min_persons > dataset.max_persons || dataset.max_persons > model.num_queries {
            return Err(Error::Schema(
                "dataset: need scenes >= 1 and min_persons <= max_persons <= num_queries".into(),
            ));
        }
        Ok(Config {
            model,
            train,
            eval,
            dataset,
        })
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => ConfigFile::load(p)?.resolve(),
            None => ConfigFile::default().resolve(),
        }
    }

    /// The dataset spec with the skeleton matching the model's keypoints.
    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            skeleton: skeleton_for(self.model.num_keypoints)?,
            ..self.dataset.clone()
        })
    }
}
