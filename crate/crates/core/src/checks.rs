//! The named finite-difference suite: every differentiable graph operation,
//! the attention layers, the losses and the tiny full model, each checked on
//! freshly drawn random inputs.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    deformable_attention, multi_head_attention, scaled_dot_attention, AttentionConfig, DeformableConfig,
    DeformableParams, Linear, MultiHeadParams,
};
use crate::error::Result;
use crate::gradcheck::GradCheck;
use crate::graph::{Graph, OpKind, Var};
use crate::losses::{
    composite_loss_with_assignment, focal_loss_class, gaussian_heatmap_render, heatmap_focal_loss, l1_keypoint_loss,
    oks_loss, FocalParams, HeatmapFocalParams, LossConfig, LossWeights,
};
use crate::matcher::Assignment;
use crate::metrics::GtInstance;
use crate::model::{forward, Bound, ModelConfig, ModelParams};
use crate::pose::PoseVars;
use crate::rng::{uniform, RngState};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_TRIALS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Numerics,
    Attention,
    Losses,
    Model,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Numerics => "core-numerics",
            Group::Attention => "attention",
            Group::Losses => "losses",
            Group::Model => "model",
        }
    }
}

type Trial = fn(&mut ChaCha8Rng, &GradCheck) -> Result<f64>;

/// One named check.
#[derive(Clone, Copy)]
pub struct Check {
    pub group: Group,
    pub name: &'static str,
    pub tolerance: f64,
    trial: Trial,
}

impl core::fmt::Debug for Check {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Check")
            .field("group", &self.group)
            .field("name", &self.name)
            .field("tolerance", &self.tolerance)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub group: Group,
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| uniform(rng, lo, hi))
}

/// Values in `±[lo, hi]`: magnitudes bounded away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = uniform(rng, lo, hi);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Reduces `out` to a scalar through fixed random weights so every output
/// element carries a distinct upstream gradient.
fn project(g: &Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    Ok(g.sum(g.mul(out, w)?))
}

fn unary_check(rng: &mut ChaCha8Rng, gc: &GradCheck, x: Tensor, op: fn(&Graph, Var) -> Var) -> Result<f64> {
    let w = rand_tensor(rng, x.shape(), -1.0, 1.0);
    gc.max_relative_error(&[x], |g, v| project(g, op(g, v[0]), &w))
}

fn binary_check(
    rng: &mut ChaCha8Rng,
    gc: &GradCheck,
    a: Tensor,
    b: Tensor,
    op: fn(&Graph, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let g0 = Graph::new();
    let shape = g0.value(op(&g0, g0.constant(a.clone()), g0.constant(b.clone()))?).shape().to_vec();
    let w = rand_tensor(rng, &shape, -1.0, 1.0);
    gc.max_relative_error(&[a, b], |g, v| project(g, op(g, v[0], v[1])?, &w))
}

fn std_inputs(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    rand_tensor(rng, shape, -2.0, 2.0)
}

// ---- core numerics ---------------------------------------------------------

fn t_matmul(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let (a, b) = (std_inputs(r, &[3, 4]), std_inputs(r, &[4, 2]));
    binary_check(r, gc, a, b, |g, a, b| g.matmul(a, b))
}

fn t_transpose(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = std_inputs(r, &[3, 5]);
    let w = rand_tensor(r, &[5, 3], -1.0, 1.0);
    gc.max_relative_error(&[x], |g, v| project(g, g.transpose(v[0])?, &w))
}

fn t_add(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let (a, b) = (std_inputs(r, &[3, 3]), std_inputs(r, &[3, 3]));
    binary_check(r, gc, a, b, |g, a, b| g.add(a, b))
}

fn t_sub(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let (a, b) = (std_inputs(r, &[2, 4]), std_inputs(r, &[2, 4]));
    binary_check(r, gc, a, b, |g, a, b| g.sub(a, b))
}

fn t_mul(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let (a, b) = (std_inputs(r, &[4, 3]), std_inputs(r, &[4, 3]));
    binary_check(r, gc, a, b, |g, a, b| g.mul(a, b))
}

fn t_add_row(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let (a, b) = (std_inputs(r, &[4, 3]), std_inputs(r, &[3]));
    binary_check(r, gc, a, b, |g, a, b| g.add_row(a, b))
}

fn t_mul_row(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let (a, b) = (std_inputs(r, &[4, 3]), std_inputs(r, &[3]));
    binary_check(r, gc, a, b, |g, a, b| g.mul_row(a, b))
}

fn t_affine(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = std_inputs(r, &[3, 3]);
    unary_check(r, gc, x, |g, v| g.affine(v, -1.7, 0.4))
}

fn t_sigmoid(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = rand_tensor(r, &[3, 4], -4.0, 4.0);
    unary_check(r, gc, x, |g, v| g.sigmoid(v))
}

fn t_relu(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = away_from_zero(r, &[3, 4], 0.05, 2.0);
    unary_check(r, gc, x, |g, v| g.relu(v))
}

fn t_exp(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = std_inputs(r, &[3, 3]);
    unary_check(r, gc, x, |g, v| g.exp(v))
}

fn t_ln(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = rand_tensor(r, &[3, 3], 0.2, 3.0);
    unary_check(r, gc, x, |g, v| g.ln(v))
}

fn t_abs(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = away_from_zero(r, &[3, 4], 0.05, 2.0);
    unary_check(r, gc, x, |g, v| g.abs(v))
}

fn t_square(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = std_inputs(r, &[3, 3]);
    unary_check(r, gc, x, |g, v| g.square(v))
}

fn t_pow(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = rand_tensor(r, &[3, 3], 0.2, 2.0);
    unary_check(r, gc, x, |g, v| g.pow(v, 2.5))
}

fn t_clamp(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    // magnitudes straddle the bounds at ±0.5 without touching them
    let x = Tensor::from_fn(&[3, 4], |i| {
        let m = if i % 2 == 0 { uniform(r, 0.0, 0.45) } else { uniform(r, 0.55, 2.0) };
        if r.gen::<bool>() {
            m
        } else {
            -m
        }
    });
    unary_check(r, gc, x, |g, v| g.clamp(v, -0.5, 0.5))
}

fn t_sum(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = std_inputs(r, &[3, 4]);
    gc.max_relative_error(&[x], |g, v| Ok(g.square(g.sum(v[0]))))
}

fn t_mean(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = std_inputs(r, &[3, 4]);
    gc.max_relative_error(&[x], |g, v| Ok(g.square(g.mean(v[0]))))
}

fn t_softmax(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = std_inputs(r, &[3, 5]);
    let w = rand_tensor(r, &[3, 5], -1.0, 1.0);
    gc.max_relative_error(&[x], |g, v| project(g, g.softmax_rows(v[0])?, &w))
}

fn t_layer_norm(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = std_inputs(r, &[3, 6]);
    let w = rand_tensor(r, &[3, 6], -1.0, 1.0);
    gc.max_relative_error(&[x], |g, v| project(g, g.layer_norm_rows(v[0], 1e-5)?, &w))
}

fn t_reshape(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = std_inputs(r, &[3, 4]);
    let w = rand_tensor(r, &[2, 6], -1.0, 1.0);
    gc.max_relative_error(&[x], |g, v| project(g, g.reshape(v[0], &[2, 6])?, &w))
}

fn t_slice_cols(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = std_inputs(r, &[3, 6]);
    let w = rand_tensor(r, &[3, 3], -1.0, 1.0);
    gc.max_relative_error(&[x], |g, v| project(g, g.slice_cols(v[0], 2, 5)?, &w))
}

fn t_concat_cols(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let (a, b) = (std_inputs(r, &[3, 2]), std_inputs(r, &[3, 4]));
    binary_check(r, gc, a, b, |g, a, b| g.concat_cols(&[a, b, a]))
}

fn t_gather(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let x = std_inputs(r, &[3, 4]);
    let idx: Vec<usize> = (0..10).map(|_| r.gen_range(0..12)).collect();
    let w = rand_tensor(r, &[5, 2], -1.0, 1.0);
    gc.max_relative_error(&[x], |g, v| project(g, g.gather(v[0], idx.clone(), &[5, 2])?, &w))
}

fn t_bilinear(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let map = std_inputs(r, &[4, 5, 2]);
    // fractional parts kept off the cell edges; some points fall in padding
    let pts = Tensor::from_fn(&[6, 2], |_| r.gen_range(-2..6) as f64 + uniform(r, 0.1, 0.9));
    binary_check(r, gc, map, pts, |g, m, p| g.bilinear_sample(m, p))
}

fn t_group_weighted_sum(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let (w, s) = (std_inputs(r, &[3, 2]), std_inputs(r, &[6, 4]));
    binary_check(r, gc, w, s, |g, w, s| g.group_weighted_sum(w, s))
}

// ---- attention ---------------------------------------------------------------

fn t_scaled_dot(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let (q, k, v) = (std_inputs(r, &[3, 4]), std_inputs(r, &[5, 4]), std_inputs(r, &[5, 2]));
    let w = rand_tensor(r, &[3, 2], -1.0, 1.0);
    gc.max_relative_error(&[q, k, v], |g, x| project(g, scaled_dot_attention(g, x[0], x[1], x[2])?, &w))
}

fn linear_inputs(r: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> [Tensor; 2] {
    let s = 1.0 / libm::sqrt(d_in as f64);
    [rand_tensor(r, &[d_in, d_out], -s, s), rand_tensor(r, &[d_out], -s, s)]
}

fn lin(x: &[Var], at: usize) -> Linear {
    Linear { w: x[at], b: x[at + 1] }
}

fn t_mha(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let cfg = AttentionConfig { d_model: 4, heads: 2 };
    let mut inputs = vec![std_inputs(r, &[3, 4]), std_inputs(r, &[5, 4])];
    for _ in 0..4 {
        inputs.extend(linear_inputs(r, 4, 4));
    }
    let w = rand_tensor(r, &[3, 4], -1.0, 1.0);
    gc.max_relative_error(&inputs, |g, x| {
        let p = MultiHeadParams {
            query: lin(x, 2),
            key: lin(x, 4),
            value: lin(x, 6),
            out: lin(x, 8),
        };
        project(g, multi_head_attention(g, x[0], x[1], &cfg, &p)?, &w)
    })
}

fn t_deformable(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let attn = AttentionConfig { d_model: 4, heads: 2 };
    let dcfg = DeformableConfig { sample_points: 2 };
    let hp = attn.heads * dcfg.sample_points;
    let mut inputs = vec![std_inputs(r, &[3, 4]), std_inputs(r, &[3, 3, 4])];
    inputs.extend(linear_inputs(r, 4, hp * 2));
    inputs.extend(linear_inputs(r, 4, hp));
    inputs.extend(linear_inputs(r, 4, 4));
    inputs.extend(linear_inputs(r, 4, 4));
    let refs: Vec<(f64, f64)> = (0..3).map(|_| (uniform(r, 0.2, 1.8), uniform(r, 0.2, 1.8))).collect();
    let w = rand_tensor(r, &[3, 4], -1.0, 1.0);
    gc.max_relative_error(&inputs, |g, x| {
        let p = DeformableParams {
            offsets: lin(x, 2),
            weights: lin(x, 4),
            value: lin(x, 6),
            out: lin(x, 8),
        };
        project(g, deformable_attention(g, x[0], &refs, x[1], &attn, &dcfg, &p)?, &w)
    })
}

// ---- losses --------------------------------------------------------------------

fn t_focal(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let logits = std_inputs(r, &[6]);
    let labels: Vec<f64> = (0..6).map(|_| if r.gen::<bool>() { 1.0 } else { 0.0 }).collect();
    gc.max_relative_error(&[logits], |g, x| focal_loss_class(g, g.sigmoid(x[0]), &labels, &FocalParams::default()))
}

fn t_heatmap_focal(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let logits = std_inputs(r, &[4, 4, 2]);
    let inst = vec![[uniform(r, 0.0, 3.0), uniform(r, 0.0, 3.0), 2.0], [uniform(r, 0.0, 3.0), uniform(r, 0.0, 3.0), 2.0]];
    let gt = gaussian_heatmap_render(&[inst], 2, 4, 4, 1.0);
    gc.max_relative_error(&[logits], |g, x| heatmap_focal_loss(g, g.sigmoid(x[0]), &gt, &HeatmapFocalParams::default()))
}

fn keypoint_pair(r: &mut ChaCha8Rng) -> (Tensor, Tensor, Vec<f64>) {
    let pred = rand_tensor(r, &[4, 2], 0.0, 1.0);
    // offsets kept away from zero so |·| is differentiable
    let gt = Tensor::from_fn(&[4, 2], |i| {
        let d = uniform(r, 0.02, 0.3);
        pred.data()[i] + if r.gen::<bool>() { d } else { -d }
    });
    let mut vis: Vec<f64> = (0..4).map(|_| if r.gen_range(0..4) == 0 { 0.0 } else { 2.0 }).collect();
    vis[0] = 2.0;
    (pred, gt, vis)
}

fn t_l1(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let (pred, gt, vis) = keypoint_pair(r);
    gc.max_relative_error(&[pred], |g, x| l1_keypoint_loss(g, x[0], &gt, &vis))
}

fn t_oks(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let (pred, gt, vis) = keypoint_pair(r);
    let area = uniform(r, 0.05, 0.5);
    gc.max_relative_error(&[pred], |g, x| oks_loss(g, x[0], &gt, &vis, area, &[0.107, 0.079, 0.089, 0.089]))
}

fn t_composite(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let (q, k) = (4, 2);
    let inputs = [std_inputs(r, &[q]), std_inputs(r, &[q, k, 3]), std_inputs(r, &[3, 3, k])];
    let gts: Vec<GtInstance> = (0..2)
        .map(|_| GtInstance {
            image_id: 0,
            keypoints: (0..k).map(|_| [uniform(r, 0.1, 0.9), uniform(r, 0.1, 0.9), 2.0]).collect(),
            area: uniform(r, 0.05, 0.3),
            iscrowd: false,
        })
        .collect();
    let mut preds: Vec<usize> = (0..q).collect();
    for i in 0..2 {
        let j = r.gen_range(i..q);
        preds.swap(i, j);
    }
    let assignment = Assignment {
        gt_to_pred: preds[..2].to_vec(),
        total_cost: 0.0,
    };
    let hm_gt = gaussian_heatmap_render(&[vec![[1.0, 2.0, 2.0], [0.0, 1.0, 2.0]]], k, 3, 3, 1.0);
    let (w, fp, hp) = (LossWeights::default(), FocalParams::default(), HeatmapFocalParams::default());
    let sigmas = [0.1, 0.08];
    let cfg = LossConfig {
        weights: &w,
        focal: &fp,
        heatmap: &hp,
        sigmas: &sigmas,
    };
    gc.max_relative_error(&inputs, |g, x| {
        let pose = PoseVars {
            scores: g.sigmoid(x[0]),
            keypoints: g.sigmoid(x[1]),
        };
        let t = composite_loss_with_assignment(g, &pose, g.sigmoid(x[2]), &gts, &hm_gt, &cfg, assignment.clone())?;
        Ok(t.total)
    })
}

// ---- model ------------------------------------------------------------------------

/// Composite loss of the tiny full model against all parameters, with the
/// matching held fixed at the one chosen for the unperturbed parameters.
fn t_model(r: &mut ChaCha8Rng, gc: &GradCheck) -> Result<f64> {
    let cfg = ModelConfig::tiny();
    model_check(r, gc, &cfg)
}

/// Inputs closer than this to a non-differentiable point are redrawn before
/// a model check: a central difference straddling a ReLU kink measures the
/// average of two one-sided slopes, not the gradient.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 200;

/// [`t_model`] for an arbitrary configuration.
pub fn model_check(r: &mut ChaCha8Rng, gc: &GradCheck, cfg: &ModelConfig) -> Result<f64> {
    let k = cfg.num_keypoints;
    let (gh, gw) = cfg.grid();
    let (w, fp, hp) = (LossWeights::default(), FocalParams::default(), HeatmapFocalParams::default());
    let sigmas = vec![0.1; k];
    let lc = LossConfig {
        weights: &w,
        focal: &fp,
        heatmap: &hp,
        sigmas: &sigmas,
    };
    for _ in 0..MAX_REDRAWS {
        let params = ModelParams::init(cfg, &RngState::new(r.gen()))?;
        let image = rand_tensor(r, &[cfg.image_h, cfg.image_w, cfg.channels], 0.0, 1.0);
        let gts: Vec<GtInstance> = (0..cfg.num_queries.min(2))
            .map(|_| GtInstance {
                image_id: 0,
                keypoints: (0..k).map(|_| [uniform(r, 0.1, 0.9), uniform(r, 0.1, 0.9), 2.0]).collect(),
                area: uniform(r, 0.05, 0.3),
                iscrowd: false,
            })
            .collect();
        let grid_pts: Vec<Vec<[f64; 3]>> = gts
            .iter()
            .map(|gt| gt.keypoints.iter().map(|p| [p[0] * gw as f64, p[1] * gh as f64, 2.0]).collect())
            .collect();
        let hm_gt = gaussian_heatmap_render(&grid_pts, k, gh, gw, 1.0);

        let g = Graph::new();
        let out = forward(&g, &image, cfg, &params.bind(&g, true))?;
        let terms = crate::losses::composite_loss(&g, &out.pose, out.heatmap, &gts, &hm_gt, &lc)?;
        if g.kink_margin() < KINK_MARGIN {
            continue;
        }
        let assignment = terms.assignment;

        let names: Vec<_> = params.iter().map(|(n, _)| n.clone()).collect();
        let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        return gc.max_relative_error(&inputs, |g, x| {
            let p = Bound::from_pairs(names.iter().cloned().zip(x.iter().copied()));
            let out = forward(g, &image, cfg, &p)?;
            Ok(composite_loss_with_assignment(g, &out.pose, out.heatmap, &gts, &hm_gt, &lc, assignment.clone())?.total)
        });
    }
    Err(crate::error::Error::InvalidConfig(alloc::format!(
        "no check point with kink margin {KINK_MARGIN} in {MAX_REDRAWS} draws"
    )))
}

const fn op(name: &'static str, trial: Trial) -> Check {
    Check {
        group: Group::Numerics,
        name,
        tolerance: OP_TOLERANCE,
        trial,
    }
}

const fn check(group: Group, name: &'static str, tolerance: f64, trial: Trial) -> Check {
    Check {
        group,
        name,
        tolerance,
        trial,
    }
}

/// Every check, in report order. Numerics checks are named after the
/// [`OpKind`] they exercise.
pub fn suite() -> Vec<Check> {
    vec![
        op("matmul", t_matmul),
        op("transpose", t_transpose),
        op("add", t_add),
        op("sub", t_sub),
        op("mul", t_mul),
        op("add_row", t_add_row),
        op("mul_row", t_mul_row),
        op("affine", t_affine),
        op("sigmoid", t_sigmoid),
        op("relu", t_relu),
        op("exp", t_exp),
        op("ln", t_ln),
        op("abs", t_abs),
        op("square", t_square),
        op("pow", t_pow),
        op("clamp", t_clamp),
        op("sum", t_sum),
        op("mean", t_mean),
        op("softmax_rows", t_softmax),
        op("layer_norm_rows", t_layer_norm),
        op("reshape", t_reshape),
        op("slice_cols", t_slice_cols),
        op("concat_cols", t_concat_cols),
        op("gather", t_gather),
        op("bilinear_sample", t_bilinear),
        op("group_weighted_sum", t_group_weighted_sum),
        check(Group::Attention, "scaled_dot_attention", OP_TOLERANCE, t_scaled_dot),
        check(Group::Attention, "multi_head_attention", OP_TOLERANCE, t_mha),
        check(Group::Attention, "deformable_attention", OP_TOLERANCE, t_deformable),
        check(Group::Losses, "focal_loss_class", OP_TOLERANCE, t_focal),
        check(Group::Losses, "heatmap_focal_loss", OP_TOLERANCE, t_heatmap_focal),
        check(Group::Losses, "l1_keypoint_loss", OP_TOLERANCE, t_l1),
        check(Group::Losses, "oks_loss", OP_TOLERANCE, t_oks),
        check(Group::Losses, "composite_loss", OP_TOLERANCE, t_composite),
        check(Group::Model, "tiny_model_composite", MODEL_TOLERANCE, t_model),
    ]
}

/// Runs `check` on `trials` random inputs drawn from `seed`; returns the
/// worst error.
pub fn run_check(check: &Check, index: usize, seed: u64, trials: usize, corrupt: Option<OpKind>) -> Result<CheckResult> {
    let gc = GradCheck {
        corrupt,
        ..GradCheck::default()
    };
    let base = RngState::new(seed).split(index as u64);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let e = (check.trial)(&mut base.stream(t as u64), &gc)?;
        // NaN propagates as a failure
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    Ok(CheckResult {
        group: check.group,
        name: check.name,
        max_error: worst,
        tolerance: check.tolerance,
    })
}

pub fn run_suite(seed: u64, trials: usize, corrupt: Option<OpKind>) -> Result<Vec<CheckResult>> {
    suite()
        .iter()
        .enumerate()
        .map(|(i, c)| run_check(c, i, seed, trials, corrupt))
        .collect()
}

/// Encoder and decoder depths swept by [`layer_grid`].
pub const GRID_ENCODER_LAYERS: core::ops::RangeInclusive<usize> = 1..=6;
pub const GRID_DECODER_LAYERS: core::ops::RangeInclusive<usize> = 1..=5;

/// Outcome of one configuration in the layer sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub shapes_ok: bool,
    pub grad_error: f64,
}

impl GridCell {
    pub fn passed(&self) -> bool {
        self.shapes_ok && self.grad_error <= MODEL_TOLERANCE
    }
}

/// Output shapes of one forward pass against the configured Q, K and grid.
pub fn shapes_match(cfg: &ModelConfig, params: &ModelParams, image: &Tensor) -> Result<bool> {
    let g = Graph::new();
    let out = forward(&g, image, cfg, &params.bind(&g, false))?;
    let (gh, gw) = cfg.grid();
    let (q, k) = (cfg.num_queries, cfg.num_keypoints);
    Ok(g.shape(out.pose.scores) == [q]
        && g.shape(out.pose.keypoints) == [q, k, 3]
        && g.shape(out.heatmap) == [gh, gw, k])
}

/// Builds the tiny model at every depth pair, checks output shapes and runs
/// the full-model gradient check once per pair.
pub fn layer_grid(seed: u64) -> Result<Vec<GridCell>> {
    let mut cells = Vec::new();
    for e in GRID_ENCODER_LAYERS {
        for d in GRID_DECODER_LAYERS {
            let cfg = ModelConfig {
                encoder_layers: e,
                decoder_layers: d,
                ..ModelConfig::tiny()
            };
            let mut rng = RngState::new(seed).split(e as u64).stream(d as u64);
            let params = ModelParams::init(&cfg, &RngState::new(rng.gen()))?;
            let image = rand_tensor(&mut rng, &[cfg.image_h, cfg.image_w, cfg.channels], 0.0, 1.0);
            let shapes_ok = shapes_match(&cfg, &params, &image)?;
            let grad_error = model_check(&mut rng, &GradCheck::default(), &cfg)?;
            cells.push(GridCell {
                encoder_layers: e,
                decoder_layers: d,
                shapes_ok,
                grad_error,
            });
        }
    }
    Ok(cells)
}
