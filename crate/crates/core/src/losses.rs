//! Training losses: focal classification, penalty-reduced heatmap focal loss,
//! L1 keypoint regression, OKS loss and their weighted combination
//! `L = L_c + λ₁·L_hm + λ₂·L_reg + λ₃·L_oks`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matcher::{self, Assignment};
use crate::metrics::GtInstance;
use crate::pose::PoseVars;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Heatmap term.
    pub lambda1: f64,
    /// L1 keypoint regression.
    pub lambda2: f64,
    /// OKS term.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 5.0,
            lambda3: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.lambda1) && ok(self.lambda2) && ok(self.lambda3) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.alpha <= 1.0 && self.gamma >= 0.0 && self.gamma.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig("focal alpha must be in (0, 1] and gamma >= 0".into()))
        }
    }
}

/// Exponents of the penalty-reduced pixelwise focal loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapFocalParams {
    /// Focusing exponent on the prediction.
    pub gamma: f64,
    /// Penalty reduction `(1 − gt)^beta` around positives.
    pub beta: f64,
}

impl Default for HeatmapFocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            beta: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_hm: f64,
    pub l_reg: f64,
    pub l_oks: f64,
    pub total: f64,
}

/// Mean over queries of `α·(1 − p_t)^γ·(−ln p_t)`, with `p_t = p` for
/// positives and `1 − p` for negatives.
pub fn focal_loss_class(g: &Graph, probs: Var, labels: &[f64], fp: &FocalParams) -> Result<Var> {
    let shape = g.shape(probs);
    if shape.iter().product::<usize>() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "focal_loss_class",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let sign = g.constant(Tensor::from_parts(shape.clone(), labels.iter().map(|y| 2.0 * y - 1.0).collect()));
    let offset = g.constant(Tensor::from_parts(shape, labels.iter().map(|y| 1.0 - y).collect()));
    let pt = g.add(g.mul(p, sign)?, offset)?;
    let modulation = g.pow(g.affine(pt, -1.0, 1.0), fp.gamma);
    let nll = g.scale(g.ln(pt), -fp.alpha);
    Ok(g.mean(g.mul(modulation, nll)?))
}

/// Renders `K` Gaussian channels on an `h × w` grid.
///
/// `instances` holds one `K`-long keypoint list `(x, y, visible)` per person,
/// in grid coordinates where pixel `(i, j)` sits at `(x = j, y = i)`. Centres
/// snap to the nearest pixel so every visible keypoint produces an exact
/// peak of 1; overlapping instances keep the per-pixel maximum.
pub fn gaussian_heatmap_render(instances: &[Vec<[f64; 3]>], k: usize, h: usize, w: usize, sigma: f64) -> Tensor {
    assert!(sigma > 0.0, "heatmap sigma must be positive");
    let mut out = Tensor::zeros(&[h, w, k]);
    let radius = libm::ceil(3.0 * sigma) as i64;
    let data = out.data_mut();
    for inst in instances {
        for (ch, kp) in inst.iter().enumerate().take(k) {
            if kp[2] <= 0.0 {
                continue;
            }
            let (cx, cy) = (libm::round(kp[0]) as i64, libm::round(kp[1]) as i64);
            for y in (cy - radius).max(0)..=(cy + radius).min(h as i64 - 1) {
                for x in (cx - radius).max(0)..=(cx + radius).min(w as i64 - 1) {
                    let d2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) as f64;
                    let v = libm::exp(-d2 / (2.0 * sigma * sigma));
                    let slot = &mut data[(y as usize * w + x as usize) * k + ch];
                    *slot = slot.max(v);
                }
            }
        }
    }
    out
}

/// Penalty-reduced pixelwise focal loss between a predicted and a rendered
/// heatmap, normalised by the number of exact positives (at least one).
pub fn heatmap_focal_loss(g: &Graph, pred: Var, gt: &Tensor, hp: &HeatmapFocalParams) -> Result<Var> {
    let shape = g.shape(pred);
    if shape.as_slice() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "heatmap_focal_loss",
            lhs: shape,
            rhs: gt.shape().to_vec(),
        });
    }
    let positives = gt.data().iter().filter(|&&v| v == 1.0).count();
    let pos_mask = g.constant(gt.map(|v| if v == 1.0 { 1.0 } else { 0.0 }));
    let neg_weight = g.constant(gt.map(|v| if v == 1.0 { 0.0 } else { libm::pow(1.0 - v, hp.beta) }));

    let p = g.clamp(pred, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = g.affine(p, -1.0, 1.0);
    let pos = g.mul(g.mul(g.pow(q, hp.gamma), g.ln(p))?, pos_mask)?;
    let neg = g.mul(g.mul(g.pow(p, hp.gamma), g.ln(q))?, neg_weight)?;
    let total = g.add(g.sum(pos), g.sum(neg))?;
    Ok(g.scale(total, -1.0 / positives.max(1) as f64))
}

fn visibility_columns(vis: &[f64]) -> Tensor {
    Tensor::from_fn(&[vis.len(), 2], |i| if vis[i / 2] > 0.0 { 1.0 } else { 0.0 })
}

/// Mean over visible keypoints of `|Δx| + |Δy|`; zero if nothing is visible.
pub fn l1_keypoint_loss(g: &Graph, pred_kps: Var, gt_kps: &Tensor, vis: &[f64]) -> Result<Var> {
    let n = vis.iter().filter(|&&v| v > 0.0).count();
    let diff = g.sub(pred_kps, g.constant(gt_kps.clone()))?;
    let masked = g.mul(g.abs(diff), g.constant(visibility_columns(vis)))?;
    Ok(g.scale(g.sum(masked), if n == 0 { 0.0 } else { 1.0 / n as f64 }))
}

/// `1 − OKS(pred, gt)` with `OKS` the mean over visible keypoints of
/// `exp(−d² / (2·area·(2σ)²))`.
pub fn oks_loss(g: &Graph, pred_kps: Var, gt_kps: &Tensor, vis: &[f64], area: f64, sigmas: &[f64]) -> Result<Var> {
    let n = vis.iter().filter(|&&v| v > 0.0).count();
    if n == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    if !(area > 0.0) {
        return Err(Error::Schema(alloc::format!("ground truth area must be positive, got {area}")));
    }
    let k = vis.len();
    if sigmas.len() != k || gt_kps.shape() != [k, 2] {
        return Err(Error::ShapeMismatch {
            op: "oks_loss",
            lhs: gt_kps.shape().to_vec(),
            rhs: vec![sigmas.len()],
        });
    }
    let diff = g.sub(pred_kps, g.constant(gt_kps.clone()))?;
    let d2 = g.matmul(g.square(diff), g.constant(Tensor::full(&[2, 1], 1.0)))?;
    let inv = Tensor::from_fn(&[k, 1], |i| {
        let kk = 2.0 * sigmas[i];
        -1.0 / (2.0 * area * kk * kk)
    });
    let sim = g.exp(g.mul(d2, g.constant(inv))?);
    let mask = Tensor::from_fn(&[k, 1], |i| if vis[i] > 0.0 { 1.0 } else { 0.0 });
    let mean = g.scale(g.sum(g.mul(sim, g.constant(mask))?), 1.0 / n as f64);
    Ok(g.affine(mean, -1.0, 1.0))
}

/// Graph handle of the composite loss together with its per-term values.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub assignment: Assignment,
}

/// Static inputs of [`composite_loss`] besides the network outputs.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig<'a> {
    pub weights: &'a LossWeights,
    pub focal: &'a FocalParams,
    pub heatmap: &'a HeatmapFocalParams,
    pub sigmas: &'a [f64],
}

/// Flat indices of `(x, y)` of query `q` inside a `[Q, K, 3]` tensor.
fn xy_indices(q: usize, k: usize) -> Vec<usize> {
    (0..k)
        .flat_map(|j| {
            let base = (q * k + j) * 3;
            [base, base + 1]
        })
        .collect()
}

/// Hungarian-matched composite loss.
///
/// `gts` must be in the normalised prediction frame (area included). All
/// queries pay the classification term, with matched queries labelled
/// positive. Regression and OKS terms are averaged over matched pairs whose
/// ground truth has a visible keypoint. Terms whose weight is zero are not
/// built and report exactly zero.
pub fn composite_loss(
    g: &Graph,
    preds: &PoseVars,
    pred_heatmap: Var,
    gts: &[GtInstance],
    gt_heatmap: &Tensor,
    cfg: &LossConfig<'_>,
) -> Result<LossTerms> {
    let values = preds.values(g);
    let cost = matcher::build_cost_matrix(&values, gts, cfg.weights, cfg.focal, cfg.sigmas)?;
    let assignment = matcher::hungarian(&cost)?;
    composite_loss_with_assignment(g, preds, pred_heatmap, gts, gt_heatmap, cfg, assignment)
}

/// [`composite_loss`] with a precomputed assignment.
pub fn composite_loss_with_assignment(
    g: &Graph,
    preds: &PoseVars,
    pred_heatmap: Var,
    gts: &[GtInstance],
    gt_heatmap: &Tensor,
    cfg: &LossConfig<'_>,
    assignment: Assignment,
) -> Result<LossTerms> {
    let kshape = g.shape(preds.keypoints);
    let (q, k) = (kshape[0], kshape[1]);
    let mut labels = vec![0.0; q];
    for &p in &assignment.gt_to_pred {
        labels[p] = 1.0;
    }
    let l_c = focal_loss_class(g, preds.scores, &labels, cfg.focal)?;
    let w = cfg.weights;
    let zero = || g.constant(Tensor::scalar(0.0));
    let l_hm = if w.lambda1 == 0.0 {
        zero()
    } else {
        heatmap_focal_loss(g, pred_heatmap, gt_heatmap, cfg.heatmap)?
    };

    let mut reg_terms = Vec::new();
    let mut oks_terms = Vec::new();
    for (gi, &p) in assignment.gt_to_pred.iter().enumerate() {
        let gt = &gts[gi];
        if gt.visible_count() == 0 {
            continue;
        }
        let pred_xy = g.gather(preds.keypoints, xy_indices(p, k), &[k, 2])?;
        let gt_xy = Tensor::from_fn(&[k, 2], |i| gt.keypoints[i / 2][i % 2]);
        let vis: Vec<f64> = gt.keypoints.iter().map(|kp| kp[2]).collect();
        if w.lambda2 != 0.0 {
            reg_terms.push(l1_keypoint_loss(g, pred_xy, &gt_xy, &vis)?);
        }
        if w.lambda3 != 0.0 {
            oks_terms.push(oks_loss(g, pred_xy, &gt_xy, &vis, gt.area, cfg.sigmas)?);
        }
    }
    let average = |terms: &[Var]| -> Result<Var> {
        if terms.is_empty() {
            return Ok(zero());
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(g.scale(acc, 1.0 / terms.len() as f64))
    };
    let l_reg = average(&reg_terms)?;
    let l_oks = average(&oks_terms)?;

    let mut total = g.add(l_c, g.scale(l_hm, w.lambda1))?;
    total = g.add(total, g.scale(l_reg, w.lambda2))?;
    total = g.add(total, g.scale(l_oks, w.lambda3))?;

    let item = |v: Var| g.value(v).item();
    let breakdown = LossBreakdown {
        l_c: item(l_c),
        l_hm: item(l_hm),
        l_reg: item(l_reg),
        l_oks: item(l_oks),
        total: item(total),
    };
    Ok(LossTerms {
        total,
        breakdown,
        assignment,
    })
}
