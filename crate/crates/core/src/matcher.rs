//! Minimum-cost bipartite matching of ground-truth poses to predictions.
//!
//! [`hungarian`] is a shortest-augmenting-path Kuhn–Munkres solver over
//! floating-point costs. Among equal-cost optima it returns the
//! lexicographically smallest `gt_to_pred` vector, i.e. the lowest
//! prediction index wins for the earliest ground truth. [`brute_force_assignment`]
//! enumerates injections under the same rule and serves as the test oracle.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::losses::{FocalParams, LossWeights, PROB_CLAMP};
use crate::metrics::{self, DtInstance, GtInstance};
use crate::pose::PoseOutput;

/// Dense `G × Q` cost matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "cost_matrix",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEntry {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "cost_matrix",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.as_ref().len()],
                });
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Absolute slack under which two totals count as equal.
    fn tolerance(&self) -> f64 {
        let max = self.data.iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v)));
        1e-12 * (1.0 + max * self.rows as f64)
    }
}

/// Injective ground-truth → prediction map.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub gt_to_pred: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    /// Prediction matched to each query index, if any.
    pub fn pred_to_gt(&self, num_preds: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_preds];
        for (g, &q) in self.gt_to_pred.iter().enumerate() {
            out[q] = Some(g);
        }
        out
    }
}

fn check_feasible(cost: &CostMatrix) -> Result<()> {
    if cost.rows > cost.cols {
        return Err(Error::RectangularInfeasible {
            gts: cost.rows,
            preds: cost.cols,
        });
    }
    if let Some(i) = cost.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEntry {
            row: i / cost.cols,
            col: i % cost.cols,
        });
    }
    Ok(())
}

struct Solution {
    row_to_col: Vec<usize>,
    total: f64,
    row_potential: Vec<f64>,
    col_potential: Vec<f64>,
}

/// Kuhn–Munkres with potentials for `rows <= cols`, over the sub-problem made
/// of `rows` and `cols` index lists into `cost`.
fn solve(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> Solution {
    let (n, m) = (rows.len(), cols.len());
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| a(i + 1, j + 1))
        .sum();
    Solution {
        row_to_col,
        total,
        row_potential: u[1..].to_vec(),
        col_potential: v[1..].to_vec(),
    }
}

/// Minimum-cost assignment of every row (ground truth) to a distinct column
/// (prediction).
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    check_feasible(cost)?;
    let tol = cost.tolerance();
    let mut free_cols: Vec<usize> = (0..cost.cols).collect();
    let mut gt_to_pred = Vec::with_capacity(cost.rows);

    // Fix rows one at a time to the lowest column that still admits an
    // optimal completion. Only edges tight under the optimal potentials can
    // appear in an optimal assignment.
    for i in 0..cost.rows {
        let rest_rows: Vec<usize> = (i..cost.rows).collect();
        let sol = solve(cost, &rest_rows, &free_cols);
        let mut chosen = None;
        for (jj, &c) in free_cols.iter().enumerate() {
            let reduced = cost.get(i, c) - sol.row_potential[0] - sol.col_potential[jj];
            if reduced > tol {
                continue;
            }
            if jj == sol.row_to_col[0] {
                chosen = Some(jj);
                break;
            }
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            let rest = solve(cost, &rest_rows[1..], &cols).total;
            if cost.get(i, c) + rest <= sol.total + tol {
                chosen = Some(jj);
                break;
            }
        }
        let jj = chosen.unwrap_or(sol.row_to_col[0]);
        gt_to_pred.push(free_cols.remove(jj));
    }
    let total_cost = gt_to_pred
        .iter()
        .enumerate()
        .map(|(g, &q)| cost.get(g, q))
        .sum();
    Ok(Assignment {
        gt_to_pred,
        total_cost,
    })
}

/// Largest row count accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Exhaustive minimum over all injections, lexicographically smallest among
/// equal-cost optima.
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<Assignment> {
    if cost.rows > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            rows: cost.rows,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    check_feasible(cost)?;

    fn walk(cost: &CostMatrix, row: usize, used: &mut [bool], cur: &mut Vec<usize>, acc: f64, out: &mut Vec<(f64, Vec<usize>)>) {
        if row == cost.rows {
            out.push((acc, cur.clone()));
            return;
        }
        for c in 0..cost.cols {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                walk(cost, row + 1, used, cur, acc + cost.get(row, c), out);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut all = Vec::new();
    walk(cost, 0, &mut vec![false; cost.cols], &mut Vec::new(), 0.0, &mut all);
    let best = all.iter().map(|(t, _)| *t).fold(f64::INFINITY, f64::min);
    let tol = cost.tolerance();
    // enumeration order is lexicographic
    let (_, gt_to_pred) = all
        .into_iter()
        .find(|(t, _)| *t <= best + tol)
        .unwrap_or((0.0, Vec::new()));
    let total_cost = gt_to_pred
        .iter()
        .enumerate()
        .map(|(g, &q)| cost.get(g, q))
        .sum();
    Ok(Assignment {
        gt_to_pred,
        total_cost,
    })
}

/// Focal classification cost of labelling a query positive: the focal loss
/// it would pay as a positive minus the loss it pays as a negative.
pub fn classification_cost(p: f64, fp: &FocalParams) -> f64 {
    let p = p.max(PROB_CLAMP).min(1.0 - PROB_CLAMP);
    let pos = fp.alpha * libm::pow(1.0 - p, fp.gamma) * -libm::log(p);
    let neg = fp.alpha * libm::pow(p, fp.gamma) * -libm::log(1.0 - p);
    pos - neg
}

/// Mean `|Δx| + |Δy|` over the visible keypoints of `gt`; zero if none.
pub fn l1_cost(pred: &[[f64; 3]], gt: &GtInstance) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (p, g) in pred.iter().zip(&gt.keypoints) {
        if g[2] > 0.0 {
            total += libm::fabs(p[0] - g[0]) + libm::fabs(p[1] - g[1]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// `cost(g, q) = class(q) + λ₂·L1(q, g) + λ₃·(1 − OKS(q, g))`.
///
/// `gts` must be in the same normalised frame as `preds`, area included.
/// Ground truths without a visible keypoint carry no regression cost.
pub fn build_cost_matrix(
    preds: &PoseOutput,
    gts: &[GtInstance],
    weights: &LossWeights,
    fp: &FocalParams,
    sigmas: &[f64],
) -> Result<CostMatrix> {
    let q = preds.num_queries();
    let class: Vec<f64> = (0..q).map(|i| classification_cost(preds.score(i), fp)).collect();
    let mut data = Vec::with_capacity(gts.len() * q);
    for gt in gts {
        for (i, &c) in class.iter().enumerate() {
            let kps = preds.query_keypoints(i);
            let mut cost = c;
            if gt.visible_count() > 0 {
                let dt = DtInstance {
                    image_id: gt.image_id,
                    keypoints: kps.clone(),
                    score: preds.score(i),
                };
                let similarity = metrics::oks(&dt, gt, sigmas)?;
                cost += weights.lambda2 * l1_cost(&kps, gt) + weights.lambda3 * (1.0 - similarity);
            }
            data.push(cost);
        }
    }
    CostMatrix::new(gts.len(), q, data)
}
