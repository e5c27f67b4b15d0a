use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::metrics::DtInstance;
use crate::tensor::Tensor;

/// Per-image predictions: one score and `K` keypoints `(x, y, confidence)`
/// for each of `Q` queries. Coordinates live in the normalised `[0, 1]`
/// image frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseOutput {
    /// `[Q]`.
    pub scores: Tensor,
    /// `[Q, K, 3]`.
    pub keypoints: Tensor,
}

impl PoseOutput {
    pub fn new(scores: Tensor, keypoints: Tensor) -> Result<Self> {
        let ks = keypoints.shape();
        if ks.len() != 3 || ks[2] != 3 || scores.shape() != [ks[0]] {
            return Err(Error::ShapeMismatch {
                op: "pose_output",
                lhs: scores.shape().to_vec(),
                rhs: ks.to_vec(),
            });
        }
        Ok(Self { scores, keypoints })
    }

    pub fn num_queries(&self) -> usize {
        self.keypoints.shape()[0]
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.shape()[1]
    }

    pub fn score(&self, q: usize) -> f64 {
        self.scores.data()[q]
    }

    /// `(x, y, confidence)` of keypoint `k` of query `q`.
    pub fn keypoint(&self, q: usize, k: usize) -> [f64; 3] {
        let base = (q * self.num_keypoints() + k) * 3;
        let d = self.keypoints.data();
        [d[base], d[base + 1], d[base + 2]]
    }

    pub fn query_keypoints(&self, q: usize) -> Vec<[f64; 3]> {
        (0..self.num_keypoints()).map(|k| self.keypoint(q, k)).collect()
    }

    /// Detections in pixel coordinates for queries scoring at least
    /// `threshold`, best first, at most `max_det`.
    pub fn to_detections(
        &self,
        image_id: u64,
        width: f64,
        height: f64,
        threshold: f64,
        max_det: usize,
    ) -> Vec<DtInstance> {
        let mut order: Vec<usize> = (0..self.num_queries())
            .filter(|&q| self.score(q) >= threshold)
            .collect();
        order.sort_by(|&a, &b| self.score(b).total_cmp(&self.score(a)).then(a.cmp(&b)));
        order.truncate(max_det);
        order
            .into_iter()
            .map(|q| DtInstance {
                image_id,
                keypoints: self
                    .query_keypoints(q)
                    .into_iter()
                    .map(|[x, y, c]| [x * width, y * height, c])
                    .collect(),
                score: self.score(q),
            })
            .collect()
    }
}

/// Graph handles of a forward pass: scores `[Q]` and keypoints `[Q, K, 3]`.
#[derive(Debug, Clone, Copy)]
pub struct PoseVars {
    pub scores: crate::graph::Var,
    pub keypoints: crate::graph::Var,
}

impl PoseVars {
    pub fn values(&self, g: &crate::graph::Graph) -> PoseOutput {
        PoseOutput {
            scores: g.value(self.scores).clone(),
            keypoints: g.value(self.keypoints).clone(),
        }
    }
}
