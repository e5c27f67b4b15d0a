//! Central finite differences as an independent check on [`Graph::backward`].

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, OpKind, Var};
use crate::tensor::Tensor;

/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / 2eps` for every element `i`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// Gradient norms below this are compared absolutely: finite differences of
/// an identically zero gradient leave rounding noise of 1e-11 to 1e-10.
pub const NORM_FLOOR: f64 = 1e-5;

/// Norm-relative error `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let sq = |it: &mut dyn Iterator<Item = f64>| libm::sqrt(it.map(|v| v * v).sum::<f64>());
    let diff = sq(&mut analytic.data().iter().zip(numeric.data()).map(|(a, b)| a - b));
    let scale = sq(&mut analytic.data().iter().copied()).max(sq(&mut numeric.data().iter().copied()));
    diff / scale.max(NORM_FLOOR)
}

/// Compares graph gradients of a scalar-valued builder against finite
/// differences, one input tensor at a time.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Analytic pass only: deliberately wrong backward rule (negative control).
    pub corrupt: Option<OpKind>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            corrupt: None,
        }
    }
}

impl GradCheck {
    /// Largest relative error across `inputs`.
    pub fn max_relative_error<F>(&self, inputs: &[Tensor], build: F) -> Result<f64>
    where
        F: Fn(&Graph, &[Var]) -> Result<Var>,
    {
        let errors = self.relative_errors(inputs, build)?;
        // a NaN probe must fail the check, not vanish in `max`
        Ok(errors
            .into_iter()
            .fold(0.0, |m, e| if e.is_nan() { f64::INFINITY } else { m.max(e) }))
    }

    /// Relative error for each input tensor, in order. NaN if the builder
    /// fails at a probe point.
    pub fn relative_errors<F>(&self, inputs: &[Tensor], build: F) -> Result<Vec<f64>>
    where
        F: Fn(&Graph, &[Var]) -> Result<Var>,
    {
        let g = match self.corrupt {
            Some(kind) => Graph::with_corrupted_rule(kind),
            None => Graph::new(),
        };
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&g, &vars)?;
        let grads = g.backward(root)?;

        let mut errors = Vec::with_capacity(inputs.len());
        for (i, x) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()));
            let numeric = finite_diff_grad(
                |probe| {
                    let g = Graph::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                        .collect();
                    build(&g, &vars).map_or(f64::NAN, |r| g.value(r).item())
                },
                x,
                self.eps,
            );
            errors.push(relative_error(&analytic, &numeric));
        }
        Ok(errors)
    }
}
