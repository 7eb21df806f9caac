//! Central finite-difference verification of tape gradients.

use crate::error::{GradError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// coordinate attaining the maximum
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval_scalar<F>(f: &F, point: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(point.clone());
    let y = f(&mut g, x)?;
    let v = g.value(y);
    v.item().ok_or_else(|| GradError::NonScalarLoss(v.shape().to_vec()))
}

/// Checks `f` at `point` over every coordinate and returns the max relative
/// error.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, epsilon, &coords).map(|r| r.max_rel_error)
}

/// Like [`grad_check`] but only perturbs the listed coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor<f64>, epsilon: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let full = grads.get(x).expect("point is a leaf").data().to_vec();

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut max_rel_error = 0.0f64;
    let mut worst_index = coords.first().copied().unwrap_or(0);
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let num = (eval_scalar(&f, &plus)? - eval_scalar(&f, &minus)?) / (2.0 * epsilon);
        let ana = full[i];
        let err = (ana - num).abs() / ana.abs().max(1.0);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
        analytic.push(ana);
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
