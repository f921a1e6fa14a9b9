//! Central finite differences against the tape's analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Numerical gradient of a scalar function by central differences.
pub fn numerical_gradient(mut f: impl FnMut(&Tensor<f64>) -> f64, at: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let mut point = at.clone();
    let mut grad = Tensor::zeros(at.shape());
    for i in 0..at.len() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + eps;
        let plus = f(&point);
        point.data_mut()[i] = orig - eps;
        let minus = f(&point);
        point.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes");
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm_sq().sqrt().max(numeric.norm_sq().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// `Σ out ⊙ weights`, a scalar probe for ops with tensor outputs.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Tensor<f64>,
    pub numeric: Tensor<f64>,
    pub rel_error: f64,
}

/// Checks `d f(x) / dx` where `f` builds a scalar from the input leaf.
///
/// `f` runs once on a differentiable leaf for the analytic gradient and
/// `2·len(x)` more times on constant leaves for the numeric one.
pub fn check_gradient<F>(f: F, at: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(at);
    let y = f(&mut g, x)?;
    let analytic = g.backward(y)?.get(x);

    let mut failure = None;
    let numeric = numerical_gradient(
        |p| {
            let mut g = Graph::new();
            let x = g.constant(p);
            match f(&mut g, x) {
                Ok(y) => g.scalar(y),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        at,
        eps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let rel_error = relative_error(&analytic, &numeric);
    Ok(GradCheck {
        analytic,
        numeric,
        rel_error,
    })
}
