//! Central-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Result, TuskError};

/// Check the analytic gradient of a scalar function against central
/// differences with step `eps`, entry by entry. Returns the maximum of
/// `|analytic - fd| / max(1, |analytic|)` over all input entries.
///
/// `f` must rebuild the computation from scratch on each call: it receives a
/// fresh graph with one `param` per input tensor and returns the scalar
/// output variable.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(TuskError::InvalidParameter {
            name: "eps",
            reason: format!("must be positive, got {eps}"),
        });
    }
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Graph<f64>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(TuskError::NonScalar {
                op: "grad_check",
                shape: g.value(out).shape().to_vec(),
            });
        }
        Ok((g, out))
    };

    let (g, out) = eval(inputs)?;
    let grads = g.backward(out)?;
    let vars: Vec<Var> = (0..inputs.len()).map(Var).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[ti])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let (gp, op) = eval(&work)?;
            let plus = gp.value(op).item();
            work[ti].data_mut()[ei] = orig - eps;
            let (gm, om) = eval(&work)?;
            let minus = gm.value(om).item();
            work[ti].data_mut()[ei] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[ei];
            let err = (a - fd).abs() / a.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
