use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Input index followed by the multi-index of the worst coordinate.
    pub worst_coordinate: Vec<usize>,
}

/// Builds `f` on a fresh graph and reduces a non-scalar output to a scalar
/// through a fixed random projection.
fn evaluate<F>(f: &F, g: &mut Graph<f64>, inputs: &[Var]) -> Result<Var>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let out = f(g, inputs)?;
    if g.value(out).is_scalar() {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let w = g.constant(Tensor::new(w, &shape)?);
    g.dot(out, w)
}

fn scalar_at<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = evaluate(f, &mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Analytic gradients of `f` at `inputs` via [`Graph::backward`].
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = evaluate(f, &mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Central finite-difference gradients of `f` at `inputs`.
pub fn numeric_gradients<F>(op_name: &str, f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = vec![0.0; inputs[i].numel()];
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + FD_STEP;
            let plus = scalar_at(f, &work);
            work[i].data_mut()[j] = x0 - FD_STEP;
            let minus = scalar_at(f, &work);
            work[i].data_mut()[j] = x0;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return Err(Error::NotDifferentiable {
                        op: op_name.into(),
                        detail: format!("perturbed evaluation failed at input {i}[{j}]: {e}"),
                    })
                }
            };
            let quotient = (plus - minus) / (2.0 * FD_STEP);
            if !quotient.is_finite() {
                return Err(Error::NotDifferentiable {
                    op: op_name.into(),
                    detail: format!("non-finite difference quotient at input {i}[{j}]"),
                });
            }
            gi[j] = quotient;
        }
        grads.push(Tensor::new(gi, inputs[i].shape())?);
    }
    Ok(grads)
}

/// Compares two gradient sets with relative error
/// `|a - b| / max(1, |a|, |b|)`.
pub fn compare_gradients(
    op_name: &str,
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
    tolerance: f64,
) -> Result<GradReport> {
    if tolerance <= 0.0 {
        return Err(Error::invalid("grad_check: tolerance must be positive"));
    }
    if analytic.len() != numeric.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} analytic vs {} numeric gradients", analytic.len(), numeric.len()),
        ));
    }
    let mut worst = (0.0f64, vec![]);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if a.shape() != n.shape() {
            return Err(Error::shape(
                "grad_check",
                format!("input {i}: {:?} vs {:?}", a.shape(), n.shape()),
            ));
        }
        for (j, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let err = (x - y).abs() / 1f64.max(x.abs()).max(y.abs());
            if err > worst.0 || worst.1.is_empty() {
                let mut coord = vec![i];
                coord.extend(unravel(j, a.shape()));
                worst = (err, coord);
            }
        }
    }
    Ok(GradReport {
        op_name: op_name.into(),
        max_rel_err: worst.0,
        tolerance,
        passed: worst.0 <= tolerance,
        worst_coordinate: worst.1,
    })
}

/// Checks the reverse-mode gradients of `f` against central differences
/// (step `1e-5`) at `inputs`. Non-scalar outputs are reduced through a fixed
/// random projection first.
pub fn grad_check<F>(op_name: &str, f: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if let Some(t) = inputs.iter().find(|t| t.data().iter().any(|x| !x.is_finite())) {
        return Err(Error::invalid(format!(
            "grad_check: non-finite input of shape {:?}",
            t.shape()
        )));
    }
    let numeric = numeric_gradients(op_name, &f, inputs)?;
    let analytic = analytic_gradients(&f, inputs)?;
    compare_gradients(op_name, &analytic, &numeric, tolerance)
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (slot, &d) in idx.iter_mut().zip(shape).rev() {
        *slot = flat % d;
        flat /= d;
    }
    idx
}
