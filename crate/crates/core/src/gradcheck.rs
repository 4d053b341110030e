//! Central finite-difference gradient verification.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared in absolute terms. Central
/// differences with `eps = 1e-6` on an O(1) loss carry about `1e-10` of
/// round-off, so smaller gradients have no meaningful relative error.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Maximum relative error per input tensor.
    pub max_rel_err: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Loss value and gradients with respect to every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    tape.backward(out)?;
    let grads = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    Ok((value, grads))
}

pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].numel()];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + eps;
            let plus = evaluate(f, &work)?;
            work[t].data_mut()[k] = orig - eps;
            let minus = evaluate(f, &work)?;
            work[t].data_mut()[k] = orig;
            *gk = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare_gradients(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tol: f64) -> GradCheckReport {
    let max_rel_err: Vec<f64> = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            a.iter()
                .zip(n)
                .map(|(&x, &y)| relative_error(x, y))
                .fold(0.0, f64::max)
        })
        .collect();
    let passed = analytic.len() == numeric.len() && max_rel_err.iter().all(|&e| e < tol);
    GradCheckReport {
        max_rel_err,
        tol,
        passed,
    }
}

/// Compares tape gradients of `f` against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside (0, 1e-3]")));
    }
    let first = evaluate(&f, inputs)?;
    let second = evaluate(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!("{first} vs {second}")));
    }
    let (_, analytic) = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, eps)?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}
