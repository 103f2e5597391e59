use super::{NumericError, Tape, Tensor, Var};

/// Builds a scalar-valued graph over the given parameter leaves.
pub trait ScalarGraph: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericError> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericError>> ScalarGraph for F {}

fn evaluate(f: &impl ScalarGraph, params: &[Tensor<f64>]) -> Result<f64, NumericError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(NumericError::NonFinite { op: "grad_check probe" });
    }
    Ok(v)
}

/// Gradients of `f` at `params` by reverse-mode differentiation.
pub fn analytic_gradient(f: &impl ScalarGraph, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>, NumericError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
        .collect())
}

/// Central finite differences `(f(x+h) - f(x-h)) / 2h`, one coordinate at a time.
pub fn numeric_gradient(f: &impl ScalarGraph, params: &[Tensor<f64>], step: f64) -> Result<Vec<Tensor<f64>>, NumericError> {
    if step.is_nan() || step <= 0.0 {
        return Err(NumericError::Invalid {
            op: "numeric_gradient",
            detail: format!("step must be positive, got {step}"),
        });
    }
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let x0 = params[p].data()[i];
            probe[p].data_mut()[i] = x0 + step;
            let plus = evaluate(f, &probe)?;
            probe[p].data_mut()[i] = x0 - step;
            let minus = evaluate(f, &probe)?;
            probe[p].data_mut()[i] = x0;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// `max |a - n| / max(1, |n|)` over all coordinates.
pub fn max_relative_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares reverse-mode gradients against central differences and returns
/// the maximum relative error over every parameter coordinate.
pub fn grad_check(f: impl ScalarGraph, params: &[Tensor<f64>], step: f64) -> Result<f64, NumericError> {
    let analytic = analytic_gradient(&f, params)?;
    let numeric = numeric_gradient(&f, params, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}
