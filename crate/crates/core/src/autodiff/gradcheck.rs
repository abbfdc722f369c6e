//! Central-difference gradient verification.

use super::{AutodiffError, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a ±h perturbation changes some relu's
    /// activation pattern, i.e. the point sits on (or next to) a kink.
    pub excluded: usize,
}

/// Loss value, relu pattern, and the tape with its loss and leaf handles.
type Evaluation = (f64, Vec<bool>, Tape, Var, Vec<Var>);

/// Compares reverse-mode gradients of `f` at `params` with central differences.
///
/// `f` receives a fresh tape and one handle per entry of `params`, and must
/// return a scalar node.
pub fn grad_check<F, E>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    if !(h > 0.0) {
        return Err(AutodiffError::InvalidStep(h).into());
    }
    let eval = |values: &[Tensor]| -> Result<Evaluation, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss);
        if !value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(value.shape().to_vec()).into());
        }
        Ok((value.item(), tape.relu_pattern(), tape, loss, vars))
    };

    let (_, pattern, tape, loss, vars) = eval(params)?;
    let grads = tape.backward(loss, &vars)?.collect(&vars);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, grad) in grads.iter().enumerate() {
        for c in 0..params[p].numel() {
            let x = params[p].data()[c];
            work[p].data_mut()[c] = x + h;
            let (plus, pat_plus, ..) = eval(&work)?;
            work[p].data_mut()[c] = x - h;
            let (minus, pat_minus, ..) = eval(&work)?;
            work[p].data_mut()[c] = x;

            if pat_plus != pattern || pat_minus != pattern {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grad.data()[c];
            let denom = 1f64.max(analytic.abs()).max(numeric.abs());
            let err = (analytic - numeric).abs() / denom;
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
