use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Below this magnitude gradients are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the tape's analytic gradient of `f` with central differences
/// `(J(x + d) - J(x - d)) / 2d`, element by element over every input.
///
/// `f` builds the computation from leaves holding `inputs`; a non-scalar
/// result is summed.
pub fn grad_check<F>(f: F, inputs: &[Tensor], delta: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(delta > 0.0) {
        return Err(Error::Argument(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let eval = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        let out = if tape.value(out).len() == 1 {
            out
        } else {
            tape.sum(out)?
        };
        if !tape.value(out).is_finite() {
            return Err(Error::Numeric("non-finite objective in grad_check".into()));
        }
        Ok((tape, leaves, out))
    };

    let (tape, leaves, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.get(v)).collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + delta;
            let (t_plus, _, o_plus) = eval(&probe)?;
            probe[i].data_mut()[j] = orig - delta;
            let (t_minus, _, o_minus) = eval(&probe)?;
            probe[i].data_mut()[j] = orig;

            let numeric =
                (t_plus.value(o_plus).data()[0] - t_minus.value(o_minus).data()[0]) / (2.0 * delta);
            let a = analytic[i].data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at input {i}, element {j}"
                )));
            }
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_relative_error || report.checked == 1 {
                report.max_relative_error = rel;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

pub(crate) fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}
