use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

const PROJECTION_SEED: u64 = 0x6c62_7069;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    /// `(input, element)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Largest relative error between analytic and central-difference gradients
/// over every element of every input.
///
/// Non-scalar outputs are contracted with a fixed pseudo-random weight tensor
/// first, so every output element contributes.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_report(f, inputs, step).map(|r| r.max_relative_error)
}

pub fn grad_check_report<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(
            "grad_check step must be positive and finite",
        ));
    }
    if let Some(i) = inputs.iter().position(|t| !t.is_finite()) {
        return Err(Error::invalid(format!(
            "grad_check input {i} is not finite"
        )));
    }

    let mut projection: Option<Tensor> = None;
    let mut evaluate = |values: &[Tensor], requires_grad: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        let out = f(&mut tape, &vars)?;
        let scalar = if tape.value(out).len() == 1 {
            out
        } else {
            let shape = tape.value(out).shape();
            let weights = projection
                .get_or_insert_with(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
                    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
                })
                .clone();
            if weights.shape() != shape {
                return Err(Error::invalid("grad_check function changed output shape"));
            }
            let w = tape.constant(weights);
            let prod = tape.mul(out, w)?;
            tape.sum(prod)?
        };
        Ok((tape, vars, scalar))
    };

    let (mut tape, vars, loss) = evaluate(inputs, true)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let (t, _, l) = evaluate(&work, false)?;
            let plus = t.value(l).data()[0];
            work[i].data_mut()[j] = orig - step;
            let (t, _, l) = evaluate(&work, false)?;
            let minus = t.value(l).data()[0];
            work[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
