//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Largest relative disagreement between the tape gradient and a central
/// difference, over every element of every input:
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `op` records a computation on a fresh tape from the given input vars and
/// returns a scalar loss. All inputs are treated as differentiable.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.variable(v.clone())).collect();
        let loss = op(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let scalar = |values: &[Tensor<f64>]| -> Result<f64> {
        let (tape, _, loss) = eval(values)?;
        Ok(tape.value(loss)?.data()[0])
    };

    let (tape, vars, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[slot].shape().to_vec()));
        for i in 0..inputs[slot].len() {
            let original = inputs[slot].data()[i];
            probe[slot].data_mut()[i] = original + step;
            let plus = scalar(&probe)?;
            probe[slot].data_mut()[i] = original - step;
            let minus = scalar(&probe)?;
            probe[slot].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
