//! Finite-difference verification of tape gradients.

use super::{Tape, Tensor, TensorId};
use crate::error::TensorError;

/// Compares the tape gradient of `f` at `at` against central finite
/// differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` and returns the
/// maximum relative error over coordinates. The relative error uses a unit
/// floor so near-zero coordinates compare absolutely.
pub fn grad_check<F>(f: F, at: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(&at.clone().with_requires_grad(true));
    let loss = f(&mut tape, x)?;
    if tape.numel(loss) != 1 {
        return Err(TensorError::NonScalarLoss(tape.shape(loss).to_vec()));
    }
    tape.backward(loss)?;
    let analytic = tape.grad(x).expect("leaf requires grad").to_vec();

    let eval = |data: &[f64]| -> Result<f64, TensorError> {
        let t = Tensor::from_vec(at.shape().to_vec(), data.to_vec())?;
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let loss = f(&mut tape, x)?;
        Ok(tape.value(loss))
    };

    let mut max_rel = 0.0f64;
    let mut probe = at.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = eval(&probe)?;
        probe[i] = orig - eps;
        let minus = eval(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}
