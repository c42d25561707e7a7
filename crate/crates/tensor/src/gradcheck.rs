use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape's adjoint of a scalar program against central
/// differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// Returns the largest relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let leaf = tape.param(x.clone());
    f(leaf)?.backward()?;
    let analytic = tape.grad(leaf).expect("leaf requires grad");

    let eval = |point: Tensor<f64>| -> Result<f64> {
        let tape = Tape::no_grad();
        f(tape.constant(point))?.value().item()
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
