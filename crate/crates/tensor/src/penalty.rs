use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-sample L2 norm of `d critic(x) / d x` evaluated at `x`, returned as a
/// `B x 1` var that stays differentiable with respect to every parameter the
/// critic reads from `tape`.
///
/// The critic must score each sample independently, so the gradient of the
/// summed scores splits into per-sample gradients.
pub fn per_sample_grad_norm<T, F>(tape: &Tape<T>, x: Tensor<T>, critic: F) -> Result<Var<T>>
where
    T: Element,
    F: FnOnce(&Var<T>) -> Result<Var<T>>,
{
    let batch = x.dim(0)?;
    let per_sample = x.len() / batch;
    let input = tape.leaf(x);
    let scores = critic(&input)?;
    if scores.shape() != [batch, 1] {
        return Err(TensorError::shape(
            "grad_norm",
            format!("critic must return {batch} x 1 scores, got {:?}", scores.shape()),
        ));
    }
    let total = scores.sum()?;
    let grad = if total.requires_grad() {
        tape.grad(&total, &[&input], true)?
            .pop()
            .expect("one gradient per input")
    } else {
        tape.constant(input.value().zeros_like())
    };
    grad.reshape(&[batch, per_sample])?
        .square()?
        .sum_to(&[batch, 1])?
        .sqrt()
}
