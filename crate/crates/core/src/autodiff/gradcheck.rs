//! Central-difference gradient oracle.

use super::{Gradients, Tape, Tensor, Var};
use crate::error::Result;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of every leaf.
pub fn finite_difference_gradient<F>(f: F, leaves: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut work = leaves.to_vec();
    let mut out = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut grad = Tensor::zeros(leaves[li].shape());
        for i in 0..leaves[li].len() {
            let x0 = leaves[li].data()[i];
            work[li].data_mut()[i] = x0 + h;
            let fp = f(&work)?;
            work[li].data_mut()[i] = x0 - h;
            let fm = f(&work)?;
            work[li].data_mut()[i] = x0;
            grad.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Reverse-mode gradient of a graph-building closure with respect to its
/// leaves, all registered as trainable.
pub fn reverse_gradient<F>(f: &F, leaves: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads: Gradients = tape.backward(loss)?;
    Ok((loss.item(), vars.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Elementwise relative error between two gradients.
///
/// Entries far below the gradient's overall magnitude are compared against
/// `1e-3` of that magnitude instead of their own size, so round-off in
/// near-zero entries does not dominate.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let scale = a.iter().chain(b).map(Tensor::max_abs).fold(0.0_f64, f64::max);
    let floor = (1e-3 * scale).max(1e-12);
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compare reverse-mode and finite-difference gradients of `f`; returns the
/// maximum relative error.
pub fn check_gradient<F>(f: F, leaves: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let (_, reverse) = reverse_gradient(&f, leaves)?;
    let numeric = finite_difference_gradient(
        |xs| {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            Ok(f(&tape, &vars)?.item())
        },
        leaves,
        h,
    )?;
    Ok(max_relative_error(&reverse, &numeric))
}
