//! Reverse-mode rules of a G-block.
//!
//! Given the output adjoint `y_bar = dL/dy`, the coefficient adjoints are
//! correlations of `y_bar` with the sensitivities `dy/db_0` and `dy/da_1`.
//! Both sensitivities come from one all-pole filtering each; the other
//! sensitivities are pure shifts of these under rest initialization:
//!
//! ```text
//! sigma_bj(t) = sigma_b0(t - j),   sigma_aj(t) = sigma_a1(t - j + 1)
//! ```
//!
//! The input adjoint is the output adjoint filtered through `G` in reverse time.

use crate::error::Result;
use crate::signal::flip;
use crate::tf::{lfilter, TransferFunctionParams};

/// Adjoints of one SISO G-block with respect to `b`, `a` and the input sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct GBlockGradients {
    pub b_bar: Vec<f64>,
    pub a_bar: Vec<f64>,
    pub u_bar: Vec<f64>,
}

/// `sigma_b0(t) = u(t - n_k) / A(q)`.
pub fn sens_b0(params: &TransferFunctionParams, u: &[f64]) -> Result<Vec<f64>> {
    lfilter(&[1.0], &params.a, params.n_k, u)
}

/// `b_bar_j = sum_{t >= j} y_bar_t sigma_b0(t - j)` for `j = 0..=n_b`.
pub fn grad_b(y_bar: &[f64], sigma_b0: &[f64], n_b: usize) -> Vec<f64> {
    debug_assert_eq!(y_bar.len(), sigma_b0.len());
    (0..=n_b).map(|j| shifted_dot(y_bar, sigma_b0, j)).collect()
}

/// `sigma_a1(t) = -y(t - 1) / A(q)`.
pub fn sens_a1(params: &TransferFunctionParams, y: &[f64]) -> Result<Vec<f64>> {
    lfilter(&[-1.0], &params.a, 1, y)
}

/// `a_bar_j = sum_{t >= j-1} y_bar_t sigma_a1(t - j + 1)` for `j = 1..=n_a`.
pub fn grad_a(y_bar: &[f64], sigma_a1: &[f64], n_a: usize) -> Vec<f64> {
    debug_assert_eq!(y_bar.len(), sigma_a1.len());
    (1..=n_a).map(|j| shifted_dot(y_bar, sigma_a1, j - 1)).collect()
}

/// `u_bar = flip(G(q) flip(y_bar))`, linear in the sequence length.
pub fn grad_u(params: &TransferFunctionParams, y_bar: &[f64]) -> Result<Vec<f64>> {
    Ok(flip(&params.filter(&flip(y_bar))?))
}

/// All three adjoints from the saved forward input `u` and output `y`.
pub fn backward(
    params: &TransferFunctionParams,
    u: &[f64],
    y: &[f64],
    y_bar: &[f64],
) -> Result<GBlockGradients> {
    let b_bar = grad_b(y_bar, &sens_b0(params, u)?, params.n_b());
    let a_bar = if params.n_a() > 0 {
        grad_a(y_bar, &sens_a1(params, y)?, params.n_a())
    } else {
        Vec::new()
    };
    let u_bar = grad_u(params, y_bar)?;
    Ok(GBlockGradients { b_bar, a_bar, u_bar })
}

/// `sum_{t >= lag} x_t s_{t - lag}`; zero when the lag reaches past the sequence.
fn shifted_dot(x: &[f64], s: &[f64], lag: usize) -> f64 {
    if lag >= x.len() {
        return 0.0;
    }
    x[lag..].iter().zip(s).map(|(a, b)| a * b).sum()
}
