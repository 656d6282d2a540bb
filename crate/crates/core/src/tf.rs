//! Rational transfer functions `G(q) = q^{-n_k} B(q) / A(q)` in the backward
//! shift operator, filtered by their difference equation from rest.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Signal;

/// Coefficients of one SISO filter.
///
/// `b` holds `b_0..b_{n_b}`; `a` holds `a_1..a_{n_a}` (the leading 1 of the
/// monic denominator is implicit). `n_k` pure delays precede the numerator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferFunctionParams {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub n_k: usize,
}

impl TransferFunctionParams {
    pub fn new(b: Vec<f64>, a: Vec<f64>, n_k: usize) -> Result<Self> {
        let p = Self { b, a, n_k };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b.is_empty() {
            return Err(Error::InvalidParams("numerator needs at least b_0".into()));
        }
        if self.b.iter().chain(&self.a).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("filter coefficients".into()));
        }
        Ok(())
    }

    pub fn identity() -> Self {
        Self {
            b: vec![1.0],
            a: vec![],
            n_k: 0,
        }
    }

    pub fn zeros(n_b: usize, n_a: usize, n_k: usize) -> Self {
        Self {
            b: vec![0.0; n_b + 1],
            a: vec![0.0; n_a],
            n_k,
        }
    }

    pub fn n_b(&self) -> usize {
        self.b.len() - 1
    }

    pub fn n_a(&self) -> usize {
        self.a.len()
    }

    /// Filters one sequence from rest.
    pub fn filter(&self, u: &[f64]) -> Result<Vec<f64>> {
        lfilter(&self.b, &self.a, self.n_k, u)
    }

    /// Filters every sequence of a single-channel signal independently.
    pub fn filter_forward(&self, u: &Signal) -> Result<Signal> {
        if u.channels() != 1 {
            return Err(Error::Shape(format!(
                "SISO filter applied to {} channels",
                u.channels()
            )));
        }
        let mut out = Vec::with_capacity(u.as_slice().len());
        for seq in u.as_slice().chunks(u.len().max(1)).take(u.batch()) {
            out.extend(self.filter(seq)?);
        }
        Ok(Signal::from_raw(u.batch(), u.len(), 1, out))
    }

    /// First `len` samples of the impulse response.
    pub fn impulse_response(&self, len: usize) -> Result<Vec<f64>> {
        let mut delta = vec![0.0; len];
        if let Some(d) = delta.first_mut() {
            *d = 1.0;
        }
        self.filter(&delta)
    }

    /// Equivalent filter with the delay folded into leading zero numerator taps.
    pub fn without_delay(&self) -> Self {
        let mut b = vec![0.0; self.n_k];
        b.extend_from_slice(&self.b);
        Self {
            b,
            a: self.a.clone(),
            n_k: 0,
        }
    }

    /// `G(e^{i 2 pi f})` at normalized frequency `f` in cycles per sample.
    pub fn frequency_response(&self, f: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f);
        let num = poly_eval(&self.b, z_inv) * z_inv.powu(self.n_k as u32);
        let den = Complex64::new(1.0, 0.0) + z_inv * poly_eval(&self.a, z_inv);
        num / den
    }

    pub fn magnitude_db(&self, f: f64) -> f64 {
        20.0 * self.frequency_response(f).norm().log10()
    }

    /// `B(1) / A(1)`.
    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a.iter().sum::<f64>())
    }

    /// True when every root of `A(q)` lies strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        is_schur_stable(&self.a)
    }
}

/// Evaluates `c_0 + c_1 x + c_2 x^2 + ...`.
fn poly_eval(c: &[f64], x: Complex64) -> Complex64 {
    c.iter()
        .rev()
        .fold(Complex64::new(0.0, 0.0), |acc, &ci| acc * x + ci)
}

/// Schur-Cohn step-down test on the monic polynomial `1 + a_1 z^-1 + ... + a_n z^-n`.
pub fn is_schur_stable(a: &[f64]) -> bool {
    let mut poly: Vec<f64> = a.to_vec();
    while let Some(&k) = poly.last() {
        if !k.is_finite() || k.abs() >= 1.0 {
            return false;
        }
        let n = poly.len();
        let denom = 1.0 - k * k;
        let next: Vec<f64> = (0..n - 1)
            .map(|i| (poly[i] - k * poly[n - 2 - i]) / denom)
            .collect();
        poly = next;
    }
    true
}

/// Monic polynomial coefficients `a_1..a_n` with the given roots (conjugate
/// pairs must both be present so the result is real).
pub fn monic_from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &ci) in c.iter().enumerate() {
            next[i] += ci;
            next[i + 1] -= ci * r;
        }
        c = next;
    }
    c.iter().skip(1).map(|z| z.re).collect()
}

#[cfg(test)]
thread_local! {
    static MULTIPLICATIONS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

#[cfg(test)]
pub(crate) fn take_multiplication_count() -> u64 {
    MULTIPLICATIONS.with(|c| c.replace(0))
}

/// `y(t) = sum_j b_j u(t - j - n_k) - sum_j a_j y(t - j)` from rest.
pub(crate) fn lfilter(b: &[f64], a: &[f64], n_k: usize, u: &[f64]) -> Result<Vec<f64>> {
    let n = u.len();
    let mut y = vec![0.0; n];
    for t in 0..n {
        let mut acc = 0.0;
        let mut terms = 0;
        if t >= n_k {
            let tu = t - n_k;
            let m = b.len().min(tu + 1);
            for (j, &bj) in b[..m].iter().enumerate() {
                acc += bj * u[tu - j];
            }
            terms += m;
        }
        let m = a.len().min(t);
        for (j, &aj) in a[..m].iter().enumerate() {
            acc -= aj * y[t - 1 - j];
        }
        terms += m;
        #[cfg(test)]
        MULTIPLICATIONS.with(|c| c.set(c.get() + terms as u64));
        let _ = terms;
        if !acc.is_finite() {
            return Err(Error::Divergence { index: t });
        }
        y[t] = acc;
    }
    Ok(y)
}

/// Truncated convolution `y_i = sum_{j <= i} g_j u_{i-j}`; quadratic cost, used as an oracle.
pub fn convolve_truncated(g: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if g.len() != u.len() {
        return Err(Error::Shape(format!(
            "impulse response length {} vs input length {}",
            g.len(),
            u.len()
        )));
    }
    let n = u.len();
    Ok((0..n)
        .map(|i| (0..=i).map(|j| g[j] * u[i - j]).sum())
        .collect())
}
