//! Quantized observations and their Gaussian log-likelihood.
//!
//! An observation `z_t = m` means the noisy output fell in `(q_m, q_{m+1}]`.
//! With additive Gaussian noise of standard deviation `sigma_e` around the
//! simulated output the bin probability is a difference of normal CDFs; it is
//! evaluated in the log domain throughout. The outermost bins extend to
//! infinity for likelihood purposes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal::{log_phi_cdf_diff, log_phi_pdf};

/// Smallest probability a bin may be assigned before clamping.
pub const PROB_FLOOR: f64 = 1e-300;

/// Ascending thresholds `q_0 < q_1 < ... < q_K` defining `K` bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Quantizer {
    thresholds: Vec<f64>,
}

impl Quantizer {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.len() < 3 {
            return Err(Error::InvalidParams(
                "a quantizer needs at least 3 thresholds (2 bins)".into(),
            ));
        }
        if thresholds.iter().any(|q| !q.is_finite()) {
            return Err(Error::NonFinite("quantizer thresholds".into()));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParams(
                "quantizer thresholds must be strictly increasing".into(),
            ));
        }
        Ok(Self { thresholds })
    }

    /// `bins` equal-width bins spanning `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        let width = (hi - lo) / bins as f64;
        Self::new((0..=bins).map(|m| lo + m as f64 * width).collect())
    }

    pub fn bins(&self) -> usize {
        self.thresholds.len() - 1
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Bin of `x` under the right-closed rule, saturating at both ends.
    pub fn quantize_value(&self, x: f64) -> usize {
        // number of thresholds strictly below x, minus the left edge
        let above = self.thresholds.partition_point(|&q| q < x);
        above.saturating_sub(1).min(self.bins() - 1)
    }

    pub fn quantize(&self, x: &[f64]) -> Vec<usize> {
        x.iter().map(|&v| self.quantize_value(v)).collect()
    }

    /// Likelihood interval of bin `m`; outer bins are unbounded.
    pub fn interval(&self, m: usize) -> (f64, f64) {
        let k = self.bins();
        let lo = if m == 0 {
            f64::NEG_INFINITY
        } else {
            self.thresholds[m]
        };
        let hi = if m + 1 >= k {
            f64::INFINITY
        } else {
            self.thresholds[m + 1]
        };
        (lo, hi)
    }

    /// Midpoint of bin `m` between its finite thresholds.
    pub fn bin_center(&self, m: usize) -> f64 {
        let q = &self.thresholds;
        0.5 * (q[m] + q[m + 1])
    }
}

impl TryFrom<Vec<f64>> for Quantizer {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Quantizer> for Vec<f64> {
    fn from(q: Quantizer) -> Self {
        q.thresholds
    }
}

/// Measurement-noise standard deviation, stored as its natural log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseScale {
    pub log_sigma_e: f64,
}

impl NoiseScale {
    pub fn from_sigma(sigma: f64) -> Self {
        Self {
            log_sigma_e: sigma.ln(),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma_e.exp()
    }
}

/// One sample's log-probability and its derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinTerm {
    pub log_prob: f64,
    /// derivative with respect to the simulated output
    pub d_y: f64,
    /// derivative with respect to `ln sigma_e`
    pub d_log_sigma: f64,
    pub clamped: bool,
}

/// `ln P(lo < y + e <= hi)` for `e ~ N(0, sigma^2)`, with derivatives.
pub fn bin_term(y: f64, sigma: f64, lo: f64, hi: f64) -> BinTerm {
    let l = (lo - y) / sigma;
    let u = (hi - y) / sigma;
    // a bin far from `y` can collapse to a single standardized point
    let mut log_prob = if l < u {
        log_phi_cdf_diff(l, u)
    } else {
        f64::NEG_INFINITY
    };
    // the log-domain form only fails for absurdly distant bins
    let clamped = !log_prob.is_finite();
    if clamped {
        log_prob = PROB_FLOOR.ln();
        return BinTerm {
            log_prob,
            d_y: 0.0,
            d_log_sigma: 0.0,
            clamped,
        };
    }
    // density ratios phi(x)/P; the infinite bounds contribute nothing
    let ratio = |x: f64| {
        if x.is_finite() {
            (log_phi_pdf(x) - log_prob).exp()
        } else {
            0.0
        }
    };
    let (rl, ru) = (ratio(l), ratio(u));
    let xl = if l.is_finite() { l * rl } else { 0.0 };
    let xu = if u.is_finite() { u * ru } else { 0.0 };
    BinTerm {
        log_prob,
        d_y: (rl - ru) / sigma,
        d_log_sigma: xl - xu,
        clamped,
    }
}

/// Sum of per-sample log-likelihoods with gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLogLik {
    pub value: f64,
    pub d_y: Vec<f64>,
    pub d_log_sigma: f64,
    /// samples whose probability had to be clamped to [`PROB_FLOOR`]
    pub clamped: usize,
}

/// `sum_t ln[Phi((q_{z_t+1} - y_t)/sigma) - Phi((q_{z_t} - y_t)/sigma)]`.
pub fn quantized_loglik(
    y_sim: &[f64],
    z: &[usize],
    noise: NoiseScale,
    quantizer: &Quantizer,
) -> Result<QuantizedLogLik> {
    if y_sim.len() != z.len() {
        return Err(Error::Shape(format!(
            "{} simulated samples vs {} observations",
            y_sim.len(),
            z.len()
        )));
    }
    if let Some(&bad) = z.iter().find(|&&m| m >= quantizer.bins()) {
        return Err(Error::InvalidParams(format!(
            "observed bin {bad} outside 0..{}",
            quantizer.bins()
        )));
    }
    let sigma = noise.sigma();
    let mut out = QuantizedLogLik {
        value: 0.0,
        d_y: Vec::with_capacity(y_sim.len()),
        d_log_sigma: 0.0,
        clamped: 0,
    };
    for (&y, &m) in y_sim.iter().zip(z) {
        let (lo, hi) = quantizer.interval(m);
        let term = bin_term(y, sigma, lo, hi);
        out.value += term.log_prob;
        out.d_y.push(term.d_y);
        out.d_log_sigma += term.d_log_sigma;
        out.clamped += usize::from(term.clamped);
    }
    if out.clamped > 0 {
        log::debug!("{} quantized samples clamped to the probability floor", out.clamped);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_difference, rel_err, rng};
    use rand::Rng;

    fn twelve_bin_quantizer() -> Quantizer {
        Quantizer::new((0..=12).map(|m| -1.0 + m as f64 / 6.0).collect()).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let q = twelve_bin_quantizer();
        assert_eq!(q.bins(), 12);
        assert_eq!(q.quantize_value(0.0), 5);
        for m in 0..12 {
            assert_eq!(q.quantize_value(q.thresholds()[m + 1]), m);
        }
        assert_eq!(q.quantize_value(-2.0), 0);
        assert_eq!(q.quantize_value(-1.0), 0);
        assert_eq!(q.quantize_value(5.0), 11);
        assert_eq!(q.quantize_value(-1.0 + 1e-12), 0);
    }

    #[test]
    fn rejects_bad_thresholds() {
        assert!(Quantizer::new(vec![0.0, 1.0]).is_err());
        assert!(Quantizer::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(Quantizer::new(vec![0.0, f64::NAN, 2.0]).is_err());
        let json = serde_json::to_string(&twelve_bin_quantizer()).unwrap();
        assert_eq!(serde_json::from_str::<Quantizer>(&json).unwrap(), twelve_bin_quantizer());
        assert!(serde_json::from_str::<Quantizer>("[1.0, 0.0, 2.0]").is_err());
    }

    #[test]
    fn two_bins_at_zero_are_even() {
        let q = Quantizer::new(vec![-1.0, 0.0, 1.0]).unwrap();
        let noise = NoiseScale::from_sigma(0.7);
        for z in 0..2 {
            let ll = quantized_loglik(&[0.0], &[z], noise, &q).unwrap();
            assert!((ll.value - 0.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn tiny_noise_makes_centre_certain() {
        let q = twelve_bin_quantizer();
        let centre = q.bin_center(7);
        let ll = quantized_loglik(&[centre], &[7], NoiseScale::from_sigma(1e-4), &q).unwrap();
        assert!(ll.value.abs() < 1e-12);
        // and the neighbouring bin becomes essentially impossible, yet finite
        let ll = quantized_loglik(&[centre], &[8], NoiseScale::from_sigma(1e-4), &q).unwrap();
        assert!(ll.value.is_finite() && ll.value < -1e5);
        assert_eq!(ll.clamped, 0);
        // only a sample beyond the reach of the log-domain tails hits the floor
        let ll = quantized_loglik(&[1e200], &[5], NoiseScale::from_sigma(1.0), &q).unwrap();
        assert_eq!((ll.value, ll.clamped), (PROB_FLOOR.ln(), 1));
        assert_eq!((ll.d_y[0], ll.d_log_sigma), (0.0, 0.0));
    }

    #[test]
    fn bins_are_normalized() {
        let mut r = rng(2);
        for k in [2usize, 3, 12, 64] {
            let q = Quantizer::uniform(-1.0, 1.0, k).unwrap();
            for _ in 0..50 {
                let y = r.random_range(-2.0..2.0);
                let sigma = 10f64.powf(r.random_range(-3.0..0.5));
                let total: f64 = (0..k)
                    .map(|m| {
                        let (lo, hi) = q.interval(m);
                        bin_term(y, sigma, lo, hi).log_prob.exp()
                    })
                    .sum();
                assert!((total - 1.0).abs() <= 1e-12, "k={k} total={total}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let q = twelve_bin_quantizer();
        let mut r = rng(8);
        let y: Vec<f64> = (0..40).map(|_| r.random_range(-1.2..1.2)).collect();
        let z: Vec<usize> = y
            .iter()
            .map(|&v| q.quantize_value(v + r.random_range(-0.1..0.1)))
            .collect();
        let noise = NoiseScale::from_sigma(0.08);
        let ll = quantized_loglik(&y, &z, noise, &q).unwrap();
        for t in 0..y.len() {
            let fd = central_difference(y[t], |v| {
                let mut yy = y.clone();
                yy[t] = v;
                quantized_loglik(&yy, &z, noise, &q).unwrap().value
            });
            assert!(rel_err(ll.d_y[t], fd) <= 1e-5, "t={t}: {} vs {fd}", ll.d_y[t]);
        }
        let fd = central_difference(noise.log_sigma_e, |v| {
            quantized_loglik(&y, &z, NoiseScale { log_sigma_e: v }, &q)
                .unwrap()
                .value
        });
        assert!(rel_err(ll.d_log_sigma, fd) <= 1e-5);
    }

    #[test]
    fn moving_toward_bin_never_lowers_likelihood() {
        let q = twelve_bin_quantizer();
        let (lo, hi) = q.interval(4);
        let centre = 0.5 * (lo + hi);
        let sigma = 0.05;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=100 {
            let y = 1.5 - (1.5 - centre) * i as f64 / 100.0;
            let lp = bin_term(y, sigma, lo, hi).log_prob;
            assert!(lp >= prev - 1e-12);
            prev = lp;
        }
    }

    #[test]
    fn affine_invariance() {
        let q = twelve_bin_quantizer();
        let (scale, shift) = (3.5, -0.7);
        let q2 = Quantizer::new(q.thresholds().iter().map(|v| v * scale + shift).collect()).unwrap();
        let y = [0.1, -0.4, 0.9];
        let z = [5, 3, 10];
        let a = quantized_loglik(&y, &z, NoiseScale::from_sigma(0.2), &q).unwrap();
        let y2: Vec<f64> = y.iter().map(|v| v * scale + shift).collect();
        let b = quantized_loglik(&y2, &z, NoiseScale::from_sigma(0.2 * scale), &q2).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_bins() {
        let q = twelve_bin_quantizer();
        assert!(quantized_loglik(&[0.0], &[12], NoiseScale::from_sigma(1.0), &q).is_err());
        assert!(quantized_loglik(&[0.0, 1.0], &[1], NoiseScale::from_sigma(1.0), &q).is_err());
    }
}
