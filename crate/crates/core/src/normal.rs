//! Standard normal distribution helpers with log-domain tails.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

/// `ln(sqrt(2 pi))`
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
pub fn phi_pdf(x: f64) -> f64 {
    log_phi_pdf(x).exp()
}

pub fn log_phi_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal CDF through the complementary error function.
pub fn phi_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `ln erfc(z)`, finite for every finite `z`.
pub fn ln_erfc(z: f64) -> f64 {
    if z < 8.0 {
        libm::erfc(z).ln()
    } else if z.is_infinite() {
        f64::NEG_INFINITY
    } else {
        erfcx_large(z).ln() - z * z
    }
}

/// Scaled complement `exp(z^2) erfc(z)` for `z >= 8` (rational fit from GSL's `erfc8_sum`).
#[allow(clippy::excessive_precision)]
fn erfcx_large(z: f64) -> f64 {
    const P: [f64; 6] = [
        2.97886562639399288862,
        7.409740605964741794425,
        6.1602098531096305440906,
        5.019049726784267463450058,
        1.275366644729965952479585264,
        0.5641895835477550741253201704,
    ];
    const Q: [f64; 7] = [
        3.3690752069827527677,
        9.608965327192787870698,
        17.08144074746600431571095,
        12.0489519278551290360340491,
        9.396034016235054150430579648,
        2.260528520767326969591866945,
        1.0,
    ];
    let horner = |c: &[f64]| c.iter().rev().fold(0.0, |acc, &ci| acc * z + ci);
    horner(&P) / horner(&Q)
}

/// `ln Phi(x)`, accurate in the lower tail far beyond the underflow of `Phi`.
pub fn log_phi_cdf(x: f64) -> f64 {
    if x > 0.0 {
        (-0.5 * libm::erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else {
        ln_erfc(-x * FRAC_1_SQRT_2) - LN_2
    }
}

/// `ln(Phi(u) - Phi(l))` for `l < u`; either bound may be infinite.
///
/// Intervals entirely in one tail are handled in that tail's log domain, so
/// the difference becomes `ln(1 - ratio)` rather than a subtraction of two
/// nearly equal probabilities. Near the centre the `erf` difference is used.
pub fn log_phi_cdf_diff(l: f64, u: f64) -> f64 {
    debug_assert!(l < u, "log_phi_cdf_diff needs l < u, got {l} >= {u}");
    if l >= 1.0 {
        // upper tail: Q(l) - Q(u), Q(x) = Phi(-x)
        let hi = log_phi_cdf(-l);
        let lo = log_phi_cdf(-u);
        hi + log1m_exp(lo - hi)
    } else if u <= -1.0 {
        let hi = log_phi_cdf(u);
        let lo = log_phi_cdf(l);
        hi + log1m_exp(lo - hi)
    } else {
        (0.5 * (libm::erf(u * FRAC_1_SQRT_2) - libm::erf(l * FRAC_1_SQRT_2))).ln()
    }
}

/// `ln(1 - e^d)` for `d <= 0`.
fn log1m_exp(d: f64) -> f64 {
    if d > -LN_2 {
        (-d.exp_m1()).ln()
    } else {
        (-d.exp()).ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_basics() {
        assert_eq!(phi_cdf(0.0), 0.5);
        for i in 0..=160 {
            let x = i as f64 * 0.05;
            assert!((phi_cdf(-x) - (1.0 - phi_cdf(x))).abs() <= 1e-15, "x = {x}");
        }
        assert!(phi_cdf(f64::NEG_INFINITY) == 0.0 && phi_cdf(f64::INFINITY) == 1.0);
    }

    #[test]
    fn ln_erfc_is_continuous_at_switch() {
        let below = libm::erfc(8.0).ln();
        let above = erfcx_large(8.0).ln() - 64.0;
        assert!((below - above).abs() / below.abs() < 1e-14);
    }

    // Reference values from mpmath at 50 significant digits.
    #[test]
    fn log_cdf_matches_extended_precision() {
        let cases = [
            (-40.0, -804.608_442_013_753_8),
            (-10.0, -53.231_285_150_512_47),
            (-1.0, -1.841_021_645_009_263_5),
            (3.0, -0.001_350_809_964_748_193_8),
            (10.0, -7.619_853_024_160_526e-24),
        ];
        for (x, expect) in cases {
            let got = log_phi_cdf(x);
            assert!(((got - expect) / expect).abs() < 1e-13, "x={x}: {got} vs {expect}");
        }
    }

    #[test]
    fn log_cdf_diff_matches_extended_precision() {
        let cases = [
            (9.0, 10.0, -43.628_216_632_280_82),
            (-10.0, -9.0, -43.628_216_632_280_82),
            (-0.5, 0.25, -1.237_292_501_322_450_2),
            (1e-12, 2e-12, -28.549_959_649_133_22),
            (30.0, 30.5, -454.321_244_221_885_1),
            (f64::NEG_INFINITY, -38.0, -726.557_216_018_820_1),
            (2.0, f64::INFINITY, -3.783_184_333_682_032),
        ];
        for (l, u, expect) in cases {
            let got = log_phi_cdf_diff(l, u);
            assert!(got.is_finite());
            assert!(((got - expect) / expect).abs() < 1e-12, "({l},{u}): {got} vs {expect}");
        }
        assert_eq!(log_phi_cdf_diff(f64::NEG_INFINITY, f64::INFINITY), 0.0);
    }
}
