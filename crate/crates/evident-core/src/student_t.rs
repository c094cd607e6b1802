//! Standard Student-t CDF, log-density and quantile.
//!
//! The CDF goes through the regularized incomplete beta function
//! (continued fraction, Lentz's method); the quantile is a bracketed
//! bisection on that CDF. Location/scale shifts are applied by callers.

use crate::{EvidentError, Result};
use statrs::function::gamma::ln_gamma;

const MAX_CF_ITER: usize = 300;
const CF_EPS: f64 = 1e-15;

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Regularized incomplete beta I_x(a, b) for x in [0, 1], a, b > 0.
pub fn betainc_reg(x: f64, a: f64, b: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x), "betainc_reg x out of [0,1]: {x}");
    assert!(a > 0.0 && b > 0.0, "betainc_reg needs positive a, b");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    // The prefactor is symmetric under (x, a, b) -> (1-x, b, a).
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b)).exp();
    // Continued fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(x, a, b) / a
    } else {
        1.0 - front * beta_cf(1.0 - x, b, a) / b
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    let tiny = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_CF_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // even step
        let num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + num * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + num / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        // odd step
        let num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + num * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + num / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
            break;
        }
    }
    h
}

/// CDF of the standard Student-t distribution with `nu` degrees of freedom.
pub fn cdf(x: f64, nu: f64) -> f64 {
    assert!(nu > 0.0, "degrees of freedom must be positive");
    if x == 0.0 {
        return 0.5;
    }
    let ib = betainc_reg(nu / (nu + x * x), nu / 2.0, 0.5);
    if x > 0.0 {
        1.0 - 0.5 * ib
    } else {
        0.5 * ib
    }
}

/// Log-density of the standard Student-t distribution.
pub fn ln_pdf(x: f64, nu: f64) -> f64 {
    assert!(nu > 0.0, "degrees of freedom must be positive");
    ln_gamma((nu + 1.0) / 2.0)
        - ln_gamma(nu / 2.0)
        - 0.5 * (nu * std::f64::consts::PI).ln()
        - (nu + 1.0) / 2.0 * f64::ln_1p(x * x / nu)
}

/// Quantile of the standard Student-t distribution via bracketed bisection
/// on [`cdf`]. `p` must lie strictly inside (0, 1).
pub fn quantile(p: f64, nu: f64) -> Result<f64> {
    if !(0.0 < p && p < 1.0) {
        return Err(EvidentError::Config(format!(
            "t quantile probability must be in (0,1), got {p}"
        )));
    }
    if nu <= 0.0 {
        return Err(EvidentError::Config(format!(
            "degrees of freedom must be positive, got {nu}"
        )));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Symmetry: solve in the upper tail only.
    if p < 0.5 {
        return Ok(-quantile(1.0 - p, nu)?);
    }
    // Expand the bracket until it contains the root.
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut expansions = 0;
    while cdf(hi, nu) < p {
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(EvidentError::Numerical(format!(
                "t quantile bracket failed to enclose p={p}, nu={nu}"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid, nu) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
