//! The constant `C_{M,K}` and the variance/bias bounds of q-BR aggregation.
//!
//! `C_{M,K} = M` for `K = 1` and otherwise
//!
//! ```text
//!          M! (K-1)^(K-1) (M-K)^(M-K)
//! C_{M,K} = ---------------------------
//!          (K-1)! (M-K)! (M-1)^(M-1)
//! ```
//!
//! The floating-point path works in log space through `lgamma`, so it stays
//! finite far beyond the point where `M!` overflows. An exact rational path
//! is kept for cross-checking small arguments.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Pow};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Problem constants entering the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `D`: bound on the root second moment of a loyal stochastic gradient.
    pub grad_bound: f64,
    /// `L`: smoothness constant of the global loss.
    pub smoothness: f64,
    /// Largest delay a loyal gradient may have.
    pub tau_max: u64,
    /// Model dimension.
    pub dim: usize,
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.grad_bound) || !finite_nonneg(self.smoothness) {
            return Err(Error::InvalidParameter(format!(
                "D and L must be finite and nonnegative (D = {}, L = {})",
                self.grad_bound, self.smoothness
            )));
        }
        if self.dim == 0 {
            return Err(Error::InvalidParameter("dimension must be at least 1".into()));
        }
        Ok(())
    }
}

/// `C_{M,K}` on its defining domain `0 < K <= M/2`.
pub fn c_constant(m: u64, k: u64) -> Result<f64> {
    if k == 0 || 2 * k > m {
        return Err(Error::InvalidParameter(format!(
            "C_(M,K) requires 0 < K <= M/2 (M = {m}, K = {k})"
        )));
    }
    Ok(c_log_space(m, k))
}

/// `C_{M,K}` evaluated by the same closed form on the wider range
/// `1 <= K < M` (or `K = 1`, `M >= 1`).
///
/// The bounds evaluate `C_{B-r, q-r+1}`, whose second index exceeds half the
/// first when `r = 0` and `q = (B-1)/2` for odd `B`.
pub fn c_constant_extended(m: u64, k: u64) -> Result<f64> {
    check_extended(m, k)?;
    Ok(c_log_space(m, k))
}

/// Exact rational value of `C_{M,K}`, on the same range as
/// [`c_constant_extended`].
pub fn c_constant_exact(m: u64, k: u64) -> Result<BigRational> {
    check_extended(m, k)?;
    if k == 1 {
        return Ok(BigRational::from_integer(BigInt::from(m)));
    }
    let factorial = |n: u64| (1..=n).fold(BigInt::one(), |acc, i| acc * BigInt::from(i));
    let power = |base: u64, exp: u64| Pow::pow(BigInt::from(base), exp);
    let num = factorial(m) * power(k - 1, k - 1) * power(m - k, m - k);
    let den = factorial(k - 1) * factorial(m - k) * power(m - 1, m - 1);
    Ok(BigRational::new(num, den))
}

fn check_extended(m: u64, k: u64) -> Result<()> {
    let ok = k == 1 && m >= 1 || k > 1 && k < m;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "C_(M,K) closed form needs K = 1 or 1 < K < M (M = {m}, K = {k})"
        )))
    }
}

fn c_log_space(m: u64, k: u64) -> f64 {
    if k == 1 {
        return m as f64;
    }
    let (m, k) = (m as f64, k as f64);
    let xlnx = |x: f64| x * x.ln();
    let ln_c = libm::lgamma(m + 1.0) + xlnx(k - 1.0) + xlnx(m - k)
        - libm::lgamma(k)
        - libm::lgamma(m - k + 1.0)
        - xlnx(m - 1.0);
    ln_c.exp()
}

fn check_bqr(b: u64, q: u64, r: u64) -> Result<()> {
    if r > q || 2 * q >= b {
        return Err(Error::InvalidParameter(format!(
            "0 <= r <= q < B/2 required (B = {b}, q = {q}, r = {r})"
        )));
    }
    Ok(())
}

/// Upper estimate of `C_{B-r, q-r+1}`.
pub fn c_upper_bound(b: u64, q: u64, r: u64) -> Result<f64> {
    check_bqr(b, q, r)?;
    if r == q {
        return Ok((b - q) as f64);
    }
    let bf = b as f64;
    let factor = std::f64::consts::E / (2.0 * std::f64::consts::PI);
    Ok(bf * factor * (bf - 1.0).sqrt() / (((b - q - 1) * (q - r)) as f64).sqrt())
}

fn c_for(b: u64, q: u64, r: u64) -> Result<f64> {
    check_bqr(b, q, r)?;
    c_constant_extended(b - r, q - r + 1)
}

/// Bound on `E[||G||^2 | w]` for a q-BR rule with at most `r` Byzantine
/// buffers: `C * D^2 * d`.
pub fn lemma1_bound(bi: &BoundInputs, b: u64, q: u64, r: u64) -> Result<f64> {
    bi.validate()?;
    let c = c_for(b, q, r)?;
    Ok(c * bi.grad_bound * bi.grad_bound * bi.dim as f64)
}

/// Bound on the bias `||E[G - grad F(w) | w]||`:
/// `C * D * d * (tau_max * L * sqrt(C * d) + 1)`.
pub fn lemma2_bound(bi: &BoundInputs, b: u64, q: u64, r: u64) -> Result<f64> {
    bi.validate()?;
    let c = c_for(b, q, r)?;
    let d = bi.dim as f64;
    Ok(c * bi.grad_bound * d * (bi.tau_max as f64 * bi.smoothness * (c * d).sqrt() + 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::ToPrimitive;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn c_constant_examples() {
        assert_eq!(c_constant(7, 1).unwrap(), 7.0);
        assert_eq!(c_constant(2, 1).unwrap(), 2.0);
        assert!(close(c_constant(4, 2).unwrap(), 16.0 / 9.0, 1e-12));
    }

    #[test]
    fn c_constant_domain() {
        assert!(c_constant(4, 0).is_err());
        assert!(c_constant(5, 3).is_err());
        assert!(c_constant(1, 1).is_err());
        assert!(c_constant_extended(5, 3).is_ok());
        assert!(c_constant_extended(5, 5).is_err());
    }

    #[test]
    fn exact_rational_matches_small_cases() {
        let exact = c_constant_exact(4, 2).unwrap();
        assert_eq!(
            exact,
            BigRational::new(BigInt::from(16), BigInt::from(9))
        );
        assert_eq!(c_constant_exact(9, 1).unwrap().to_f64().unwrap(), 9.0);
    }

    #[test]
    fn log_space_survives_large_m() {
        let c = c_constant(400, 100).unwrap();
        assert!(c.is_finite() && c > 0.0);
    }

    #[test]
    fn upper_bound_examples() {
        let expected = 10.0 * (std::f64::consts::E / (2.0 * std::f64::consts::PI)) * 3.0
            / 20f64.sqrt();
        assert!(close(c_upper_bound(10, 4, 0).unwrap(), expected, 1e-12));
        assert!(close(expected, 2.902, 1e-3));
        assert_eq!(c_upper_bound(10, 3, 3).unwrap(), 7.0);
        assert_eq!(c_constant(7, 1).unwrap(), 7.0);
        assert!(c_upper_bound(10, 5, 0).is_err());
        assert!(c_upper_bound(10, 2, 3).is_err());
    }

    #[test]
    fn lemma_bounds() {
        let c10_5 = c_constant(10, 5).unwrap();
        let bi = BoundInputs {
            grad_bound: 1.0,
            smoothness: 1.0,
            tau_max: 3,
            dim: 2,
        };
        assert!(close(lemma1_bound(&bi, 10, 4, 0).unwrap(), 2.0 * c10_5, 1e-12));
        let expected = c10_5 * 2.0 * (3.0 * (2.0 * c10_5).sqrt() + 1.0);
        assert!(close(lemma2_bound(&bi, 10, 4, 0).unwrap(), expected, 1e-12));

        let bi = BoundInputs {
            grad_bound: 2.0,
            smoothness: 0.5,
            tau_max: 0,
            dim: 3,
        };
        assert!(close(lemma1_bound(&bi, 4, 1, 1).unwrap(), 36.0, 1e-12));
        assert!(close(lemma2_bound(&bi, 4, 1, 1).unwrap(), 3.0 * 2.0 * 3.0, 1e-12));

        let zero = BoundInputs {
            grad_bound: 0.0,
            ..bi
        };
        assert_eq!(lemma1_bound(&zero, 10, 4, 0).unwrap(), 0.0);
        assert_eq!(lemma2_bound(&zero, 10, 4, 0).unwrap(), 0.0);
        assert!(lemma1_bound(&bi, 4, 2, 0).is_err());
        assert!(lemma1_bound(&BoundInputs { dim: 0, ..bi }, 4, 1, 0).is_err());
    }
}
