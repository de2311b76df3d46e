//! Tweedie deviance objective on a log link.
//!
//! For target `y >= 0`, raw score `F` and power `1 < ρ < 2` the per-row loss
//! (up to terms constant in `F`) is
//!
//! ```text
//! L(y, F) = -y e^{(1-ρ)F} / (1-ρ) + e^{(2-ρ)F} / (2-ρ)
//! ```

use crate::error::{Error, Result};

pub const DEFAULT_TWEEDIE_POWER: f64 = 1.5;

fn check_power(rho: f64) -> Result<()> {
    if rho > 1.0 && rho < 2.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("tweedie power {rho} must lie in (1, 2)")))
    }
}

pub fn tweedie_loss(y: f64, f: f64, rho: f64) -> f64 {
    -y * ((1.0 - rho) * f).exp() / (1.0 - rho) + ((2.0 - rho) * f).exp() / (2.0 - rho)
}

/// Gradient and hessian of [`tweedie_loss`] with respect to `F`.
#[inline]
pub fn grad_hess(y: f64, f: f64, rho: f64) -> (f64, f64) {
    let a = ((1.0 - rho) * f).exp();
    let b = ((2.0 - rho) * f).exp();
    (-y * a + b, -y * (1.0 - rho) * a + (2.0 - rho) * b)
}

pub fn tweedie_grad_hess(y: f64, f: f64, rho: f64) -> Result<(f64, f64)> {
    check_power(rho)?;
    if !(y >= 0.0) {
        return Err(Error::InvalidParam(format!("tweedie target {y} must be non-negative")));
    }
    Ok(grad_hess(y, f, rho))
}

pub(crate) fn validate_power(rho: f64) -> Result<()> {
    check_power(rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let f: f64 = 0.7;
        let (g, h) = tweedie_grad_hess(f.exp(), f, 1.5).unwrap();
        assert!(g.abs() < 1e-15);
        assert!(h > 0.0);
        assert_eq!(tweedie_grad_hess(0.0, 0.0, 1.5).unwrap(), (1.0, 0.5));
        assert!(tweedie_grad_hess(1.0, 0.0, 1.0).is_err());
        assert!(tweedie_grad_hess(1.0, 0.0, 2.0).is_err());
        assert!(tweedie_grad_hess(-1.0, 0.0, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn central_differences(y in 0.0f64..10.0, f in -3.0f64..3.0, rho in prop::sample::select(vec![1.1, 1.5, 1.9])) {
            let eps = 1e-5;
            let (g, h) = tweedie_grad_hess(y, f, rho).unwrap();
            let g_fd = (tweedie_loss(y, f + eps, rho) - tweedie_loss(y, f - eps, rho)) / (2.0 * eps);
            let h_fd = (grad_hess(y, f + eps, rho).0 - grad_hess(y, f - eps, rho).0) / (2.0 * eps);
            prop_assert!((g - g_fd).abs() <= 1e-6 * g.abs().max(1.0), "g {g} fd {g_fd}");
            prop_assert!((h - h_fd).abs() <= 1e-6 * h.abs().max(1.0), "h {h} fd {h_fd}");
            prop_assert!(h > 0.0);
        }
    }
}
