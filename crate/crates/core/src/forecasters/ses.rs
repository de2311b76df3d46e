//! Simple exponential smoothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SES_SCHEMA: &str = "htsf.ses.v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SesParams {
    pub alpha: f64,
}

impl SesParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidParam(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self { alpha })
    }
}

/// One-step smoothed values `ŷ_1 ..= ŷ_{T+1}` with `ŷ_1 = y_1`.
///
/// The update is written `ŷ + α (y − ŷ)` so a constant series stays exactly
/// constant for every alpha.
fn smoothed(history: &[f64], alpha: f64) -> impl Iterator<Item = f64> + '_ {
    let mut level = history[0];
    std::iter::once(level).chain(history.iter().map(move |&y| {
        level += alpha * (y - level);
        level
    }))
}

/// Forecast of the value after `history`.
pub fn ses_forecast(history: &[f64], alpha: f64) -> Result<f64> {
    SesParams::new(alpha)?;
    if history.is_empty() {
        return Err(Error::Data("exponential smoothing needs a non-empty history".into()));
    }
    Ok(smoothed(history, alpha).last().expect("non-empty"))
}

fn in_sample_sse(history: &[f64], alpha: f64) -> f64 {
    smoothed(history, alpha)
        .zip(history)
        .skip(1)
        .map(|(f, y)| (y - f) * (y - f))
        .sum()
}

/// Picks alpha from {0.01, ..., 0.99} minimising in-sample one-step squared
/// error. Ties keep the smallest alpha.
pub fn ses_fit(history: &[f64]) -> Result<SesParams> {
    if history.len() < 3 {
        return Err(Error::Data(format!(
            "exponential smoothing fit needs at least 3 points, got {}",
            history.len()
        )));
    }
    let mut best = (f64::INFINITY, 0.01);
    for step in 1..=99 {
        let alpha = step as f64 / 100.0;
        let sse = in_sample_sse(history, alpha);
        if sse < best.0 {
            best = (sse, alpha);
        }
    }
    Ok(SesParams { alpha: best.1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forecast_examples() {
        assert_eq!(ses_forecast(&[4.2; 30], 0.37).unwrap(), 4.2);
        assert_eq!(ses_forecast(&[1.0, 9.0, 3.5], 1.0).unwrap(), 3.5);
        assert_eq!(ses_forecast(&[2.0, 4.0], 0.5).unwrap(), 3.0);
        assert!(ses_forecast(&[], 0.5).is_err());
        assert!(ses_forecast(&[1.0], 1.5).is_err());
        assert!(ses_forecast(&[1.0], -0.1).is_err());
    }

    /// Exhaustive grid scan written independently of `ses_fit`.
    fn grid_oracle(y: &[f64]) -> f64 {
        let mut scores = Vec::new();
        for k in 1..=99 {
            let a = k as f64 / 100.0;
            let mut f = y[0];
            let mut sse = 0.0;
            for t in 1..y.len() {
                f = a * y[t - 1] + (1.0 - a) * f;
                sse += (y[t] - f).powi(2);
            }
            scores.push((sse, a));
        }
        scores.iter().fold((f64::INFINITY, 0.0), |b, &s| if s.0 < b.0 { s } else { b }).1
    }

    #[test]
    fn fit_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut walk = vec![10.0];
        for _ in 0..200 {
            let last = *walk.last().unwrap();
            walk.push(last + rng.gen_range(-1.0..1.0));
        }
        let a = ses_fit(&walk).unwrap().alpha;
        assert!(a > 0.9, "random walk alpha {a}");
        assert!((a - grid_oracle(&walk)).abs() < 0.011);

        let noise: Vec<f64> = (0..400).map(|_| 5.0 + rng.gen_range(-1.0..1.0)).collect();
        let a = ses_fit(&noise).unwrap().alpha;
        assert!(a <= 0.05, "iid alpha {a}");
        assert!((a - grid_oracle(&noise)).abs() < 0.011);

        assert_eq!(ses_fit(&[3.0; 10]).unwrap().alpha, 0.01);
        assert!(ses_fit(&[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn appending_one_point_applies_one_update(
            history in prop::collection::vec(0.0f64..100.0, 1..40),
            next in 0.0f64..100.0,
            alpha in 0.0f64..=1.0,
        ) {
            let before = ses_forecast(&history, alpha).unwrap();
            let mut extended = history.clone();
            extended.push(next);
            let after = ses_forecast(&extended, alpha).unwrap();
            prop_assert_eq!(after, before + alpha * (next - before));
        }
    }
}
