//! Non-seasonal ARIMA(p, d, q) with a constant, fitted by conditional sum
//! of squares on the differenced series.

use serde::{Deserialize, Serialize};

use super::optim::{nelder_mead, NelderMeadOptions};
use crate::error::{Error, Result};

pub const ARIMA_SCHEMA: &str = "htsf.arima.v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub const fn new(p: usize, d: usize, q: usize) -> Self {
        Self { p, d, q }
    }
}

impl Default for ArimaOrder {
    fn default() -> Self {
        Self::new(1, 1, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    pub order: ArimaOrder,
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    /// Intercept of the differenced-series equation.
    pub constant: f64,
    pub sigma2: f64,
}

fn difference(y: &[f64], d: usize) -> Vec<Vec<f64>> {
    let mut levels = vec![y.to_vec()];
    for _ in 0..d {
        let last = levels.last().expect("non-empty");
        levels.push(last.windows(2).map(|w| w[1] - w[0]).collect());
    }
    levels
}

/// Residuals for t = p..n, with pre-sample errors fixed at zero.
fn css_residuals(w: &[f64], constant: f64, phi: &[f64], theta: &[f64]) -> Vec<f64> {
    let p = phi.len();
    let mut e = vec![0.0; w.len()];
    for t in p..w.len() {
        let mut pred = constant;
        for (i, a) in phi.iter().enumerate() {
            pred += a * w[t - 1 - i];
        }
        for (j, b) in theta.iter().enumerate() {
            if t > j {
                pred += b * e[t - 1 - j];
            }
        }
        e[t] = w[t] - pred;
    }
    e
}

fn css(w: &[f64], constant: f64, phi: &[f64], theta: &[f64]) -> f64 {
    let p = phi.len();
    css_residuals(w, constant, phi, theta)[p..].iter().map(|e| e * e).sum()
}

pub fn arima_fit(history: &[f64], order: ArimaOrder) -> Result<ArimaModel> {
    arima_fit_with(history, order, NelderMeadOptions::default())
}

pub fn arima_fit_with(history: &[f64], order: ArimaOrder, opts: NelderMeadOptions) -> Result<ArimaModel> {
    let ArimaOrder { p, d, q } = order;
    let need = p + d + q + 2;
    if history.len() < need {
        return Err(Error::Data(format!(
            "ARIMA({p},{d},{q}) needs at least {need} points, got {}",
            history.len()
        )));
    }
    let levels = difference(history, d);
    let w = levels.last().expect("non-empty");
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;

    let (constant, phi, theta, sse) = if p + q == 0 {
        // CSS with only an intercept is minimised by the sample mean.
        (mean, Vec::new(), Vec::new(), css(w, mean, &[], &[]))
    } else {
        let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut x0 = vec![mean];
        x0.extend(std::iter::repeat_n(0.0, p + q));
        let mut steps = vec![(0.1 * mean.abs()).max(0.1 * sd).max(1e-3)];
        steps.extend(std::iter::repeat_n(0.1, p + q));

        let objective = |x: &[f64]| css(w, x[0], &x[1..1 + p], &x[1 + p..]);
        let start = objective(&x0);
        if !start.is_finite() {
            return Err(Error::Numerical(format!("ARIMA objective is {start} at the start point")));
        }
        let min = nelder_mead(objective, &x0, &steps, opts);
        if !min.f.is_finite() {
            return Err(Error::Numerical("ARIMA objective diverged".into()));
        }
        let x = min.x;
        (x[0], x[1..1 + p].to_vec(), x[1 + p..].to_vec(), min.f)
    };

    let n_eff = (w.len() - p).max(1) as f64;
    Ok(ArimaModel {
        order,
        phi,
        theta,
        constant,
        sigma2: sse / n_eff,
    })
}

/// One-step conditional expectation after `history`, with differencing
/// undone by cumulative summation.
pub fn arima_forecast(model: &ArimaModel, history: &[f64]) -> Result<f64> {
    let ArimaOrder { p, d, q: _ } = model.order;
    if history.len() < p + d + 1 {
        return Err(Error::Data(format!(
            "ARIMA forecast needs at least {} points, got {}",
            p + d + 1,
            history.len()
        )));
    }
    let levels = difference(history, d);
    let w = levels.last().expect("non-empty");
    let e = css_residuals(w, model.constant, &model.phi, &model.theta);
    let n = w.len();
    let mut next = model.constant;
    for (i, a) in model.phi.iter().enumerate() {
        next += a * w[n - 1 - i];
    }
    for (j, b) in model.theta.iter().enumerate() {
        if n > j {
            next += b * e[n - 1 - j];
        }
    }
    for level in levels[..d].iter().rev() {
        next += level.last().expect("non-empty");
    }
    if !next.is_finite() {
        return Err(Error::Numerical("ARIMA forecast is not finite".into()));
    }
    Ok(next)
}
