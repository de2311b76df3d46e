//! Base model families: simple exponential smoothing, ARIMA, and a
//! Tweedie gradient-boosted tree ensemble.

pub mod arima;
pub mod gbdt;
pub mod optim;
pub mod ses;
pub mod tweedie;

pub use arima::{arima_fit, arima_forecast, ArimaModel, ArimaOrder};
pub use gbdt::{gbdt_train, GbdtModel, GbdtParams};
pub use ses::{ses_fit, ses_forecast, SesParams};
pub use tweedie::tweedie_grad_hess;
