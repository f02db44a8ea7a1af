//! Shared fixtures for the benchmark suite.

use pszeros::{Normalization, SpinModel, C64};

pub fn ising(j: f64) -> SpinModel {
    SpinModel::ising(2, j, Normalization::Shifted).expect("valid ising model")
}

pub fn blume_capel(j: f64, lambda: f64) -> SpinModel {
    SpinModel::blume_capel(2, j, lambda, Normalization::Shifted).expect("valid blume-capel model")
}

/// A fixed off-axis evaluation point.
pub fn probe() -> C64 {
    C64::new(0.83, 0.41)
}
