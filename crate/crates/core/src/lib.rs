//! Pirogov-Sinai contour machinery for lattice spin models with a complex
//! parameter: exact torus partition functions, contour representations,
//! cluster expansions, truncated metastable free energies and predicted
//! partition-function zeros.

pub mod contours;
pub mod error;
pub mod lattice;
pub mod metastable;
pub mod models;
pub mod numeric;
pub mod polymer;
pub mod torus_exact;
pub mod zeros;

pub use error::{Error, Result};
pub use lattice::Lattice;
pub use models::{Configuration, Energy, ModelSpec, Normalization, Regime, SpinModel, TorusConfiguration};
pub use num_complex::Complex64 as C64;
