//! Numerical toolkit for the boundary-Yamabe blow-up construction: bubble and
//! corrector profiles, curvature moments, reduced-energy coefficients and the
//! finite-dimensional reduced functional.

pub mod bubble;
pub mod corrector;
pub mod energy;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod quadrature;
pub mod reduction;

pub use corrector::{CorrectorSolution, GridConfig};
pub use energy::{ReducedCoefficients, SlopeExperiment, WeylDenominator};
pub use error::{Error, Result};
pub use geometry::{CurvaturePoint, DerivativeTensors, Dim, MetricExpansion, RiiConvention};
pub use linalg::{Matrix, Tensor4};
pub use reduction::{BlowUpFamily, ReducedFunctional};
