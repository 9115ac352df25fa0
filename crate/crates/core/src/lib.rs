//! Planar rocker-bogie rover on deformable soil, with Bayesian meta-learned
//! identification of terrain strength parameters.
//!
//! * [`terramech`]: rigid wheel / soil stresses and forces.
//! * [`roversim`]: ground-truth simulator and episode generation.
//! * [`nominal`]: the grey-box model affine in cohesion and `tan(phi)`, plus
//!   least-squares baselines.
//! * [`bayes`]: conjugate recursions over shared and matrix-normal weights.
//! * [`featnet`]: the learned feature network with hand-written backprop.
//! * [`metatrain`]: offline meta-training of features and prior.
//! * [`harness`]: prediction, estimation and regularisation-sweep experiments.

pub mod bayes;
pub mod error;
pub mod featnet;
pub mod harness;
pub mod jsonfmt;
pub mod metatrain;
pub mod nominal;
pub mod quadrature;
pub mod roversim;
pub mod terramech;

pub use error::{Error, Result};

/// Dimension of the rover state `(x, v)`.
pub const STATE_DIM: usize = 2;
/// Number of nominal parameters: cohesion (kPa) and `tan(phi)`.
pub const NOMINAL_DIM: usize = 2;
