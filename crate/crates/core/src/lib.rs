//! Two-layer Kolmogorov-Arnold networks with exact analytic derivatives,
//! neural-tangent-kernel Gram matrices, and instrumented GD/SGD training on
//! regression and physics-informed losses.

pub mod basis;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod ntk;
pub mod objective;
pub mod optim;
pub mod pinn;
pub mod rng;

pub use basis::{validate_boundedness, BasisSpec, BoundednessReport, TransformSpec};
pub use error::{KanError, Result};
pub use model::{init_params, Dataset, KanParams, KanShape, OperatorCoefficients, ParamGrad, ResidualTerm};
pub use objective::Objective;
