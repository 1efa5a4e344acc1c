//! Learning governing equations from sampled trajectories with a normalized
//! monomial dictionary feeding a shallow perceptron, integrated by explicit
//! Runge-Kutta schemes.

pub mod baselines;
pub mod checkpoint;
pub mod dictionary;
pub mod error;
pub mod experiment;
pub mod field;
pub mod gradient;
pub mod io;
pub mod metrics;
pub mod network;
pub mod odeint;
pub mod pde;
pub mod rom;
pub mod systems;
pub mod train;

pub use dictionary::{DictionarySpec, FeatureMap, NormalizationBounds, TimeScale};
pub use error::{Error, Result};
pub use field::{LinearPart, VectorField};
pub use gradient::{Differentiable, Engine, LossSpec};
pub use network::{Activation, MlpParams};
pub use odeint::{Dynamics, Scheme, SolverConfig, Trajectory};
pub use systems::{GeneratorConfig, System};
pub use train::{TrainConfig, TrainReport};
