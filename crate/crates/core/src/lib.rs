//! Nonparametric estimation of the gradient function `g` of a monotone
//! autonomous ODE `x'(t) = g(x(t))` from noisy samples of one trajectory.
//!
//! `g` is expanded in a normalized B-spline basis and the coefficients are
//! fitted by Levenberg–Marquardt on the trajectory misfit, with Jacobians
//! from the forward sensitivity equations. A local-polynomial presmoother
//! supplies the trajectory endpoints and the starting coefficients.

pub mod basis;
pub mod data;
pub mod estimator;
pub mod ode;
pub mod quad;
pub mod smooth;
pub mod sim;

pub use basis::{ConstantBasis, FunctionBasis, SplineBasis};
pub use data::{Dataset, SampleSplit};
pub use estimator::{FitConfig, FitError, FitResult, LmSettings, Selection};
pub use ode::{Gradient, GradientModel, Integrator, TrajectorySolution};
pub use sim::{MRule, SimSpec, Study};
pub use smooth::{Endpoints, Kernel};
