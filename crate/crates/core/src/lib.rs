//! Discrete adjoint sensitivity analysis for ODE/DAE time integration.
//!
//! The library integrates `M u' = f(t, u; p)` forward with theta methods or
//! classic RK4, then differentiates the *discretized* timestepping algorithm
//! itself: first-order adjoint sweeps give exact gradients of a scalar
//! functional, tangent-linear propagation gives forward sensitivities, and a
//! combined forward-over-adjoint sweep gives Hessian-vector products. Reverse
//! sweeps read the trajectory through a checkpointing layer that trades
//! recomputation for storage with an optimal schedule.

pub mod adjoint;
pub mod algebra;
pub mod checkpoint;
pub mod driver;
pub mod error;
pub mod forward;
pub mod optimize;
pub mod problem;
pub mod problems;
pub mod second_order;
pub mod tlm;

pub use algebra::{LinearOpts, MassMatrix, MatrixData, NewtonOpts, SparseTriplets};
pub use checkpoint::{plan_schedule, CheckpointMode, CheckpointSchedule, StepAccess};
pub use driver::{EvalContext, Storage};
pub use error::{Error, Result};
pub use forward::{integrate, Method, StageRecord, StepperConfig, Trajectory};
pub use problem::{DAEProblem, Objective, ParamMap, ValidationReport, Vector};
pub use second_order::HvpTarget;
