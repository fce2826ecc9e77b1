//! Registered example problems. The CLI looks these up by string name;
//! nothing is loaded dynamically.

pub mod aircraft;
pub mod grayscott;
pub mod linear;
pub mod random_poly;

use crate::forward::{Method, StepperConfig};
use crate::optimize::Bounds;
use crate::problem::{DAEProblem, Objective, ParamMap, Vector};

/// A problem bundled with its objective, parameter map, starting point, and
/// default stepping setup.
pub struct ProblemInstance {
    pub name: String,
    pub problem: DAEProblem,
    pub objective: Objective,
    pub param_map: ParamMap,
    pub p0: Vector,
    pub bounds: Option<Bounds>,
    pub config: StepperConfig,
}

impl ProblemInstance {
    pub fn eval_context(&self) -> crate::driver::EvalContext<'_> {
        crate::driver::EvalContext {
            problem: &self.problem,
            objective: &self.objective,
            param_map: &self.param_map,
            config: &self.config,
        }
    }
}

/// Overrides applied on top of each problem's defaults.
#[derive(Debug, Clone, Default)]
pub struct InstanceOpts {
    pub method: Option<Method>,
    pub steps: Option<usize>,
    pub grid: Option<usize>,
    pub control_intervals: Option<usize>,
}

/// Look up a registered problem: `aircraft`, `grayscott`, or `linear-test`.
pub fn by_name(name: &str, opts: &InstanceOpts) -> Result<ProblemInstance, String> {
    match name {
        "aircraft" => {
            let mut ap = aircraft::AircraftProblem::default();
            if let Some(k) = opts.control_intervals {
                ap.control_intervals = k;
            }
            let method = opts.method.unwrap_or(Method::Rk4);
            let steps = opts.steps.unwrap_or(2 * ap.control_intervals);
            Ok(ap.instance(method, steps))
        }
        "grayscott" => {
            let gs = grayscott::GrayScottProblem {
                n: opts.grid.unwrap_or(32),
                ..Default::default()
            };
            let method = opts.method.unwrap_or(Method::Theta(1.0));
            let steps = opts.steps.unwrap_or(10);
            Ok(gs.instance(method, steps))
        }
        "linear-test" => {
            let method = opts.method.unwrap_or(Method::Rk4);
            let steps = opts.steps.unwrap_or(20);
            Ok(linear::instance(method, steps))
        }
        other => Err(format!(
            "unknown problem '{other}' (registered: aircraft, grayscott, linear-test)"
        )),
    }
}
