//! High-level drivers tying integration, checkpointing, and the reverse
//! sweeps together: cost, gradient, and Hessian-vector product evaluation
//! with a choice of trajectory storage.

use crate::adjoint::{assemble_gradient, solve_adjoint};
use crate::checkpoint::{
    plan_schedule, CheckpointMode, CheckpointStore, DiskStore, ForwardReplayer, MemoryStore,
    StepAccess, StepProvider, TlmReplayer, TrajectoryWithSensitivity,
};
use crate::error::{Error, Result};
use crate::forward::{integrate, StepperConfig};
use crate::problem::{DAEProblem, Objective, ParamMap, Vector};
use crate::second_order::{
    assemble_hvp, direction_seeds, require_second_order_callbacks, soa_forward_pass,
    solve_hvp_sweep, HvpTarget,
};
use std::path::PathBuf;

/// Where the reverse sweep reads the trajectory from.
#[derive(Debug, Clone)]
pub enum Storage {
    /// Keep every step record in memory.
    Full,
    /// Bounded in-memory checkpoints with restore-or-recompute provision.
    Checkpointed {
        capacity: usize,
        mode: CheckpointMode,
    },
    /// Bounded checkpoints in binary files under the given directory.
    OnDisk {
        capacity: usize,
        mode: CheckpointMode,
        dir: PathBuf,
    },
}

/// A problem bundled with everything needed to evaluate its cost.
pub struct EvalContext<'a> {
    pub problem: &'a DAEProblem,
    pub objective: &'a Objective,
    pub param_map: &'a ParamMap,
    pub config: &'a StepperConfig,
}

#[derive(Debug, Clone)]
pub struct GradientResult {
    pub cost: f64,
    pub gradient: Vector,
    pub recomputations: usize,
}

/// Forward integration only.
pub fn cost(ctx: &EvalContext, p: &Vector) -> Result<f64> {
    let (_, c) = integrate(ctx.problem, ctx.objective, ctx.param_map, ctx.config, p)?;
    Ok(c)
}

/// Cost and exact discrete gradient via a full reverse sweep.
pub fn gradient(ctx: &EvalContext, p: &Vector, storage: &Storage) -> Result<GradientResult> {
    ctx.config.validate(ctx.problem)?;
    match storage {
        Storage::Full => {
            let (mut traj, cost) =
                integrate(ctx.problem, ctx.objective, ctx.param_map, ctx.config, p)?;
            let sol = solve_adjoint(ctx.problem, ctx.objective, &mut traj, p, &ctx.config.linear)?;
            Ok(GradientResult {
                cost,
                gradient: assemble_gradient(ctx.param_map, p, &sol.lambda0, &sol.mu0),
                recomputations: 0,
            })
        }
        Storage::Checkpointed { capacity, mode } => {
            gradient_checkpointed(ctx, p, *capacity, *mode, Box::new(MemoryStore::new()))
        }
        Storage::OnDisk {
            capacity,
            mode,
            dir,
        } => {
            let store = DiskStore::new(dir.clone())?;
            gradient_checkpointed(ctx, p, *capacity, *mode, Box::new(store))
        }
    }
}

fn gradient_checkpointed(
    ctx: &EvalContext,
    p: &Vector,
    capacity: usize,
    mode: CheckpointMode,
    store: Box<dyn CheckpointStore>,
) -> Result<GradientResult> {
    let schedule = plan_schedule(ctx.config.num_steps, capacity, mode)?;
    let replayer = ForwardReplayer::new(ctx.problem, ctx.objective, ctx.config, p);
    let u0 = ctx.param_map.initial_state(p);
    let mut provider = StepProvider::start(replayer, schedule, store, u0, None)?;
    let cost =
        ctx.objective.terminal(provider.final_state(), p) + provider.replayer().accumulated_q();
    let sol = solve_adjoint(
        ctx.problem,
        ctx.objective,
        &mut provider,
        p,
        &ctx.config.linear,
    )?;
    Ok(GradientResult {
        cost,
        gradient: assemble_gradient(ctx.param_map, p, &sol.lambda0, &sol.mu0),
        recomputations: sol.recomputations,
    })
}

#[derive(Debug, Clone)]
pub struct HvpResult {
    pub hvp: Vector,
    pub recomputations: usize,
}

/// Hessian-vector product of the cost along `sigma`, by one forward tangent
/// propagation and one combined first+second order reverse sweep.
pub fn hvp(
    ctx: &EvalContext,
    p: &Vector,
    sigma: &Vector,
    target: HvpTarget,
    storage: &Storage,
) -> Result<HvpResult> {
    ctx.config.validate(ctx.problem)?;
    require_second_order_callbacks(ctx.problem, ctx.objective, target)?;
    let (v1, v2) = direction_seeds(ctx.param_map, p, sigma, target);

    match storage {
        Storage::Full => {
            let (traj, _) = integrate(ctx.problem, ctx.objective, ctx.param_map, ctx.config, p)?;
            let w = soa_forward_pass(
                ctx.problem,
                ctx.objective,
                &traj.records,
                v1,
                v2.as_ref(),
                p,
                &ctx.config.linear,
            )?;
            let mut access = TrajectoryWithSensitivity {
                trajectory: &traj,
                w: &w,
            };
            let sweep = solve_hvp_sweep(
                ctx.problem,
                ctx.objective,
                &mut access,
                p,
                v2.as_ref(),
                &ctx.config.linear,
            )?;
            Ok(HvpResult {
                hvp: assemble_hvp(ctx.param_map, p, sigma, target, &sweep),
                recomputations: 0,
            })
        }
        Storage::Checkpointed { capacity, mode } => hvp_checkpointed(
            ctx,
            p,
            sigma,
            target,
            v1,
            v2,
            *capacity,
            *mode,
            Box::new(MemoryStore::new()),
        ),
        Storage::OnDisk {
            capacity,
            mode,
            dir,
        } => {
            let store = DiskStore::new(dir.clone())?;
            hvp_checkpointed(
                ctx,
                p,
                sigma,
                target,
                v1,
                v2,
                *capacity,
                *mode,
                Box::new(store),
            )
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn hvp_checkpointed(
    ctx: &EvalContext,
    p: &Vector,
    sigma: &Vector,
    target: HvpTarget,
    v1: Vector,
    v2: Option<Vector>,
    capacity: usize,
    mode: CheckpointMode,
    store: Box<dyn CheckpointStore>,
) -> Result<HvpResult> {
    let schedule = plan_schedule(ctx.config.num_steps, capacity, mode)?;
    let replayer = TlmReplayer {
        inner: ForwardReplayer::new(ctx.problem, ctx.objective, ctx.config, p),
        v2: v2.as_ref(),
    };
    let u0 = ctx.param_map.initial_state(p);
    let mut provider = StepProvider::start(replayer, schedule, store, u0, Some(v1))?;
    let sweep = solve_hvp_sweep(
        ctx.problem,
        ctx.objective,
        &mut provider,
        p,
        v2.as_ref(),
        &ctx.config.linear,
    )?;
    Ok(HvpResult {
        hvp: assemble_hvp(ctx.param_map, p, sigma, target, &sweep),
        recomputations: sweep.recomputations,
    })
}

/// Gradient via the full-matrix tangent linear model. Verification path;
/// limited to small parameter counts.
pub fn gradient_via_tlm(ctx: &EvalContext, p: &Vector) -> Result<Vector> {
    let (traj, _) = integrate(ctx.problem, ctx.objective, ctx.param_map, ctx.config, p)?;
    Ok(crate::tlm::tlm_gradient(
        ctx.problem,
        ctx.objective,
        ctx.param_map,
        &traj,
        p,
        &ctx.config.linear,
    )?)
}

impl From<String> for Error {
    fn from(s: String) -> Self {
        Error::Invalid(s)
    }
}
