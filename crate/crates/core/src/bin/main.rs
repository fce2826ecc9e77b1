//! Command-line driver: verification experiments (Taylor remainder tests,
//! Hessian-vector-product checks, optimal control, initial-condition
//! inversion, checkpointing statistics) emitting plot-ready CSV or JSON.
//!
//! Every command is deterministic given its flags and exits nonzero on any
//! assertion failure.

use adjoint_ts::checkpoint::{count_recomputations, plan_schedule, CheckpointMode};
use adjoint_ts::driver::{cost, gradient, hvp, Storage};
use adjoint_ts::forward::{integrate, Method};
use adjoint_ts::optimize::{lbfgs_minimize, newton_minimize, OptimizeOpts, OptimizeResult};
use adjoint_ts::problem::Vector;
use adjoint_ts::problems::{by_name, InstanceOpts, ProblemInstance};
use adjoint_ts::second_order::HvpTarget;
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "adjoint-ts",
    about = "Discrete adjoint sensitivity analysis: gradients, Hessian-vector products, optimal checkpointing",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Integration method: theta1 | theta0.5 | theta0 | rk4
    #[arg(long)]
    method: Option<String>,
    /// Number of time steps
    #[arg(long)]
    steps: Option<usize>,
    /// Grid resolution (grayscott)
    #[arg(long)]
    grid: Option<usize>,
    /// Checkpoint capacity; full storage when absent
    #[arg(long)]
    capacity: Option<usize>,
    /// Checkpoint unit type: sol | sol+stages
    #[arg(long, default_value = "sol")]
    mode: String,
    /// Write the table to this file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit JSON records instead of CSV
    #[arg(long)]
    json: bool,
    /// Seed for the probe directions
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Evaluate independent table rows on separate threads
    #[arg(long)]
    parallel: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Taylor remainder convergence test of the adjoint gradient
    TaylorTest {
        /// Registered problem name: aircraft | grayscott | linear-test
        problem: String,
        /// Finite-difference step sizes
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [5e-3, 5e-4, 5e-5])]
        h_list: Vec<f64>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Hessian-vector product vs. finite differences of the gradient
    HvpTest {
        problem: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [1e-2, 1e-3, 1e-4])]
        h_list: Vec<f64>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Aircraft trajectory planning: L-BFGS vs. matrix-free Newton
    OptimalControl {
        /// Number of piecewise-constant control intervals
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Optimizer: lbfgs | newton | both
        #[arg(long, default_value = "both")]
        optimizer: String,
        /// Gradient-norm target for the iteration comparison
        #[arg(long, default_value_t = 1e-6)]
        grad_tol: f64,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Recover the Gray-Scott initial condition from the final state
    GrayscottInvert {
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Recomputation counts for checkpoint-capacity splits over a step range
    RevolveStats {
        #[arg(long, default_value_t = 1)]
        n_min: usize,
        #[arg(long, default_value_t = 60)]
        n_max: usize,
        /// Memory budget in units (one solution or one stage = one unit)
        #[arg(long, default_value_t = 12)]
        units: usize,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Dump the cost gradient for a registered problem
    Gradient {
        problem: String,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Dump the forward trajectory (step, time, state)
    Integrate {
        problem: String,
        /// Output format: csv | bin
        #[arg(long, default_value = "csv")]
        format: String,
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn parse_method(s: &str) -> Result<Method> {
    match s {
        "rk4" => Ok(Method::Rk4),
        _ => {
            if let Some(rest) = s.strip_prefix("theta") {
                let theta: f64 = rest
                    .parse()
                    .map_err(|_| anyhow!("bad method '{s}' (use theta<value> or rk4)"))?;
                if !(0.0..=1.0).contains(&theta) {
                    bail!("theta must lie in [0, 1], got {theta}");
                }
                Ok(Method::Theta(theta))
            } else {
                bail!("unknown method '{s}' (use theta1, theta0.5, theta0, or rk4)")
            }
        }
    }
}

fn parse_mode(s: &str) -> Result<CheckpointMode> {
    match s {
        "sol" => Ok(CheckpointMode::SolutionOnly),
        "sol+stages" => Ok(CheckpointMode::SolutionWithStages),
        _ => bail!("unknown checkpoint mode '{s}' (use sol or sol+stages)"),
    }
}

fn storage_from(common: &CommonOpts) -> Result<Storage> {
    Ok(match common.capacity {
        None => Storage::Full,
        Some(capacity) => Storage::Checkpointed {
            capacity,
            mode: parse_mode(&common.mode)?,
        },
    })
}

fn load_instance(name: &str, common: &CommonOpts) -> Result<ProblemInstance> {
    let opts = InstanceOpts {
        method: common.method.as_deref().map(parse_method).transpose()?,
        steps: common.steps,
        grid: common.grid,
        control_intervals: None,
    };
    by_name(name, &opts).map_err(|e| anyhow!(e))
}

/// Simple column-ordered table rendered as CSV or a JSON record array.
struct Table {
    columns: Vec<&'static str>,
    rows: Vec<Vec<serde_json::Value>>,
}

impl Table {
    fn new(columns: Vec<&'static str>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<serde_json::Value>) {
        assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn render(&self, json: bool) -> String {
        if json {
            let records: Vec<serde_json::Value> = self
                .rows
                .iter()
                .map(|row| {
                    let map: serde_json::Map<String, serde_json::Value> = self
                        .columns
                        .iter()
                        .zip(row.iter())
                        .map(|(c, v)| (c.to_string(), v.clone()))
                        .collect();
                    serde_json::Value::Object(map)
                })
                .collect();
            serde_json::to_string_pretty(&records).unwrap()
        } else {
            let mut s = self.columns.join(",");
            s.push('\n');
            for row in &self.rows {
                let line: Vec<String> = row
                    .iter()
                    .map(|v| match v {
                        serde_json::Value::String(x) => x.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                s.push_str(&line.join(","));
                s.push('\n');
            }
            s
        }
    }
}

fn emit(table: &Table, common: &CommonOpts) -> Result<()> {
    let text = table.render(common.json);
    match &common.out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn num(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v)
        .map(serde_json::Value::Number)
        .unwrap_or(serde_json::Value::Null)
}

fn unit_direction(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    let v = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let nrm = v.norm();
    v / nrm
}

fn cmd_taylor_test(problem: &str, h_list: &[f64], common: &CommonOpts) -> Result<()> {
    let inst = load_instance(problem, common)?;
    let ctx = inst.eval_context();
    let storage = storage_from(common)?;
    let g = gradient(&ctx, &inst.p0, &storage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let dir = unit_direction(&mut rng, inst.p0.len());
    let slope = dir.dot(&g.gradient);

    let costs: Vec<adjoint_ts::Result<f64>> = if common.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = h_list
                .iter()
                .map(|&h| {
                    let ctx = &ctx;
                    let p = &inst.p0;
                    let dir = &dir;
                    scope.spawn(move || cost(ctx, &(p + dir * h)))
                })
                .collect();
            handles.into_iter().map(|t| t.join().unwrap()).collect()
        })
    } else {
        h_list
            .iter()
            .map(|&h| cost(&ctx, &(&inst.p0 + &dir * h)))
            .collect()
    };
    let costs: Vec<f64> = costs.into_iter().collect::<adjoint_ts::Result<Vec<_>>>()?;

    let mut table = Table::new(vec!["h", "remainder", "order"]);
    let mut prev: Option<(f64, f64)> = None;
    let mut orders = Vec::new();
    for (&h, c) in h_list.iter().zip(costs) {
        let remainder = (c - g.cost - h * slope).abs();
        let order = prev.map(|(hp, rp)| (rp / remainder).ln() / (hp / h).ln());
        if let Some(o) = order {
            orders.push(o);
        }
        table.push(vec![
            num(h),
            num(remainder),
            order.map(num).unwrap_or(serde_json::Value::Null),
        ]);
        prev = Some((h, remainder));
    }
    emit(&table, common)?;
    for o in &orders {
        if (o - 2.0).abs() > 0.1 {
            bail!("taylor remainder order {o:.3} deviates from 2 by more than 0.1");
        }
    }
    eprintln!(
        "taylor-test {problem}: cost {:.6e}, orders {:?} (pass)",
        g.cost,
        orders.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>()
    );
    Ok(())
}

fn cmd_hvp_test(problem: &str, h_list: &[f64], common: &CommonOpts) -> Result<()> {
    let inst = load_instance(problem, common)?;
    let ctx = inst.eval_context();
    let storage = storage_from(common)?;
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let sigma = unit_direction(&mut rng, inst.p0.len());
    let sigma2 = unit_direction(&mut rng, inst.p0.len());

    let h1 = hvp(&ctx, &inst.p0, &sigma, HvpTarget::WrtParams, &storage)?.hvp;
    let h2 = hvp(&ctx, &inst.p0, &sigma2, HvpTarget::WrtParams, &storage)?.hvp;
    let sym_lhs = sigma.dot(&h2);
    let sym_rhs = sigma2.dot(&h1);
    let sym_residual = (sym_lhs - sym_rhs).abs() / sym_lhs.abs().max(sym_rhs.abs()).max(1e-30);

    let grad_at = |p: &Vector| -> Result<Vector> { Ok(gradient(&ctx, p, &storage)?.gradient) };
    let fd_errors: Vec<Result<f64>> = if common.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = h_list
                .iter()
                .map(|&h| {
                    let (ctx, p0, sigma, h1) = (&ctx, &inst.p0, &sigma, &h1);
                    let storage = &storage;
                    scope.spawn(move || -> Result<f64> {
                        let gp = gradient(ctx, &(p0 + sigma * h), storage)?.gradient;
                        let gm = gradient(ctx, &(p0 - sigma * h), storage)?.gradient;
                        Ok(((gp - gm) / (2.0 * h) - h1).norm())
                    })
                })
                .collect();
            handles.into_iter().map(|t| t.join().unwrap()).collect()
        })
    } else {
        h_list
            .iter()
            .map(|&h| -> Result<f64> {
                let gp = grad_at(&(&inst.p0 + &sigma * h))?;
                let gm = grad_at(&(&inst.p0 - &sigma * h))?;
                Ok(((gp - gm) / (2.0 * h) - &h1).norm())
            })
            .collect()
    };
    let mut table = Table::new(vec!["h", "hvp_fd_error", "order"]);
    let mut prev: Option<(f64, f64)> = None;
    let mut orders = Vec::new();
    let mut errors = Vec::new();
    for (&h, err) in h_list.iter().zip(fd_errors) {
        let err = err?;
        errors.push(err);
        let order = prev.map(|(hp, ep)| (ep / err).ln() / (hp / h).ln());
        if let Some(o) = order {
            orders.push(o);
        }
        table.push(vec![
            num(h),
            num(err),
            order.map(num).unwrap_or(serde_json::Value::Null),
        ]);
        prev = Some((h, err));
    }
    emit(&table, common)?;
    eprintln!("hvp-test {problem}: symmetry residual {sym_residual:.3e}");
    if sym_residual > 1e-8 {
        bail!("hvp symmetry residual {sym_residual:.3e} exceeds 1e-8");
    }
    // quadratic costs put the fd error at the rounding floor; the order
    // estimate carries no information there
    let floor = 1e-10 * h1.norm().max(1.0);
    if errors.iter().all(|e| *e <= floor) {
        eprintln!("hvp-test {problem}: exact within solver tolerance (pass)");
        return Ok(());
    }
    for o in &orders {
        if (o - 2.0).abs() > 0.25 {
            bail!("hvp fd-convergence order {o:.3} deviates from 2 by more than 0.25");
        }
    }
    eprintln!(
        "hvp-test {problem}: orders {:?} (pass)",
        orders.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>()
    );
    Ok(())
}

fn run_lbfgs(inst: &ProblemInstance, grad_tol: f64, max_iters: usize) -> OptimizeResult {
    let ctx = inst.eval_context();
    let bounds = inst
        .bounds
        .clone()
        .unwrap_or_else(|| adjoint_ts::optimize::Bounds::unbounded(inst.p0.len()));
    let mut eval = |p: &Vector| {
        let g = gradient(&ctx, p, &Storage::Full).expect("gradient evaluation failed");
        (g.cost, g.gradient)
    };
    lbfgs_minimize(
        &mut eval,
        &inst.p0,
        &bounds,
        &OptimizeOpts {
            grad_tol,
            max_iters,
            ..Default::default()
        },
    )
}

fn run_newton(inst: &ProblemInstance, grad_tol: f64, max_iters: usize) -> OptimizeResult {
    let ctx = inst.eval_context();
    let ctx2 = inst.eval_context();
    let bounds = inst
        .bounds
        .clone()
        .unwrap_or_else(|| adjoint_ts::optimize::Bounds::unbounded(inst.p0.len()));
    let mut eval = |p: &Vector| {
        let g = gradient(&ctx, p, &Storage::Full).expect("gradient evaluation failed");
        (g.cost, g.gradient)
    };
    let mut hvp_op = |p: &Vector, sigma: &Vector| {
        hvp(&ctx2, p, sigma, HvpTarget::WrtParams, &Storage::Full)
            .expect("hvp evaluation failed")
            .hvp
    };
    newton_minimize(
        &mut eval,
        &mut hvp_op,
        &inst.p0,
        &bounds,
        &OptimizeOpts {
            grad_tol,
            max_iters,
            ..Default::default()
        },
    )
}

fn cmd_optimal_control(
    k: usize,
    optimizer: &str,
    grad_tol: f64,
    common: &CommonOpts,
) -> Result<()> {
    let opts = InstanceOpts {
        method: Some(
            common
                .method
                .as_deref()
                .map(parse_method)
                .transpose()?
                .unwrap_or(Method::Rk4),
        ),
        steps: common.steps,
        grid: None,
        control_intervals: Some(k),
    };
    let inst = by_name("aircraft", &opts).map_err(|e| anyhow!(e))?;

    let mut table = Table::new(vec!["optimizer", "iter", "cost", "gradnorm"]);
    let mut lbfgs_res = None;
    let mut newton_res = None;
    if optimizer == "lbfgs" || optimizer == "both" {
        let res = run_lbfgs(&inst, grad_tol, 1000);
        for rec in &res.history {
            table.push(vec![
                serde_json::Value::String("lbfgs".into()),
                serde_json::Value::from(rec.iter),
                num(rec.cost),
                num(rec.grad_norm),
            ]);
        }
        lbfgs_res = Some(res);
    }
    if optimizer == "newton" || optimizer == "both" {
        let res = run_newton(&inst, grad_tol, 100);
        for rec in &res.history {
            table.push(vec![
                serde_json::Value::String("newton".into()),
                serde_json::Value::from(rec.iter),
                num(rec.cost),
                num(rec.grad_norm),
            ]);
        }
        newton_res = Some(res);
    }
    emit(&table, common)?;

    let iters_to = |res: &OptimizeResult| {
        res.history
            .iter()
            .find(|r| r.grad_norm <= grad_tol)
            .map(|r| r.iter)
    };
    if let Some(res) = &newton_res {
        let bounds = inst.bounds.as_ref().unwrap();
        let active: Vec<usize> = (0..res.x.len())
            .filter(|&i| {
                (res.x[i] - bounds.lower[i]).abs() < 1e-9
                    || (res.x[i] - bounds.upper[i]).abs() < 1e-9
            })
            .collect();
        eprintln!(
            "newton: {} iterations, cost {:.6e}, gradnorm {:.3e}, active bounds {:?}",
            res.iterations, res.cost, res.grad_norm, active
        );
        let controls: Vec<String> = res.x.as_slice()[..k]
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect();
        eprintln!("newton final speeds v = [{}]", controls.join(", "));
    }
    if let Some(res) = &lbfgs_res {
        eprintln!(
            "lbfgs: {} iterations, cost {:.6e}, gradnorm {:.3e}",
            res.iterations, res.cost, res.grad_norm
        );
    }
    if let (Some(newton), Some(lbfgs)) = (&newton_res, &lbfgs_res) {
        let ni = iters_to(newton)
            .ok_or_else(|| anyhow!("newton never reached gradnorm {grad_tol:.1e}"))?;
        let li = iters_to(lbfgs)
            .ok_or_else(|| anyhow!("lbfgs never reached gradnorm {grad_tol:.1e}"))?;
        eprintln!("iterations to gradnorm <= {grad_tol:.0e}: newton {ni}, lbfgs {li}");
        if ni >= li {
            bail!("newton ({ni}) was not strictly faster than lbfgs ({li})");
        }
    }
    Ok(())
}

fn cmd_grayscott_invert(max_iters: usize, common: &CommonOpts) -> Result<()> {
    let mut common = common.clone();
    if common.method.is_none() {
        common.method = Some("theta1".to_string());
    }
    let inst = load_instance("grayscott", &common)?;
    let ctx = inst.eval_context();
    let capacity = common.capacity.unwrap_or(5);
    let mode = parse_mode(&common.mode)?;
    let storage = Storage::Checkpointed { capacity, mode };
    let method = common
        .method
        .as_deref()
        .map(parse_method)
        .transpose()?
        .unwrap();

    // checkpointed gradient must equal the full-storage gradient bitwise
    let g_full = gradient(&ctx, &inst.p0, &Storage::Full)?;
    let g_ck = gradient(&ctx, &inst.p0, &storage)?;
    let bitwise = g_full
        .gradient
        .iter()
        .zip(g_ck.gradient.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if !bitwise {
        bail!("checkpointed gradient differs from full-storage gradient");
    }

    // wall-time ratio of one adjoint sweep to one forward solve
    let (forward_t, adjoint_t) = measure_sweep_times(&inst)?;
    let ratio = adjoint_t / forward_t;
    eprintln!(
        "forward {forward_t:.3}s, adjoint sweep {adjoint_t:.3}s, ratio {ratio:.3} \
         (capacity {capacity}, mode {}, {} replays)",
        mode.label(),
        g_ck.recomputations
    );
    if matches!(method, Method::Theta(_)) && ratio >= 1.2 {
        bail!("adjoint/forward time ratio {ratio:.3} exceeds 1.2 for a theta method");
    }

    let cost0 = g_full.cost;
    let bounds = adjoint_ts::optimize::Bounds::unbounded(inst.p0.len());
    let mut eval = |p: &Vector| {
        let g = gradient(&ctx, p, &storage).expect("gradient evaluation failed");
        (g.cost, g.gradient)
    };
    let res = lbfgs_minimize(
        &mut eval,
        &inst.p0,
        &bounds,
        &OptimizeOpts {
            grad_tol: 1e-14,
            max_iters,
            ..Default::default()
        },
    );

    let mut table = Table::new(vec!["iter", "cost", "gradnorm"]);
    for rec in &res.history {
        table.push(vec![
            serde_json::Value::from(rec.iter),
            num(rec.cost),
            num(rec.grad_norm),
        ]);
    }
    emit(&table, &common)?;

    let reduction = cost0 / res.cost.max(f64::MIN_POSITIVE);
    eprintln!(
        "inversion: cost {cost0:.6e} -> {:.6e} (reduction {reduction:.1e}) in {} iterations",
        res.cost, res.iterations
    );
    if reduction < 1e3 {
        bail!("cost reduction {reduction:.1e} is below 1e3");
    }
    Ok(())
}

fn measure_sweep_times(inst: &ProblemInstance) -> Result<(f64, f64)> {
    use adjoint_ts::adjoint::solve_adjoint;
    let ctx = inst.eval_context();
    let mut forward_best = f64::INFINITY;
    let mut adjoint_best = f64::INFINITY;
    for _ in 0..3 {
        let t0 = Instant::now();
        let (traj, _) = integrate(
            ctx.problem,
            ctx.objective,
            ctx.param_map,
            ctx.config,
            &inst.p0,
        )?;
        forward_best = forward_best.min(t0.elapsed().as_secs_f64());

        let mut access = traj;
        let t1 = Instant::now();
        let _ = solve_adjoint(
            ctx.problem,
            ctx.objective,
            &mut access,
            &inst.p0,
            &ctx.config.linear,
        )?;
        adjoint_best = adjoint_best.min(t1.elapsed().as_secs_f64());
    }
    Ok((forward_best, adjoint_best))
}

fn cmd_revolve_stats(n_min: usize, n_max: usize, units: usize, common: &CommonOpts) -> Result<()> {
    if units == 0 {
        bail!("at least one memory unit is required");
    }
    // the reference points from the ten-step, three-checkpoint example
    let sol10 = plan_schedule(10, 3, CheckpointMode::SolutionOnly)?;
    let stg10 = plan_schedule(10, 3, CheckpointMode::SolutionWithStages)?;
    if sol10.recomputations != 15 || stg10.recomputations != 6 {
        bail!(
            "reference counts violated: ({}, {}) instead of (15, 6)",
            sol10.recomputations,
            stg10.recomputations
        );
    }

    let mut table = Table::new(vec!["n", "capacity", "mode", "recomputations"]);
    // one memory budget, three splits: solutions only, solution+2 stages,
    // solution+3 stages
    let splits: Vec<(usize, CheckpointMode)> = vec![
        (units, CheckpointMode::SolutionOnly),
        (units / 3, CheckpointMode::SolutionWithStages),
        (units / 4, CheckpointMode::SolutionWithStages),
    ];
    for n in n_min.max(1)..=n_max {
        for &(capacity, mode) in &splits {
            if capacity == 0 {
                continue;
            }
            let schedule = plan_schedule(n, capacity, mode)?;
            debug_assert_eq!(schedule.recomputations, count_recomputations(&schedule));
            table.push(vec![
                serde_json::Value::from(n),
                serde_json::Value::from(capacity),
                serde_json::Value::String(mode.label().to_string()),
                serde_json::Value::from(schedule.recomputations),
            ]);
        }
    }
    emit(&table, common)?;
    eprintln!(
        "revolve-stats: {units} units split as {} sol-only / {} two-stage / {} three-stage checkpoints",
        units,
        units / 3,
        units / 4
    );
    Ok(())
}

fn cmd_gradient(problem: &str, common: &CommonOpts) -> Result<()> {
    let inst = load_instance(problem, common)?;
    let ctx = inst.eval_context();
    let storage = storage_from(common)?;
    let g = gradient(&ctx, &inst.p0, &storage)?;
    if common.json {
        let value = serde_json::json!({
            "problem": problem,
            "cost": g.cost,
            "recomputations": g.recomputations,
            "gradient": g.gradient.as_slice(),
        });
        match &common.out {
            Some(path) => std::fs::write(path, serde_json::to_string_pretty(&value)?)?,
            None => println!("{}", serde_json::to_string_pretty(&value)?),
        }
    } else {
        let mut table = Table::new(vec!["index", "gradient"]);
        for (i, v) in g.gradient.iter().enumerate() {
            table.push(vec![serde_json::Value::from(i), num(*v)]);
        }
        emit(&table, common)?;
        eprintln!(
            "gradient {problem}: cost {:.6e}, {} replays",
            g.cost, g.recomputations
        );
    }
    Ok(())
}

fn cmd_integrate(problem: &str, format: &str, common: &CommonOpts) -> Result<()> {
    let inst = load_instance(problem, common)?;
    let (traj, cost) = integrate(
        &inst.problem,
        &inst.objective,
        &inst.param_map,
        &inst.config,
        &inst.p0,
    )?;
    match format {
        "csv" => {
            let mut s = String::from("step,time");
            for i in 0..traj.states[0].len() {
                s.push_str(&format!(",u{i}"));
            }
            s.push('\n');
            for (n, (t, state)) in traj.times.iter().zip(traj.states.iter()).enumerate() {
                s.push_str(&format!("{n},{t}"));
                for v in state.iter() {
                    s.push_str(&format!(",{v}"));
                }
                s.push('\n');
            }
            match &common.out {
                Some(path) => std::fs::write(path, s)?,
                None => print!("{s}"),
            }
        }
        "bin" => {
            let path = common
                .out
                .clone()
                .ok_or_else(|| anyhow!("--out is required for binary output"))?;
            let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
            file.write_all(b"ADJTSTRJ")?;
            file.write_all(&1u32.to_le_bytes())?;
            file.write_all(&(traj.states.len() as u64).to_le_bytes())?;
            file.write_all(&(traj.states[0].len() as u64).to_le_bytes())?;
            for (n, (t, state)) in traj.times.iter().zip(traj.states.iter()).enumerate() {
                file.write_all(&(n as u64).to_le_bytes())?;
                file.write_all(&t.to_le_bytes())?;
                for v in state.iter() {
                    file.write_all(&v.to_le_bytes())?;
                }
            }
        }
        other => bail!("unknown format '{other}' (use csv or bin)"),
    }
    eprintln!(
        "integrate {problem}: {} steps, cost {cost:.6e}",
        traj.num_steps()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::TaylorTest {
            problem,
            h_list,
            common,
        } => cmd_taylor_test(problem, h_list, common),
        Cmd::HvpTest {
            problem,
            h_list,
            common,
        } => cmd_hvp_test(problem, h_list, common),
        Cmd::OptimalControl {
            k,
            optimizer,
            grad_tol,
            common,
        } => cmd_optimal_control(*k, optimizer, *grad_tol, common),
        Cmd::GrayscottInvert { max_iters, common } => cmd_grayscott_invert(*max_iters, common),
        Cmd::RevolveStats {
            n_min,
            n_max,
            units,
            common,
        } => cmd_revolve_stats(*n_min, *n_max, *units, common),
        Cmd::Gradient { problem, common } => cmd_gradient(problem, common),
        Cmd::Integrate {
            problem,
            format,
            common,
        } => cmd_integrate(problem, format, common),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
