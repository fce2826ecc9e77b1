//! Desk-scale optimizers driven by the gradient and Hessian-vector-product
//! operators: limited-memory BFGS and matrix-free Newton-CG, both with a
//! projected Armijo line search for bound constraints.

use crate::problem::Vector;
use std::collections::VecDeque;

/// Componentwise box bounds; entries may be infinite.
#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vector,
    pub upper: Vector,
}

impl Bounds {
    pub fn new(lower: Vector, upper: Vector) -> Self {
        assert_eq!(lower.len(), upper.len());
        assert!(
            lower.iter().zip(upper.iter()).all(|(l, u)| l <= u),
            "lower bound exceeds upper bound"
        );
        Self { lower, upper }
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: Vector::from_element(n, f64::NEG_INFINITY),
            upper: Vector::from_element(n, f64::INFINITY),
        }
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower.iter().all(|l| *l == f64::NEG_INFINITY)
            && self.upper.iter().all(|u| *u == f64::INFINITY)
    }

    pub fn project(&self, x: &Vector) -> Vector {
        Vector::from_fn(x.len(), |i, _| x[i].clamp(self.lower[i], self.upper[i]))
    }

    pub fn contains(&self, x: &Vector) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lower[i] - 1e-14 && *v <= self.upper[i] + 1e-14)
    }

    /// Norm of the projected gradient `||P(x - g) - x||`; reduces to `||g||`
    /// away from the bounds.
    pub fn projected_grad_norm(&self, x: &Vector, g: &Vector) -> f64 {
        (self.project(&(x - g)) - x).norm()
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeOpts {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub lbfgs_memory: usize,
    /// Relative residual tolerance for the inner CG solve.
    pub cg_rtol: f64,
    pub armijo_c1: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizeOpts {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iters: 200,
            lbfgs_memory: 10,
            cg_rtol: 1e-12,
            armijo_c1: 1e-4,
            max_backtracks: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterRecord {
    pub iter: usize,
    pub cost: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub x: Vector,
    pub cost: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    /// Newton only: CG iterations that hit negative curvature and fell back.
    pub cg_breakdowns: usize,
    pub history: Vec<IterRecord>,
}

/// Projected backtracking Armijo search along `d` from `(x, cost, grad)`.
/// Returns the accepted point or `None` when backtracking is exhausted.
fn projected_armijo(
    eval: &mut dyn FnMut(&Vector) -> (f64, Vector),
    bounds: &Bounds,
    x: &Vector,
    cost: f64,
    grad: &Vector,
    d: &Vector,
    opts: &OptimizeOpts,
) -> Option<(Vector, f64, Vector)> {
    let mut alpha = 1.0f64;
    for _ in 0..=opts.max_backtracks {
        let trial = bounds.project(&(x + d * alpha));
        let step = &trial - x;
        if step.norm() == 0.0 {
            return None;
        }
        let (c, g) = eval(&trial);
        if c.is_finite() && c <= cost + opts.armijo_c1 * grad.dot(&step) {
            return Some((trial, c, g));
        }
        alpha *= 0.5;
    }
    None
}

/// Projected weak-Wolfe search (sufficient decrease plus curvature) by
/// expand-and-bisect bracketing. The curvature condition keeps `s^T y > 0`
/// so quasi-Newton pairs stay well defined; if only sufficient decrease is
/// attainable (e.g. the arc bends at a bound), that point is returned.
fn projected_wolfe(
    eval: &mut dyn FnMut(&Vector) -> (f64, Vector),
    bounds: &Bounds,
    x: &Vector,
    cost: f64,
    grad: &Vector,
    d: &Vector,
    opts: &OptimizeOpts,
) -> Option<(Vector, f64, Vector)> {
    let c2 = 0.9f64;
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    let mut alpha = 1.0f64;
    let mut armijo_fallback: Option<(Vector, f64, Vector)> = None;

    for _ in 0..=opts.max_backtracks {
        let trial = bounds.project(&(x + d * alpha));
        let step = &trial - x;
        if step.norm() == 0.0 {
            return armijo_fallback;
        }
        let (c, g) = eval(&trial);
        let sufficient = c.is_finite() && c <= cost + opts.armijo_c1 * grad.dot(&step);
        if !sufficient {
            hi = alpha;
            alpha = 0.5 * (lo + hi);
            continue;
        }
        if g.dot(d) < c2 * grad.dot(d) {
            // decrease fine but curvature too negative: step farther
            armijo_fallback = Some((trial, c, g));
            lo = alpha;
            alpha = if hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                2.0 * alpha
            };
            continue;
        }
        return Some((trial, c, g));
    }
    armijo_fallback
}

/// Gradient with the components pushing outward at active bounds zeroed.
/// Quasi-Newton directions and curvature pairs are built from this reduced
/// gradient so that pinned components stop polluting the memory.
fn reduced_grad(bounds: &Bounds, x: &Vector, g: &Vector) -> Vector {
    let edge = 1e-10;
    Vector::from_fn(x.len(), |i, _| {
        let at_lower = x[i] <= bounds.lower[i] + edge && g[i] > 0.0;
        let at_upper = x[i] >= bounds.upper[i] - edge && g[i] < 0.0;
        if at_lower || at_upper {
            0.0
        } else {
            g[i]
        }
    })
}

/// Limited-memory BFGS with two-loop recursion and projection for bounds.
/// `eval` returns `(cost, gradient)`.
pub fn lbfgs_minimize(
    eval: &mut dyn FnMut(&Vector) -> (f64, Vector),
    x0: &Vector,
    bounds: &Bounds,
    opts: &OptimizeOpts,
) -> OptimizeResult {
    let mut x = bounds.project(x0);
    let (mut cost, mut grad) = eval(&x);
    let mut pg = reduced_grad(bounds, &x, &grad);
    let mut pairs: VecDeque<(Vector, Vector, f64)> = VecDeque::new(); // (s, y, 1/y^T s)
    let mut history = vec![IterRecord {
        iter: 0,
        cost,
        grad_norm: bounds.projected_grad_norm(&x, &grad),
    }];
    let mut line_search_failed = false;
    let mut iterations = 0;

    for iter in 1..=opts.max_iters {
        if bounds.projected_grad_norm(&x, &grad) <= opts.grad_tol {
            break;
        }

        // two-loop recursion for -H pg
        let mut q = pg.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = s.dot(y) / y.dot(y);
            q *= gamma;
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        let mut d = -q;
        if d.dot(&pg) >= 0.0 {
            d = -pg.clone(); // safeguard: fall back to steepest descent
        }

        let mut accepted = projected_wolfe(eval, bounds, &x, cost, &grad, &d, opts);
        if accepted.is_none() && !pairs.is_empty() {
            // stale curvature pairs can poison the direction near active
            // bounds; restart the memory and retry along steepest descent
            pairs.clear();
            let d = -&pg;
            accepted = projected_wolfe(eval, bounds, &x, cost, &grad, &d, opts);
        }
        match accepted {
            Some((xn, cn, gn)) => {
                let pgn = reduced_grad(bounds, &xn, &gn);
                let s = &xn - &x;
                let y = &pgn - &pg;
                let sy = s.dot(&y);
                if sy > 1e-12 * s.norm() * y.norm() {
                    if pairs.len() == opts.lbfgs_memory {
                        pairs.pop_front();
                    }
                    pairs.push_back((s, y, 1.0 / sy));
                }
                x = xn;
                cost = cn;
                grad = gn;
                pg = pgn;
            }
            None => {
                line_search_failed = true;
                iterations = iter;
                break;
            }
        }
        iterations = iter;
        history.push(IterRecord {
            iter,
            cost,
            grad_norm: bounds.projected_grad_norm(&x, &grad),
        });
    }

    let grad_norm = bounds.projected_grad_norm(&x, &grad);
    OptimizeResult {
        converged: grad_norm <= opts.grad_tol,
        x,
        cost,
        grad_norm,
        iterations,
        line_search_failed,
        cg_breakdowns: 0,
        history,
    }
}

/// Matrix-free Newton: inner CG on the free-variable set with the exact
/// Hessian-vector product, projected Armijo line search, active set frozen
/// per outer iteration. Negative curvature stops CG and falls back to the
/// best direction so far (steepest descent if none).
pub fn newton_minimize(
    eval: &mut dyn FnMut(&Vector) -> (f64, Vector),
    hvp: &mut dyn FnMut(&Vector, &Vector) -> Vector,
    x0: &Vector,
    bounds: &Bounds,
    opts: &OptimizeOpts,
) -> OptimizeResult {
    let n = x0.len();
    let mut x = bounds.project(x0);
    let (mut cost, mut grad) = eval(&x);
    let mut history = vec![IterRecord {
        iter: 0,
        cost,
        grad_norm: bounds.projected_grad_norm(&x, &grad),
    }];
    let mut line_search_failed = false;
    let mut cg_breakdowns = 0usize;
    let mut iterations = 0;
    let edge = 1e-10;

    for iter in 1..=opts.max_iters {
        let pg = bounds.projected_grad_norm(&x, &grad);
        if pg <= opts.grad_tol {
            break;
        }

        // components pinned at a bound with the gradient pushing outward
        let active: Vec<bool> = (0..n)
            .map(|i| {
                (x[i] <= bounds.lower[i] + edge && grad[i] > 0.0)
                    || (x[i] >= bounds.upper[i] - edge && grad[i] < 0.0)
            })
            .collect();
        let mask = |v: &Vector| -> Vector {
            Vector::from_fn(n, |i, _| if active[i] { 0.0 } else { v[i] })
        };

        // CG on H d = -g restricted to the free set
        let b = mask(&(-&grad));
        let mut d = Vector::zeros(n);
        let mut r = b.clone();
        let mut pdir = r.clone();
        let mut rs = r.norm_squared();
        let target = (opts.cg_rtol * b.norm()).max(1e-300);
        let mut used_fallback = false;
        for _ in 0..(2 * n) {
            if rs.sqrt() <= target {
                break;
            }
            let hp = mask(&hvp(&x, &pdir));
            let curv = pdir.dot(&hp);
            if curv <= 1e-14 * pdir.norm_squared() {
                // negative curvature: keep the CG iterate so far, or take
                // the steepest-descent direction when nothing accumulated
                if d.norm() == 0.0 {
                    d = b.clone();
                    used_fallback = true;
                }
                cg_breakdowns += 1;
                break;
            }
            let alpha = rs / curv;
            d.axpy(alpha, &pdir, 1.0);
            r.axpy(-alpha, &hp, 1.0);
            let rs_new = r.norm_squared();
            let beta = rs_new / rs;
            rs = rs_new;
            pdir = &r + &pdir * beta;
        }
        let _ = used_fallback;
        if d.dot(&grad) >= 0.0 {
            d = b.clone();
        }

        match projected_armijo(eval, bounds, &x, cost, &grad, &d, opts) {
            Some((xn, cn, gn)) => {
                x = xn;
                cost = cn;
                grad = gn;
            }
            None => {
                line_search_failed = true;
                iterations = iter;
                break;
            }
        }
        iterations = iter;
        history.push(IterRecord {
            iter,
            cost,
            grad_norm: bounds.projected_grad_norm(&x, &grad),
        });
    }

    let grad_norm = bounds.projected_grad_norm(&x, &grad);
    OptimizeResult {
        converged: grad_norm <= opts.grad_tol,
        x,
        cost,
        grad_norm,
        iterations,
        line_search_failed,
        cg_breakdowns,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn lbfgs_quadratic_converges_fast() {
        let c = dvector![1.0, -2.0, 3.0];
        let mut eval = |x: &Vector| {
            let d = x - &c;
            (0.5 * d.norm_squared(), d)
        };
        let res = lbfgs_minimize(
            &mut eval,
            &Vector::zeros(3),
            &Bounds::unbounded(3),
            &OptimizeOpts {
                grad_tol: 1e-10,
                ..Default::default()
            },
        );
        assert!(res.converged);
        assert!(res.iterations <= 3, "iterations {}", res.iterations);
        assert!((res.x - c).norm() < 1e-9);
    }

    #[test]
    fn lbfgs_rosenbrock() {
        let mut eval = |x: &Vector| {
            let (a, b) = (1.0, 100.0);
            let cost = (a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2);
            let g = dvector![
                -2.0 * (a - x[0]) - 4.0 * b * x[0] * (x[1] - x[0] * x[0]),
                2.0 * b * (x[1] - x[0] * x[0])
            ];
            (cost, g)
        };
        let res = lbfgs_minimize(
            &mut eval,
            &dvector![-1.2, 1.0],
            &Bounds::unbounded(2),
            &OptimizeOpts {
                grad_tol: 1e-8,
                max_iters: 100,
                ..Default::default()
            },
        );
        assert!(res.converged, "gradnorm {}", res.grad_norm);
        assert!((res.x - dvector![1.0, 1.0]).norm() < 1e-6);
        assert!(res.iterations <= 100);
    }

    #[test]
    fn lbfgs_bound_constrained_projects_to_box() {
        // minimizer c outside the box: KKT point is the projection of c
        let c = dvector![2.0, -3.0];
        let mut eval = |x: &Vector| {
            let d = x - &c;
            (0.5 * d.norm_squared(), d)
        };
        let bounds = Bounds::new(dvector![-1.0, -1.0], dvector![1.0, 1.0]);
        let res = lbfgs_minimize(
            &mut eval,
            &dvector![0.0, 0.0],
            &bounds,
            &OptimizeOpts::default(),
        );
        assert!(res.converged);
        assert!((res.x - dvector![1.0, -1.0]).norm() < 1e-9);
        for rec in &res.history {
            assert!(rec.cost.is_finite());
        }
    }

    #[test]
    fn newton_one_step_on_quadratic() {
        let a = dmatrix![4.0, 1.0, 0.0; 1.0, 3.0, 0.5; 0.0, 0.5, 2.0];
        let c = dvector![1.0, 2.0, -1.0];
        let (a1, a2) = (a.clone(), a.clone());
        let mut eval = move |x: &Vector| {
            let d = x - &c;
            (0.5 * d.dot(&(&a1 * &d)), &a1 * d)
        };
        let mut hvp = move |_: &Vector, v: &Vector| &a2 * v;
        let res = newton_minimize(
            &mut eval,
            &mut hvp,
            &Vector::zeros(3),
            &Bounds::unbounded(3),
            &OptimizeOpts {
                grad_tol: 1e-9,
                ..Default::default()
            },
        );
        assert!(res.converged);
        assert_eq!(res.iterations, 1, "grad_norm {}", res.grad_norm);
        assert!(res.grad_norm < 1e-10);
    }

    #[test]
    fn newton_saddle_with_bounds_terminates_at_bound() {
        // psi = x0^2 - x1^2: unbounded descent along x1 stopped by the box
        let mut eval = |x: &Vector| (x[0] * x[0] - x[1] * x[1], dvector![2.0 * x[0], -2.0 * x[1]]);
        let mut hvp = |_: &Vector, v: &Vector| dvector![2.0 * v[0], -2.0 * v[1]];
        let bounds = Bounds::new(dvector![-2.0, -2.0], dvector![2.0, 2.0]);
        let res = newton_minimize(
            &mut eval,
            &mut hvp,
            &dvector![0.5, 0.1],
            &bounds,
            &OptimizeOpts {
                max_iters: 60,
                ..Default::default()
            },
        );
        assert!(bounds.contains(&res.x));
        assert!(res.x.iter().all(|v| v.is_finite()));
        assert!((res.x[1].abs() - 2.0).abs() < 1e-8, "x = {:?}", res.x);
        assert!(res.cg_breakdowns > 0);
    }

    #[test]
    fn monotone_decrease_and_feasibility() {
        let mut eval = |x: &Vector| {
            let cost = (x[0] - 0.3).powi(4) + (x[1] + 0.2).powi(2) + 0.5 * x[0] * x[0];
            let g = dvector![4.0 * (x[0] - 0.3).powi(3) + x[0], 2.0 * (x[1] + 0.2)];
            (cost, g)
        };
        let bounds = Bounds::new(dvector![-0.5, -0.1], dvector![0.5, 1.0]);
        let res = lbfgs_minimize(
            &mut eval,
            &dvector![0.5, 1.0],
            &bounds,
            &OptimizeOpts::default(),
        );
        for w in res.history.windows(2) {
            assert!(w[1].cost <= w[0].cost + 1e-15, "not monotone: {w:?}");
        }
        assert!(bounds.contains(&res.x));
    }
}
