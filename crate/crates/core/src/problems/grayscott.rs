//! Gray-Scott reaction-diffusion on a periodic square, semi-discretized
//! with the centered 5-point Laplacian. The registered inverse problem
//! recovers the initial condition from the final state: parameters are the
//! initial condition itself (identity parameter map), observations come
//! from a reference run, and the objective is the squared misfit.

use super::ProblemInstance;
use crate::algebra::{MatrixData, SparseTriplets};
use crate::forward::{integrate, Method, StepperConfig};
use crate::problem::{DAEProblem, Objective, ParamMap, Vector};

#[derive(Debug, Clone)]
pub struct GrayScottProblem {
    pub n: usize,
    pub d1: f64,
    pub d2: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub t_final: f64,
}

impl Default for GrayScottProblem {
    fn default() -> Self {
        Self {
            n: 32,
            d1: 8e-5,
            d2: 4e-5,
            gamma: 0.024,
            kappa: 0.06,
            t_final: 5.0,
        }
    }
}

/// Reference initial condition: a bump of the second species inside
/// `[1, 1.5]^2`, `v0 = sin^2(4 pi x) cos^2(4 pi y) / 4`, `u0 = 1 - 2 v0`.
pub fn reference_initial(n: usize) -> Vector {
    let dx = 2.0 / n as f64;
    let nn = n * n;
    let mut state = Vector::zeros(2 * nn);
    for i in 0..n {
        for j in 0..n {
            let x = i as f64 * dx;
            let y = j as f64 * dx;
            let v = if (1.0..=1.5).contains(&x) && (1.0..=1.5).contains(&y) {
                let s = (4.0 * std::f64::consts::PI * x).sin();
                let c = (4.0 * std::f64::consts::PI * y).cos();
                s * s * c * c / 4.0
            } else {
                0.0
            };
            state[i * n + j] = 1.0 - 2.0 * v;
            state[nn + i * n + j] = v;
        }
    }
    state
}

/// Smooth deterministic perturbation of the reference, used as the starting
/// guess for the inversion.
pub fn perturbed_initial(n: usize) -> Vector {
    let dx = 2.0 / n as f64;
    let nn = n * n;
    let mut state = reference_initial(n);
    for i in 0..n {
        for j in 0..n {
            let x = i as f64 * dx;
            let y = j as f64 * dx;
            let pi = std::f64::consts::PI;
            state[i * n + j] += 0.05 * (pi * x * 0.5).sin() * (pi * y * 0.5).sin();
            state[nn + i * n + j] += 0.02 * (pi * x).sin() * (pi * y * 0.5).cos();
        }
    }
    state
}

impl GrayScottProblem {
    pub fn dim_state(&self) -> usize {
        2 * self.n * self.n
    }

    /// The dynamical system alone (no objective), reusable for forward runs.
    pub fn dae(&self) -> DAEProblem {
        let (n, d1, d2, gamma, kappa) = (self.n, self.d1, self.d2, self.gamma, self.kappa);
        let nn = n * n;
        let dx = 2.0 / n as f64;
        let idx2 = 1.0 / (dx * dx);

        let rhs = move |_: f64, state: &Vector, _: &Vector| -> Vector {
            let mut f = Vector::zeros(2 * nn);
            for i in 0..n {
                let ip = (i + 1) % n;
                let im = (i + n - 1) % n;
                for j in 0..n {
                    let jp = (j + 1) % n;
                    let jm = (j + n - 1) % n;
                    let c = i * n + j;
                    let u = state[c];
                    let v = state[nn + c];
                    let lap_u = (state[ip * n + j]
                        + state[im * n + j]
                        + state[i * n + jp]
                        + state[i * n + jm]
                        - 4.0 * u)
                        * idx2;
                    let lap_v = (state[nn + ip * n + j]
                        + state[nn + im * n + j]
                        + state[nn + i * n + jp]
                        + state[nn + i * n + jm]
                        - 4.0 * v)
                        * idx2;
                    let uvv = u * v * v;
                    f[c] = d1 * lap_u - uvv + gamma * (1.0 - u);
                    f[nn + c] = d2 * lap_v + uvv - (gamma + kappa) * v;
                }
            }
            f
        };

        let jac = move |_: f64, state: &Vector, _: &Vector| -> MatrixData {
            let mut t = SparseTriplets::new(2 * nn, 2 * nn);
            for i in 0..n {
                let ip = (i + 1) % n;
                let im = (i + n - 1) % n;
                for j in 0..n {
                    let jp = (j + 1) % n;
                    let jm = (j + n - 1) % n;
                    let c = i * n + j;
                    let u = state[c];
                    let v = state[nn + c];
                    // u-equation row
                    t.push(c, c, -4.0 * d1 * idx2 - v * v - gamma);
                    t.push(c, ip * n + j, d1 * idx2);
                    t.push(c, im * n + j, d1 * idx2);
                    t.push(c, i * n + jp, d1 * idx2);
                    t.push(c, i * n + jm, d1 * idx2);
                    t.push(c, nn + c, -2.0 * u * v);
                    // v-equation row
                    t.push(
                        nn + c,
                        nn + c,
                        -4.0 * d2 * idx2 + 2.0 * u * v - (gamma + kappa),
                    );
                    t.push(nn + c, nn + ip * n + j, d2 * idx2);
                    t.push(nn + c, nn + im * n + j, d2 * idx2);
                    t.push(nn + c, nn + i * n + jp, d2 * idx2);
                    t.push(nn + c, nn + i * n + jm, d2 * idx2);
                    t.push(nn + c, c, v * v);
                }
            }
            MatrixData::Sparse(t)
        };

        // only the reaction terms are nonlinear; the Hessian is local per cell
        let hess_uu = move |_: f64, state: &Vector, _: &Vector, l: &Vector, w: &Vector| -> Vector {
            let mut out = Vector::zeros(2 * nn);
            for c in 0..nn {
                let u = state[c];
                let v = state[nn + c];
                let dl = l[nn + c] - l[c];
                out[c] = 2.0 * v * dl * w[nn + c];
                out[nn + c] = 2.0 * dl * (v * w[c] + u * w[nn + c]);
            }
            out
        };

        DAEProblem::new(2 * nn, 2 * nn, rhs)
            .with_jac_state(jac)
            .with_jac_param(move |_, _, _| MatrixData::Sparse(SparseTriplets::new(2 * nn, 2 * nn)))
            .with_hess_uu_vv(hess_uu)
            .with_hess_up_vv(move |_, _, _, _, _| Vector::zeros(2 * nn))
            .with_hess_pu_vv(move |_, _, _, _, _| Vector::zeros(2 * nn))
            .with_hess_pp_vv(move |_, _, _, _, _| Vector::zeros(2 * nn))
    }

    /// Inverse-problem instance: integrate the reference initial condition
    /// to `t_final` with the given method to synthesize observations, then
    /// expose the misfit objective with the perturbed start.
    pub fn instance(&self, method: Method, steps: usize) -> ProblemInstance {
        let nd = self.dim_state();
        let problem = self.dae();
        let config = StepperConfig::new(method, 0.0, self.t_final, steps);
        let param_map = ParamMap::identity(nd);

        let reference = reference_initial(self.n);
        let forward_obj =
            Objective::new().with_terminal(|_, _| 0.0, move |u, _| Vector::zeros(u.len()));
        let (traj, _) = integrate(&problem, &forward_obj, &param_map, &config, &reference)
            .expect("reference forward run failed");
        let observed = traj.final_state().clone();

        let obs1 = observed.clone();
        let obs2 = observed;
        let objective = Objective::new()
            .with_terminal(
                move |u, _| (u - &obs1).norm_squared(),
                move |u, _| (u - &obs2) * 2.0,
            )
            .with_terminal_hess_state_only(|_, _, w| w * 2.0);

        ProblemInstance {
            name: "grayscott".to_string(),
            problem,
            objective,
            param_map,
            p0: perturbed_initial(self.n),
            bounds: None,
            config,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{fd, validate_derivatives};
    use rand::prelude::*;

    #[test]
    fn rhs_matches_componentwise_formula() {
        // uniform state: Laplacian vanishes, only reactions remain
        let gs = GrayScottProblem {
            n: 8,
            ..Default::default()
        };
        let dae = gs.dae();
        let nn = 64;
        let mut state = Vector::zeros(2 * nn);
        for c in 0..nn {
            state[c] = 0.8;
            state[nn + c] = 0.1;
        }
        let f = dae.rhs(0.0, &state, &Vector::zeros(2 * nn));
        let uvv = 0.8 * 0.1 * 0.1;
        for c in 0..nn {
            assert!((f[c] - (-uvv + gs.gamma * 0.2)).abs() < 1e-15);
            assert!((f[nn + c] - (uvv - (gs.gamma + gs.kappa) * 0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn jacobian_validates_on_16x16_grid() {
        let gs = GrayScottProblem {
            n: 16,
            ..Default::default()
        };
        let inst = gs.instance(Method::Rk4, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let state = Vector::from_fn(gs.dim_state(), |i, _| {
            if i < gs.dim_state() / 2 {
                0.5 + 0.4 * rng.gen::<f64>()
            } else {
                0.3 * rng.gen::<f64>()
            }
        });
        let report = validate_derivatives(
            &inst.problem,
            &inst.objective,
            (0.0, &state, &inst.p0),
            1e-6,
        );
        assert!(report.all_passed(), "{report}");
        assert!(report.entry("jac_state").unwrap().max_rel_error < 1e-6);
    }

    #[test]
    fn hessian_product_matches_fd_of_jacobian() {
        let gs = GrayScottProblem {
            n: 6,
            ..Default::default()
        };
        let dae = gs.dae();
        let nd = gs.dim_state();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let state = Vector::from_fn(nd, |_, _| 0.2 + 0.6 * rng.gen::<f64>());
        let p = Vector::zeros(nd);
        let l = Vector::from_fn(nd, |_, _| rng.gen_range(-1.0..1.0));
        let w = Vector::from_fn(nd, |_, _| rng.gen_range(-1.0..1.0));
        let got = dae.hess_uu_vv(0.0, &state, &p, &l, &w);
        let jac_t_l = |x: &Vector| -> Vector {
            match dae.jac_state(0.0, x, &p) {
                MatrixData::Dense(m) => m.tr_mul(&l),
                MatrixData::Sparse(t) => t.to_csr().matvec_transpose(&l),
            }
        };
        let want = fd::directional(jac_t_l, &state, &w, 1e-6);
        assert!(
            (&got - &want).norm() <= 1e-7 * want.norm().max(1.0),
            "hess mismatch {:?}",
            (&got - &want).norm()
        );
    }

    #[test]
    fn reference_initial_matches_bump_formula() {
        let n = 20;
        let ic = reference_initial(n);
        let nn = n * n;
        let dx = 2.0 / n as f64;
        // a point inside the bump window
        let (i, j) = (11, 12); // x = 1.1, y = 1.2
        let x = i as f64 * dx;
        let y = j as f64 * dx;
        let v = (4.0 * std::f64::consts::PI * x).sin().powi(2)
            * (4.0 * std::f64::consts::PI * y).cos().powi(2)
            / 4.0;
        assert!((ic[nn + i * n + j] - v).abs() < 1e-15);
        assert!((ic[i * n + j] - (1.0 - 2.0 * v)).abs() < 1e-15);
        // outside the window
        let (i, j) = (2, 3);
        assert_eq!(ic[nn + i * n + j], 0.0);
        assert_eq!(ic[i * n + j], 1.0);
    }

    #[test]
    fn inverse_instance_has_zero_cost_at_reference() {
        let gs = GrayScottProblem {
            n: 8,
            ..Default::default()
        };
        let inst = gs.instance(Method::Rk4, 5);
        let c = crate::driver::cost(&inst.eval_context(), &reference_initial(8)).unwrap();
        assert_eq!(c, 0.0);
    }
}
