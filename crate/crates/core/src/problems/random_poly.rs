//! Seeded random polynomial systems for verification: quadratic right-hand
//! sides with full analytic first and second derivatives, a linear initial
//! condition map, a quadratic integrand, and a quadratic terminal misfit.

use super::ProblemInstance;
use crate::algebra::MatrixData;
use crate::forward::{Method, StepperConfig};
use crate::problem::{DAEProblem, Objective, ParamMap, Vector};
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Deterministic random instance with `nd` states and `np` parameters:
/// `f_i = c_i + (L u)_i + (B p)_i + u^T Q_i u / 2 + u^T R_i p + p^T S_i p / 2`.
pub fn random_instance(seed: u64, nd: usize, np: usize, method: Method) -> ProblemInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sl = 0.5 / nd as f64;
    let sq = 0.4 / (nd as f64 * nd as f64);

    let cvec = Vector::from_fn(nd, |_, _| rng.gen_range(-0.2..0.2));
    let l = DMatrix::from_fn(nd, nd, |_, _| rng.gen_range(-1.0..1.0) * sl);
    let bmat = DMatrix::from_fn(nd, np, |_, _| rng.gen_range(-1.0..1.0) * sl);
    let mut q: Vec<DMatrix<f64>> = Vec::with_capacity(nd);
    let mut rten: Vec<DMatrix<f64>> = Vec::with_capacity(nd);
    let mut sten: Vec<DMatrix<f64>> = Vec::with_capacity(nd);
    for _ in 0..nd {
        let m = DMatrix::from_fn(nd, nd, |_, _| rng.gen_range(-1.0..1.0) * sq);
        q.push(&m + m.transpose());
        rten.push(DMatrix::from_fn(nd, np, |_, _| {
            rng.gen_range(-1.0..1.0) * sq
        }));
        let s = DMatrix::from_fn(np, np, |_, _| rng.gen_range(-1.0..1.0) * sq);
        sten.push(&s + s.transpose());
    }

    let problem = {
        let rhs = {
            let (cvec, l, bmat, q, rten, sten) = (
                cvec.clone(),
                l.clone(),
                bmat.clone(),
                q.clone(),
                rten.clone(),
                sten.clone(),
            );
            move |_: f64, u: &Vector, p: &Vector| -> Vector {
                let mut f = &cvec + &l * u + &bmat * p;
                for i in 0..u.len() {
                    f[i] += 0.5 * u.dot(&(&q[i] * u))
                        + u.dot(&(&rten[i] * p))
                        + 0.5 * p.dot(&(&sten[i] * p));
                }
                f
            }
        };
        let jac_u = {
            let (l, q, rten) = (l.clone(), q.clone(), rten.clone());
            move |_: f64, u: &Vector, p: &Vector| -> MatrixData {
                let mut j = l.clone();
                for i in 0..u.len() {
                    let row = (&q[i] * u) + (&rten[i] * p);
                    for cidx in 0..u.len() {
                        j[(i, cidx)] += row[cidx];
                    }
                }
                MatrixData::Dense(j)
            }
        };
        let jac_p = {
            let (bmat, rten, sten) = (bmat.clone(), rten.clone(), sten.clone());
            move |_: f64, u: &Vector, p: &Vector| -> MatrixData {
                let mut j = bmat.clone();
                for i in 0..u.len() {
                    let row = rten[i].tr_mul(u) + (&sten[i] * p);
                    for cidx in 0..p.len() {
                        j[(i, cidx)] += row[cidx];
                    }
                }
                MatrixData::Dense(j)
            }
        };
        DAEProblem::new(nd, np, rhs)
            .with_jac_state(jac_u)
            .with_jac_param(jac_p)
            .with_hess_uu_vv({
                let q = q.clone();
                move |_, _, _, v1, v2| {
                    let mut out = Vector::zeros(v2.len());
                    for i in 0..v1.len() {
                        out += (&q[i] * v2) * v1[i];
                    }
                    out
                }
            })
            .with_hess_up_vv({
                let rten = rten.clone();
                move |_, _, _, v1, v2| {
                    let mut out = Vector::zeros(rten[0].nrows());
                    for i in 0..v1.len() {
                        out += (&rten[i] * v2) * v1[i];
                    }
                    out
                }
            })
            .with_hess_pu_vv({
                let rten = rten.clone();
                move |_, _, _, v1, v2| {
                    let mut out = Vector::zeros(rten[0].ncols());
                    for i in 0..v1.len() {
                        out += rten[i].tr_mul(v2) * v1[i];
                    }
                    out
                }
            })
            .with_hess_pp_vv({
                let sten = sten.clone();
                move |_, _, _, v1, v2| {
                    let mut out = Vector::zeros(v2.len());
                    for i in 0..v1.len() {
                        out += (&sten[i] * v2) * v1[i];
                    }
                    out
                }
            })
    };

    // quadratic integrand r = u^T G u / 2 + u^T C p + p^T D p / 2
    let gm = {
        let m = DMatrix::from_fn(nd, nd, |_, _| rng.gen_range(-0.2..0.2));
        &m + m.transpose()
    };
    let cm = DMatrix::from_fn(nd, np, |_, _| rng.gen_range(-0.2..0.2));
    let dm = {
        let m = DMatrix::from_fn(np, np, |_, _| rng.gen_range(-0.2..0.2));
        &m + m.transpose()
    };
    let target = Vector::from_fn(nd, |_, _| rng.gen_range(-0.5..0.5));
    let objective = {
        let (g1, c1, d1) = (gm.clone(), cm.clone(), dm.clone());
        let (g2, c2) = (gm.clone(), cm.clone());
        let (g3, c3, d3) = (gm.clone(), cm.clone(), dm.clone());
        let (c4, d4) = (cm.clone(), dm.clone());
        let (t1, t2) = (target.clone(), target.clone());
        Objective::new()
            .with_terminal(
                move |u, _| 0.5 * (u - &t1).norm_squared(),
                move |u, _| u - &t2,
            )
            .with_terminal_hess_state_only(|_, _, w| w.clone())
            .with_integrand(
                move |_, u, p| {
                    0.5 * u.dot(&(&g1 * u)) + u.dot(&(&c1 * p)) + 0.5 * p.dot(&(&d1 * p))
                },
                move |_, u, p| &g2 * u + &c2 * p,
                move |_, u, p| c3.tr_mul(u) + &d3 * p,
            )
            .with_integrand_hessians(
                move |_, _, _, w| &g3 * w,
                move |_, _, _, v| &c4 * v,
                {
                    let cm = cm.clone();
                    move |_, _, _, w| cm.tr_mul(w)
                },
                move |_, _, _, v| &d4 * v,
            )
    };

    let eta0 = Vector::from_fn(nd, |_, _| rng.gen_range(-0.5..0.5));
    let emat = DMatrix::from_fn(nd, np, |_, _| rng.gen_range(-0.4..0.4));
    let param_map = ParamMap::new(
        nd,
        np,
        {
            let (eta0, emat) = (eta0.clone(), emat.clone());
            move |p| &eta0 + &emat * p
        },
        move |_| MatrixData::Dense(emat.clone()),
    );
    let p0 = Vector::from_fn(np, |_, _| rng.gen_range(-0.5..0.5));

    let mut config = StepperConfig::new(method, 0.0, 0.8, 8);
    config.newton.rtol = 1e-14;
    config.newton.atol = 1e-15;

    ProblemInstance {
        name: format!("random-poly-{seed}"),
        problem,
        objective,
        param_map,
        p0,
        bounds: None,
        config,
    }
}

/// Dimensions used by the randomized verification suite: `nd <= 8`, `np <= 4`.
pub fn suite_dims(case: u64) -> (usize, usize) {
    let nd = 2 + (case % 7) as usize;
    let np = 1 + (case % 4) as usize;
    (nd, np)
}
