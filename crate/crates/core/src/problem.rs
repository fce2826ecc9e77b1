//! Dynamical system, objective functional, and derivative callbacks.
//!
//! A [`DAEProblem`] is the system `M u' = f(t, u; p)` together with whatever
//! derivative callbacks the chosen analysis needs. Jacobians fall back to
//! finite differences when absent; second-derivative (vector-Hessian-vector)
//! callbacks have no fallback and are checked eagerly before a second-order
//! sweep starts.

use crate::algebra::{MassMatrix, MatrixData};
use nalgebra::DVector;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

pub type Vector = DVector<f64>;

/// `f(t, u, p) -> R^{N_d}`
pub type RhsFn = dyn Fn(f64, &Vector, &Vector) -> Vector + Send + Sync;
/// `(t, u, p) -> Jacobian` (dense or sparse triplets)
pub type JacFn = dyn Fn(f64, &Vector, &Vector) -> MatrixData + Send + Sync;
/// Vector-Hessian-vector product `(t, u, p, v1, v2) -> v1^T f_xy v2`
pub type HessVvFn = dyn Fn(f64, &Vector, &Vector, &Vector, &Vector) -> Vector + Send + Sync;
/// Terminal scalar `(u_N, p) -> psi`
pub type TerminalFn = dyn Fn(&Vector, &Vector) -> f64 + Send + Sync;
/// Terminal gradient `(u_N, p) -> column vector`
pub type TerminalGradFn = dyn Fn(&Vector, &Vector) -> Vector + Send + Sync;
/// Terminal Hessian product `(u_N, p, dir) -> column vector`
pub type TerminalHessFn = dyn Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync;
/// Integrand `r(t, u, p) -> scalar`
pub type IntegrandFn = dyn Fn(f64, &Vector, &Vector) -> f64 + Send + Sync;
/// Integrand gradient `(t, u, p) -> column vector`
pub type IntegrandGradFn = dyn Fn(f64, &Vector, &Vector) -> Vector + Send + Sync;
/// Integrand Hessian product `(t, u, p, dir) -> column vector`
pub type IntegrandHessFn = dyn Fn(f64, &Vector, &Vector, &Vector) -> Vector + Send + Sync;
/// Initial condition map `p -> eta(p)`
pub type EtaFn = dyn Fn(&Vector) -> Vector + Send + Sync;
/// Initial condition Jacobian `p -> eta_p`
pub type EtaJacFn = dyn Fn(&Vector) -> MatrixData + Send + Sync;
/// `(p, lambda, sigma) -> lambda^T eta_pp sigma` in `R^{N_p}`
pub type EtaHessFn = dyn Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("missing callbacks required for this operation: {}", .0.join(", "))]
    MissingCallbacks(Vec<String>),
    #[error("invalid problem definition: {0}")]
    Invalid(String),
}

/// The dynamical system `M u' = f(t, u; p)` with its derivative callbacks.
#[derive(Clone)]
pub struct DAEProblem {
    pub dim_state: usize,
    pub dim_param: usize,
    pub mass: MassMatrix,
    rhs: Arc<RhsFn>,
    jac_state: Option<Arc<JacFn>>,
    jac_param: Option<Arc<JacFn>>,
    hess_uu_vv: Option<Arc<HessVvFn>>,
    hess_up_vv: Option<Arc<HessVvFn>>,
    hess_pu_vv: Option<Arc<HessVvFn>>,
    hess_pp_vv: Option<Arc<HessVvFn>>,
}

impl fmt::Debug for DAEProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DAEProblem")
            .field("dim_state", &self.dim_state)
            .field("dim_param", &self.dim_param)
            .field("analytic_jac_state", &self.jac_state.is_some())
            .field("analytic_jac_param", &self.jac_param.is_some())
            .finish()
    }
}

impl DAEProblem {
    pub fn new(
        dim_state: usize,
        dim_param: usize,
        rhs: impl Fn(f64, &Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        assert!(dim_state > 0, "state dimension must be positive");
        Self {
            dim_state,
            dim_param,
            mass: MassMatrix::Identity,
            rhs: Arc::new(rhs),
            jac_state: None,
            jac_param: None,
            hess_uu_vv: None,
            hess_up_vv: None,
            hess_pu_vv: None,
            hess_pp_vv: None,
        }
    }

    pub fn with_mass(mut self, mass: MassMatrix) -> Self {
        self.mass = mass;
        self
    }

    pub fn with_jac_state(
        mut self,
        f: impl Fn(f64, &Vector, &Vector) -> MatrixData + Send + Sync + 'static,
    ) -> Self {
        self.jac_state = Some(Arc::new(f));
        self
    }

    pub fn with_jac_param(
        mut self,
        f: impl Fn(f64, &Vector, &Vector) -> MatrixData + Send + Sync + 'static,
    ) -> Self {
        self.jac_param = Some(Arc::new(f));
        self
    }

    pub fn with_hess_uu_vv(
        mut self,
        f: impl Fn(f64, &Vector, &Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        self.hess_uu_vv = Some(Arc::new(f));
        self
    }

    pub fn with_hess_up_vv(
        mut self,
        f: impl Fn(f64, &Vector, &Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        self.hess_up_vv = Some(Arc::new(f));
        self
    }

    pub fn with_hess_pu_vv(
        mut self,
        f: impl Fn(f64, &Vector, &Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        self.hess_pu_vv = Some(Arc::new(f));
        self
    }

    pub fn with_hess_pp_vv(
        mut self,
        f: impl Fn(f64, &Vector, &Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        self.hess_pp_vv = Some(Arc::new(f));
        self
    }

    pub fn rhs(&self, t: f64, u: &Vector, p: &Vector) -> Vector {
        (self.rhs)(t, u, p)
    }

    pub fn has_analytic_jac_state(&self) -> bool {
        self.jac_state.is_some()
    }

    pub fn has_analytic_jac_param(&self) -> bool {
        self.jac_param.is_some()
    }

    /// State Jacobian `f_u`, analytic when supplied and a central
    /// finite-difference fallback otherwise.
    pub fn jac_state(&self, t: f64, u: &Vector, p: &Vector) -> MatrixData {
        match &self.jac_state {
            Some(j) => j(t, u, p),
            None => MatrixData::Dense(fd::jacobian(|x| self.rhs(t, x, p), u)),
        }
    }

    /// Parameter Jacobian `f_p`, with the same fallback policy.
    pub fn jac_param(&self, t: f64, u: &Vector, p: &Vector) -> MatrixData {
        match &self.jac_param {
            Some(j) => j(t, u, p),
            None => MatrixData::Dense(fd::jacobian(|q| self.rhs(t, u, q), p)),
        }
    }

    /// `f_p^T v` without forming the full matrix when a callback exists.
    pub fn jac_param_tvec(&self, t: f64, u: &Vector, p: &Vector, v: &Vector) -> Vector {
        if self.dim_param == 0 {
            return Vector::zeros(0);
        }
        match self.jac_param(t, u, p) {
            MatrixData::Dense(m) => m.transpose() * v,
            MatrixData::Sparse(tr) => tr.to_csr().matvec_transpose(v),
        }
    }

    pub fn hess_uu_vv(&self, t: f64, u: &Vector, p: &Vector, v1: &Vector, v2: &Vector) -> Vector {
        self.hess_uu_vv.as_ref().expect("hess_uu_vv missing")(t, u, p, v1, v2)
    }

    pub fn hess_up_vv(&self, t: f64, u: &Vector, p: &Vector, v1: &Vector, v2: &Vector) -> Vector {
        self.hess_up_vv.as_ref().expect("hess_up_vv missing")(t, u, p, v1, v2)
    }

    pub fn hess_pu_vv(&self, t: f64, u: &Vector, p: &Vector, v1: &Vector, v2: &Vector) -> Vector {
        self.hess_pu_vv.as_ref().expect("hess_pu_vv missing")(t, u, p, v1, v2)
    }

    pub fn hess_pp_vv(&self, t: f64, u: &Vector, p: &Vector, v1: &Vector, v2: &Vector) -> Vector {
        self.hess_pp_vv.as_ref().expect("hess_pp_vv missing")(t, u, p, v1, v2)
    }

    /// Configuration-time check for second-order sweeps: collect every
    /// missing Hessian-product callback instead of failing mid-sweep.
    /// `with_params` selects whether the mixed and parameter blocks are
    /// needed (they are not for initial-condition directions).
    pub fn require_second_order(&self, with_params: bool) -> Result<(), ProblemError> {
        let mut missing = Vec::new();
        if self.hess_uu_vv.is_none() {
            missing.push("hess_uu_vv".to_string());
        }
        if with_params {
            if self.hess_up_vv.is_none() {
                missing.push("hess_up_vv".to_string());
            }
            if self.hess_pu_vv.is_none() {
                missing.push("hess_pu_vv".to_string());
            }
            if self.hess_pp_vv.is_none() {
                missing.push("hess_pp_vv".to_string());
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(ProblemError::MissingCallbacks(missing))
        }
    }
}

/// Scalar objective: terminal part `psi(u_N; p)`, integral part
/// `int r(t, u; p) dt`, or both.
#[derive(Clone, Default)]
pub struct Objective {
    terminal: Option<Arc<TerminalFn>>,
    terminal_grad_state: Option<Arc<TerminalGradFn>>,
    terminal_grad_param: Option<Arc<TerminalGradFn>>,
    psi_uu_w: Option<Arc<TerminalHessFn>>,
    psi_up_w: Option<Arc<TerminalHessFn>>,
    psi_pu_v: Option<Arc<TerminalHessFn>>,
    psi_pp_v: Option<Arc<TerminalHessFn>>,
    integrand: Option<Arc<IntegrandFn>>,
    integrand_grad_state: Option<Arc<IntegrandGradFn>>,
    integrand_grad_param: Option<Arc<IntegrandGradFn>>,
    r_uu_v: Option<Arc<IntegrandHessFn>>,
    r_up_v: Option<Arc<IntegrandHessFn>>,
    r_pu_v: Option<Arc<IntegrandHessFn>>,
    r_pp_v: Option<Arc<IntegrandHessFn>>,
}

impl fmt::Debug for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Objective")
            .field("terminal", &self.terminal.is_some())
            .field("integrand", &self.integrand.is_some())
            .finish()
    }
}

impl Objective {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_terminal(
        mut self,
        psi: impl Fn(&Vector, &Vector) -> f64 + Send + Sync + 'static,
        grad_state: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        self.terminal = Some(Arc::new(psi));
        self.terminal_grad_state = Some(Arc::new(grad_state));
        self
    }

    pub fn with_terminal_grad_param(
        mut self,
        g: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        self.terminal_grad_param = Some(Arc::new(g));
        self
    }

    pub fn with_terminal_hessians(
        mut self,
        psi_uu_w: impl Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
        psi_up_w: impl Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
        psi_pu_v: impl Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
        psi_pp_v: impl Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        self.psi_uu_w = Some(Arc::new(psi_uu_w));
        self.psi_up_w = Some(Arc::new(psi_up_w));
        self.psi_pu_v = Some(Arc::new(psi_pu_v));
        self.psi_pp_v = Some(Arc::new(psi_pp_v));
        self
    }

    /// Terminal Hessian products for a state-only objective; the mixed and
    /// parameter blocks are zero.
    pub fn with_terminal_hess_state_only(
        self,
        psi_uu_w: impl Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        self.with_terminal_hessians(
            psi_uu_w,
            |_, p, _| Vector::zeros(p.len()),
            |u, _, _| Vector::zeros(u.len()),
            |_, p, _| Vector::zeros(p.len()),
        )
    }

    pub fn with_integrand(
        mut self,
        r: impl Fn(f64, &Vector, &Vector) -> f64 + Send + Sync + 'static,
        grad_state: impl Fn(f64, &Vector, &Vector) -> Vector + Send + Sync + 'static,
        grad_param: impl Fn(f64, &Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        self.integrand = Some(Arc::new(r));
        self.integrand_grad_state = Some(Arc::new(grad_state));
        self.integrand_grad_param = Some(Arc::new(grad_param));
        self
    }

    pub fn with_integrand_hessians(
        mut self,
        r_uu_v: impl Fn(f64, &Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
        r_up_v: impl Fn(f64, &Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
        r_pu_v: impl Fn(f64, &Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
        r_pp_v: impl Fn(f64, &Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        self.r_uu_v = Some(Arc::new(r_uu_v));
        self.r_up_v = Some(Arc::new(r_up_v));
        self.r_pu_v = Some(Arc::new(r_pu_v));
        self.r_pp_v = Some(Arc::new(r_pp_v));
        self
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.terminal.is_none() && self.integrand.is_none() {
            return Err(ProblemError::Invalid(
                "objective needs a terminal part or an integrand".into(),
            ));
        }
        if self.terminal.is_some() && self.terminal_grad_state.is_none() {
            return Err(ProblemError::Invalid(
                "terminal objective requires terminal_grad_state".into(),
            ));
        }
        if self.integrand.is_some()
            && (self.integrand_grad_state.is_none() || self.integrand_grad_param.is_none())
        {
            return Err(ProblemError::Invalid(
                "integrand requires integrand_grad_state and integrand_grad_param".into(),
            ));
        }
        Ok(())
    }

    pub fn has_terminal(&self) -> bool {
        self.terminal.is_some()
    }

    pub fn has_integrand(&self) -> bool {
        self.integrand.is_some()
    }

    pub fn terminal(&self, u: &Vector, p: &Vector) -> f64 {
        self.terminal.as_ref().map_or(0.0, |f| f(u, p))
    }

    /// `(d psi / d u)^T` at the final state; zero when there is no terminal part.
    pub fn terminal_grad_state(&self, u: &Vector, p: &Vector) -> Vector {
        match &self.terminal_grad_state {
            Some(f) => f(u, p),
            None => Vector::zeros(u.len()),
        }
    }

    /// `(d psi / d p)^T`; zero when psi has no explicit parameter dependence.
    pub fn terminal_grad_param(&self, u: &Vector, p: &Vector) -> Vector {
        match &self.terminal_grad_param {
            Some(f) => f(u, p),
            None => Vector::zeros(p.len()),
        }
    }

    pub fn psi_uu_w(&self, u: &Vector, p: &Vector, w: &Vector) -> Vector {
        match &self.psi_uu_w {
            Some(f) => f(u, p, w),
            None => Vector::zeros(u.len()),
        }
    }

    pub fn psi_up_w(&self, u: &Vector, p: &Vector, w: &Vector) -> Vector {
        match &self.psi_up_w {
            Some(f) => f(u, p, w),
            None => Vector::zeros(p.len()),
        }
    }

    pub fn psi_pu_v(&self, u: &Vector, p: &Vector, v: &Vector) -> Vector {
        match &self.psi_pu_v {
            Some(f) => f(u, p, v),
            None => Vector::zeros(u.len()),
        }
    }

    pub fn psi_pp_v(&self, u: &Vector, p: &Vector, v: &Vector) -> Vector {
        match &self.psi_pp_v {
            Some(f) => f(u, p, v),
            None => Vector::zeros(p.len()),
        }
    }

    pub fn integrand(&self, t: f64, u: &Vector, p: &Vector) -> f64 {
        self.integrand.as_ref().map_or(0.0, |f| f(t, u, p))
    }

    /// `r_u^T` as a column vector; zero without an integrand.
    pub fn integrand_grad_state(&self, t: f64, u: &Vector, p: &Vector) -> Vector {
        match &self.integrand_grad_state {
            Some(f) => f(t, u, p),
            None => Vector::zeros(u.len()),
        }
    }

    pub fn integrand_grad_param(&self, t: f64, u: &Vector, p: &Vector) -> Vector {
        match &self.integrand_grad_param {
            Some(f) => f(t, u, p),
            None => Vector::zeros(p.len()),
        }
    }

    pub fn r_uu_v(&self, t: f64, u: &Vector, p: &Vector, v: &Vector) -> Vector {
        match &self.r_uu_v {
            Some(f) => f(t, u, p, v),
            None => Vector::zeros(u.len()),
        }
    }

    pub fn r_up_v(&self, t: f64, u: &Vector, p: &Vector, v: &Vector) -> Vector {
        match &self.r_up_v {
            Some(f) => f(t, u, p, v),
            None => Vector::zeros(u.len()),
        }
    }

    pub fn r_pu_v(&self, t: f64, u: &Vector, p: &Vector, v: &Vector) -> Vector {
        match &self.r_pu_v {
            Some(f) => f(t, u, p, v),
            None => Vector::zeros(p.len()),
        }
    }

    pub fn r_pp_v(&self, t: f64, u: &Vector, p: &Vector, v: &Vector) -> Vector {
        match &self.r_pp_v {
            Some(f) => f(t, u, p, v),
            None => Vector::zeros(p.len()),
        }
    }

    /// Second-order sweeps need the Hessian products of every part that is
    /// present; report what is missing before starting.
    pub fn require_second_order(&self, with_params: bool) -> Result<(), ProblemError> {
        let mut missing = Vec::new();
        if self.terminal.is_some() && self.psi_uu_w.is_none() {
            missing.push("terminal psi_uu_w".to_string());
        }
        if self.terminal.is_some() && with_params && self.terminal_grad_param.is_some() {
            if self.psi_up_w.is_none() {
                missing.push("terminal psi_up_w".to_string());
            }
            if self.psi_pu_v.is_none() {
                missing.push("terminal psi_pu_v".to_string());
            }
            if self.psi_pp_v.is_none() {
                missing.push("terminal psi_pp_v".to_string());
            }
        }
        if self.integrand.is_some() {
            if self.r_uu_v.is_none() {
                missing.push("integrand r_uu_v".to_string());
            }
            if with_params {
                if self.r_up_v.is_none() {
                    missing.push("integrand r_up_v".to_string());
                }
                if self.r_pu_v.is_none() {
                    missing.push("integrand r_pu_v".to_string());
                }
                if self.r_pp_v.is_none() {
                    missing.push("integrand r_pp_v".to_string());
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(ProblemError::MissingCallbacks(missing))
        }
    }
}

/// Map from parameters to the initial condition, `u_0 = eta(p)`.
/// The default map ignores `p`, so its derivative contributions vanish
/// exactly in the gradient and Hessian assembly.
#[derive(Clone)]
pub struct ParamMap {
    pub dim_state: usize,
    pub dim_param: usize,
    eta: Arc<EtaFn>,
    eta_jac: Option<Arc<EtaJacFn>>,
    eta_hess_vec: Option<Arc<EtaHessFn>>,
}

impl fmt::Debug for ParamMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamMap")
            .field("dim_state", &self.dim_state)
            .field("dim_param", &self.dim_param)
            .field("has_eta_jac", &self.eta_jac.is_some())
            .finish()
    }
}

impl ParamMap {
    /// Initial condition independent of the parameters.
    pub fn constant(u0: Vector, dim_param: usize) -> Self {
        let dim_state = u0.len();
        Self {
            dim_state,
            dim_param,
            eta: Arc::new(move |_| u0.clone()),
            eta_jac: None,
            eta_hess_vec: None,
        }
    }

    /// The parameters are the initial condition: `eta(p) = p`, `eta_p = I`.
    pub fn identity(dim: usize) -> Self {
        Self {
            dim_state: dim,
            dim_param: dim,
            eta: Arc::new(|p: &Vector| p.clone()),
            eta_jac: Some(Arc::new(move |_| {
                MatrixData::Sparse(crate::algebra::SparseTriplets {
                    nrows: dim,
                    ncols: dim,
                    entries: (0..dim).map(|i| (i, i, 1.0)).collect(),
                })
            })),
            eta_hess_vec: None,
        }
    }

    pub fn new(
        dim_state: usize,
        dim_param: usize,
        eta: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        eta_jac: impl Fn(&Vector) -> MatrixData + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim_state,
            dim_param,
            eta: Arc::new(eta),
            eta_jac: Some(Arc::new(eta_jac)),
            eta_hess_vec: None,
        }
    }

    pub fn with_eta_hess_vec(
        mut self,
        f: impl Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        self.eta_hess_vec = Some(Arc::new(f));
        self
    }

    pub fn initial_state(&self, p: &Vector) -> Vector {
        (self.eta)(p)
    }

    /// `eta_p sigma` in state space; zero for the default map.
    pub fn eta_jac_vec(&self, p: &Vector, sigma: &Vector) -> Vector {
        match &self.eta_jac {
            Some(j) => j(p).matvec(sigma),
            None => Vector::zeros(self.dim_state),
        }
    }

    /// `eta_p^T v` in parameter space; zero for the default map.
    pub fn eta_jac_tvec(&self, p: &Vector, v: &Vector) -> Vector {
        match &self.eta_jac {
            Some(j) => match j(p) {
                MatrixData::Dense(m) => m.transpose() * v,
                MatrixData::Sparse(t) => t.to_csr().matvec_transpose(v),
            },
            None => Vector::zeros(self.dim_param),
        }
    }

    /// `lambda^T eta_pp sigma` in parameter space; zero by default.
    pub fn eta_hess_vec(&self, p: &Vector, lambda: &Vector, sigma: &Vector) -> Vector {
        match &self.eta_hess_vec {
            Some(f) => f(p, lambda, sigma),
            None => Vector::zeros(self.dim_param),
        }
    }
}

/// Central finite differences with the componentwise step
/// `eps_j = eps_machine^(1/3) * max(1, |x_j|)`.
pub mod fd {
    use super::Vector;
    use nalgebra::DMatrix;

    pub fn step_for(x: f64) -> f64 {
        f64::EPSILON.cbrt() * x.abs().max(1.0)
    }

    /// Central difference of a vector function along coordinate `j`.
    pub fn partial<F: Fn(&Vector) -> Vector>(f: F, x: &Vector, j: usize) -> Vector {
        let eps = step_for(x[j]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += eps;
        xm[j] -= eps;
        (f(&xp) - f(&xm)) / (2.0 * eps)
    }

    /// Dense Jacobian by central differences, column by column.
    pub fn jacobian<F: Fn(&Vector) -> Vector>(f: F, x: &Vector) -> DMatrix<f64> {
        let fx = f(x);
        let mut jac = DMatrix::zeros(fx.len(), x.len());
        for j in 0..x.len() {
            jac.set_column(j, &partial(&f, x, j));
        }
        jac
    }

    /// Gradient of a scalar function by central differences.
    pub fn grad_scalar<F: Fn(&Vector) -> f64>(f: F, x: &Vector) -> Vector {
        let mut g = Vector::zeros(x.len());
        for j in 0..x.len() {
            let eps = step_for(x[j]);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += eps;
            xm[j] -= eps;
            g[j] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    /// Central difference of a vector function along an arbitrary direction.
    pub fn directional<F: Fn(&Vector) -> Vector>(f: F, x: &Vector, dir: &Vector, h: f64) -> Vector {
        let xp = x + dir * h;
        let xm = x - dir * h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }
}

/// One row of a [`ValidationReport`].
#[derive(Debug, Clone)]
pub struct ValidationEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
    pub note: Option<String>,
}

/// Result of comparing user-supplied derivative callbacks against central
/// finite differences of their parent quantities.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub entries: Vec<ValidationEntry>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&ValidationEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn push_compare(&mut self, name: &str, got: &Vector, want: &Vector, tol: f64) {
        if got.iter().any(|v| !v.is_finite()) {
            self.entries.push(ValidationEntry {
                name: name.to_string(),
                max_rel_error: f64::INFINITY,
                passed: false,
                note: Some("non-finite callback output".to_string()),
            });
            return;
        }
        if want.iter().any(|v| !v.is_finite()) {
            self.entries.push(ValidationEntry {
                name: name.to_string(),
                max_rel_error: f64::INFINITY,
                passed: false,
                note: Some("non-finite reference value".to_string()),
            });
            return;
        }
        let scale = want.amax().max(got.amax()).max(1.0);
        let err = (got - want).amax() / scale;
        self.entries.push(ValidationEntry {
            name: name.to_string(),
            max_rel_error: err,
            passed: err <= tol,
            note: None,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<28} {:>12.3e}  {}{}",
                e.name,
                e.max_rel_error,
                if e.passed { "ok" } else { "FAIL" },
                e.note
                    .as_deref()
                    .map(|n| format!("  ({n})"))
                    .unwrap_or_default()
            )?;
        }
        Ok(())
    }
}

/// Compare every supplied derivative callback against central finite
/// differences of its parent quantity at the given point.
pub fn validate_derivatives(
    problem: &DAEProblem,
    objective: &Objective,
    point: (f64, &Vector, &Vector),
    tol: f64,
) -> ValidationReport {
    let (t, u, p) = point;
    let mut report = ValidationReport::default();
    let nd = problem.dim_state;
    let np = problem.dim_param;

    // deterministic probe directions
    let dir_u = Vector::from_fn(nd, |i, _| 0.3 + 0.7 * ((i as f64 * 0.7312).sin()));
    let dir_p = Vector::from_fn(np, |i, _| 0.4 - 0.9 * ((i as f64 * 1.1971).cos()));

    if problem.has_analytic_jac_state() {
        let got = problem.jac_state(t, u, p).to_dense();
        let want = fd::jacobian(|x| problem.rhs(t, x, p), u);
        report.push_compare(
            "jac_state",
            &Vector::from_column_slice(got.as_slice()),
            &Vector::from_column_slice(want.as_slice()),
            tol,
        );
    }
    if np > 0 && problem.has_analytic_jac_param() {
        let got = problem.jac_param(t, u, p).to_dense();
        let want = fd::jacobian(|q| problem.rhs(t, u, q), p);
        report.push_compare(
            "jac_param",
            &Vector::from_column_slice(got.as_slice()),
            &Vector::from_column_slice(want.as_slice()),
            tol,
        );
    }

    // vector-Hessian-vector products against finite differences of the
    // Jacobian contracted with the probe vectors
    let jac_t_vec = |x: &Vector, v: &Vector| -> Vector {
        match problem.jac_state(t, x, p) {
            MatrixData::Dense(m) => m.transpose() * v,
            MatrixData::Sparse(tr) => tr.to_csr().matvec_transpose(v),
        }
    };
    let jac_p_tvec_u = |x: &Vector, v: &Vector| -> Vector {
        match problem.jac_param(t, x, p) {
            MatrixData::Dense(m) => m.transpose() * v,
            MatrixData::Sparse(tr) => tr.to_csr().matvec_transpose(v),
        }
    };
    if problem.hess_uu_vv.is_some() {
        let got = problem.hess_uu_vv(t, u, p, &dir_u, &dir_u);
        let want = fd::directional(|x| jac_t_vec(x, &dir_u), u, &dir_u, fd::step_for(1.0));
        report.push_compare("hess_uu_vv", &got, &want, tol);
    }
    if np > 0 && problem.hess_up_vv.is_some() {
        let got = problem.hess_up_vv(t, u, p, &dir_u, &dir_p);
        let jac_u_in_p = |q: &Vector| -> Vector {
            match problem.jac_state(t, u, q) {
                MatrixData::Dense(m) => m.transpose() * &dir_u,
                MatrixData::Sparse(tr) => tr.to_csr().matvec_transpose(&dir_u),
            }
        };
        let want = fd::directional(jac_u_in_p, p, &dir_p, fd::step_for(1.0));
        report.push_compare("hess_up_vv", &got, &want, tol);
    }
    if np > 0 && problem.hess_pu_vv.is_some() {
        let got = problem.hess_pu_vv(t, u, p, &dir_u, &dir_u);
        let want = fd::directional(|x| jac_p_tvec_u(x, &dir_u), u, &dir_u, fd::step_for(1.0));
        report.push_compare("hess_pu_vv", &got, &want, tol);
    }
    if np > 0 && problem.hess_pp_vv.is_some() {
        let got = problem.hess_pp_vv(t, u, p, &dir_u, &dir_p);
        let jac_p_in_p = |q: &Vector| -> Vector {
            match problem.jac_param(t, u, q) {
                MatrixData::Dense(m) => m.transpose() * &dir_u,
                MatrixData::Sparse(tr) => tr.to_csr().matvec_transpose(&dir_u),
            }
        };
        let want = fd::directional(jac_p_in_p, p, &dir_p, fd::step_for(1.0));
        report.push_compare("hess_pp_vv", &got, &want, tol);
    }
    // transpose symmetry of the mixed blocks for twice-differentiable f
    if np > 0 && problem.hess_up_vv.is_some() && problem.hess_pu_vv.is_some() {
        let up = problem.hess_up_vv(t, u, p, &dir_u, &dir_p);
        let pu = problem.hess_pu_vv(t, u, p, &dir_u, &dir_u);
        let lhs = up.dot(&dir_u);
        let rhs = pu.dot(&dir_p);
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        let err = (lhs - rhs).abs() / scale;
        report.entries.push(ValidationEntry {
            name: "hess_up/pu transpose symmetry".to_string(),
            max_rel_error: err,
            passed: err <= tol && err.is_finite(),
            note: None,
        });
    }

    if objective.has_terminal() {
        let got = objective.terminal_grad_state(u, p);
        let want = fd::grad_scalar(|x| objective.terminal(x, p), u);
        report.push_compare("terminal_grad_state", &got, &want, tol);
        if np > 0 && objective.terminal_grad_param.is_some() {
            let got = objective.terminal_grad_param(u, p);
            let want = fd::grad_scalar(|q| objective.terminal(u, q), p);
            report.push_compare("terminal_grad_param", &got, &want, tol);
        }
        if objective.psi_uu_w.is_some() {
            let got = objective.psi_uu_w(u, p, &dir_u);
            let want = fd::directional(
                |x| objective.terminal_grad_state(x, p),
                u,
                &dir_u,
                fd::step_for(1.0),
            );
            report.push_compare("psi_uu_w", &got, &want, tol);
        }
    }
    if objective.has_integrand() {
        let got = objective.integrand_grad_state(t, u, p);
        let want = fd::grad_scalar(|x| objective.integrand(t, x, p), u);
        report.push_compare("integrand_grad_state", &got, &want, tol);
        if np > 0 {
            let got = objective.integrand_grad_param(t, u, p);
            let want = fd::grad_scalar(|q| objective.integrand(t, u, q), p);
            report.push_compare("integrand_grad_param", &got, &want, tol);
        }
        if objective.r_uu_v.is_some() {
            let got = objective.r_uu_v(t, u, p, &dir_u);
            let want = fd::directional(
                |x| objective.integrand_grad_state(t, x, p),
                u,
                &dir_u,
                fd::step_for(1.0),
            );
            report.push_compare("r_uu_v", &got, &want, tol);
        }
        if np > 0 && objective.r_pp_v.is_some() {
            let got = objective.r_pp_v(t, u, p, &dir_p);
            let want = fd::directional(
                |q| objective.integrand_grad_param(t, u, q),
                p,
                &dir_p,
                fd::step_for(1.0),
            );
            report.push_compare("r_pp_v", &got, &want, tol);
        }
    }

    report
}
