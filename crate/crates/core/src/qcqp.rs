//! Convex complex QCQP solver.
//!
//! Problems have the form
//!
//! ```text
//! minimize    w^H A w - 2 Re(b^H w) + c
//! subject to  w^H P_i w - 2 Re(r_i^H w) + s_i <= 0,   i = 1..m
//! ```
//!
//! with Hermitian positive semidefinite `A` and `P_i`. The solver is an
//! infeasible-start primal-dual interior-point method with Mehrotra
//! predictor-corrector steps, run on the real embedding `z = [Re w; Im w]`.
//! Termination is decided on the KKT conditions of the original (unscaled)
//! problem.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_hpd, from_real_embed, hermitian_defect, inner, norm_sq, real_embed, real_embed_vec, trace_re, CMat, CVec};

/// `w^H P w - 2 Re(r^H w) + s`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadForm {
    pub p: CMat,
    pub r: CVec,
    pub s: f64,
}

impl QuadForm {
    pub fn new(p: CMat, r: CVec, s: f64) -> Self {
        Self { p, r, s }
    }

    /// `||w||^2 <= radius_sq`.
    pub fn ball(n: usize, radius_sq: f64) -> Self {
        Self { p: CMat::identity(n, n), r: CVec::zeros(n), s: -radius_sq }
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    pub fn eval(&self, w: &CVec) -> f64 {
        inner(w, &(&self.p * w)).re - 2.0 * inner(&self.r, w).re + self.s
    }

    /// Half the Wirtinger gradient, `P w - r`.
    pub fn half_gradient(&self, w: &CVec) -> CVec {
        &self.p * w - &self.r
    }

    /// Unconstrained minimum value; `-inf` when unbounded below.
    pub fn minimum(&self) -> f64 {
        let n = self.dim();
        if n == 0 {
            return self.s;
        }
        let eig = SymmetricEigen::new(self.p.clone());
        let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let rnorm = self.r.norm();
        let mut value = self.s;
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            let proj = eig.eigenvectors.column(i).dotc(&self.r).norm_sqr();
            if lam > 1e-12 * scale.max(f64::MIN_POSITIVE) {
                value -= proj / lam;
            } else if proj.sqrt() > 1e-12 * rnorm.max(f64::MIN_POSITIVE) {
                return f64::NEG_INFINITY;
            }
        }
        value
    }

    fn scale(&self) -> f64 {
        let s = self.p.norm().max(self.r.norm()).max(self.s.abs());
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcqpProblem {
    pub objective: QuadForm,
    pub constraints: Vec<QuadForm>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl QcqpProblem {
    pub fn new(objective: QuadForm, constraints: Vec<QuadForm>) -> Self {
        Self { objective, constraints, tolerance: DEFAULT_TOLERANCE, max_iterations: DEFAULT_MAX_ITERATIONS }
    }

    pub fn with_limits(mut self, tolerance: f64, max_iterations: usize) -> Self {
        self.tolerance = tolerance;
        self.max_iterations = max_iterations;
        self
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    /// Checks dimensions, Hermitian symmetry and positive semidefiniteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        for (idx, form) in std::iter::once(&self.objective).chain(&self.constraints).enumerate() {
            let what = if idx == 0 { "objective".to_string() } else { format!("constraint {}", idx - 1) };
            if form.p.shape() != (n, n) || form.r.len() != n {
                return Err(Error::invalid(format!("{what}: dimension mismatch")));
            }
            if !form.s.is_finite() || form.p.iter().chain(form.r.iter()).any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                return Err(Error::invalid(format!("{what}: non-finite data")));
            }
            let mag = form.p.iter().fold(0.0f64, |a, v| a.max(v.norm())).max(1.0);
            if hermitian_defect(&form.p) > 1e-10 * mag {
                return Err(Error::invalid(format!("{what}: matrix is not Hermitian")));
            }
            // min eigenvalue >= -1e-8 trace  <=>  P + 1e-8 trace I is positive definite
            let shift = 1e-8 * trace_re(&form.p).max(0.0) + 1e-300;
            let mut shifted = form.p.clone();
            for i in 0..n {
                shifted[(i, i)] += shift;
            }
            if n > 0 && cholesky_hpd(&shifted).is_none() {
                return Err(Error::invalid(format!("{what}: matrix is not positive semidefinite")));
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, w: &CVec) -> f64 {
        self.objective.eval(w)
    }

    pub fn max_violation(&self, w: &CVec) -> f64 {
        self.constraints.iter().map(|g| g.eval(w)).fold(0.0, f64::max)
    }

    /// `(stationarity / (1 + ||b||), max_i |lambda_i g_i(w)|)`.
    pub fn kkt_parts(&self, w: &CVec, duals: &[f64]) -> (f64, f64) {
        let mut grad = self.objective.half_gradient(w);
        let mut comp = 0.0f64;
        for (g, &lam) in self.constraints.iter().zip(duals) {
            grad += g.half_gradient(w) * crate::system::c(lam);
            comp = comp.max((lam * g.eval(w)).abs());
        }
        (grad.norm() / (1.0 + self.objective.r.norm()), comp)
    }
}

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITERATIONS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QcqpStatus {
    Optimal,
    Infeasible,
    IterationCap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcqpSolution {
    pub w_star: CVec,
    pub objective_value: f64,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub dual_values: Vec<f64>,
    pub status: QcqpStatus,
    pub iterations: usize,
}

struct Scaled {
    obj_hess: DMatrix<f64>,
    obj_lin: DVector<f64>,
    con_hess: Vec<DMatrix<f64>>,
    con_lin: Vec<DVector<f64>>,
    con_const: Vec<f64>,
    obj_scale: f64,
    con_scale: Vec<f64>,
}

impl Scaled {
    fn new(problem: &QcqpProblem) -> Self {
        let obj_scale = problem.objective.scale();
        let con_scale: Vec<f64> = problem.constraints.iter().map(QuadForm::scale).collect();
        let embed = |f: &QuadForm, sc: f64| (real_embed(&f.p) * (2.0 / sc), real_embed_vec(&f.r) * (2.0 / sc));
        let (obj_hess, obj_lin) = embed(&problem.objective, obj_scale);
        let mut con_hess = Vec::new();
        let mut con_lin = Vec::new();
        for (g, &sc) in problem.constraints.iter().zip(&con_scale) {
            let (h, l) = embed(g, sc);
            con_hess.push(h);
            con_lin.push(l);
        }
        let con_const = problem.constraints.iter().zip(&con_scale).map(|(g, sc)| g.s / sc).collect();
        Self { obj_hess, obj_lin, con_hess, con_lin, con_const, obj_scale, con_scale }
    }

    /// Scaled constraint value and gradient: `g(x) = x^T H x / 2 - l^T x + c`.
    fn constraint(&self, i: usize, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let hx = &self.con_hess[i] * x;
        let val = 0.5 * x.dot(&hx) - self.con_lin[i].dot(x) + self.con_const[i];
        (val, hx - &self.con_lin[i])
    }
}

/// Solve a convex QCQP. Deterministic given `(problem, warm_start)`.
pub fn solve(problem: &QcqpProblem, warm_start: Option<&CVec>) -> Result<QcqpSolution> {
    problem.validate()?;
    let n = problem.dim();
    if let Some(w0) = warm_start {
        if w0.len() != n {
            return Err(Error::invalid("warm start has the wrong dimension"));
        }
    }
    let tol = problem.tolerance;

    if let Some(sol) = try_unconstrained(problem) {
        return Ok(sol);
    }
    if problem.constraints.is_empty() {
        // Singular objective without constraints: bounded only if b lies in range(A).
        return Ok(finish(problem, pseudo_minimizer(&problem.objective), vec![], QcqpStatus::IterationCap, 0));
    }

    let sc = Scaled::new(problem);
    let m = problem.constraints.len();
    let dim = 2 * n;
    let mut x = warm_start.map(real_embed_vec).unwrap_or_else(|| DVector::zeros(dim));
    let mut s = DVector::from_fn(m, |i, _| (-sc.constraint(i, &x).0).max(1.0));
    let mut z = DVector::from_element(m, 1.0);

    let mut best: Option<(f64, CVec, Vec<f64>)> = None;
    let mut stall = 0usize;
    let mut iterations = 0usize;

    for iter in 0..problem.max_iterations {
        iterations = iter + 1;
        let mut vals = DVector::zeros(m);
        let mut grads = Vec::with_capacity(m);
        for i in 0..m {
            let (v, g) = sc.constraint(i, &x);
            vals[i] = v;
            grads.push(g);
        }
        let obj_grad = &sc.obj_hess * &x - &sc.obj_lin;
        let mut r_dual = obj_grad.clone();
        for i in 0..m {
            r_dual.axpy(z[i], &grads[i], 1.0);
        }
        let r_pri = &vals + &s;

        // Score the current iterate on the original problem.
        let w = from_real_embed(&x);
        let duals: Vec<f64> = (0..m).map(|i| sc.obj_scale * z[i] / sc.con_scale[i]).collect();
        let (stat, comp) = problem.kkt_parts(&w, &duals);
        let viol = problem.max_violation(&w);
        let merit = stat.max(comp).max(viol);
        if !merit.is_finite() {
            break;
        }
        if stat <= tol && comp <= tol && viol <= tol {
            return Ok(finish(problem, w, duals, QcqpStatus::Optimal, iterations));
        }
        match &best {
            Some((b, _, _)) if merit >= 0.5 * *b => stall += 1,
            _ => stall = 0,
        }
        if best.as_ref().is_none_or(|(b, _, _)| merit < *b) {
            best = Some((merit, w, duals));
        }
        if stall > 30 {
            break;
        }

        let mut kkt = sc.obj_hess.clone();
        for i in 0..m {
            kkt += &sc.con_hess[i] * z[i];
            let d = z[i] / s[i];
            kkt.ger(d, &grads[i], &grads[i], 1.0);
        }
        let Some(chol) = factor(kkt) else { break };

        let mu = s.dot(&z) / m as f64;
        let solve_dir = |r_comp: &DVector<f64>| {
            // (H + J^T D J) dx = -r_d - J^T ((z∘r_p - r_c) / s)
            let mut rhs = -&r_dual;
            for i in 0..m {
                let coef = (z[i] * r_pri[i] - r_comp[i]) / s[i];
                rhs.axpy(-coef, &grads[i], 1.0);
            }
            let dx = chol.solve(&rhs);
            let mut ds = DVector::zeros(m);
            let mut dz = DVector::zeros(m);
            for i in 0..m {
                let jdx = grads[i].dot(&dx);
                ds[i] = -r_pri[i] - jdx;
                dz[i] = (-r_comp[i] + z[i] * r_pri[i] + z[i] * jdx) / s[i];
            }
            (dx, ds, dz)
        };

        let r_aff = s.component_mul(&z);
        let (_, ds_a, dz_a) = solve_dir(&r_aff);
        let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
        let mu_aff = (&s + &ds_a * a_aff).dot(&(&z + &dz_a * a_aff)) / m as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
        let r_cor = DVector::from_fn(m, |i, _| s[i] * z[i] - sigma * mu + ds_a[i] * dz_a[i]);
        let (dx, ds, dz) = solve_dir(&r_cor);
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);

        if !alpha.is_finite() || dx.iter().chain(ds.iter()).chain(dz.iter()).any(|v| !v.is_finite()) {
            break;
        }
        x.axpy(alpha, &dx, 1.0);
        s.axpy(alpha, &ds, 1.0);
        z.axpy(alpha, &dz, 1.0);
        for i in 0..m {
            s[i] = s[i].max(1e-300);
            z[i] = z[i].max(1e-300);
        }
    }

    let (w, duals) = match best {
        Some((_, w, d)) => (w, d),
        None => (warm_start.cloned().unwrap_or_else(|| CVec::zeros(n)), vec![0.0; m]),
    };
    let violation = problem.max_violation(&w);
    let certified_empty = problem.constraints.iter().any(|g| g.minimum() > tol);
    let status = if certified_empty || violation > tol { QcqpStatus::Infeasible } else { QcqpStatus::IterationCap };
    let mut sol = finish(problem, w, duals, status, iterations);

    // Never hand back something worse than a feasible warm start.
    if let Some(w0) = warm_start {
        if status != QcqpStatus::Optimal
            && problem.max_violation(w0) <= tol
            && problem.objective_value(w0) < sol.objective_value
        {
            sol.w_star = w0.clone();
            sol.objective_value = problem.objective_value(w0);
            sol.max_violation = problem.max_violation(w0);
            sol.status = QcqpStatus::IterationCap;
        }
    }
    Ok(sol)
}

fn factor(mut kkt: DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(ch) = Cholesky::new(kkt.clone()) {
        return Some(ch);
    }
    let diag_scale = (0..kkt.nrows()).map(|i| kkt[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut reg = 1e-14 * diag_scale;
    for _ in 0..12 {
        for i in 0..kkt.nrows() {
            kkt[(i, i)] += reg;
        }
        if let Some(ch) = Cholesky::new(kkt.clone()) {
            return Some(ch);
        }
        reg *= 10.0;
    }
    None
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter().zip(dv.iter()).filter(|(_, d)| **d < 0.0).map(|(x, d)| -x / d).fold(1.0, f64::min)
}

fn finish(problem: &QcqpProblem, w: CVec, duals: Vec<f64>, status: QcqpStatus, iterations: usize) -> QcqpSolution {
    let (stat, comp) = problem.kkt_parts(&w, &duals);
    QcqpSolution {
        objective_value: problem.objective_value(&w),
        kkt_residual: stat.max(comp),
        max_violation: problem.max_violation(&w),
        dual_values: duals,
        status,
        iterations,
        w_star: w,
    }
}

/// When `A` is positive definite and its minimizer satisfies every constraint,
/// that minimizer is optimal with all multipliers zero.
fn try_unconstrained(problem: &QcqpProblem) -> Option<QcqpSolution> {
    let chol = cholesky_hpd(&problem.objective.p)?;
    let w = chol.solve(&problem.objective.r);
    if problem.constraints.iter().all(|g| g.eval(&w) <= 0.0) {
        let m = problem.constraints.len();
        Some(finish(problem, w, vec![0.0; m], QcqpStatus::Optimal, 0))
    } else {
        None
    }
}

fn pseudo_minimizer(f: &QuadForm) -> CVec {
    let eig = SymmetricEigen::new(f.p.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut w = CVec::zeros(f.dim());
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > 1e-12 * scale {
            let v = eig.eigenvectors.column(i);
            let coef = v.dotc(&f.r) / lam;
            w += v * coef;
        }
    }
    w
}

/// Convenience for callers that only need a squared norm bound check.
pub fn within_ball(w: &CVec, radius_sq: f64, rel_tol: f64) -> bool {
    norm_sq(w) <= radius_sq * (1.0 + rel_tol)
}
