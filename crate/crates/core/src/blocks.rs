//! Per-block optimizers of the outer sweep: WMMSE auxiliaries, the probing
//! beamformer (MM over convex QCQPs), uplink powers, user filters and the
//! radar filter.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{hermitize, inner, kron_identity, norm_sq, outer, quad_form, solve_hpd, unvectorize, vectorize, CMat, CVec};
use crate::qcqp::{self, QcqpProblem, QcqpStatus, QuadForm};
use crate::scenario::AlgorithmSettings;
use crate::system::{c, filter_powers, EffectiveChannels, DesignVariables, SystemParams};

/// WMMSE receive scalars `beta_k` and weights `omega_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxVariables {
    pub beta: Vec<Complex64>,
    pub omega: Vec<f64>,
}

/// Closed-form maximizers of the WMMSE surrogate for fixed primal blocks.
pub fn update_aux(eff: &EffectiveChannels, vars: &DesignVariables, sigma_r_sq: f64) -> Result<AuxVariables> {
    let k_users = vars.u.len();
    let mut beta = Vec::with_capacity(k_users);
    let mut omega = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let u = &vars.u[k];
        let p = filter_powers(eff, vars, u, sigma_r_sq);
        let total = p.total();
        let signal = p.users[k];
        let rest = total - signal;
        if !(total > 0.0) || !(rest > 0.0) {
            return Err(Error::InvalidState(format!("user {k}: vanishing MSE denominator")));
        }
        beta.push(inner(u, &eff.h_u[k]) * vars.q[k].sqrt() / total);
        omega.push(1.0 + signal / rest);
    }
    Ok(AuxVariables { beta, omega })
}

/// Mean squared error of user `k` for receive scalar `beta`:
/// `1 - 2 Re(beta^* sqrt(q_k) u_k^H h_k) + |beta|^2 * total received power`.
pub fn mse(eff: &EffectiveChannels, vars: &DesignVariables, beta: Complex64, sigma_r_sq: f64, k: usize) -> f64 {
    let u = &vars.u[k];
    let p = filter_powers(eff, vars, u, sigma_r_sq);
    let cross = beta.conj() * inner(u, &eff.h_u[k]) * vars.q[k].sqrt();
    1.0 - 2.0 * cross.re + beta.norm_sqr() * p.total()
}

/// `R~_k = ln(omega) - omega * mse + 1`, a lower bound on `R_k` that is tight
/// at the maximizing auxiliaries.
pub fn surrogate_rate(eff: &EffectiveChannels, vars: &DesignVariables, aux: &AuxVariables, sigma_r_sq: f64, k: usize) -> f64 {
    let w = aux.omega[k];
    w.ln() - w * mse(eff, vars, aux.beta[k], sigma_r_sq, k) + 1.0
}

pub fn surrogate_sum(eff: &EffectiveChannels, vars: &DesignVariables, aux: &AuxVariables, sigma_r_sq: f64) -> f64 {
    (0..vars.u.len()).map(|k| surrogate_rate(eff, vars, aux, sigma_r_sq, k)).sum()
}

/// `omega_k |beta_k|^2`, the weight every quadratic interference term carries.
fn mse_weight(aux: &AuxVariables, k: usize) -> f64 {
    aux.omega[k] * aux.beta[k].norm_sqr()
}

// ---------------------------------------------------------------------------
// Beamformer

/// Data of the beamformer subproblem over `w = vec(W)`:
/// minimize `w^H D1 w - c1` subject to `w^H D2 w - w^H D3 w + c2 <= 0` and
/// `||w||^2 <= P_BS`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerTerms {
    pub d1: CMat,
    pub d2: CMat,
    pub d3: CMat,
    pub c1: f64,
    pub c2: f64,
}

impl BeamformerTerms {
    pub fn new(eff: &EffectiveChannels, vars: &DesignVariables, aux: &AuxVariables, params: &SystemParams) -> Self {
        let nt = vars.w.nrows();
        let sigma = params.sigma_r_sq;
        let mut b1 = CMat::zeros(nt, nt);
        let mut c1 = 0.0;
        for k in 0..vars.u.len() {
            let u = &vars.u[k];
            let weight = mse_weight(aux, k);
            let hu = eff.h.adjoint() * u;
            let gu = eff.g.adjoint() * u;
            b1 += (outer(&hu) + outer(&gu)) * c(weight);
            let omega = aux.omega[k];
            let cross = (aux.beta[k].conj() * inner(u, &eff.h_u[k]) * vars.q[k].sqrt() * omega).re;
            let users: f64 = eff.h_u.iter().zip(&vars.q).map(|(h, q)| q * inner(u, h).norm_sqr()).sum();
            c1 += omega.ln() - omega + 2.0 * cross - weight * (users + sigma * norm_sq(u)) + 1.0;
        }
        let u0 = &vars.u0;
        let g0 = eff.g.adjoint() * u0;
        let h0 = eff.h.adjoint() * u0;
        let mut d1 = kron_identity(nt, &b1);
        let mut d2 = kron_identity(nt, &outer(&g0));
        let mut d3 = kron_identity(nt, &(outer(&h0) * c(1.0 / params.gamma_r)));
        hermitize(&mut d1);
        hermitize(&mut d2);
        hermitize(&mut d3);
        let c2 = eff.h_u.iter().zip(&vars.q).map(|(h, q)| q * inner(u0, h).norm_sqr()).sum::<f64>() + sigma * norm_sq(u0);
        Self { d1, d2, d3, c1, c2 }
    }

    pub fn objective(&self, w: &CVec) -> f64 {
        quad_form(&self.d1, w) - self.c1
    }

    /// Radar constraint in its original difference-of-convex form.
    pub fn radar_constraint(&self, w: &CVec) -> f64 {
        quad_form(&self.d2, w) - quad_form(&self.d3, w) + self.c2
    }

    /// Tangent minorant of `w^H D3 w` at `w0`.
    pub fn d3_minorant(&self, w: &CVec, w0: &CVec) -> f64 {
        let d3w0 = &self.d3 * w0;
        2.0 * inner(&d3w0, w).re - inner(w0, &d3w0).re
    }

    /// Convex restriction of the radar constraint around `w0`.
    pub fn linearized_constraint(&self, w0: &CVec) -> QuadForm {
        let d3w0 = &self.d3 * w0;
        QuadForm::new(self.d2.clone(), d3w0, self.c2 + quad_form(&self.d3, w0))
    }
}

/// The convex beamformer QCQP around the expansion point `w0`.
pub fn build_beamformer_qcqp(
    eff: &EffectiveChannels,
    vars: &DesignVariables,
    aux: &AuxVariables,
    params: &SystemParams,
    settings: &AlgorithmSettings,
    w0: &CVec,
) -> QcqpProblem {
    let terms = BeamformerTerms::new(eff, vars, aux, params);
    let n = w0.len();
    QcqpProblem::new(QuadForm::new(terms.d1.clone(), CVec::zeros(n), -terms.c1), vec![
        terms.linearized_constraint(w0),
        QuadForm::ball(n, params.p_bs),
    ])
    .with_limits(settings.qcqp_tol, settings.qcqp_max_iters)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutcome<T> {
    pub value: T,
    pub iterations: usize,
}

/// Relative slack tolerated on the radar constraint when a block starts.
pub const RADAR_ENTRY_TOL: f64 = 1e-6;

/// MM loop over the beamformer: re-linearize, solve, repeat.
pub fn update_beamformer(
    eff: &EffectiveChannels,
    vars: &DesignVariables,
    aux: &AuxVariables,
    params: &SystemParams,
    settings: &AlgorithmSettings,
) -> Result<BlockOutcome<CMat>> {
    let nt = vars.w.nrows();
    let terms = BeamformerTerms::new(eff, vars, aux, params);
    let feas_scale = terms.c2 + quad_form(&terms.d3, &vectorize(&vars.w));
    let entry_ok = |w: &CVec| terms.radar_constraint(w) <= RADAR_ENTRY_TOL * feas_scale;

    let mut w0 = vectorize(&vars.w);
    if !entry_ok(&w0) {
        return Err(Error::FeasibilityLoss {
            block: "beamformer",
            detail: format!("radar constraint violated at entry ({:.3e})", terms.radar_constraint(&w0)),
        });
    }
    let mut obj = terms.objective(&w0);
    let mut iterations = 0;
    for it in 0..settings.mm_max_iters {
        iterations = it + 1;
        let problem = QcqpProblem::new(QuadForm::new(terms.d1.clone(), CVec::zeros(w0.len()), -terms.c1), vec![
            terms.linearized_constraint(&w0),
            QuadForm::ball(w0.len(), params.p_bs),
        ])
        .with_limits(settings.qcqp_tol, settings.qcqp_max_iters);
        let sol = qcqp::solve(&problem, Some(&w0))?;
        if sol.status == QcqpStatus::Infeasible {
            if it == 0 {
                return Err(Error::FeasibilityLoss { block: "beamformer", detail: "first MM subproblem infeasible".into() });
            }
            break;
        }
        let mut w = sol.w_star;
        let energy = norm_sq(&w);
        if energy > params.p_bs {
            w *= c((params.p_bs / energy).sqrt());
        }
        let new_obj = terms.objective(&w);
        let prev_violation = terms.radar_constraint(&w0).max(0.0);
        if terms.radar_constraint(&w) > prev_violation.max(1e-12 * feas_scale) || new_obj > obj + 1e-12 * obj.abs().max(1.0) {
            break;
        }
        let change = (obj - new_obj).abs() / obj.abs().max(1e-12);
        w0 = w;
        obj = new_obj;
        if change < settings.mm_tol {
            break;
        }
    }
    Ok(BlockOutcome { value: unvectorize(&w0, nt, nt), iterations })
}

// ---------------------------------------------------------------------------
// Power allocation

/// Coefficients of the power subproblem in `t_k = sqrt(q_k)`:
/// minimize `sum a_k t_k^2 + sum b_k t_k - c3` s.t. `sum d_k t_k^2 <= c3_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTerms {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub d: Vec<f64>,
    pub c3: f64,
    pub c3_hat: f64,
}

impl PowerTerms {
    pub fn new(eff: &EffectiveChannels, vars: &DesignVariables, aux: &AuxVariables, params: &SystemParams) -> Self {
        let k_users = vars.q.len();
        let sigma = params.sigma_r_sq;
        let mut a = vec![0.0; k_users];
        let mut b = vec![0.0; k_users];
        let mut c3 = 0.0;
        for k in 0..k_users {
            let u = &vars.u[k];
            let weight = mse_weight(aux, k);
            for (i, h) in eff.h_u.iter().enumerate() {
                a[i] += weight * inner(u, h).norm_sqr();
            }
            let omega = aux.omega[k];
            b[k] = -2.0 * (aux.beta[k].conj() * inner(u, &eff.h_u[k]) * omega).re;
            let p = filter_powers(eff, vars, u, sigma);
            c3 += omega.ln() - omega - weight * (p.echo + p.probing_leak + p.noise) + 1.0;
        }
        let u0 = &vars.u0;
        let d = eff.h_u.iter().map(|h| inner(u0, h).norm_sqr()).collect();
        let p0 = filter_powers(eff, vars, u0, sigma);
        let c3_hat = p0.echo / params.gamma_r - p0.probing_leak - p0.noise;
        Self { a, b, d, c3, c3_hat }
    }

    pub fn objective(&self, t: &[f64]) -> f64 {
        t.iter().enumerate().map(|(k, &tk)| self.a[k] * tk * tk + self.b[k] * tk).sum::<f64>() - self.c3
    }

    pub fn radar_load(&self, q: &[f64]) -> f64 {
        self.d.iter().zip(q).map(|(d, q)| d * q).sum()
    }

    /// The subproblem as a QCQP over complex `t` (the optimum is real).
    pub fn to_qcqp(&self, p_users: &[f64], radar: bool) -> QcqpProblem {
        let k_users = self.a.len();
        let diag = |v: &[f64]| CMat::from_diagonal(&CVec::from_iterator(v.len(), v.iter().map(|x| c(*x))));
        let unit = |k: usize| {
            let mut e = CVec::zeros(k_users);
            e[k] = c(1.0);
            e
        };
        let objective = QuadForm::new(diag(&self.a), CVec::from_iterator(k_users, self.b.iter().map(|b| c(-b / 2.0))), -self.c3);
        let mut constraints = Vec::new();
        if radar {
            constraints.push(QuadForm::new(diag(&self.d), CVec::zeros(k_users), -self.c3_hat.max(0.0)));
        }
        for (k, p) in p_users.iter().enumerate() {
            constraints.push(QuadForm::new(outer(&unit(k)), CVec::zeros(k_users), -p));
            // -Re(t_k) <= 0
            constraints.push(QuadForm::new(CMat::zeros(k_users, k_users), unit(k) * c(0.5), 0.0));
        }
        QcqpProblem::new(objective, constraints)
    }
}

impl PowerTerms {
    /// Per-user minimizer of `a_k t^2 + b_k t + mu d_k t^2` over `[0, sqrt(P_k)]`.
    pub fn kkt_point(&self, mu: f64, p_users: &[f64]) -> Vec<f64> {
        (0..self.a.len())
            .map(|k| {
                let curv = self.a[k] + mu * self.d[k];
                let hi = p_users[k].sqrt();
                if curv > 0.0 {
                    (-self.b[k] / (2.0 * curv)).clamp(0.0, hi)
                } else if self.b[k] < 0.0 {
                    hi
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Solves the subproblem with the interior-point method and snaps the
    /// result onto the exact KKT point for the recovered radar multiplier.
    pub fn solve(&self, p_users: &[f64], radar: bool, settings: &AlgorithmSettings, warm: &[f64]) -> Result<BlockOutcome<Vec<f64>>> {
        let problem = self.to_qcqp(p_users, radar).with_limits(settings.qcqp_tol, settings.qcqp_max_iters);
        let warm = CVec::from_iterator(warm.len(), warm.iter().map(|t| c(*t)));
        let sol = qcqp::solve(&problem, Some(&warm))?;
        if sol.status == QcqpStatus::Infeasible {
            return Err(Error::FeasibilityLoss { block: "power", detail: "power subproblem infeasible".into() });
        }
        if !radar {
            return Ok(BlockOutcome { value: self.kkt_point(0.0, p_users), iterations: sol.iterations });
        }
        let budget = self.c3_hat.max(0.0);
        let load = |t: &[f64]| self.d.iter().zip(t).map(|(d, t)| d * t * t).sum::<f64>();
        let mut mu = sol.dual_values.first().copied().unwrap_or(0.0).max(0.0);
        let free = self.kkt_point(0.0, p_users);
        if load(&free) <= budget {
            mu = 0.0;
        }
        let mut t = self.kkt_point(mu, p_users);
        if load(&t) > budget {
            let mut lo = mu;
            let mut hi = mu.max(1.0);
            while load(&self.kkt_point(hi, p_users)) > budget && hi < 1e300 {
                lo = hi;
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if load(&self.kkt_point(mid, p_users)) > budget {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            t = self.kkt_point(hi, p_users);
            if load(&t) > budget {
                let shrink = (budget / load(&t)).sqrt();
                t.iter_mut().for_each(|v| *v *= shrink);
            }
        }
        Ok(BlockOutcome { value: t, iterations: sol.iterations })
    }
}

pub fn update_power(
    eff: &EffectiveChannels,
    vars: &DesignVariables,
    aux: &AuxVariables,
    params: &SystemParams,
    settings: &AlgorithmSettings,
    radar: bool,
) -> Result<BlockOutcome<Vec<f64>>> {
    let terms = PowerTerms::new(eff, vars, aux, params);
    let scale = terms.c3_hat.abs().max(terms.radar_load(&vars.q)).max(f64::MIN_POSITIVE);
    if radar && terms.c3_hat < -RADAR_ENTRY_TOL * scale {
        return Err(Error::FeasibilityLoss {
            block: "power",
            detail: format!("radar budget c3_hat = {:.3e} is negative", terms.c3_hat),
        });
    }
    let t0: Vec<f64> = vars.q.iter().map(|q| q.max(0.0).sqrt()).collect();
    let out = terms.solve(&params.p_users, radar, settings, &t0)?;
    let q: Vec<f64> = out.value.iter().zip(&params.p_users).map(|(t, p)| (t * t).min(*p)).collect();
    let old_ok = !radar || terms.radar_load(&vars.q) <= terms.c3_hat.max(0.0) * (1.0 + 1e-12);
    let t_new: Vec<f64> = q.iter().map(|v| v.sqrt()).collect();
    if old_ok && terms.objective(&t_new) > terms.objective(&t0) {
        return Ok(BlockOutcome { value: vars.q.clone(), iterations: out.iterations });
    }
    Ok(BlockOutcome { value: q, iterations: out.iterations })
}

// ---------------------------------------------------------------------------
// Receive filters

/// `sum_i q_i h_i h_i^H + H W W^H H^H + G W W^H G^H + sigma^2 I`.
pub fn received_covariance(eff: &EffectiveChannels, vars: &DesignVariables, sigma_r_sq: f64) -> CMat {
    let nr = eff.h.nrows();
    let hw = &eff.h * &vars.w;
    let gw = &eff.g * &vars.w;
    let mut cov = &hw * hw.adjoint() + &gw * gw.adjoint() + CMat::identity(nr, nr) * c(sigma_r_sq);
    for (h, q) in eff.h_u.iter().zip(&vars.q) {
        cov += outer(h) * c(*q);
    }
    hermitize(&mut cov);
    cov
}

/// Minimizer `F^{-1} h~` of `u^H F u - 2 Re(u^H h~)`.
pub fn solve_filter(f: &CMat, h_tilde: &CVec) -> Result<CVec> {
    if norm_sq(h_tilde) == 0.0 {
        return Ok(CVec::zeros(h_tilde.len()));
    }
    solve_hpd(f, h_tilde).ok_or_else(|| Error::InvalidState("filter matrix is singular".into()))
}

pub fn update_user_filters(
    eff: &EffectiveChannels,
    vars: &DesignVariables,
    aux: &AuxVariables,
    sigma_r_sq: f64,
) -> Result<Vec<CVec>> {
    let cov = received_covariance(eff, vars, sigma_r_sq);
    (0..vars.u.len())
        .map(|k| {
            let weight = mse_weight(aux, k);
            if weight == 0.0 {
                return Ok(vars.u[k].clone());
            }
            let f = &cov * c(weight);
            let h_tilde = &eff.h_u[k] * (aux.beta[k].conj() * aux.omega[k] * vars.q[k].sqrt());
            let u = solve_filter(&f, &h_tilde)?;
            Ok(if norm_sq(&u) > 0.0 { u } else { vars.u[k].clone() })
        })
        .collect()
}

/// Radar pencil: interference-plus-noise `E1` and scaled echo `E2`, so that
/// the radar constraint reads `u^H E1 u - u^H E2 u <= 0`.
pub fn radar_pencil(eff: &EffectiveChannels, vars: &DesignVariables, params: &SystemParams) -> (CMat, CMat) {
    let nr = eff.h.nrows();
    let gw = &eff.g * &vars.w;
    let hw = &eff.h * &vars.w;
    let mut e1 = &gw * gw.adjoint() + CMat::identity(nr, nr) * c(params.sigma_r_sq);
    for (h, q) in eff.h_u.iter().zip(&vars.q) {
        e1 += outer(h) * c(*q);
    }
    let mut e2 = &hw * hw.adjoint() * c(1.0 / params.gamma_r);
    hermitize(&mut e1);
    hermitize(&mut e2);
    (e1, e2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadarFilterOutcome {
    pub u0: CVec,
    pub iterations: usize,
    /// The echo term vanished and the previous filter was kept.
    pub degenerate: bool,
}

/// Fixed-point iteration `u <- E1^{-1} E2 u`, renormalized each step.
pub fn radar_filter_iterations(e1: &CMat, e2: &CMat, start: &CVec, tol: f64, max_iters: usize) -> Result<RadarFilterOutcome> {
    let degenerate = RadarFilterOutcome { u0: start.clone(), iterations: 0, degenerate: true };
    if e2.iter().all(|v| v.norm() == 0.0) {
        return Ok(degenerate);
    }
    let ratio = |u: &CVec| quad_form(e2, u) / quad_form(e1, u);
    let mut u = start / c(start.norm());
    let mut best = ratio(&u);
    let mut iterations = 0;
    for it in 0..max_iters {
        iterations = it + 1;
        let next = solve_hpd(e1, &(e2 * &u)).ok_or_else(|| Error::InvalidState("E1 is not positive definite".into()))?;
        let n = next.norm();
        if n == 0.0 || !n.is_finite() {
            return Ok(RadarFilterOutcome { iterations, ..degenerate });
        }
        let next = next / c(n);
        let r = ratio(&next);
        if r < best * (1.0 - 1e-12) {
            break;
        }
        let overlap = inner(&u, &next).norm().min(1.0);
        let sin_angle = (1.0 - overlap * overlap).max(0.0).sqrt();
        u = next;
        best = r;
        if sin_angle < tol {
            break;
        }
    }
    Ok(RadarFilterOutcome { u0: u, iterations, degenerate: false })
}

pub fn update_radar_filter(
    eff: &EffectiveChannels,
    vars: &DesignVariables,
    params: &SystemParams,
    settings: &AlgorithmSettings,
) -> Result<RadarFilterOutcome> {
    let (e1, e2) = radar_pencil(eff, vars, params);
    let u = &vars.u0;
    let gap = quad_form(&e1, u) - quad_form(&e2, u);
    if gap > RADAR_ENTRY_TOL * quad_form(&e1, u) {
        return Err(Error::FeasibilityLoss { block: "radar filter", detail: format!("radar constraint violated at entry ({gap:.3e})") });
    }
    radar_filter_iterations(&e1, &e2, u, settings.mm_tol, settings.mm_max_iters)
}
