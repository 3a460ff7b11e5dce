//! RIS phase optimization by penalty dual decomposition: an augmented
//! Lagrangian over a relaxed copy `phi` and a unit-modulus copy `psi`, with
//! an inner alternation and an outer dual/penalty schedule.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::blocks::AuxVariables;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_hpd, hermitize, solve_hpd, inf_norm, inner, max_eigenvalue, norm_sq, outer, quad_form, unit_modulus, CMat, CVec};
use crate::qcqp::{self, QcqpProblem, QcqpStatus, QuadForm};
use crate::scenario::{AlgorithmSettings, ChannelSet, PddSettings};
use crate::system::{c, DesignVariables, SystemParams};

/// Quadratic model of the phase block:
/// `-sum R~ = phi^H T phi - 2 Re(x^H phi) - c5` and radar constraint
/// `phi^H T0 phi - 2 Re(x0^H phi) + c6 <= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseCoefficients {
    pub t: CMat,
    pub t0: CMat,
    pub x: CVec,
    pub x0: CVec,
    pub c5: f64,
    pub c6: f64,
    /// `||u0^H H W||^2 / Gamma_r`, the part of the constraint the phases cannot move.
    pub radar_echo: f64,
}

impl PhaseCoefficients {
    pub fn objective(&self, phi: &CVec) -> f64 {
        quad_form(&self.t, phi) - 2.0 * inner(&self.x, phi).re - self.c5
    }

    pub fn radar_constraint(&self, phi: &CVec) -> f64 {
        quad_form(&self.t0, phi) - 2.0 * inner(&self.x0, phi).re + self.c6
    }

    pub fn objective_form(&self) -> QuadForm {
        QuadForm::new(self.t.clone(), self.x.clone(), -self.c5)
    }

    pub fn constraint_form(&self) -> QuadForm {
        QuadForm::new(self.t0.clone(), self.x0.clone(), self.c6)
    }

    /// Phase has no influence on either function.
    pub fn is_inert(&self) -> bool {
        let zero_m = |m: &CMat| m.iter().all(|v| v.norm() == 0.0);
        let zero_v = |v: &CVec| v.iter().all(|e| e.norm() == 0.0);
        zero_m(&self.t) && zero_m(&self.t0) && zero_v(&self.x) && zero_v(&self.x0)
    }
}

/// `G_r^H diag(h_RU,k)`.
fn cascade(g_r: &CMat, h_ru: &CVec) -> CMat {
    let mut out = g_r.adjoint();
    for (m, mut col) in out.column_iter_mut().enumerate() {
        col *= h_ru[m];
    }
    out
}

/// Per-filter pieces: `y_i = P_i^H u`, `a_i = u^H h_BU,i`, `S = W^H G_t^H diag(G_r u)`
/// and `v = (u^H H_s^H W)^T`, so that `(u^H G W)^T = conj(S) phi + v`.
struct FilterView {
    y: Vec<CVec>,
    a: Vec<Complex64>,
    s: CMat,
    v: CVec,
}

impl FilterView {
    fn new(channels: &ChannelSet, cascades: &[CMat], w: &CMat, u: &CVec) -> Self {
        let y = cascades.iter().map(|p| p.adjoint() * u).collect();
        let a = channels.h_bu.iter().map(|h| inner(u, h)).collect();
        let r = &channels.g_r * u;
        let mut s = w.adjoint() * channels.g_t.adjoint();
        for (m, mut col) in s.column_iter_mut().enumerate() {
            col *= r[m];
        }
        let v = (u.adjoint() * channels.h_s.adjoint() * w).transpose();
        Self { y, a, s, v }
    }

    /// `S^T conj(S)`.
    fn gram(&self) -> CMat {
        self.s.transpose() * self.s.conjugate()
    }

    /// `S^T v`.
    fn cross(&self) -> CVec {
        self.s.transpose() * &self.v
    }
}

pub fn build_phase_coefficients(
    channels: &ChannelSet,
    vars: &DesignVariables,
    aux: &AuxVariables,
    params: &SystemParams,
) -> PhaseCoefficients {
    let m = channels.num_elements();
    let sigma = params.sigma_r_sq;
    let cascades: Vec<CMat> = channels.h_ru.iter().map(|h| cascade(&channels.g_r, h)).collect();
    let target = &channels.h_r * channels.h_t.adjoint() * channels.alpha;
    let hw = &target * &vars.w;

    let mut t = CMat::zeros(m, m);
    let mut x = CVec::zeros(m);
    let mut c5 = 0.0;
    for (k, u) in vars.u.iter().enumerate() {
        let view = FilterView::new(channels, &cascades, &vars.w, u);
        let omega = aux.omega[k];
        let beta = aux.beta[k];
        let weight = omega * beta.norm_sqr();
        let sqrt_q = vars.q[k].sqrt();

        let mut quad = view.gram();
        let mut lin = view.cross();
        let mut users = 0.0;
        for (i, q) in vars.q.iter().enumerate() {
            quad += outer(&view.y[i]) * c(*q);
            lin += &view.y[i] * (view.a[i] * q);
            users += q * view.a[i].norm_sqr();
        }
        t += quad * c(weight);
        x += &view.y[k] * (beta * omega * sqrt_q) - lin * c(weight);
        let echo = norm_sq(&(hw.adjoint() * u));
        c5 += omega.ln() - omega + 1.0 + 2.0 * (beta.conj() * view.a[k] * omega * sqrt_q).re
            - weight * (users + echo + norm_sq(&view.v) + sigma * norm_sq(u));
    }

    let view = FilterView::new(channels, &cascades, &vars.w, &vars.u0);
    let mut t0 = view.gram();
    let mut x0 = view.cross();
    let radar_echo = norm_sq(&(hw.adjoint() * &vars.u0)) / params.gamma_r;
    let mut c6 = norm_sq(&view.v) + sigma * norm_sq(&vars.u0) - radar_echo;
    for (i, q) in vars.q.iter().enumerate() {
        t0 += outer(&view.y[i]) * c(*q);
        x0 += &view.y[i] * (view.a[i] * q);
        c6 += q * view.a[i].norm_sqr();
    }
    x0 = -x0;
    hermitize(&mut t);
    hermitize(&mut t0);
    PhaseCoefficients { t, t0, x, x0, c5, c6, radar_echo }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PddState {
    pub phi: CVec,
    pub psi: CVec,
    pub lambda: CVec,
    pub rho: f64,
    pub eta: f64,
    pub outer_iter: usize,
}

impl PddState {
    pub fn new(entry: &CVec, settings: &PddSettings) -> Self {
        let psi = unit_modulus(entry, &CVec::from_element(entry.len(), c(1.0)));
        Self { phi: psi.clone(), psi, lambda: CVec::zeros(entry.len()), rho: settings.rho0, eta: settings.eta0, outer_iter: 0 }
    }

    pub fn primal_gap(&self) -> CVec {
        &self.phi - &self.psi
    }
}

/// `f(phi) + ||phi - psi||^2 / (2 rho) + Re(lambda^H (phi - psi))`.
pub fn augmented_lagrangian(coeffs: &PhaseCoefficients, state: &PddState) -> f64 {
    let gap = state.primal_gap();
    coeffs.objective(&state.phi) + norm_sq(&gap) / (2.0 * state.rho) + inner(&state.lambda, &gap).re
}

/// The relaxed-phase subproblem as a QCQP.
pub fn phi_subproblem(coeffs: &PhaseCoefficients, state: &PddState, radar: bool) -> QcqpProblem {
    let m = state.phi.len();
    let prox = 1.0 / (2.0 * state.rho);
    let a = &coeffs.t + CMat::identity(m, m) * c(prox);
    let b = &coeffs.x + &state.psi * c(prox) - &state.lambda * c(0.5);
    let constraints = if radar { vec![coeffs.constraint_form()] } else { Vec::new() };
    QcqpProblem::new(QuadForm::new(a, b, 0.0), constraints)
}

pub fn solve_phi_subproblem(coeffs: &PhaseCoefficients, state: &PddState, radar: bool, settings: &AlgorithmSettings) -> Result<CVec> {
    phi_step(coeffs, state, radar, settings).map(|(phi, _)| phi)
}

/// Unit-modulus minimizer of the augmented Lagrangian in `psi`.
pub fn solve_psi_subproblem(phi: &CVec, lambda: &CVec, rho: f64, previous: &CVec) -> CVec {
    unit_modulus(&(phi + lambda * c(rho)), previous)
}

/// Dual ascent when the copies agree to within `eta`, penalty tightening otherwise.
pub fn outer_update(state: &mut PddState, settings: &PddSettings) {
    let gap = state.primal_gap();
    if inf_norm(&gap) <= state.eta {
        state.lambda += gap / c(state.rho);
    } else {
        state.rho *= settings.penalty_shrink;
    }
    state.eta *= settings.eta_shrink;
    state.outer_iter += 1;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PddTraceRecord {
    pub outer_iter: usize,
    /// `||phi - psi||_inf` after the inner loop.
    pub primal_gap: f64,
    /// `||phi - phi_prev||_inf` across outer iterations.
    pub phi_change: f64,
    pub al_value: f64,
    /// Penalty parameter used by the inner loop.
    pub rho: f64,
    pub inner_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    pub phi: CVec,
    pub trace: Vec<PddTraceRecord>,
    pub converged: bool,
    /// The unit-modulus copy was rejected and the entry phases were kept.
    pub fell_back: bool,
}

fn phi_step(coeffs: &PhaseCoefficients, state: &PddState, radar: bool, settings: &AlgorithmSettings) -> Result<(CVec, f64)> {
    let problem = phi_subproblem(coeffs, state, radar).with_limits(settings.qcqp_tol, settings.qcqp_max_iters);
    let sol = qcqp::solve(&problem, Some(&state.phi))?;
    if sol.status == QcqpStatus::Infeasible {
        return Err(Error::FeasibilityLoss { block: "phase", detail: "relaxed phase subproblem infeasible".into() });
    }
    let mu = sol.dual_values.first().copied().unwrap_or(0.0).max(0.0);
    if radar {
        if let Some(exact) = polish_single_constraint(&problem, mu) {
            return Ok(exact);
        }
    }
    Ok((sol.w_star, mu))
}

/// Exact solution of a strictly convex QCQP with one constraint through its
/// scalar dual: `w(mu) = (A + mu P)^{-1} (b + mu r)` with `mu` the root of
/// `g(w(mu)) = 0` (or zero when the constraint is inactive).
fn polish_single_constraint(problem: &QcqpProblem, mu_hint: f64) -> Option<(CVec, f64)> {
    let obj = &problem.objective;
    let con = problem.constraints.first()?;
    let at = |mu: f64| -> Option<CVec> {
        let a = &obj.p + &con.p * c(mu);
        let b = &obj.r + &con.r * c(mu);
        solve_hpd(&a, &b)
    };
    let free = at(0.0)?;
    if con.eval(&free) <= 0.0 {
        return Some((free, 0.0));
    }
    let mut lo = 0.0;
    let mut hi = if mu_hint > 0.0 { mu_hint } else { 1.0 };
    let mut w_hi = loop {
        let w = at(hi)?;
        if con.eval(&w) <= 0.0 {
            break w;
        }
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() || hi > 1e300 {
            return None;
        }
    };
    for _ in 0..200 {
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let w = at(mid)?;
        if con.eval(&w) <= 0.0 {
            hi = mid;
            w_hi = w;
        } else {
            lo = mid;
        }
    }
    Some((w_hi, hi))
}

struct Alternation {
    phi: CVec,
    psi: CVec,
    al: f64,
    /// Radar multiplier of the relaxed step.
    mu: f64,
}

/// One alternation from `psi`: the relaxed copy and the re-projected copy.
fn alternate(coeffs: &PhaseCoefficients, state: &PddState, psi: &CVec, radar: bool, settings: &AlgorithmSettings) -> Result<Alternation> {
    let probe = PddState { psi: psi.clone(), ..state.clone() };
    let (phi, mu) = phi_step(coeffs, &probe, radar, settings)?;
    let psi_next = solve_psi_subproblem(&phi, &state.lambda, state.rho, psi);
    let al = augmented_lagrangian(coeffs, &PddState { phi: phi.clone(), psi: psi_next.clone(), ..state.clone() });
    Ok(Alternation { phi, psi: psi_next, al, mu })
}

/// The Lagrangian of the inner problem, with the radar constraint weighted by
/// a fixed multiplier `mu` and `phi` minimized out, as a quadratic
/// `psi^H Q psi - 2 Re(p^H psi)` on the torus.
pub struct ReducedModel {
    q: CMat,
    p: CVec,
    a_inv: CMat,
    lin: CVec,
    prox: f64,
}

impl ReducedModel {
    pub fn new(coeffs: &PhaseCoefficients, state: &PddState, mu: f64) -> Option<Self> {
        let m = coeffs.x.len();
        let prox = 1.0 / (2.0 * state.rho);
        let mut a = &coeffs.t + CMat::identity(m, m) * c(prox);
        let mut lin = &coeffs.x - &state.lambda * c(0.5);
        if mu > 0.0 {
            a += &coeffs.t0 * c(mu);
            lin += &coeffs.x0 * c(mu);
        }
        let a_inv = cholesky_hpd(&a)?.inverse();
        let mut q = CMat::identity(m, m) * c(prox) - &a_inv * c(prox * prox);
        hermitize(&mut q);
        let p = &a_inv * &lin * c(prox) + &state.lambda * c(0.5);
        Some(Self { q, p, a_inv, lin, prox })
    }

    pub fn value(&self, psi: &CVec) -> f64 {
        quad_form(&self.q, psi) - 2.0 * inner(&self.p, psi).re
    }

    /// Relaxed copy minimizing the weighted Lagrangian for this `psi`.
    pub fn phi_of(&self, psi: &CVec) -> CVec {
        &self.a_inv * (&self.lin + psi * c(self.prox))
    }

    /// Gradient and Hessian with respect to the phase angles.
    pub fn derivatives(&self, psi: &CVec) -> (DVector<f64>, DMatrix<f64>) {
        let m = psi.len();
        let g = &self.q * psi - &self.p;
        let j = Complex64::i();
        let grad = DVector::from_iterator(m, (0..m).map(|k| 2.0 * (g[k].conj() * j * psi[k]).re));
        let hess = DMatrix::from_fn(m, m, |a, b| {
            let off = 2.0 * (self.q[(b, a)] * psi[a] * psi[b].conj()).re;
            if a == b { off - 2.0 * (g[a].conj() * psi[a]).re } else { off }
        });
        (grad, hess)
    }

    fn newton_direction(grad: &DVector<f64>, hess: DMatrix<f64>) -> DVector<f64> {
        if let Some(ch) = hess.clone().cholesky() {
            return -ch.solve(grad);
        }
        let eig = SymmetricEigen::new(hess);
        let floor = 1e-10 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        let mut step = DVector::zeros(grad.len());
        for (k, lam) in eig.eigenvalues.iter().enumerate() {
            let v = eig.eigenvectors.column(k);
            step -= v * (v.dot(grad) / lam.abs().max(floor));
        }
        step
    }

    /// Damped Newton descent in the angles from `psi`.
    pub fn minimize(&self, psi: &CVec, max_iters: usize) -> CVec {
        let mut theta: DVector<f64> = DVector::from_iterator(psi.len(), psi.iter().map(|v| v.arg()));
        let at = |t: &DVector<f64>| CVec::from_iterator(t.len(), t.iter().map(|a| Complex64::from_polar(1.0, *a)));
        let mut cur = at(&theta);
        let mut val = self.value(&cur);
        for _ in 0..max_iters {
            let (grad, hess) = self.derivatives(&cur);
            let step = Self::newton_direction(&grad, hess);
            let slope = grad.dot(&step);
            if !(slope < 0.0) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-12 {
                let trial_theta = &theta + &step * t;
                let trial = at(&trial_theta);
                let v = self.value(&trial);
                if v <= val + 1e-4 * t * slope {
                    theta = trial_theta;
                    cur = trial;
                    let gain = val - v;
                    val = v;
                    accepted = gain > 1e-15 * val.abs().max(1.0);
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        cur
    }
}

/// Proposal for the next unit-modulus copy: the minimizer of the reduced
/// model, with the radar multiplier raised until the model's relaxed copy
/// meets the constraint.
fn propose(coeffs: &PhaseCoefficients, state: &PddState, start: &CVec, mu_hint: f64, radar: bool, newton_steps: usize) -> Option<CVec> {
    let solve_at = |mu: f64, from: &CVec| -> Option<(CVec, f64)> {
        let model = ReducedModel::new(coeffs, state, mu)?;
        let psi = model.minimize(from, newton_steps);
        let slack = coeffs.radar_constraint(&model.phi_of(&psi));
        Some((psi, slack))
    };
    let (psi0, slack0) = solve_at(0.0, start)?;
    if !radar || slack0 <= 0.0 {
        return Some(psi0);
    }
    let mut lo = 0.0;
    let mut hi = if mu_hint > 0.0 { mu_hint } else { 1e-6 };
    let mut best = None;
    let mut from = psi0;
    for _ in 0..60 {
        let (psi, slack) = solve_at(hi, &from)?;
        if slack <= 0.0 {
            best = Some(psi);
            break;
        }
        lo = hi;
        hi *= 4.0;
        from = psi;
    }
    let mut best = best?;
    for _ in 0..40 {
        let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi };
        if hi - lo <= 1e-10 * hi {
            break;
        }
        let (psi, slack) = solve_at(mid, &best)?;
        if slack <= 0.0 {
            hi = mid;
            best = psi;
        } else {
            lo = mid;
        }
    }
    Some(best)
}

/// Inner minimization of the augmented Lagrangian over `(phi, psi)` for the
/// current `(lambda, rho)`. Every accepted pair is a full alternation, and
/// extrapolated pairs are kept only when they do not raise the AL value.
pub fn inner_loop(coeffs: &PhaseCoefficients, state: &mut PddState, radar: bool, settings: &AlgorithmSettings) -> Result<(f64, usize)> {
    let pdd = &settings.pdd;
    let mut cur = alternate(coeffs, state, &state.psi.clone(), radar, settings)?;
    let mut iters = 1;
    while iters < pdd.inner_max_iters {
        let step = inf_norm(&(&cur.psi - &state.psi));
        state.phi = cur.phi.clone();
        state.psi = cur.psi.clone();
        iters += 1;
        let mut proposal = None;
        if pdd.newton_steps > 0 {
            if let Some(guess) = propose(coeffs, state, &cur.psi, cur.mu, radar, pdd.newton_steps) {
                let trial = alternate(coeffs, state, &guess, radar, settings)?;
                if trial.al <= cur.al {
                    proposal = Some(trial);
                }
            }
        }
        let next = match proposal {
            Some(p) => p,
            None => alternate(coeffs, state, &cur.psi, radar, settings)?,
        };
        let change = (cur.al - next.al).abs() / cur.al.abs().max(1.0);
        cur = next;
        if change < pdd.inner_tol && step <= pdd.fixed_point_tol {
            break;
        }
    }
    state.phi = cur.phi;
    state.psi = cur.psi;
    Ok((cur.al, iters))
}

impl PhaseCoefficients {
    fn scaled(&self, s: f64) -> Self {
        Self { t: &self.t / c(s), x: &self.x / c(s), c5: self.c5 / s, ..self.clone() }
    }
}

/// Points `exp(j(angle(a) + tau * (angle(b) - angle(a))))` along the shortest arcs.
fn phase_arc(from: &CVec, to: &CVec, tau: f64) -> CVec {
    from.zip_map(to, |a, b| {
        let delta = (b * a.conj()).arg();
        Complex64::from_polar(1.0, a.arg() + tau * delta)
    })
}

/// Radar-constraint slack allowed on the committed phases, relative to the
/// echo term (a relative SINR shortfall of about the same size).
pub const RADAR_COMMIT_TOL: f64 = 1e-7;

/// Runs the full two-layer procedure from `entry` and commits a unit-modulus
/// phase vector that is radar-feasible and no worse than `entry`.
pub fn optimize_phase(
    channels: &ChannelSet,
    vars: &DesignVariables,
    aux: &AuxVariables,
    params: &SystemParams,
    settings: &AlgorithmSettings,
    radar: bool,
    pdd_tol: f64,
) -> Result<PhaseOutcome> {
    let entry = vars.phi.clone();
    let raw = build_phase_coefficients(channels, vars, aux, params);
    let unchanged = PhaseOutcome { phi: entry.clone(), trace: Vec::new(), converged: true, fell_back: false };
    if raw.is_inert() {
        return Ok(unchanged);
    }
    let m = entry.len();
    let pdd = &settings.pdd;
    let pull = inf_norm(&(&raw.t * &entry - &raw.x));
    let fallback = max_eigenvalue(&raw.t).max(0.0) + raw.x.norm() / (m as f64).sqrt();
    let scale = (4.0 * pdd.rho0 * pull / pdd.eta0).max(1e-12 * fallback);
    if !(scale > 0.0) || !scale.is_finite() {
        return Ok(unchanged);
    }
    let coeffs = raw.scaled(scale);

    let mut state = PddState::new(&entry, pdd);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev_outer_phi = state.phi.clone();
    let mut al;
    for outer in 1..=pdd.outer_max_iters {
        let (next_al, inner_iters) = inner_loop(&coeffs, &mut state, radar, settings)?;
        al = next_al;
        let gap = state.primal_gap();
        trace.push(PddTraceRecord {
            outer_iter: outer,
            primal_gap: inf_norm(&gap),
            phi_change: inf_norm(&(&state.phi - &prev_outer_phi)),
            al_value: al,
            rho: state.rho,
            inner_iters,
        });
        prev_outer_phi = state.phi.clone();
        if gap.norm() <= pdd_tol && trace.last().is_some_and(|r: &PddTraceRecord| r.phi_change <= pdd.step_tol) {
            converged = true;
            break;
        }
        outer_update(&mut state, pdd);
    }

    let entry_obj = raw.objective(&entry);
    let entry_slack = raw.radar_constraint(&entry).max(0.0) + RADAR_COMMIT_TOL * raw.radar_echo;
    let admissible = |phi: &CVec| {
        let obj_ok = raw.objective(phi) <= entry_obj + 1e-12 * entry_obj.abs().max(1.0);
        let radar_ok = !radar || raw.radar_constraint(phi) <= entry_slack;
        obj_ok && radar_ok
    };
    let candidate = state.psi.clone();
    if admissible(&candidate) {
        return Ok(PhaseOutcome { phi: candidate, trace, converged, fell_back: false });
    }
    let mut tau = 1.0;
    for _ in 0..40 {
        tau *= 0.5;
        let trial = phase_arc(&entry, &candidate, tau);
        if admissible(&trial) {
            return Ok(PhaseOutcome { phi: trial, trace, converged, fell_back: true });
        }
    }
    Ok(PhaseOutcome { phi: entry, trace, converged, fell_back: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{surrogate_sum, update_aux};
    use crate::linalg::{cn_matrix, cn_vector, cplx, random_phases};
    use crate::scenario::{draw_channels, ScenarioConfig};
    use crate::system::{assemble_effective, filter_powers};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_4;

    fn instance(seed: u64, m: usize) -> (ChannelSet, DesignVariables, AuxVariables, SystemParams, ChaCha8Rng) {
        let mut cfg = ScenarioConfig::desk();
        cfg.num_ris_elements = m;
        let ch = draw_channels(&cfg, seed).unwrap().normalized(cfg.noise_power());
        let params = SystemParams::normalized(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let phi = random_phases(&mut rng, m);
        let vars = DesignVariables {
            w: cn_matrix(&mut rng, 4, 4) * c(0.2),
            q: vec![0.1, 0.02],
            u0: cn_vector(&mut rng, 4),
            u: vec![cn_vector(&mut rng, 4), cn_vector(&mut rng, 4)],
            phi,
        };
        let eff = assemble_effective(&ch, &vars.phi).unwrap();
        let aux = update_aux(&eff, &vars, params.sigma_r_sq).unwrap();
        (ch, vars, aux, params, rng)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn coefficients_reproduce_surrogate_and_radar_terms() {
        for seed in 0..5 {
            let (ch, vars, aux, params, mut rng) = instance(seed, 8);
            let coeffs = build_phase_coefficients(&ch, &vars, &aux, &params);
            for _ in 0..5 {
                let phi = cn_vector(&mut rng, 8);
                let eff = assemble_effective(&ch, &phi).unwrap();
                let direct = -surrogate_sum(&eff, &vars, &aux, params.sigma_r_sq);
                assert!(rel(coeffs.objective(&phi), direct) < 1e-9, "{} vs {direct}", coeffs.objective(&phi));

                let p = filter_powers(&eff, &vars, &vars.u0, params.sigma_r_sq);
                let radar = p.users.iter().sum::<f64>() + p.probing_leak + p.noise - p.echo / params.gamma_r;
                assert!(rel(coeffs.radar_constraint(&phi), radar) < 1e-9);
            }
        }
    }

    #[test]
    fn no_reflection_is_inert() {
        let (mut ch, vars, aux, params, _) = instance(2, 6);
        ch.g_r.fill(c(0.0));
        let coeffs = build_phase_coefficients(&ch, &vars, &aux, &params);
        assert!(coeffs.is_inert());
        let out = optimize_phase(&ch, &vars, &aux, &params, &AlgorithmSettings::default(), true, 1e-6).unwrap();
        assert_eq!(out.phi, vars.phi);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn tiny_penalty_pins_phi_to_psi() {
        let (ch, vars, aux, params, mut rng) = instance(4, 8);
        let coeffs = build_phase_coefficients(&ch, &vars, &aux, &params);
        let psi = random_phases(&mut rng, 8);
        let st = PddState { phi: psi.clone(), psi: psi.clone(), lambda: CVec::zeros(8), rho: 1e-12, eta: 0.1, outer_iter: 0 };
        let phi = solve_phi_subproblem(&coeffs, &st, false, &AlgorithmSettings::default()).unwrap();
        let pull = inf_norm(&(&coeffs.t * &psi - &coeffs.x));
        assert!(inf_norm(&(phi - &psi)) <= 4.0 * st.rho * pull + 1e-12);
    }

    #[test]
    fn psi_step_beats_random_unit_modulus_points() {
        let (ch, vars, aux, params, mut rng) = instance(5, 6);
        let coeffs = build_phase_coefficients(&ch, &vars, &aux, &params);
        let phi = cn_vector(&mut rng, 6);
        let lambda = cn_vector(&mut rng, 6);
        let rho = 0.3;
        let psi = solve_psi_subproblem(&phi, &lambda, rho, &CVec::from_element(6, c(1.0)));
        let al = |psi: &CVec| {
            augmented_lagrangian(&coeffs, &PddState { phi: phi.clone(), psi: psi.clone(), lambda: lambda.clone(), rho, eta: 0.1, outer_iter: 0 })
        };
        let best = al(&psi);
        for _ in 0..200 {
            assert!(best <= al(&random_phases(&mut rng, 6)) + 1e-9 * best.abs());
        }
    }

    #[test]
    fn reduced_model_derivatives_match_finite_differences() {
        let (ch, vars, aux, params, mut rng) = instance(6, 5);
        let coeffs = build_phase_coefficients(&ch, &vars, &aux, &params).scaled(1e3);
        let st = PddState { lambda: cn_vector(&mut rng, 5) * c(0.1), rho: 0.5, ..PddState::new(&vars.phi, &PddSettings::default()) };
        let model = ReducedModel::new(&coeffs, &st, 0.3).unwrap();
        let theta: Vec<f64> = (0..5).map(|k| 0.7 * k as f64 - 1.0).collect();
        let at = |t: &[f64]| CVec::from_iterator(t.len(), t.iter().map(|a| Complex64::from_polar(1.0, *a)));
        let (grad, hess) = model.derivatives(&at(&theta));
        let h = 1e-5;
        for a in 0..5 {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[a] += h;
            dn[a] -= h;
            let fd = (model.value(&at(&up)) - model.value(&at(&dn))) / (2.0 * h);
            assert!((fd - grad[a]).abs() <= 1e-6 * grad.amax().max(1.0), "grad {a}: {fd} vs {}", grad[a]);
            let (gu, _) = model.derivatives(&at(&up));
            let (gd, _) = model.derivatives(&at(&dn));
            for b in 0..5 {
                let fd = (gu[b] - gd[b]) / (2.0 * h);
                assert!((fd - hess[(b, a)]).abs() <= 1e-5 * hess.amax().max(1.0), "hess {b},{a}");
            }
        }
    }

    #[test]
    fn inner_loop_does_not_raise_the_lagrangian() {
        let settings = AlgorithmSettings::default();
        for seed in 0..4 {
            let (ch, vars, aux, params, mut rng) = instance(seed, 8);
            let coeffs = build_phase_coefficients(&ch, &vars, &aux, &params).scaled(1e4);
            let mut st = PddState { lambda: cn_vector(&mut rng, 8) * c(0.05), rho: 0.2, ..PddState::new(&vars.phi, &settings.pdd) };
            let before = augmented_lagrangian(&coeffs, &st);
            let (after, iters) = inner_loop(&coeffs, &mut st, false, &settings).unwrap();
            assert!(iters >= 1);
            assert!(after <= before + 1e-9 * before.abs().max(1.0), "{after} > {before}");
            assert!((augmented_lagrangian(&coeffs, &st) - after).abs() <= 1e-9 * after.abs().max(1.0));
            assert!(crate::system::modulus_deviation(&st.psi) < 1e-12);
        }
    }

    #[test]
    fn single_element_matches_grid_search() {
        let settings = AlgorithmSettings::default();
        for seed in 0..6 {
            let (ch, vars, aux, params, _) = instance(seed, 1);
            let raw = build_phase_coefficients(&ch, &vars, &aux, &params);
            let out = optimize_phase(&ch, &vars, &aux, &params, &settings, false, 1e-6).unwrap();
            let grid = (0..100_000)
                .map(|i| raw.objective(&CVec::from_element(1, Complex64::from_polar(1.0, i as f64 * std::f64::consts::TAU / 1e5))))
                .fold(f64::INFINITY, f64::min);
            let got = raw.objective(&out.phi);
            assert!(got <= grid + 1e-8 * grid.abs().max(1.0), "seed {seed}: {got} vs grid {grid}");
            assert!((out.phi[0].norm() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn psi_angle_is_scale_free(re in -5.0f64..5.0, im in -5.0f64..5.0, lre in -5.0f64..5.0, lim in -5.0f64..5.0, rho in 1e-3f64..1e3) {
            let phi = cplx(re, im);
            let lambda = cplx(lre, lim);
            let a = phi + lambda * rho;
            let b = phi / rho + lambda;
            prop_assume!(a.norm() > 1e-6);
            let d = (a * b.conj()).arg().abs();
            prop_assert!(d < 1e-9);
        }
    }

    #[test]
    fn psi_phase_extraction() {
        let v = CVec::from_vec(vec![cplx(1.0, 1.0), cplx(-2.0, 0.0)]);
        let psi = solve_psi_subproblem(&v, &CVec::zeros(2), 1.0, &CVec::from_element(2, c(1.0)));
        assert!((psi[0] - Complex64::from_polar(1.0, FRAC_PI_4)).norm() < 1e-15);
        assert!((psi[1] - c(-1.0)).norm() < 1e-15);
    }

    #[test]
    fn psi_keeps_aligned_phases() {
        let phi = CVec::from_vec(vec![Complex64::from_polar(1.0, 0.3), Complex64::from_polar(1.0, -2.0)]);
        let psi = solve_psi_subproblem(&phi, &CVec::zeros(2), 0.7, &CVec::from_element(2, c(1.0)));
        assert!((psi - &phi).norm() < 1e-15);
    }

    #[test]
    fn psi_zero_magnitude_keeps_previous() {
        let prev = CVec::from_vec(vec![cplx(0.0, 1.0)]);
        let psi = solve_psi_subproblem(&CVec::zeros(1), &CVec::zeros(1), 1.0, &prev);
        assert_eq!(psi, prev);
    }

    fn state(gap: f64, rho: f64) -> PddState {
        PddState {
            phi: CVec::from_vec(vec![c(1.0 + gap), c(1.0)]),
            psi: CVec::from_element(2, c(1.0)),
            lambda: CVec::zeros(2),
            rho,
            eta: 0.1,
            outer_iter: 0,
        }
    }

    #[test]
    fn outer_update_branches() {
        let settings = PddSettings::default();
        let mut s = state(0.0, 1.0);
        outer_update(&mut s, &settings);
        assert_eq!(s.lambda, CVec::zeros(2));
        assert_eq!(s.rho, 1.0);

        let mut s = state(0.1, 2.0);
        s.eta = 0.2;
        outer_update(&mut s, &settings);
        assert!((s.lambda[0] - c(0.05)).norm() < 1e-15 && s.lambda[1].norm() == 0.0);

        let mut s = state(0.5, 1.0);
        outer_update(&mut s, &settings);
        assert_eq!(s.rho, 0.85);
        assert!((s.eta - 0.09).abs() < 1e-15);
    }

    #[test]
    fn pure_proximity_returns_psi() {
        let m = 3;
        let coeffs = PhaseCoefficients {
            t: CMat::zeros(m, m),
            t0: CMat::zeros(m, m),
            x: CVec::zeros(m),
            x0: CVec::zeros(m),
            c5: 0.0,
            c6: -1.0,
            radar_echo: 1.0,
        };
        let psi = CVec::from_vec(vec![cplx(0.0, 1.0), c(-1.0), Complex64::from_polar(1.0, 2.0)]);
        let st = PddState { phi: CVec::zeros(m), psi: psi.clone(), lambda: CVec::zeros(m), rho: 3.0, eta: 0.1, outer_iter: 0 };
        let phi = solve_phi_subproblem(&coeffs, &st, true, &AlgorithmSettings::default()).unwrap();
        assert!(inf_norm(&(phi - psi)) < 1e-9);
    }
}
