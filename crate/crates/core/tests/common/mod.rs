//! Instance generators and reference computations shared by the integration
//! tests. The references avoid the library's own solvers and metric helpers.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ris_isac::linalg::{cn_matrix, cn_vector, random_phases};
use ris_isac::qcqp::{QcqpProblem, QuadForm};
use ris_isac::scenario::{draw_channels, ChannelSet, ScenarioConfig};
use ris_isac::system::{assemble_effective, DesignVariables, EffectiveChannels, SystemParams};
use ris_isac::{CMat, CVec};

pub fn cx(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

pub struct Instance {
    pub config: ScenarioConfig,
    pub work: ChannelSet,
    pub params: SystemParams,
    pub vars: DesignVariables,
    pub eff: EffectiveChannels,
    pub rng: ChaCha8Rng,
}

/// Desk-scale channels (noise-normalized) with random variables inside their
/// budgets: `||W||^2 < P_BS`, `0 < q_k < P_U,k`, random filters and phases.
pub fn desk_instance(seed: u64) -> Instance {
    let config = ScenarioConfig::desk();
    let work = draw_channels(&config, seed).unwrap().normalized(config.noise_power());
    let params = SystemParams::normalized(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ seed);
    let nt = config.num_tx_antennas;
    let nr = config.num_rx_antennas;
    let mut w = cn_matrix(&mut rng, nt, nt);
    let fill: f64 = rng.random_range(0.05..1.0);
    w *= cx((fill * params.p_bs).sqrt() / w.norm());
    let q = params.p_users.iter().map(|p| p * rng.random_range(0.01..1.0)).collect();
    let vars = DesignVariables {
        w,
        q,
        u0: cn_vector(&mut rng, nr),
        u: (0..config.num_users).map(|_| cn_vector(&mut rng, nr)).collect(),
        phi: random_phases(&mut rng, config.num_ris_elements),
    };
    let eff = assemble_effective(&work, &vars.phi).unwrap();
    Instance { config, work, params, vars, eff, rng }
}

fn rayleigh(u: &CVec, a: &CMat) -> f64 {
    (u.adjoint() * a * u)[(0, 0)].re
}

/// Interference-plus-noise covariance seen by user `k` (all other users, the
/// target echo, the probing leakage and noise).
pub fn user_interference(eff: &EffectiveChannels, vars: &DesignVariables, sigma: f64, k: usize) -> CMat {
    let nr = eff.h.nrows();
    let hw = &eff.h * &vars.w;
    let gw = &eff.g * &vars.w;
    let mut r = &hw * hw.adjoint() + &gw * gw.adjoint() + CMat::identity(nr, nr) * cx(sigma);
    for (i, h) in eff.h_u.iter().enumerate() {
        if i != k {
            r += h * h.adjoint() * cx(vars.q[i]);
        }
    }
    r
}

/// `sum_k ln(1 + SINR_k)` for the given filters.
pub fn oracle_sum_rate(eff: &EffectiveChannels, vars: &DesignVariables, sigma: f64) -> f64 {
    (0..vars.u.len())
        .map(|k| {
            let u = &vars.u[k];
            let signal = vars.q[k] * (u.adjoint() * &eff.h_u[k])[(0, 0)].norm_sqr();
            let noise = rayleigh(u, &user_interference(eff, vars, sigma, k));
            (signal / noise).ln_1p()
        })
        .sum()
}

/// Radar interference covariance and echo covariance (unscaled).
pub fn oracle_radar_matrices(eff: &EffectiveChannels, vars: &DesignVariables, sigma: f64) -> (CMat, CMat) {
    let nr = eff.h.nrows();
    let hw = &eff.h * &vars.w;
    let gw = &eff.g * &vars.w;
    let mut interference = &gw * gw.adjoint() + CMat::identity(nr, nr) * cx(sigma);
    for (h, q) in eff.h_u.iter().zip(&vars.q) {
        interference += h * h.adjoint() * cx(*q);
    }
    (interference, &hw * hw.adjoint())
}

pub fn oracle_radar_sinr(eff: &EffectiveChannels, vars: &DesignVariables, sigma: f64) -> f64 {
    let (i, e) = oracle_radar_matrices(eff, vars, sigma);
    rayleigh(&vars.u0, &e) / rayleigh(&vars.u0, &i)
}

/// Real symmetric embedding `[[Re, -Im], [Im, Re]]`.
fn embed(a: &CMat) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(2 * n, 2 * n, |i, j| {
        let v = a[(i % n, j % n)];
        match (i < n, j < n) {
            (true, true) | (false, false) => v.re,
            (true, false) => -v.im,
            (false, true) => v.im,
        }
    })
}

/// Dominant generalized eigenvector of `(E1, E2)` through the real embedding:
/// whiten with the real Cholesky factor of `E1`, take the top eigenvector.
pub fn oracle_generalized_eigvec(e1: &CMat, e2: &CMat) -> CVec {
    let n = e1.nrows();
    let l = embed(e1).cholesky().expect("E1 positive definite").l();
    let l_inv = l.clone().try_inverse().unwrap();
    let mut c = &l_inv * embed(e2) * l_inv.transpose();
    c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let top = eig.eigenvalues.imax();
    let y: DVector<f64> = eig.eigenvectors.column(top).into_owned();
    let x = l.transpose().solve_upper_triangular(&y).unwrap();
    let v = CVec::from_fn(n, |i, _| Complex64::new(x[i], x[i + n]));
    let norm = v.norm();
    v / cx(norm)
}

/// Angle between two complex directions, insensitive to a common phase.
pub fn direction_angle(a: &CVec, b: &CVec) -> f64 {
    let overlap = ((a.adjoint() * b)[(0, 0)].norm() / (a.norm() * b.norm())).min(1.0);
    (1.0 - overlap * overlap).max(0.0).sqrt().asin()
}

fn eval(f: &QuadForm, w: &CVec) -> f64 {
    rayleigh(w, &f.p) - 2.0 * (f.r.adjoint() * w)[(0, 0)].re + f.s
}

fn lagrangian_minimizer(problem: &QcqpProblem, mu: &[f64]) -> CVec {
    let mut a = problem.objective.p.clone();
    let mut b = problem.objective.r.clone();
    for (g, &m) in problem.constraints.iter().zip(mu) {
        a += &g.p * cx(m);
        b += &g.r * cx(m);
    }
    a.lu().solve(&b).expect("strictly convex Lagrangian")
}

/// Reference solution of a strictly convex QCQP by cyclic dual coordinate
/// ascent: each multiplier is set by bisection on the sign of its constraint
/// (the partial derivative of the dual function), the others held fixed.
pub fn oracle_qcqp(problem: &QcqpProblem) -> (CVec, f64, Vec<f64>) {
    let m = problem.constraints.len();
    let mut mu = vec![0.0; m];
    for _sweep in 0..2000 {
        let before = mu.clone();
        for i in 0..m {
            let g_at = |mu: &[f64], v: f64| {
                let mut trial = mu.to_vec();
                trial[i] = v;
                eval(&problem.constraints[i], &lagrangian_minimizer(problem, &trial))
            };
            if g_at(&mu, 0.0) <= 0.0 {
                mu[i] = 0.0;
                continue;
            }
            let mut lo = 0.0;
            let mut hi = mu[i].max(1e-8);
            while g_at(&mu, hi) > 0.0 {
                lo = hi;
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if g_at(&mu, mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            mu[i] = hi;
        }
        let moved = mu.iter().zip(&before).map(|(a, b)| (a - b).abs() / (1.0 + a.abs())).fold(0.0, f64::max);
        if moved < 1e-14 {
            break;
        }
    }
    let w = lagrangian_minimizer(problem, &mu);
    let f = eval(&problem.objective, &w);
    (w, f, mu)
}

/// Random strictly convex QCQP with `w = 0` strictly feasible and the
/// unconstrained minimizer pushed outside the feasible set.
pub fn random_qcqp(rng: &mut ChaCha8Rng, n: usize, num_constraints: usize) -> QcqpProblem {
    let b = cn_matrix(rng, n, n);
    let p0 = &b * b.adjoint() + CMat::identity(n, n) * cx(0.1);
    let r0 = cn_vector(rng, n) * cx(rng.random_range(1.0..20.0));
    let mut constraints = Vec::new();
    for _ in 0..num_constraints {
        let rank = rng.random_range(1..=n);
        let c = cn_matrix(rng, n, rank);
        let p = &c * c.adjoint();
        let r = cn_vector(rng, n) * cx(0.3);
        constraints.push(QuadForm::new(p, r, -rng.random_range(0.5..3.0)));
    }
    QcqpProblem::new(QuadForm::new(p0, r0, rng.random_range(-1.0..1.0)), constraints)
}
