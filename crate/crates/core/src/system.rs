//! Optimization variables, effective channels and the link metrics built on them.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{inner, norm_sq, CMat, CVec};
use crate::scenario::{ChannelSet, ScenarioConfig};

/// The five optimization blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignVariables {
    /// Probing beamformer, `Nt x Nt`.
    pub w: CMat,
    /// Uplink transmit powers in watts.
    pub q: Vec<f64>,
    /// Radar receive filter.
    pub u0: CVec,
    /// Per-user receive filters.
    pub u: Vec<CVec>,
    /// RIS reflection coefficients.
    pub phi: CVec,
}

/// Budgets, threshold and noise level that the metrics are evaluated against.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    pub p_bs: f64,
    pub p_users: Vec<f64>,
    /// Linear radar SINR threshold.
    pub gamma_r: f64,
    pub sigma_r_sq: f64,
}

impl SystemParams {
    /// Physical units: noise power in watts taken from the config.
    pub fn from_config(config: &ScenarioConfig) -> Self {
        Self {
            p_bs: config.p_bs(),
            p_users: config.p_users(),
            gamma_r: config.gamma_r(),
            sigma_r_sq: config.noise_power(),
        }
    }

    /// For channels produced by [`ChannelSet::normalized`]: unit noise power.
    pub fn normalized(config: &ScenarioConfig) -> Self {
        Self { sigma_r_sq: 1.0, ..Self::from_config(config) }
    }
}

/// Channels seen by the receive filters for a given phase vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveChannels {
    /// Target round trip `alpha h_R h_T^H`, `Nr x Nt`.
    pub h: CMat,
    /// Reflected probing path plus self-interference, `Nr x Nt`.
    pub g: CMat,
    /// Effective uplink channels, length `Nr` each.
    pub h_u: Vec<CVec>,
}

/// `G_r^H diag(phi)`.
fn reflect(g_r: &CMat, phi: &CVec) -> CMat {
    let mut out = g_r.adjoint();
    for (m, mut col) in out.column_iter_mut().enumerate() {
        col *= phi[m];
    }
    out
}

pub fn assemble_effective(channels: &ChannelSet, phi: &CVec) -> Result<EffectiveChannels> {
    channels.check_dimensions()?;
    if phi.len() != channels.num_elements() {
        return Err(Error::invalid(format!(
            "phase vector has length {}, surface has {} elements",
            phi.len(),
            channels.num_elements()
        )));
    }
    let h = &channels.h_r * channels.h_t.adjoint() * channels.alpha;
    let gr_phi = reflect(&channels.g_r, phi);
    let g = &gr_phi * &channels.g_t + channels.h_s.adjoint();
    let h_u = channels.h_bu.iter().zip(&channels.h_ru).map(|(bu, ru)| bu + &gr_phi * ru).collect();
    Ok(EffectiveChannels { h, g, h_u })
}

/// Power terms collected by a receive filter `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPowers {
    /// `q_i |u^H h_i|^2` per user.
    pub users: Vec<f64>,
    /// `||u^H H W||^2`.
    pub echo: f64,
    /// `||u^H G W||^2`.
    pub probing_leak: f64,
    /// `sigma^2 ||u||^2`.
    pub noise: f64,
}

impl FilterPowers {
    pub fn total(&self) -> f64 {
        self.users.iter().sum::<f64>() + self.echo + self.probing_leak + self.noise
    }
}

fn row_energy(u: &CVec, m: &CMat) -> f64 {
    // ||u^H M||^2 = ||M^H u||^2
    norm_sq(&(m.adjoint() * u))
}

pub fn filter_powers(eff: &EffectiveChannels, vars: &DesignVariables, u: &CVec, sigma_r_sq: f64) -> FilterPowers {
    let hw = &eff.h * &vars.w;
    let gw = &eff.g * &vars.w;
    FilterPowers {
        users: eff.h_u.iter().zip(&vars.q).map(|(h, &q)| q * inner(u, h).norm_sqr()).collect(),
        echo: row_energy(u, &hw),
        probing_leak: row_energy(u, &gw),
        noise: sigma_r_sq * norm_sq(u),
    }
}

pub fn radar_sinr(eff: &EffectiveChannels, vars: &DesignVariables, sigma_r_sq: f64) -> Result<f64> {
    if norm_sq(&vars.u0) == 0.0 {
        return Err(Error::invalid("radar filter u0 is zero"));
    }
    let p = filter_powers(eff, vars, &vars.u0, sigma_r_sq);
    Ok(p.echo / (p.users.iter().sum::<f64>() + p.probing_leak + p.noise))
}

pub fn user_sinr(eff: &EffectiveChannels, vars: &DesignVariables, sigma_r_sq: f64, k: usize) -> Result<f64> {
    let u = vars.u.get(k).ok_or_else(|| Error::invalid(format!("no user {k}")))?;
    if norm_sq(u) == 0.0 {
        return Err(Error::invalid(format!("user filter {k} is zero")));
    }
    let p = filter_powers(eff, vars, u, sigma_r_sq);
    let signal = p.users[k];
    Ok(signal / (p.total() - signal))
}

/// `sum_k ln(1 + SINR_k)` in nats.
pub fn sum_rate(eff: &EffectiveChannels, vars: &DesignVariables, sigma_r_sq: f64) -> Result<f64> {
    (0..vars.u.len()).map(|k| user_sinr(eff, vars, sigma_r_sq, k).map(f64::ln_1p)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintResiduals {
    /// `SINR_r - Gamma_r`, linear.
    pub radar_slack: f64,
    /// `P_BS - ||W||_F^2`.
    pub power_slack: f64,
    /// `P_U,k - q_k`.
    pub user_power_slacks: Vec<f64>,
    /// `max_m ||phi_m| - 1|`.
    pub modulus_deviation: f64,
}

impl ConstraintResiduals {
    /// All constraints hold within `tol` (the radar slack is checked relative
    /// to the threshold).
    pub fn feasible(&self, params: &SystemParams, tol: f64, q: &[f64]) -> bool {
        self.radar_slack >= -tol * params.gamma_r
            && self.power_slack >= -tol * params.p_bs
            && self.user_power_slacks.iter().all(|s| *s >= -tol)
            && q.iter().all(|v| *v >= -tol)
            && self.modulus_deviation <= tol
    }
}

pub fn constraint_residuals(
    eff: &EffectiveChannels,
    vars: &DesignVariables,
    params: &SystemParams,
) -> Result<ConstraintResiduals> {
    Ok(ConstraintResiduals {
        radar_slack: radar_sinr(eff, vars, params.sigma_r_sq)? - params.gamma_r,
        power_slack: params.p_bs - vars.w.norm_squared(),
        user_power_slacks: params.p_users.iter().zip(&vars.q).map(|(p, q)| p - q).collect(),
        modulus_deviation: modulus_deviation(&vars.phi),
    })
}

pub fn modulus_deviation(phi: &CVec) -> f64 {
    phi.iter().map(|v| (v.norm() - 1.0).abs()).fold(0.0, f64::max)
}

pub(crate) fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}
