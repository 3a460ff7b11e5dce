//! Scenario configuration, geometry and seeded channel realizations.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cn_matrix, cn_sample, cn_vector, cplx, CMat, CVec};

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// Large-scale power gain `10^(ref/10) * d^(-exponent)`.
pub fn path_loss(distance: f64, exponent: f64, reference_db: f64) -> Result<f64> {
    if !(distance > 0.0) || !distance.is_finite() {
        return Err(Error::invalid(format!("path loss distance must be positive, got {distance}")));
    }
    Ok(db_to_linear(reference_db) * distance.powf(-exponent))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathlossExponents {
    pub bs_user: f64,
    pub bs_ris: f64,
    pub ris_user: f64,
    pub bs_target: f64,
    pub target_bs: f64,
}

impl Default for PathlossExponents {
    fn default() -> Self {
        Self { bs_user: 3.6, bs_ris: 2.7, ris_user: 2.4, bs_target: 2.2, target_bs: 2.2 }
    }
}

/// Penalty dual decomposition schedule for the phase block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PddSettings {
    /// Initial penalty `rho`.
    pub rho0: f64,
    /// Penalty shrink factor `c` applied on the violation branch.
    pub penalty_shrink: f64,
    /// Initial dual-trigger threshold `eta`.
    pub eta0: f64,
    pub eta_shrink: f64,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub outer_max_iters: usize,
    /// Stopping tolerance on `||phi - psi||_2`, scaled by `sqrt(M)`.
    pub tol_per_sqrt_element: f64,
    /// Newton iterations on the reduced phase model used to propose inner
    /// iterates (0 disables the proposals).
    pub newton_steps: usize,
    /// The outer loop also requires `||phi - phi_prev||_inf` below this.
    pub step_tol: f64,
    /// The inner loop also requires `||psi_new - psi||_inf` below this.
    pub fixed_point_tol: f64,
}

impl Default for PddSettings {
    fn default() -> Self {
        Self {
            rho0: 10.0,
            penalty_shrink: 0.85,
            eta0: 0.1,
            eta_shrink: 0.9,
            inner_tol: 1e-8,
            inner_max_iters: 100,
            outer_max_iters: 50,
            tol_per_sqrt_element: 1e-6,
            newton_steps: 30,
            step_tol: 1e-6,
            fixed_point_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmSettings {
    pub qcqp_tol: f64,
    pub qcqp_max_iters: usize,
    pub mm_tol: f64,
    pub mm_max_iters: usize,
    pub outer_tol: f64,
    pub outer_max_iters: usize,
    pub max_init_halvings: usize,
    pub pdd: PddSettings,
}

impl Default for AlgorithmSettings {
    fn default() -> Self {
        Self {
            qcqp_tol: 1e-8,
            qcqp_max_iters: 500,
            mm_tol: 1e-6,
            mm_max_iters: 30,
            outer_tol: 1e-4,
            outer_max_iters: 50,
            max_init_halvings: 20,
            pdd: PddSettings::default(),
        }
    }
}

/// Every physical and algorithmic parameter of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_users: usize,
    pub num_ris_elements: usize,
    pub num_tx_antennas: usize,
    pub num_rx_antennas: usize,
    pub bs_position: [f64; 3],
    pub ris_position: [f64; 3],
    pub target_position: [f64; 3],
    pub user_placement_radius: f64,
    pub user_altitude: f64,
    pub p_bs_dbm: f64,
    /// Per-user budgets; a single entry applies to every user.
    pub p_user_dbm: Vec<f64>,
    pub noise_dbm: f64,
    pub gamma_r_db: f64,
    pub sigma_t_sq: f64,
    pub rician_si_db: f64,
    pub rician_bs_ris_db: f64,
    pub pathloss: PathlossExponents,
    pub rho_si_db: f64,
    pub reference_pathloss_db: f64,
    pub seed: u64,
    pub algorithm: AlgorithmSettings,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ScenarioConfig {
    /// Four users, a 100-element surface and 4x4 antennas.
    pub fn paper() -> Self {
        Self {
            num_users: 4,
            num_ris_elements: 100,
            num_tx_antennas: 4,
            num_rx_antennas: 4,
            bs_position: [0.0, 0.0, 4.5],
            ris_position: [0.0, -100.0, 2.5],
            target_position: [0.0, 6.0, 12.5],
            user_placement_radius: 10.0,
            user_altitude: 1.5,
            p_bs_dbm: 30.0,
            p_user_dbm: vec![23.0],
            noise_dbm: -90.0,
            gamma_r_db: 5.0,
            sigma_t_sq: 1.0,
            rician_si_db: 5.0,
            rician_bs_ris_db: 4.0,
            pathloss: PathlossExponents::default(),
            rho_si_db: -110.0,
            reference_pathloss_db: -30.0,
            seed: 0,
            algorithm: AlgorithmSettings::default(),
        }
    }

    /// Same geometry with two users and a 16-element surface.
    pub fn desk() -> Self {
        Self { num_users: 2, num_ris_elements: 16, ..Self::paper() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected paper or desk)"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_users", self.num_users),
            ("num_ris_elements", self.num_ris_elements),
            ("num_tx_antennas", self.num_tx_antennas),
            ("num_rx_antennas", self.num_rx_antennas),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if !(self.user_placement_radius > 0.0) {
            return Err(Error::invalid("user_placement_radius must be positive"));
        }
        if self.p_user_dbm.len() != 1 && self.p_user_dbm.len() != self.num_users {
            return Err(Error::invalid(format!(
                "p_user_dbm has {} entries, expected 1 or {}",
                self.p_user_dbm.len(),
                self.num_users
            )));
        }
        let finite = [self.p_bs_dbm, self.noise_dbm, self.gamma_r_db, self.rho_si_db, self.reference_pathloss_db]
            .into_iter()
            .chain(self.p_user_dbm.iter().copied())
            .all(f64::is_finite);
        if !finite {
            return Err(Error::invalid("power levels must be finite"));
        }
        if !(self.sigma_t_sq > 0.0) {
            return Err(Error::invalid("sigma_t_sq must be positive"));
        }
        Ok(())
    }

    pub fn p_bs(&self) -> f64 {
        dbm_to_watts(self.p_bs_dbm)
    }

    pub fn p_users(&self) -> Vec<f64> {
        (0..self.num_users)
            .map(|k| dbm_to_watts(if self.p_user_dbm.len() == 1 { self.p_user_dbm[0] } else { self.p_user_dbm[k] }))
            .collect()
    }

    pub fn noise_power(&self) -> f64 {
        dbm_to_watts(self.noise_dbm)
    }

    pub fn gamma_r(&self) -> f64 {
        db_to_linear(self.gamma_r_db)
    }

    pub fn pdd_tol(&self) -> f64 {
        self.algorithm.pdd.tol_per_sqrt_element * (self.num_ris_elements as f64).sqrt()
    }
}

/// All raw channels of one realization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    /// BS -> RIS, `M x Nt`.
    pub g_t: CMat,
    /// RIS -> BS (enters as `G_r^H`), `M x Nr`.
    pub g_r: CMat,
    /// BS <- user k, length `Nr`.
    pub h_bu: Vec<CVec>,
    /// RIS <- user k, length `M`.
    pub h_ru: Vec<CVec>,
    /// BS -> target steering, length `Nt`.
    pub h_t: CVec,
    /// target -> BS steering, length `Nr`.
    pub h_r: CVec,
    /// Self-interference, `Nt x Nr` (enters as `H_s^H`).
    pub h_s: CMat,
    /// Round-trip reflection coefficient including path loss.
    pub alpha: Complex64,
    pub user_positions: Vec<[f64; 3]>,
}

impl ChannelSet {
    pub fn num_users(&self) -> usize {
        self.h_bu.len()
    }

    pub fn num_elements(&self) -> usize {
        self.g_t.nrows()
    }

    pub fn num_tx(&self) -> usize {
        self.g_t.ncols()
    }

    pub fn num_rx(&self) -> usize {
        self.g_r.ncols()
    }

    pub fn check_dimensions(&self) -> Result<()> {
        let (m, nt, nr) = (self.num_elements(), self.num_tx(), self.num_rx());
        let ok = self.g_r.nrows() == m
            && self.h_ru.len() == self.h_bu.len()
            && self.h_bu.iter().all(|h| h.len() == nr)
            && self.h_ru.iter().all(|h| h.len() == m)
            && self.h_t.len() == nt
            && self.h_r.len() == nr
            && self.h_s.shape() == (nt, nr);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("channel set dimensions are inconsistent"))
        }
    }

    pub fn all_finite(&self) -> bool {
        let fin = |v: &Complex64| v.re.is_finite() && v.im.is_finite();
        self.g_t.iter().all(fin)
            && self.g_r.iter().all(fin)
            && self.h_bu.iter().all(|h| h.iter().all(fin))
            && self.h_ru.iter().all(|h| h.iter().all(fin))
            && self.h_t.iter().all(fin)
            && self.h_r.iter().all(fin)
            && self.h_s.iter().all(fin)
            && fin(&self.alpha)
    }

    /// Scale every received-signal path by `1/sqrt(noise)` so that SINRs can be
    /// evaluated with unit noise power.
    pub fn normalized(&self, noise_power: f64) -> Self {
        let s = cplx(1.0 / noise_power.sqrt(), 0.0);
        let mut out = self.clone();
        out.g_r *= s;
        out.h_s *= s;
        out.alpha *= s;
        for h in &mut out.h_bu {
            *h *= s;
        }
        out
    }

    /// Remove the reflected paths (`G_r = 0`, `h_RU = 0`).
    pub fn without_ris(&self) -> Self {
        let mut out = self.clone();
        out.g_r.fill(cplx(0.0, 0.0));
        for h in &mut out.h_ru {
            h.fill(cplx(0.0, 0.0));
        }
        out
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Response of an `n`-element half-wavelength ULA laid along the x-axis toward
/// the direction `from -> to`. Entries have unit modulus.
pub fn steering_vector(n: usize, from: &[f64; 3], to: &[f64; 3]) -> CVec {
    let d = distance(from, to);
    let cos_axis = if d > 0.0 { (to[0] - from[0]) / d } else { 0.0 };
    CVec::from_fn(n, |i, _| Complex64::from_polar(1.0, PI * i as f64 * cos_axis))
}

fn rician(pl: f64, kappa: f64, los: &CMat, nlos: &CMat) -> CMat {
    let a = (kappa / (1.0 + kappa)).sqrt();
    let b = (1.0 / (1.0 + kappa)).sqrt();
    (los * cplx(a, 0.0) + nlos * cplx(b, 0.0)) * cplx(pl.sqrt(), 0.0)
}

const MIN_SEPARATION: f64 = 1e-9;

/// Draw a full channel realization. A pure function of `(config, seed)`.
///
/// Draw order puts everything that does not depend on `M` first, so sweeps over
/// the surface size share user placements, direct links, SI and target draws.
pub fn draw_channels(config: &ScenarioConfig, seed: u64) -> Result<ChannelSet> {
    config.validate()?;
    let (k, m, nt, nr) = (config.num_users, config.num_ris_elements, config.num_tx_antennas, config.num_rx_antennas);
    let pl_ref = config.reference_pathloss_db;
    let exps = &config.pathloss;
    let bs = &config.bs_position;
    let ris = &config.ris_position;
    let target = &config.target_position;

    let d_br = distance(bs, ris);
    let d_bt = distance(bs, target);
    if d_br < MIN_SEPARATION || d_bt < MIN_SEPARATION {
        return Err(Error::invalid("BS, RIS and target positions must be distinct"));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // Users uniform over the half disc x >= 0 around the RIS.
    let user_positions: Vec<[f64; 3]> = (0..k)
        .map(|_| {
            let r = config.user_placement_radius * rng.random::<f64>().sqrt();
            let theta = rng.random_range(-PI / 2.0..=PI / 2.0);
            [ris[0] + r * theta.cos(), ris[1] + r * theta.sin(), config.user_altitude]
        })
        .collect();
    for p in &user_positions {
        if distance(p, bs) < MIN_SEPARATION || distance(p, ris) < MIN_SEPARATION {
            return Err(Error::invalid("user position coincides with the BS or RIS"));
        }
    }

    let h_bu = user_positions
        .iter()
        .map(|p| {
            let pl = path_loss(distance(p, bs), exps.bs_user, pl_ref)?;
            Ok(cn_vector(&mut rng, nr) * cplx(pl.sqrt(), 0.0))
        })
        .collect::<Result<Vec<_>>>()?;

    let pl_bt = path_loss(d_bt, exps.bs_target, pl_ref)?;
    let pl_tb = path_loss(d_bt, exps.target_bs, pl_ref)?;
    let alpha = cn_sample(&mut rng) * (config.sigma_t_sq * pl_bt * pl_tb).sqrt();
    let h_t = steering_vector(nt, bs, target);
    let h_r = steering_vector(nr, bs, target);

    let mut si_los = cn_matrix(&mut rng, nt, nr);
    let fro = si_los.norm();
    si_los *= cplx(((nt * nr) as f64).sqrt() / fro, 0.0);
    let si_nlos = cn_matrix(&mut rng, nt, nr);
    let h_s = rician(db_to_linear(config.rho_si_db), db_to_linear(config.rician_si_db), &si_los, &si_nlos);

    let pl_br = path_loss(d_br, exps.bs_ris, pl_ref)?;
    let kappa_br = db_to_linear(config.rician_bs_ris_db);
    let ris_to_bs = steering_vector(m, ris, bs);
    let g_t_los = &ris_to_bs * steering_vector(nt, bs, ris).adjoint();
    let g_r_los = &ris_to_bs * steering_vector(nr, bs, ris).adjoint();
    let g_t = rician(pl_br, kappa_br, &g_t_los, &cn_matrix(&mut rng, m, nt));
    let g_r = rician(pl_br, kappa_br, &g_r_los, &cn_matrix(&mut rng, m, nr));

    let h_ru = user_positions
        .iter()
        .map(|p| {
            let pl = path_loss(distance(p, ris), exps.ris_user, pl_ref)?;
            Ok(cn_vector(&mut rng, m) * cplx(pl.sqrt(), 0.0))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ChannelSet { g_t, g_r, h_bu, h_ru, h_t, h_r, h_s, alpha, user_positions })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn path_loss_examples() {
        assert!(close(path_loss(1.0, 2.4, -30.0).unwrap(), 1e-3, 1e-12));
        assert!(close(path_loss(10.0, 2.0, -30.0).unwrap(), 1e-5, 1e-12));
        // log-domain cross-check: -30 dB - 22 log10(6) dB
        let log_domain = 10f64.powf((-30.0 - 22.0 * 6f64.log10()) / 10.0);
        let direct = path_loss(6.0, 2.2, -30.0).unwrap();
        assert!(close(direct, log_domain, 1e-12));
        assert!(close(direct, 1.941186e-5, 1e-6));
    }

    #[test]
    fn path_loss_rejects_nonpositive_distance() {
        assert!(matches!(path_loss(0.0, 2.0, -30.0), Err(Error::InvalidInput(_))));
        assert!(matches!(path_loss(-1.0, 2.0, -30.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn dbm_round_trip() {
        for dbm in [-120.0, -90.0, 0.0, 23.0, 30.0, 46.5] {
            let back = watts_to_dbm(dbm_to_watts(dbm));
            assert!((back - dbm).abs() <= 1e-12 * dbm.abs().max(1.0));
        }
        assert!(close(dbm_to_watts(30.0), 1.0, 1e-15));
    }

    #[test]
    fn draws_are_deterministic_and_sized() {
        let cfg = ScenarioConfig::desk();
        let a = draw_channels(&cfg, 7).unwrap();
        let b = draw_channels(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, draw_channels(&cfg, 8).unwrap());
        a.check_dimensions().unwrap();
        assert!(a.all_finite());
        assert_eq!(a.g_t.shape(), (16, 4));
        assert_eq!(a.h_ru.len(), 2);
    }

    #[test]
    fn steering_vectors_have_unit_modulus() {
        let v = steering_vector(8, &[0.0, 0.0, 0.0], &[3.0, 4.0, 1.0]);
        assert!(v.iter().all(|x| (x.norm() - 1.0).abs() < 1e-14));
    }

    #[test]
    fn rician_limit_is_pure_los() {
        let mut cfg = ScenarioConfig::desk();
        cfg.rician_bs_ris_db = 200.0;
        cfg.ris_position = [30.0, -80.0, 2.5];
        let ch = draw_channels(&cfg, 3).unwrap();
        let pl = path_loss(distance(&cfg.bs_position, &cfg.ris_position), cfg.pathloss.bs_ris, -30.0).unwrap();
        let los = steering_vector(16, &cfg.ris_position, &cfg.bs_position)
            * steering_vector(4, &cfg.bs_position, &cfg.ris_position).adjoint()
            * cplx(pl.sqrt(), 0.0);
        let err = (&ch.g_t - &los).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err <= 1e-6 * pl.sqrt(), "err {err}");
    }

    #[test]
    fn coincident_positions_rejected() {
        let mut cfg = ScenarioConfig::desk();
        cfg.target_position = cfg.bs_position;
        assert!(matches!(draw_channels(&cfg, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ScenarioConfig::desk();
        cfg.num_ris_elements = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::desk();
        cfg.p_user_dbm = vec![20.0, 21.0, 22.0];
        assert!(cfg.validate().is_err());
        cfg.p_user_dbm = vec![20.0, 21.0];
        assert_eq!(cfg.p_users().len(), 2);
    }

    #[test]
    fn toml_overrides_apply_on_top_of_defaults() {
        let cfg = ScenarioConfig::from_toml_str("num_ris_elements = 32\nrho_si_db = -90.0\n[algorithm.pdd]\nrho0 = 5.0\n").unwrap();
        assert_eq!(cfg.num_ris_elements, 32);
        assert_eq!(cfg.rho_si_db, -90.0);
        assert_eq!(cfg.algorithm.pdd.rho0, 5.0);
        assert_eq!(cfg.num_users, 4);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(ScenarioConfig::from_toml_str("bogus_key = 1").is_err());
    }
}
