//! Outer block-coordinate sweep: feasible initialization, the per-iteration
//! block schedule, rollback on numerical feasibility loss and the run history.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::blocks::{self, AuxVariables};
use crate::error::{Error, Result};
use crate::linalg::{dominant_generalized_eigvec, random_phases, solve_hpd, CMat, CVec};
use crate::pdd::{self, PddTraceRecord};
use crate::scenario::{linear_to_db, ChannelSet, ScenarioConfig};
use crate::system::{
    assemble_effective, c, constraint_residuals, radar_sinr, sum_rate, ConstraintResiduals, DesignVariables,
    EffectiveChannels, SystemParams,
};

/// Which blocks take part in the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunMode {
    /// Optimize the surface phases (otherwise they stay at their initial draw).
    pub optimize_phase: bool,
    /// Keep the radar constraint and the probing beamformer. Without it the
    /// beamformer is held at zero.
    pub radar: bool,
}

impl RunMode {
    pub const FULL: Self = Self { optimize_phase: true, radar: true };
    pub const FIXED_PHASE: Self = Self { optimize_phase: false, radar: true };
    pub const COMM_ONLY: Self = Self { optimize_phase: true, radar: false };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Aux,
    Beamformer,
    Power,
    UserFilters,
    RadarFilter,
    Phase,
}

impl Block {
    pub const ALL: [Block; 6] = [Block::Aux, Block::Beamformer, Block::Power, Block::UserFilters, Block::RadarFilter, Block::Phase];

    pub fn name(self) -> &'static str {
        match self {
            Block::Aux => "aux",
            Block::Beamformer => "beamformer",
            Block::Power => "power",
            Block::UserFilters => "user_filters",
            Block::RadarFilter => "radar_filter",
            Block::Phase => "phase",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 0 for the initial point.
    pub iteration: usize,
    pub sum_rate_nats: f64,
    /// Linear radar SINR, absent when the radar constraint is dropped.
    pub radar_sinr: Option<f64>,
    /// Wall time per block, in [`Block::ALL`] order.
    pub block_seconds: [f64; 6],
    pub rollbacks: Vec<&'static str>,
    pub pdd_trace: Vec<PddTraceRecord>,
    pub pdd_converged: bool,
    pub pdd_fell_back: bool,
}

impl IterationRecord {
    pub fn sum_rate_bits(&self) -> f64 {
        self.sum_rate_nats / std::f64::consts::LN_2
    }

    pub fn radar_sinr_db(&self) -> Option<f64> {
        self.radar_sinr.map(linear_to_db)
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    /// Physical channels.
    pub channels: ChannelSet,
    /// Noise-normalized copy used by every block.
    pub work: ChannelSet,
    pub config: ScenarioConfig,
    pub params: SystemParams,
    pub mode: RunMode,
    pub vars: DesignVariables,
    pub aux: AuxVariables,
    pub history: Vec<IterationRecord>,
    /// Halvings of the user powers needed to reach a feasible start.
    pub init_halvings: usize,
    pub converged: bool,
}

fn matched_beamformer(h_t: &CVec, nt: usize, p_bs: f64) -> CMat {
    let n = h_t.norm();
    let dir = if n > 0.0 { h_t / c(n) } else { CVec::from_element(h_t.len(), c(1.0 / (h_t.len() as f64).sqrt())) };
    let mut w = CMat::zeros(h_t.len(), nt);
    let amp = c((p_bs / nt as f64).sqrt());
    for mut col in w.column_iter_mut() {
        col.copy_from(&(&dir * amp));
    }
    w
}

/// Regularized matched filters `(sum q h h^H + ... + sigma^2 I)^{-1} h_k`.
fn mmse_filters(eff: &EffectiveChannels, vars: &DesignVariables, sigma_r_sq: f64) -> Result<Vec<CVec>> {
    let cov = blocks::received_covariance(eff, vars, sigma_r_sq);
    eff.h_u
        .iter()
        .map(|h| {
            let u = solve_hpd(&cov, h).ok_or_else(|| Error::InvalidState("received covariance is singular".into()))?;
            Ok(if u.norm() > 0.0 { u } else { CVec::from_element(h.len(), c(1.0)) })
        })
        .collect()
}

pub fn initialize(channels: &ChannelSet, config: &ScenarioConfig, seed: u64, mode: RunMode) -> Result<OptimizerState> {
    config.validate()?;
    channels.check_dimensions()?;
    if !channels.all_finite() {
        return Err(Error::invalid("channels contain non-finite entries"));
    }
    let work = channels.normalized(config.noise_power());
    let params = SystemParams::normalized(config);
    let nt = channels.num_tx();
    let nr = channels.num_rx();

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let phi = random_phases(&mut rng, channels.num_elements());
    let w = if mode.radar { matched_beamformer(&work.h_t, nt, params.p_bs) } else { CMat::zeros(nt, nt) };
    let mut vars = DesignVariables {
        w,
        q: params.p_users.clone(),
        u0: CVec::from_element(nr, c(1.0 / (nr as f64).sqrt())),
        u: vec![CVec::from_element(nr, c(1.0)); channels.num_users()],
        phi,
    };
    let eff = assemble_effective(&work, &vars.phi)?;

    let mut halvings = 0;
    if mode.radar {
        loop {
            let (e1, e2) = blocks::radar_pencil(&eff, &vars, &params);
            vars.u0 = dominant_generalized_eigvec(&e2, &e1)
                .ok_or_else(|| Error::InvalidState("radar pencil is not positive definite".into()))?;
            if radar_sinr(&eff, &vars, params.sigma_r_sq)? >= params.gamma_r {
                break;
            }
            if halvings == config.algorithm.max_init_halvings {
                return Err(Error::InfeasibleScenario(format!(
                    "radar SINR target unattainable after {halvings} halvings of the user powers"
                )));
            }
            vars.q.iter_mut().for_each(|q| *q *= 0.5);
            halvings += 1;
        }
    }
    vars.u = mmse_filters(&eff, &vars, params.sigma_r_sq)?;
    let aux = blocks::update_aux(&eff, &vars, params.sigma_r_sq)?;

    let mut state = OptimizerState {
        channels: channels.clone(),
        work,
        config: config.clone(),
        params,
        mode,
        vars,
        aux,
        history: Vec::new(),
        init_halvings: halvings,
        converged: false,
    };
    let record = state.snapshot(0, [0.0; 6], Vec::new(), Vec::new(), true, false)?;
    state.history.push(record);
    Ok(state)
}

impl OptimizerState {
    pub fn effective(&self) -> Result<EffectiveChannels> {
        assemble_effective(&self.work, &self.vars.phi)
    }

    pub fn sum_rate(&self) -> Result<f64> {
        sum_rate(&self.effective()?, &self.vars, self.params.sigma_r_sq)
    }

    pub fn radar_sinr(&self) -> Result<Option<f64>> {
        if !self.mode.radar {
            return Ok(None);
        }
        radar_sinr(&self.effective()?, &self.vars, self.params.sigma_r_sq).map(Some)
    }

    pub fn residuals(&self) -> Result<ConstraintResiduals> {
        constraint_residuals(&self.effective()?, &self.vars, &self.params)
    }

    /// Number of completed outer iterations.
    pub fn iterations(&self) -> usize {
        self.history.last().map_or(0, |r| r.iteration)
    }

    fn snapshot(
        &self,
        iteration: usize,
        block_seconds: [f64; 6],
        rollbacks: Vec<&'static str>,
        pdd_trace: Vec<PddTraceRecord>,
        pdd_converged: bool,
        pdd_fell_back: bool,
    ) -> Result<IterationRecord> {
        Ok(IterationRecord {
            iteration,
            sum_rate_nats: self.sum_rate()?,
            radar_sinr: self.radar_sinr()?,
            block_seconds,
            rollbacks,
            pdd_trace,
            pdd_converged,
            pdd_fell_back,
        })
    }
}

/// Tracks consecutive feasibility losses per block.
struct RollbackGuard {
    streak: [usize; 6],
    this_iter: Vec<&'static str>,
}

impl RollbackGuard {
    fn apply<T>(&mut self, block: Block, outcome: Result<T>, commit: impl FnOnce(T)) -> Result<()> {
        let idx = block as usize;
        match outcome {
            Ok(v) => {
                commit(v);
                self.streak[idx] = 0;
                Ok(())
            }
            Err(Error::FeasibilityLoss { block: name, detail }) => {
                self.streak[idx] += 1;
                self.this_iter.push(block.name());
                if self.streak[idx] >= 2 {
                    return Err(Error::FeasibilityLoss { block: name, detail: format!("{detail} (second consecutive rollback)") });
                }
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

/// Runs outer iterations until the relative sum-rate change drops below the
/// configured tolerance or the iteration cap is hit.
pub fn run(mut state: OptimizerState) -> Result<OptimizerState> {
    let settings = state.config.algorithm;
    let pdd_tol = state.config.pdd_tol();
    let sigma = state.params.sigma_r_sq;
    let mode = state.mode;
    let mut guard = RollbackGuard { streak: [0; 6], this_iter: Vec::new() };
    let mut prev = state.sum_rate()?;
    state.converged = false;

    for _ in 0..settings.outer_max_iters {
        let mut seconds = [0.0; 6];
        guard.this_iter.clear();
        let mut pdd_trace = Vec::new();
        let mut pdd_converged = true;
        let mut pdd_fell_back = false;
        let mut eff = state.effective()?;

        let clock = Instant::now();
        state.aux = blocks::update_aux(&eff, &state.vars, sigma)?;
        seconds[Block::Aux as usize] = clock.elapsed().as_secs_f64();

        if mode.radar {
            let clock = Instant::now();
            let out = blocks::update_beamformer(&eff, &state.vars, &state.aux, &state.params, &settings);
            guard.apply(Block::Beamformer, out, |o| state.vars.w = o.value)?;
            seconds[Block::Beamformer as usize] = clock.elapsed().as_secs_f64();
        }

        let clock = Instant::now();
        let out = blocks::update_power(&eff, &state.vars, &state.aux, &state.params, &settings, mode.radar);
        guard.apply(Block::Power, out, |o| state.vars.q = o.value)?;
        seconds[Block::Power as usize] = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        state.vars.u = blocks::update_user_filters(&eff, &state.vars, &state.aux, sigma)?;
        seconds[Block::UserFilters as usize] = clock.elapsed().as_secs_f64();

        if mode.radar {
            let clock = Instant::now();
            let out = blocks::update_radar_filter(&eff, &state.vars, &state.params, &settings);
            guard.apply(Block::RadarFilter, out, |o| state.vars.u0 = o.u0)?;
            seconds[Block::RadarFilter as usize] = clock.elapsed().as_secs_f64();
        }

        if mode.optimize_phase {
            let clock = Instant::now();
            let out = pdd::optimize_phase(&state.work, &state.vars, &state.aux, &state.params, &settings, mode.radar, pdd_tol);
            guard.apply(Block::Phase, out, |o| {
                state.vars.phi = o.phi;
                pdd_converged = o.converged;
                pdd_fell_back = o.fell_back;
                pdd_trace = o.trace;
            })?;
            eff = state.effective()?;
            seconds[Block::Phase as usize] = clock.elapsed().as_secs_f64();
        }

        let rate = sum_rate(&eff, &state.vars, sigma)?;
        let iteration = state.iterations() + 1;
        let record = state.snapshot(iteration, seconds, guard.this_iter.clone(), pdd_trace, pdd_converged, pdd_fell_back)?;
        state.history.push(record);
        let change = (rate - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
        prev = rate;
        if change < settings.outer_tol {
            state.converged = true;
            break;
        }
    }
    Ok(state)
}

/// Per-iteration trace: sum rate, radar SINR and per-block wall time.
pub fn write_trace(history: &[IterationRecord], path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration", "sum_rate_nats", "sum_rate_bits", "radar_sinr_db"];
    let timing: Vec<String> = Block::ALL.iter().map(|b| format!("{}_seconds", b.name())).collect();
    header.extend(timing.iter().map(String::as_str));
    out.write_record(&header)?;
    for r in history {
        let mut row = vec![
            r.iteration.to_string(),
            format!("{:.8e}", r.sum_rate_nats),
            format!("{:.8e}", r.sum_rate_bits()),
            r.radar_sinr_db().map_or_else(|| "NA".to_string(), |v| format!("{v:.8e}")),
        ];
        row.extend(r.block_seconds.iter().map(|s| format!("{s:.8e}")));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Phase-optimizer trace of every outer iteration of a run.
pub fn write_pdd_trace(history: &[IterationRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "iteration,pdd_outer_iter,primal_gap_inf,phi_change_inf,al_value")?;
    for r in history {
        for t in &r.pdd_trace {
            writeln!(
                out,
                "{},{},{:.8e},{:.8e},{:.8e}",
                r.iteration, t.outer_iter, t.primal_gap, t.phi_change, t.al_value
            )?;
        }
    }
    out.flush()?;
    Ok(())
}
