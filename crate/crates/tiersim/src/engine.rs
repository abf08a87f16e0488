//! Per-step coupling of the upstream market, capital accumulation and the
//! downstream sector, plus trace recording and serialization.
//!
//! Within a step: shocks fire, the API market clears with downstream token
//! demand evaluated inside the price loop, revenues fund compute, capital and
//! data stocks take an Euler step, agents update orchestration capital, the
//! frontier advances and agents enter or exit.

use crate::config::{ScenarioConfig, ShockKind};
use crate::downstream::{self, DownstreamAgentState, Tech, Trajectory, ARCH_SPLIT};
use crate::error::{ModelError, ModelResult};
use crate::market::{self, MarketEquilibrium, MarketParams};
use crate::upstream::{self, FrontierState, UpstreamFirmState};
use crate::valuation::{self, DepreciationParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io;
use std::path::Path;

pub const TRACE_SCHEMA: &str = "tiersim-trace/1";

/// Capital floor relative to the initial mean stock. An Euler step that would
/// take K below it is clipped and logged as a saturation event.
pub const K_FLOOR_REL: f64 = 1e-9;

pub const FIRM_COLUMNS: [&str; 18] = [
    "step", "t", "firm", "K", "D", "A", "price", "share", "Q", "q_shadow", "delta", "gap",
    "revenue", "investment", "compute", "production", "invest_policy", "innovation_tax",
];

pub const AGGREGATE_COLUMNS: [&str; 15] = [
    "step", "t", "Q_total", "Q_demanded", "expenditure", "hhi", "mean_price", "A_bar", "K_base",
    "solver_iterations", "solver_residual", "converged", "rationed", "price_override",
    "innovation_tax",
];

pub const DOWNSTREAM_COLUMNS: [&str; 19] = [
    "step", "t", "alive", "entries", "exits", "mean_O", "health", "d_star", "d_reason",
    "d_tool", "d_mem", "tau", "total_Y", "total_L", "total_tokens", "spend", "growing",
    "shrinking", "demand_factor",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmRow {
    pub step: usize,
    pub t: f64,
    pub firm: usize,
    #[serde(rename = "K")]
    pub k_ai: f64,
    #[serde(rename = "D")]
    pub d_eff: f64,
    #[serde(rename = "A")]
    pub tfp: f64,
    pub price: f64,
    pub share: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    pub q_shadow: f64,
    pub delta: f64,
    pub gap: f64,
    pub revenue: f64,
    pub investment: f64,
    pub compute: f64,
    pub production: f64,
    pub invest_policy: f64,
    pub innovation_tax: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub step: usize,
    pub t: f64,
    #[serde(rename = "Q_total")]
    pub q_total: f64,
    #[serde(rename = "Q_demanded")]
    pub q_demanded: f64,
    pub expenditure: f64,
    pub hhi: f64,
    pub mean_price: f64,
    #[serde(rename = "A_bar")]
    pub a_bar: f64,
    #[serde(rename = "K_base")]
    pub k_base: f64,
    pub solver_iterations: usize,
    pub solver_residual: f64,
    pub converged: bool,
    pub rationed: bool,
    pub price_override: bool,
    pub innovation_tax: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamRow {
    pub step: usize,
    pub t: f64,
    pub alive: usize,
    pub entries: usize,
    pub exits: usize,
    #[serde(rename = "mean_O")]
    pub mean_o: f64,
    pub health: f64,
    pub d_star: f64,
    pub d_reason: f64,
    pub d_tool: f64,
    pub d_mem: f64,
    pub tau: f64,
    #[serde(rename = "total_Y")]
    pub total_y: f64,
    #[serde(rename = "total_L")]
    pub total_l: f64,
    pub total_tokens: f64,
    pub spend: f64,
    pub growing: usize,
    pub shrinking: usize,
    pub demand_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationEvent {
    pub step: usize,
    pub firm: usize,
    pub variable: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub step: usize,
    pub t: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub schema: String,
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub n_firms: usize,
    pub dt: f64,
    /// Calibrated or configured initial frontier level.
    pub a0: f64,
    /// Calibrated or configured downstream productivity scale.
    pub z: f64,
    /// Firm rows, step-major.
    pub firms: Vec<FirmRow>,
    pub aggregates: Vec<AggregateRow>,
    pub downstream: Vec<DownstreamRow>,
    pub saturation_events: Vec<SaturationEvent>,
    pub failure: Option<Failure>,
}

impl SimulationTrace {
    pub fn steps(&self) -> usize {
        self.aggregates.len()
    }

    pub fn firm(&self, step: usize, i: usize) -> &FirmRow {
        &self.firms[step * self.n_firms + i]
    }

    pub fn firm_series<F: Fn(&FirmRow) -> f64>(&self, i: usize, f: F) -> Vec<f64> {
        (0..self.steps()).map(|k| f(self.firm(k, i))).collect()
    }

    pub fn shares_at(&self, step: usize) -> Vec<f64> {
        (0..self.n_firms).map(|i| self.firm(step, i).share).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.aggregates.iter().map(|r| r.t).collect()
    }

    /// First step whose time is at or after `t`.
    pub fn step_at(&self, t: f64) -> Option<usize> {
        self.aggregates.iter().position(|r| r.t >= t - 1e-9 * self.dt)
    }

    pub fn final_hhi(&self) -> f64 {
        self.aggregates.last().map(|r| r.hhi).unwrap_or(f64::NAN)
    }

    pub fn hhi_series(&self) -> Vec<f64> {
        self.aggregates.iter().map(|r| r.hhi).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }
}

/// Complete state of one simulated economy.
pub struct World {
    cfg: ScenarioConfig,
    mp: MarketParams,
    tech: Tech,
    dep: DepreciationParams,
    step: usize,
    frontier: FrontierState,
    firms: Vec<UpstreamFirmState>,
    agents: Vec<DownstreamAgentState>,
    rng: ChaCha8Rng,
    o_dist: LogNormal<f64>,
    z: f64,
    a0: f64,
    demand_factor: f64,
    price_override: Option<Vec<f64>>,
    shock_fired: Vec<bool>,
    q_norm: f64,
    o0_mean: f64,
    exit_floor: f64,
    k_floor: f64,
    saturation: Vec<SaturationEvent>,
}

/// Downstream token demand: `scale * K_base * token_intensity(p_bar)`.
struct Demand<'a> {
    scale: f64,
    tech: &'a Tech,
}

impl Demand<'_> {
    fn tokens(&self, p_bar: f64, k_base: f64) -> f64 {
        self.scale * k_base * downstream::token_intensity(p_bar, self.tech)
    }
}

impl World {
    pub fn new(cfg: &ScenarioConfig) -> ModelResult<World> {
        let u = &cfg.upstream;
        let d = &cfg.downstream;
        let n = u.n;
        let mp = MarketParams::from_config(cfg);
        let tech = Tech::from(d);
        let dep = DepreciationParams {
            delta0: u.delta0,
            delta1: u.delta1_value(),
            delta2: u.delta2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sim.seed);
        let o_dist = LogNormal::new(d.o_init_logmean, d.o_init_logsd)
            .map_err(|e| ModelError::Domain(format!("log-normal parameters: {e}")))?;
        let agents: Vec<DownstreamAgentState> = (0..d.m0)
            .map(|_| DownstreamAgentState::new(o_dist.sample(&mut rng)))
            .collect();
        let k0 = u.initial_capital();
        let tfp = u.tfp_multipliers();
        let p0 = vec![mp.unloaded_price(n); n];
        let w: f64 = agents.iter().map(|a| a.o.powf(1.0 / tech.psi_k)).sum();

        // Productivity scale: either given, or set so that the opening market
        // clears at the target utilization.
        let (z, eq0) = match d.z {
            Some(z) => {
                let dm = Demand { scale: z.powf(1.0 / tech.psi_k) * w, tech: &tech };
                let eq = market::solve_equilibrium(&k0, |p, kb| dm.tokens(p, kb), &p0, &mp)?;
                (z, eq)
            }
            None => {
                // Prices that clear the target volume, then the demand scale
                // that makes that volume the demanded one at those prices.
                let target = d.utilization0 * n as f64 * u.q_bar;
                let st = market::solve_static_equilibrium(&k0, target, &mp)?;
                if !st.converged {
                    return Err(ModelError::NonConvergence("opening prices did not converge".into()));
                }
                let unit = Demand { scale: 1.0, tech: &tech };
                let per_unit = unit.tokens(st.mean_price(), market::k_base(&st.shares, &k0));
                if !(per_unit > 0.0) {
                    return Err(ModelError::Degenerate("no downstream demand at opening prices".into()));
                }
                let scale = target / per_unit;
                let dm = Demand { scale, tech: &tech };
                let e = market::solve_equilibrium(&k0, |p, kb| dm.tokens(p, kb), &st.prices, &mp)?;
                ((scale / w).powf(tech.psi_k), e)
            }
        };
        if !eq0.converged {
            return Err(ModelError::NonConvergence("opening market did not clear".into()));
        }

        let eta = u.eta_data();
        let dmult = u.data_multipliers();
        let d_ref: Vec<f64> = eq0.quantities.iter().map(|q| eta * q / u.mu_d).collect();
        let g = cfg.frontier.g_a;

        // Frontier level: either given, or set so that the opening state grows
        // at the frontier rate.
        let a0 = match cfg.frontier.a0 {
            Some(a) => a,
            None => {
                let target = g + dep.delta0 + dep.delta1 * g;
                let mut acc = 0.0;
                let mut cnt = 0usize;
                for i in 0..n {
                    let c = u.invest_rate * eq0.prices[i] * eq0.quantities[i];
                    let f = upstream::gross_production(
                        tfp[i],
                        c,
                        d_ref[i] + u.d_public,
                        u.alpha,
                        u.rho_ces,
                        u.gamma_scale,
                    )?;
                    if f > 0.0 {
                        acc += target * k0[i] / f;
                        cnt += 1;
                    }
                }
                if cnt > 0 {
                    acc / cnt as f64
                } else {
                    1.0
                }
            }
        };

        let firms = (0..n)
            .map(|i| UpstreamFirmState {
                k_ai: k0[i],
                d_eff: d_ref[i] * dmult[i],
                tfp: tfp[i],
                price: eq0.prices[i],
                share: eq0.shares[i],
                q: eq0.quantities[i],
                q_shadow: 1.0,
                delta_cur: dep.delta0 + dep.delta1 * g,
                invest_policy: u.invest_rate,
            })
            .collect();
        let k_mean = k0.iter().sum::<f64>() / n as f64;
        let q_norm = valuation::shadow_value_index(1.0 / n as f64, k_mean, u.theta)?;
        let o0_mean = agents.iter().map(|a| a.o).sum::<f64>() / agents.len() as f64;
        Ok(World {
            cfg: cfg.clone(),
            mp,
            tech,
            dep,
            step: 0,
            frontier: FrontierState { a_bar: a0, t: 0.0 },
            firms,
            agents,
            rng,
            o_dist,
            z,
            a0,
            demand_factor: 1.0,
            price_override: None,
            shock_fired: vec![false; cfg.shocks.len()],
            q_norm,
            o0_mean,
            exit_floor: 1e-4 * d.o_init_logmean.exp(),
            k_floor: K_FLOOR_REL * k_mean,
            saturation: Vec::new(),
        })
    }

    pub fn firms(&self) -> &[UpstreamFirmState] {
        &self.firms
    }

    pub fn agents(&self) -> &[DownstreamAgentState] {
        &self.agents
    }

    pub fn frontier(&self) -> FrontierState {
        self.frontier
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.sim.dt
    }

    fn apply_shocks(&mut self, t: f64) {
        let dt = self.cfg.sim.dt;
        for (k, sh) in self.cfg.shocks.iter().enumerate() {
            if self.shock_fired[k] || sh.time > t + 1e-6 * dt {
                continue;
            }
            self.shock_fired[k] = true;
            match sh.kind {
                ShockKind::RdBoost => {
                    for (i, f) in self.firms.iter_mut().enumerate() {
                        if sh.target.includes(i) {
                            if self.cfg.sim.rd_boost_relative {
                                f.invest_policy *= 1.0 + sh.magnitude;
                            } else {
                                f.invest_policy += sh.magnitude;
                            }
                        }
                    }
                }
                ShockKind::RdStop => {
                    for (i, f) in self.firms.iter_mut().enumerate() {
                        if sh.target.includes(i) {
                            f.invest_policy = 0.0;
                        }
                    }
                }
                ShockKind::RdMultiplier => {
                    for (i, f) in self.firms.iter_mut().enumerate() {
                        if sh.target.includes(i) {
                            f.invest_policy *= sh.magnitude;
                        }
                    }
                }
                ShockKind::PriceOverrideFactor => {
                    let base: Vec<f64> = match &self.price_override {
                        Some(p) => p.clone(),
                        None => self.firms.iter().map(|f| f.price).collect(),
                    };
                    self.price_override = Some(
                        base.iter()
                            .enumerate()
                            .map(|(i, p)| if sh.target.includes(i) { p * sh.magnitude } else { *p })
                            .collect(),
                    );
                }
                ShockKind::FrontierJumpFactor => self.frontier.a_bar *= sh.magnitude,
                ShockKind::DemandScaleFactor => self.demand_factor *= sh.magnitude,
            }
        }
    }

    /// Advance one step and return the records describing it.
    pub fn step(&mut self) -> ModelResult<(Vec<FirmRow>, AggregateRow, DownstreamRow)> {
        let t = self.time();
        let dt = self.cfg.sim.dt;
        let g = self.cfg.frontier.g_a;
        let u = self.cfg.upstream.clone();
        let n = u.n;
        self.apply_shocks(t);

        // Market clearing.
        let k: Vec<f64> = self.firms.iter().map(|f| f.k_ai).collect();
        let psi = self.tech.psi_k;
        let w: f64 = self
            .agents
            .iter()
            .filter(|a| a.alive)
            .map(|a| (self.z * a.o).powf(1.0 / psi))
            .sum();
        let dm = Demand { scale: w * self.demand_factor, tech: &self.tech };
        let eq: MarketEquilibrium = match &self.price_override {
            Some(p) => market::clear_at_prices(&k, p, |pb, kb| dm.tokens(pb, kb), &self.mp)?,
            None => {
                let p0: Vec<f64> = self.firms.iter().map(|f| f.price).collect();
                market::solve_equilibrium(&k, |pb, kb| dm.tokens(pb, kb), &p0, &self.mp)?
            }
        };
        if !eq.converged {
            return Err(ModelError::NonConvergence(format!(
                "residual {:.3e} after {} iterations",
                eq.residual, eq.iterations
            )));
        }
        let k_base = market::k_base(&eq.shares, &k);
        let q_served = eq.q_total();
        let expenditure = eq.expenditure();
        let p_bar = if q_served > 0.0 { expenditure / q_served } else { eq.mean_price() };

        // Upstream flows.
        let gaps = valuation::all_gaps(&k)?;
        let eta = u.eta_data();
        let mut firm_rows = Vec::with_capacity(n);
        let mut tax_sum = 0.0;
        let mut tax_n = 0usize;
        for i in 0..n {
            let f = &mut self.firms[i];
            f.price = eq.prices[i];
            f.share = eq.shares[i];
            f.q = eq.quantities[i];
            f.delta_cur = valuation::depreciation_rate(gaps[i], g, &self.dep);
            f.q_shadow = valuation::shadow_value_index(f.share, f.k_ai, u.theta)? / self.q_norm;
            let revenue = f.price * f.q;
            let compute = upstream::compute_from_investment(revenue, f.invest_policy);
            let a = f.tfp * self.frontier.a_bar;
            let d_in = f.d_eff + u.d_public;
            let production =
                upstream::gross_production(a, compute, d_in, u.alpha, u.rho_ces, u.gamma_scale)?;
            let mpc = upstream::marginal_product_compute(
                a,
                compute,
                d_in,
                u.alpha,
                u.rho_ces,
                u.gamma_scale,
            );
            let tax = valuation::required_innovation_intensity(
                self.dep.delta0 + self.dep.delta1 * g,
                mpc * revenue / f.k_ai,
            );
            if tax.is_finite() {
                tax_sum += tax;
                tax_n += 1;
            }
            firm_rows.push(FirmRow {
                step: self.step,
                t,
                firm: i,
                k_ai: f.k_ai,
                d_eff: f.d_eff,
                tfp: a,
                price: f.price,
                share: f.share,
                q: f.q,
                q_shadow: f.q_shadow,
                delta: f.delta_cur,
                gap: gaps[i],
                revenue,
                investment: compute,
                compute,
                production,
                invest_policy: f.invest_policy,
                innovation_tax: tax,
            });
            let k_next = f.k_ai + dt * (production - f.delta_cur * f.k_ai);
            if k_next < self.k_floor {
                self.saturation.push(SaturationEvent { step: self.step, firm: i, variable: "K".into() });
            }
            f.k_ai = k_next.max(self.k_floor);
            let d_raw = f.d_eff + dt * (eta * f.q - u.mu_d * f.d_eff);
            if d_raw < 0.0 {
                self.saturation.push(SaturationEvent { step: self.step, firm: i, variable: "D".into() });
            }
            f.d_eff = upstream::step_data(f.d_eff, f.q, eta, u.mu_d, dt);
            if !f.k_ai.is_finite() || !f.d_eff.is_finite() {
                return Err(ModelError::Domain(format!("non-finite stock for firm {i}")));
            }
        }
        let hhi: f64 = eq.shares.iter().map(|s| s * s).sum();
        let agg = AggregateRow {
            step: self.step,
            t,
            q_total: q_served,
            q_demanded: eq.q_demanded,
            expenditure,
            hhi,
            mean_price: p_bar,
            a_bar: self.frontier.a_bar,
            k_base,
            solver_iterations: eq.iterations,
            solver_residual: eq.residual,
            converged: eq.converged,
            rationed: eq.rationed,
            price_override: self.price_override.is_some(),
            innovation_tax: if tax_n > 0 { tax_sum / tax_n as f64 } else { f64::INFINITY },
        };

        // Downstream sector at the served price.
        let d_star = downstream::optimal_architecture(p_bar, k_base, 1.0, &self.tech);
        let tau = downstream::token_multiplier(d_star, self.tech.xi_token);
        let net = downstream::net_price(d_star, p_bar, &self.tech);
        let served = if eq.q_demanded > 0.0 { q_served / eq.q_demanded } else { 1.0 };
        let supplier = eq
            .shares
            .iter()
            .enumerate()
            .fold(0, |b, (i, s)| if *s > eq.shares[b] { i } else { b });
        let (mut alive, mut sum_o, mut total_y, mut total_l, mut total_tokens) = (0usize, 0.0, 0.0, 0.0, 0.0);
        let (mut growing, mut shrinking) = (0usize, 0usize);
        for a in self.agents.iter_mut().filter(|a| a.alive) {
            alive += 1;
            sum_o += a.o;
            let y = downstream::output_at_optimal_labor(self.z * a.o, k_base, d_star, p_bar, &self.tech)
                * self.demand_factor
                * served;
            a.d_arch = d_star;
            a.y = y;
            a.l = if net > 0.0 { (1.0 - psi) * net * y / self.tech.wage } else { 0.0 };
            a.tokens = y * tau;
            a.supplier = supplier;
            total_y += y;
            total_l += a.l;
            total_tokens += a.tokens;
            if a.o > 0.0 {
                match downstream::wrapper_trap_check(a.o, y, g, &self.tech)? {
                    Trajectory::Growing => growing += 1,
                    Trajectory::Shrinking => shrinking += 1,
                    Trajectory::Boundary => {}
                }
            }
            a.o = downstream::step_orchestration(a.o, y, g, &self.tech, dt);
        }
        let mean_o = if alive > 0 { sum_o / alive as f64 } else { 0.0 };

        self.frontier = upstream::step_frontier(self.frontier, g, dt, None);

        // Entry and exit.
        let mut entries = 0usize;
        let rate = self.cfg.downstream.entry_rate * dt;
        if rate > 0.0 {
            let pois = Poisson::new(rate).map_err(|e| ModelError::Domain(format!("entry rate: {e}")))?;
            entries = pois.sample(&mut self.rng) as usize;
            for _ in 0..entries {
                let o = self.o_dist.sample(&mut self.rng);
                self.agents.push(DownstreamAgentState::new(o));
            }
        }
        let mut exits = 0usize;
        let t_next = t + dt;
        for a in self.agents.iter_mut().filter(|a| a.alive) {
            if a.o < self.exit_floor {
                let since = *a.low_since.get_or_insert(t_next);
                if t_next - since >= 1.0 - 1e-9 {
                    a.alive = false;
                    exits += 1;
                }
            } else {
                a.low_since = None;
            }
        }

        let comps = ARCH_SPLIT.map(|w| w * d_star);
        let down = DownstreamRow {
            step: self.step,
            t,
            alive,
            entries,
            exits,
            mean_o,
            health: mean_o / self.o0_mean,
            d_star,
            d_reason: comps[0],
            d_tool: comps[1],
            d_mem: comps[2],
            tau,
            total_y,
            total_l,
            total_tokens,
            spend: p_bar * total_tokens,
            growing,
            shrinking,
            demand_factor: self.demand_factor,
        };
        self.step += 1;
        Ok((firm_rows, agg, down))
    }
}

/// Integrate the configured horizon. A failing step halts the run and is
/// recorded in the returned trace.
pub fn run(cfg: &ScenarioConfig) -> SimulationTrace {
    let mut trace = SimulationTrace {
        schema: TRACE_SCHEMA.into(),
        name: cfg.name.clone(),
        seed: cfg.sim.seed,
        config_hash: cfg.hash(),
        n_firms: cfg.upstream.n,
        dt: cfg.sim.dt,
        a0: f64::NAN,
        z: f64::NAN,
        firms: Vec::new(),
        aggregates: Vec::new(),
        downstream: Vec::new(),
        saturation_events: Vec::new(),
        failure: None,
    };
    let mut world = match World::new(cfg) {
        Ok(w) => w,
        Err(e) => {
            trace.failure = Some(Failure { step: 0, t: 0.0, reason: e.to_string() });
            return trace;
        }
    };
    trace.a0 = world.a0;
    trace.z = world.z;
    let steps = cfg.sim.steps();
    for k in 0..steps {
        match world.step() {
            Ok((f, a, d)) => {
                trace.firms.extend(f);
                trace.aggregates.push(a);
                trace.downstream.push(d);
            }
            Err(e) => {
                trace.failure = Some(Failure { step: k, t: k as f64 * cfg.sim.dt, reason: e.to_string() });
                break;
            }
        }
    }
    trace.saturation_events = std::mem::take(&mut world.saturation);
    trace
}

#[derive(Debug, thiserror::Error)]
pub enum TraceIoError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("csv error in {path}: {message}")]
    Csv { path: String, message: String },
    #[error("schema mismatch in {path}: {message}")]
    Schema { path: String, message: String },
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> TraceIoError + '_ {
    move |e| TraceIoError::Io { path: path.display().to_string(), source: e }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> TraceIoError + '_ {
    move |e| TraceIoError::Csv { path: path.display().to_string(), message: e.to_string() }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), TraceIoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    if rows.is_empty() {
        w.write_record(header).map_err(csv_err(path))?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>, TraceIoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let got = r.headers().map_err(csv_err(path))?.clone();
    if got.iter().collect::<Vec<_>>() != header {
        return Err(TraceIoError::Schema {
            path: path.display().to_string(),
            message: format!("expected columns {header:?}, found {:?}", got.iter().collect::<Vec<_>>()),
        });
    }
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row.map_err(|e: csv::Error| TraceIoError::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Headline metrics written to `summary.json`.
pub fn summary_json(trace: &SimulationTrace, cfg: &ScenarioConfig) -> serde_json::Value {
    let last = trace.aggregates.last();
    let last_down = trace.downstream.last();
    let final_shares = if trace.steps() > 0 { trace.shares_at(trace.steps() - 1) } else { vec![] };
    let num = |x: Option<f64>| x.filter(|v| v.is_finite()).map(serde_json::Value::from).unwrap_or(serde_json::Value::Null);
    serde_json::json!({
        "schema": TRACE_SCHEMA,
        "version": env!("CARGO_PKG_VERSION"),
        "name": trace.name,
        "seed": trace.seed,
        "config_hash": trace.config_hash,
        "steps": trace.steps(),
        "dt": trace.dt,
        "n_firms": trace.n_firms,
        "failure": trace.failure,
        "saturation_events": trace.saturation_events.len(),
        "metrics": {
            "A0": num(Some(trace.a0)),
            "Z": num(Some(trace.z)),
            "final_hhi": num(last.map(|r| r.hhi)),
            "final_shares": final_shares,
            "final_Q_total": num(last.map(|r| r.q_total)),
            "final_expenditure": num(last.map(|r| r.expenditure)),
            "final_mean_price": num(last.map(|r| r.mean_price)),
            "final_health": num(last_down.map(|r| r.health)),
            "final_d_star": num(last_down.map(|r| r.d_star)),
            "final_alive": last_down.map(|r| r.alive),
            "max_solver_iterations": trace.aggregates.iter().map(|r| r.solver_iterations).max(),
        },
        "config": cfg,
    })
}

/// Write `firms.csv`, `aggregates.csv`, `downstream.csv` and `summary.json`.
pub fn write_trace_dir(dir: &Path, trace: &SimulationTrace, cfg: &ScenarioConfig) -> Result<Vec<String>, TraceIoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = [
        ("firms.csv", 0),
        ("aggregates.csv", 1),
        ("downstream.csv", 2),
    ];
    let mut written = Vec::new();
    for (name, kind) in files {
        let p = dir.join(name);
        match kind {
            0 => write_csv(&p, &trace.firms, &FIRM_COLUMNS)?,
            1 => write_csv(&p, &trace.aggregates, &AGGREGATE_COLUMNS)?,
            _ => write_csv(&p, &trace.downstream, &DOWNSTREAM_COLUMNS)?,
        }
        written.push(p.display().to_string());
    }
    let p = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary_json(trace, cfg)).expect("summary serializes");
    fs::write(&p, text + "\n").map_err(io_err(&p))?;
    written.push(p.display().to_string());
    Ok(written)
}

/// Read a trace directory back, checking column schemas and the summary
/// schema tag. Returns the trace and the embedded scenario.
pub fn read_trace_dir(dir: &Path) -> Result<(SimulationTrace, ScenarioConfig), TraceIoError> {
    let sp = dir.join("summary.json");
    let text = fs::read_to_string(&sp).map_err(io_err(&sp))?;
    let schema_err = |m: String| TraceIoError::Schema { path: sp.display().to_string(), message: m };
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| schema_err(e.to_string()))?;
    if v["schema"] != TRACE_SCHEMA {
        return Err(schema_err(format!("unsupported schema {}", v["schema"])));
    }
    let cfg: ScenarioConfig =
        serde_json::from_value(v["config"].clone()).map_err(|e| schema_err(e.to_string()))?;
    let firms: Vec<FirmRow> = read_csv(&dir.join("firms.csv"), &FIRM_COLUMNS)?;
    let aggregates: Vec<AggregateRow> = read_csv(&dir.join("aggregates.csv"), &AGGREGATE_COLUMNS)?;
    let downstream: Vec<DownstreamRow> = read_csv(&dir.join("downstream.csv"), &DOWNSTREAM_COLUMNS)?;
    let n = cfg.upstream.n;
    if firms.len() != aggregates.len() * n || downstream.len() != aggregates.len() {
        return Err(schema_err("row counts of the trace tables disagree".into()));
    }
    let failure = serde_json::from_value(v["failure"].clone()).unwrap_or(None);
    let trace = SimulationTrace {
        schema: TRACE_SCHEMA.into(),
        name: cfg.name.clone(),
        seed: v["seed"].as_u64().unwrap_or(cfg.sim.seed),
        config_hash: v["config_hash"].as_str().unwrap_or_default().to_string(),
        n_firms: n,
        dt: cfg.sim.dt,
        a0: v["metrics"]["A0"].as_f64().unwrap_or(f64::NAN),
        z: v["metrics"]["Z"].as_f64().unwrap_or(f64::NAN),
        firms,
        aggregates,
        downstream,
        saturation_events: Vec::new(),
        failure,
    };
    Ok((trace, cfg))
}
