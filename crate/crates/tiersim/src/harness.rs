//! Reproducible studies: preset experiments, robustness suites and ablations.
//!
//! A study is a base scenario plus a list of variations, each run
//! `replications` times. Runs execute on a bounded worker pool and are merged
//! in run-index order, so results do not depend on the worker count.

use crate::analysis;
use crate::config::{ConfigError, ScenarioConfig, ShockKind, ShockSpec, Target};
use crate::engine::{self, SimulationTrace, TraceIoError, World};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const STUDY_SCHEMA: &str = "tiersim-study/1";

pub const STUDIES: [&str; 9] = [
    "exp1", "exp2", "exp3", "exp4", "exp5", "mc", "nsweep", "stress", "ablation",
];

const PRESETS: [(&str, &str); 9] = [
    ("baseline", include_str!("../../../presets/baseline.toml")),
    ("robustness", include_str!("../../../presets/robustness.toml")),
    ("exp1", include_str!("../../../presets/exp1.toml")),
    ("exp2", include_str!("../../../presets/exp2.toml")),
    ("exp2_catchup", include_str!("../../../presets/exp2_catchup.toml")),
    ("exp2_convergence", include_str!("../../../presets/exp2_convergence.toml")),
    ("exp3", include_str!("../../../presets/exp3.toml")),
    ("exp4", include_str!("../../../presets/exp4.toml")),
    ("exp5", include_str!("../../../presets/exp5.toml")),
];

/// Relative tolerance for the stress-test recovery check.
pub const RECOVERY_TOL: f64 = 0.05;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown study {0:?}; available: {list}", list = STUDIES.join(", "))]
    UnknownStudy(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("variation {label}: {message}")]
    Variation { label: String, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("output directory {0} exists; pass --overwrite to replace it")]
    OutputExists(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Trace(#[from] TraceIoError),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

/// Embedded preset, overlaid on the defaults.
pub fn preset(name: &str) -> Result<ScenarioConfig, HarnessError> {
    let name = name.strip_suffix(".toml").unwrap_or(name);
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| HarnessError::UnknownPreset(name.to_string()))?;
    Ok(ScenarioConfig::from_toml_str(text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Every run gets `derive_seed(master, run_index)`.
    PerRun,
    /// Every run uses the master seed (common random numbers across a sweep).
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Exp1,
    Exp2,
    Exp3,
    Exp4,
    Exp5,
    MonteCarlo,
    NSweep,
    Stress,
    Ablation,
    Custom,
}

/// One point of a study. Overrides address serialized config keys by dotted
/// path (`upstream.eta_over_mu`); shocks are appended to the base list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variation {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub overrides: Vec<(String, Value)>,
    pub shocks: Vec<ShockSpec>,
}

impl Variation {
    pub fn new(label: impl Into<String>) -> Self {
        Variation { label: label.into(), preset: None, overrides: Vec::new(), shocks: Vec::new() }
    }

    pub fn from_preset(label: impl Into<String>, preset: &str) -> Self {
        Variation { preset: Some(preset.to_string()), ..Variation::new(label) }
    }

    pub fn set(mut self, path: &str, v: impl Into<Value>) -> Self {
        self.overrides.push((path.to_string(), v.into()));
        self
    }

    pub fn shock(mut self, s: ShockSpec) -> Self {
        self.shocks.push(s);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudySpec {
    pub name: String,
    pub kind: StudyKind,
    pub base: ScenarioConfig,
    pub variations: Vec<Variation>,
    pub replications: usize,
    pub seed_policy: SeedPolicy,
    pub master_seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(master ^ splitmix64(index))`. Both maps are bijections, so
/// distinct indices never share a seed under one master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| format!("{path}: {part} is not a table"))?;
        if k + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj.get_mut(*part).ok_or_else(|| format!("{path}: no section {part}"))?;
    }
    Err(format!("empty path {path:?}"))
}

impl StudySpec {
    pub fn runs(&self) -> usize {
        self.variations.len() * self.replications
    }

    /// Resolve a variation to a validated scenario.
    pub fn resolve(&self, v: &Variation) -> Result<ScenarioConfig, HarnessError> {
        let verr = |m: String| HarnessError::Variation { label: v.label.clone(), message: m };
        let base = match &v.preset {
            Some(p) => preset(p)?,
            None => self.base.clone(),
        };
        let mut val = serde_json::to_value(&base).map_err(|e| verr(e.to_string()))?;
        for (path, x) in &v.overrides {
            set_path(&mut val, path, x.clone()).map_err(verr)?;
        }
        let mut cfg: ScenarioConfig = serde_json::from_value(val).map_err(|e| verr(e.to_string()))?;
        cfg.shocks.extend(v.shocks.iter().cloned());
        cfg.name = format!("{}/{}", self.name, v.label);
        cfg.validate().map_err(|e| verr(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.replications == 0 {
            return Err(HarnessError::Variation { label: self.name.clone(), message: "zero replications".into() });
        }
        for v in &self.variations {
            self.resolve(v)?;
        }
        Ok(())
    }
}

fn shock(time: f64, kind: ShockKind, target: Target, magnitude: f64) -> ShockSpec {
    ShockSpec { time, kind, target, magnitude }
}

fn all() -> Target {
    Target::All(crate::config::AllFirms::All)
}

/// Flywheel sweep grid: 21 points over [0.5, 2.5].
pub fn flywheel_grid() -> Vec<f64> {
    (0..21).map(|k| 0.5 + 0.1 * k as f64).collect()
}

pub fn exp5_g_grid() -> Vec<f64> {
    (0..9).map(|k| 0.025 * k as f64).collect()
}

pub fn exp5_xi_grid() -> Vec<f64> {
    (0..9).map(|k| 0.1 * k as f64).collect()
}

pub const NSWEEP: [usize; 4] = [2, 4, 8, 16];
pub const MC_RUNS: usize = 500;
pub const MC_JITTER: f64 = 0.2;

/// Uniform ±20% jitter on (δ₁, δ₂, η/μ_D, θ) for run `index`.
pub fn mc_jitter(base: &ScenarioConfig, master: u64, index: u64) -> Variation {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master ^ 0x6A09_E667_F3BC_C908, index));
    let u = &base.upstream;
    let mut j = || 1.0 + rng.random_range(-MC_JITTER..=MC_JITTER);
    let (d1, d2, w, th) = (u.delta1_value() * j(), u.delta2 * j(), u.eta_over_mu * j(), u.theta * j());
    Variation::new(format!("mc{index:03}"))
        .set("upstream.delta1", d1)
        .set("upstream.delta2", d2)
        .set("upstream.eta_over_mu", w)
        .set("upstream.theta", th)
}

/// Full model, δ₂ = 0 and η = 0. The no-flywheel variant gets the mean
/// opening data stock as public data so production is not starved.
pub fn ablation_variations(base: &ScenarioConfig) -> Result<Vec<Variation>, HarnessError> {
    let world = World::new(base).map_err(|e| HarnessError::Variation {
        label: "no_flywheel".into(),
        message: e.to_string(),
    })?;
    let d_mean = world.firms().iter().map(|f| f.d_eff).sum::<f64>() / world.firms().len() as f64;
    Ok(vec![
        Variation::new("full"),
        Variation::new("no_red_queen").set("upstream.delta2", 0.0),
        Variation::new("no_flywheel")
            .set("upstream.eta_over_mu", 0.0)
            .set("upstream.D_public", base.upstream.d_public + d_mean),
    ])
}

pub const STRESS_TIME: f64 = 15.0;

pub fn stress_variations() -> Vec<Variation> {
    vec![
        Variation::new("control"),
        Variation::new("frontier_jump").shock(shock(STRESS_TIME, ShockKind::FrontierJumpFactor, all(), 1.3)),
        Variation::new("demand_contraction").shock(shock(STRESS_TIME, ShockKind::DemandScaleFactor, all(), 0.5)),
    ]
}

/// Preset study by name. `master_seed` defaults to the base scenario's seed.
pub fn study_spec(name: &str, master_seed: Option<u64>) -> Result<StudySpec, HarnessError> {
    let robust = || preset("robustness");
    let (kind, base, variations, policy) = match name {
        "exp1" => (StudyKind::Exp1, preset("exp1")?, vec![Variation::new("shock")], SeedPolicy::Shared),
        "exp2" => (
            StudyKind::Exp2,
            preset("exp2")?,
            vec![
                Variation::new("stagnation"),
                Variation::from_preset("catchup", "exp2_catchup"),
                Variation::from_preset("convergence", "exp2_convergence"),
            ],
            SeedPolicy::Shared,
        ),
        "exp3" => (StudyKind::Exp3, preset("exp3")?, vec![Variation::new("price_cut")], SeedPolicy::Shared),
        "exp4" => (
            StudyKind::Exp4,
            preset("exp4")?,
            flywheel_grid()
                .into_iter()
                .map(|w| Variation::new(format!("omega={w:.1}")).set("upstream.eta_over_mu", w))
                .collect(),
            SeedPolicy::Shared,
        ),
        "exp5" => {
            let mut v = Vec::new();
            for g in exp5_g_grid() {
                for x in exp5_xi_grid() {
                    v.push(
                        Variation::new(format!("g={g:.3},xi={x:.1}"))
                            .set("frontier.g_A", g)
                            .set("downstream.xi_cann", x),
                    );
                }
            }
            (StudyKind::Exp5, preset("exp5")?, v, SeedPolicy::Shared)
        }
        "mc" => {
            let base = robust()?;
            let m = master_seed.unwrap_or(base.sim.seed);
            let v = (0..MC_RUNS as u64).map(|i| mc_jitter(&base, m, i)).collect();
            (StudyKind::MonteCarlo, base, v, SeedPolicy::PerRun)
        }
        "nsweep" => {
            let v = NSWEEP
                .iter()
                .map(|&n| {
                    let mut adv = vec![1.0; n];
                    adv[0] = 1.1;
                    Variation::new(format!("N={n}"))
                        .set("upstream.N", n)
                        .set("upstream.data_advantage", adv)
                })
                .collect();
            (StudyKind::NSweep, robust()?, v, SeedPolicy::Shared)
        }
        "stress" => (StudyKind::Stress, robust()?, stress_variations(), SeedPolicy::Shared),
        "ablation" => {
            let base = robust()?;
            let v = ablation_variations(&base)?;
            (StudyKind::Ablation, base, v, SeedPolicy::Shared)
        }
        other => return Err(HarnessError::UnknownStudy(other.to_string())),
    };
    let master_seed = master_seed.unwrap_or(base.sim.seed);
    let spec = StudySpec {
        name: name.to_string(),
        kind,
        base,
        variations,
        replications: 1,
        seed_policy: policy,
        master_seed,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub index: usize,
    pub label: String,
    pub replication: usize,
    pub config: ScenarioConfig,
    pub trace: SimulationTrace,
}

/// One row of `metrics.csv`. Final-state columns refer to the last completed
/// step; they are NaN when the run failed before its first step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub run: usize,
    pub label: String,
    pub replication: usize,
    pub seed: u64,
    pub status: String,
    pub failure: String,
    pub steps: usize,
    pub final_t: f64,
    pub final_hhi: f64,
    pub peak_hhi: f64,
    pub leader: usize,
    pub leader_share: f64,
    pub mean_price: f64,
    pub q_total: f64,
    pub expenditure: f64,
    pub health: f64,
    pub total_y: f64,
    pub alive: usize,
    pub saturation_events: usize,
    pub config_hash: String,
}

pub const METRICS_COLUMNS: [&str; 20] = [
    "run", "label", "replication", "seed", "status", "failure", "steps", "final_t", "final_hhi", "peak_hhi",
    "leader", "leader_share", "mean_price", "q_total", "expenditure", "health", "total_y", "alive",
    "saturation_events", "config_hash",
];

impl RunMetrics {
    fn from_record(r: &RunRecord) -> Self {
        let t = &r.trace;
        let nan = f64::NAN;
        let (status, failure) = match &t.failure {
            Some(f) => ("failed".to_string(), format!("step {}: {}", f.step, f.reason)),
            None => ("ok".to_string(), String::new()),
        };
        let mut m = RunMetrics {
            run: r.index,
            label: r.label.clone(),
            replication: r.replication,
            seed: t.seed,
            status,
            failure,
            steps: t.steps(),
            final_t: nan,
            final_hhi: nan,
            peak_hhi: nan,
            leader: 0,
            leader_share: nan,
            mean_price: nan,
            q_total: nan,
            expenditure: nan,
            health: nan,
            total_y: nan,
            alive: 0,
            saturation_events: t.saturation_events.len(),
            config_hash: t.config_hash.clone(),
        };
        if let (Some(a), Some(d)) = (t.aggregates.last(), t.downstream.last()) {
            let shares = t.shares_at(t.steps() - 1);
            let (leader, ls) = shares
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, s)| if *s > b.1 { (i, *s) } else { b });
            m.final_t = a.t;
            m.final_hhi = a.hhi;
            m.peak_hhi = t.aggregates.iter().map(|r| r.hhi).fold(f64::NEG_INFINITY, f64::max);
            m.leader = leader;
            m.leader_share = ls;
            m.mean_price = a.mean_price;
            m.q_total = a.q_total;
            m.expenditure = a.expenditure;
            m.health = d.health;
            m.total_y = d.total_y;
            m.alive = d.alive;
        }
        m
    }
}

/// A plot-ready table written next to `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(file: &str, header: &[&str]) -> Self {
        Table { file: file.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

fn f(x: f64) -> String {
    format!("{x}")
}

fn fo(x: Option<f64>) -> String {
    x.map(f).unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub spec: StudySpec,
    pub runs: Vec<RunRecord>,
    pub metrics: Vec<RunMetrics>,
    pub tables: Vec<Table>,
    pub headline: Value,
}

impl StudyResult {
    pub fn failed(&self) -> Vec<&RunMetrics> {
        self.metrics.iter().filter(|m| m.status != "ok").collect()
    }

    pub fn run(&self, label: &str) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.label == label)
    }

    pub fn metrics_csv(&self) -> Result<Vec<u8>, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for m in &self.metrics {
            w.serialize(m).map_err(|e| HarnessError::Trace(TraceIoError::Csv {
                path: "metrics.csv".into(),
                message: e.to_string(),
            }))?;
        }
        w.into_inner().map_err(|e| HarnessError::Io {
            path: "metrics.csv".into(),
            source: e.into_error(),
        })
    }
}

/// Execute every run of `spec` on `workers` threads. Per-run failures are
/// recorded in the traces; the study always completes.
pub fn run_study(spec: &StudySpec, workers: usize) -> Result<StudyResult, HarnessError> {
    let mut jobs = Vec::with_capacity(spec.runs());
    for (vi, v) in spec.variations.iter().enumerate() {
        let cfg = spec.resolve(v)?;
        for r in 0..spec.replications {
            let index = vi * spec.replications + r;
            let mut c = cfg.clone();
            c.sim.seed = match spec.seed_policy {
                SeedPolicy::PerRun => derive_seed(spec.master_seed, index as u64),
                SeedPolicy::Shared => spec.master_seed,
            };
            jobs.push((index, v.label.clone(), r, c));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let runs: Vec<RunRecord> = pool.install(|| {
        jobs.into_par_iter()
            .map(|(index, label, replication, config)| {
                let trace = engine::run(&config);
                RunRecord { index, label, replication, config, trace }
            })
            .collect()
    });
    let metrics: Vec<RunMetrics> = runs.iter().map(RunMetrics::from_record).collect();
    let mut result = StudyResult {
        spec: spec.clone(),
        runs,
        metrics,
        tables: Vec::new(),
        headline: json!({}),
    };
    post_process(&mut result);
    Ok(result)
}

fn err_value(e: impl std::fmt::Display) -> Value {
    json!({ "error": e.to_string() })
}

fn share_series(t: &SimulationTrace, i: usize) -> Vec<f64> {
    t.firm_series(i, |r| r.share)
}

fn value_at(t: &SimulationTrace, time: f64, f: impl Fn(usize) -> f64) -> Option<f64> {
    t.step_at(time).filter(|k| *k < t.steps()).map(f)
}

/// Headline metrics of the Experiment-1 run: the innovator is firm 0.
pub fn exp1_metrics(t: &SimulationTrace, shock_time: f64) -> Value {
    let n = t.n_firms;
    let mut max_delta = f64::NEG_INFINITY;
    for k in 0..t.steps() {
        if t.aggregates[k].t >= shock_time - 1e-9 {
            for i in 1..n {
                max_delta = max_delta.max(t.firm(k, i).delta);
            }
        }
    }
    json!({
        "shock_time": shock_time,
        "max_laggard_delta": max_delta,
        "leader_share_t10": value_at(t, 10.0, |k| t.firm(k, 0).share),
        "leader_share_final": t.steps().checked_sub(1).map(|k| t.firm(k, 0).share),
    })
}

/// Stagnant-leader decay (firm 0) against `δ₀ + δ₁·g_A`.
pub fn exp2_decay(t: &SimulationTrace, cfg: &ScenarioConfig) -> Value {
    let theory = cfg.upstream.delta0 + cfg.upstream.delta1_value() * cfg.frontier.g_a;
    match analysis::log_decay_rate(t, &share_series(t, 0), 5.0, 8.0) {
        Ok(r) => json!({ "decay_rate": r, "theoretical": theory, "relative_error": (r - theory) / theory }),
        Err(e) => err_value(e),
    }
}

/// CV series over a one-year trailing window.
pub fn convergence_cv(t: &SimulationTrace) -> Result<Vec<analysis::CvPoint>, crate::error::ModelError> {
    let window = (1.0 / t.dt).round() as usize + 1;
    analysis::growth_rate_cv(t, window)
}

/// First time after which the CV stays below `level` for the rest of the
/// trace.
pub fn cv_settling_time(cv: &[analysis::CvPoint], level: f64) -> Option<f64> {
    let mut t_in = None;
    for p in cv {
        match p.cv {
            Some(c) if c < level => {
                t_in.get_or_insert(p.t);
            }
            _ => t_in = None,
        }
    }
    t_in
}

/// First time `τ ≥ 0` after `shock_time` from which HHI and every share stay
/// within `tol` (relative) of the control run. `None` if the horizon ends
/// first. Zero when the shocked run never leaves the band.
pub fn recovery_time(control: &SimulationTrace, shocked: &SimulationTrace, shock_time: f64, tol: f64) -> Option<f64> {
    let k0 = shocked.step_at(shock_time)?;
    let steps = control.steps().min(shocked.steps());
    if k0 >= steps || shocked.steps() < control.steps() {
        return None;
    }
    let close = |a: f64, b: f64| (a - b).abs() <= tol * b.abs().max(1e-12);
    let inside = |k: usize| {
        close(shocked.aggregates[k].hhi, control.aggregates[k].hhi)
            && (0..control.n_firms).all(|i| close(shocked.firm(k, i).share, control.firm(k, i).share))
    };
    let mut last_out = None;
    for k in k0..steps {
        if !inside(k) {
            last_out = Some(k);
        }
    }
    match last_out {
        None => Some(0.0),
        Some(k) if k + 1 < steps => Some(control.aggregates[k + 1].t - control.aggregates[k0].t),
        Some(_) => None,
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Equal-width histogram over `[min, max]`: (lower edges, counts).
pub fn histogram(xs: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>) {
    let v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() || bins == 0 {
        return (Vec::new(), Vec::new());
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0; bins];
    for x in v {
        let b = (((x - lo) / w) as usize).min(bins - 1);
        counts[b] += 1;
    }
    ((0..bins).map(|b| lo + b as f64 * w).collect(), counts)
}

/// One mode in the 3-bin moving average of the histogram counts. Plateaus
/// count once.
pub fn is_unimodal(counts: &[usize]) -> bool {
    let n = counts.len();
    if n < 3 {
        return true;
    }
    let sm: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            counts[a..=b].iter().sum::<usize>() as f64 / (b - a + 1) as f64
        })
        .collect();
    let mut dir = 0i8;
    let mut peaks = 0;
    for w in sm.windows(2) {
        let d = if w[1] > w[0] { 1 } else if w[1] < w[0] { -1 } else { 0 };
        if d == 0 {
            continue;
        }
        if dir == 1 && d == -1 {
            peaks += 1;
        }
        dir = d;
    }
    if dir == 1 {
        peaks += 1;
    }
    peaks <= 1
}

fn post_process(res: &mut StudyResult) {
    let mut head = serde_json::Map::new();
    let mut tables = Vec::new();
    match res.spec.kind {
        StudyKind::Exp1 => {
            if let Some(r) = res.runs.first() {
                let t = r.config.shocks.first().map(|s| s.time).unwrap_or(5.0);
                head.insert("red_queen".into(), exp1_metrics(&r.trace, t));
            }
        }
        StudyKind::Exp2 => {
            if let Some(r) = res.run("stagnation") {
                head.insert("stagnation".into(), exp2_decay(&r.trace, &r.config));
            }
            if let Some(r) = res.run("catchup") {
                let t = &r.trace;
                let k = t.steps().saturating_sub(1);
                let shares = if t.steps() > 0 { t.shares_at(k) } else { Vec::new() };
                head.insert(
                    "catchup".into(),
                    json!({ "final_shares": shares, "final_hhi": t.aggregates.last().map(|a| a.hhi) }),
                );
            }
            if let Some(r) = res.run("convergence") {
                match convergence_cv(&r.trace) {
                    Ok(cv) => {
                        let mut tab = Table::new("cv.csv", &["t", "cv"]);
                        for p in &cv {
                            tab.push(vec![f(p.t), fo(p.cv)]);
                        }
                        tables.push(tab);
                        let at = |time: f64| {
                            cv.iter().find(|p| p.t >= time - 1e-9).and_then(|p| p.cv)
                        };
                        head.insert(
                            "convergence".into(),
                            json!({
                                "cv_initial": cv.first().and_then(|p| p.cv),
                                "cv_t10": at(10.0),
                                "settles_below_0.05_at": cv_settling_time(&cv, 0.05),
                            }),
                        );
                    }
                    Err(e) => {
                        head.insert("convergence".into(), err_value(e));
                    }
                }
            }
        }
        StudyKind::Exp3 => {
            if let Some(r) = res.runs.first() {
                let v = match analysis::price_shock_response(&r.trace) {
                    Ok(s) => {
                        let k = r.trace.step_at(s.t).unwrap_or(0);
                        let mut v = serde_json::to_value(s).expect("shock response serializes");
                        v["rationed_at_shock"] = json!(r.trace.aggregates[k].rationed);
                        v
                    }
                    Err(e) => err_value(e),
                };
                head.insert("jevons".into(), v);
            }
        }
        StudyKind::Exp4 => {
            let mut tab = Table::new(
                "bifurcation.csv",
                &["eta_over_mu", "omega", "final_hhi", "leader_share", "eig_max", "regime", "status"],
            );
            let mut pts = Vec::new();
            for (r, m) in res.runs.iter().zip(&res.metrics) {
                let w = r.config.upstream.eta_over_mu;
                let stab = r
                    .trace
                    .steps()
                    .checked_sub(1)
                    .and_then(|k| analysis::stability_from_trace(&r.trace, &r.config, k).ok());
                tab.push(vec![
                    f(w),
                    f(analysis::FlywheelParams::from_config(&r.config).omega()),
                    f(m.final_hhi),
                    f(m.leader_share),
                    stab.as_ref().map(|s| f(s.eigenvalues[0])).unwrap_or_default(),
                    stab.as_ref()
                        .map(|s| serde_json::to_value(s.regime).unwrap().as_str().unwrap().to_string())
                        .unwrap_or_default(),
                    m.status.clone(),
                ]);
                if m.final_hhi.is_finite() {
                    pts.push((w, m.final_hhi));
                }
            }
            tables.push(tab);
            let u = &res.spec.base.upstream;
            let closed = analysis::flywheel_threshold(u.delta2, u.mu_d, u.theta, u.gamma_scale, u.alpha);
            let detected = analysis::detect_bifurcation(&pts);
            head.insert(
                "flywheel".into(),
                json!({
                    "closed_form_threshold": closed,
                    "detected_threshold": detected.as_ref().ok(),
                    "detection_error": detected.as_ref().err().map(|e| e.to_string()),
                    "hhi_min": pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
                    "hhi_max": pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
                }),
            );
        }
        StudyKind::Exp5 => {
            let mut tab = Table::new(
                "phase.csv",
                &["g_A", "xi_cann", "health_y15", "total_Y_y15", "alive_y15", "d_star_y15", "health_final", "trapped"],
            );
            let mut worst: Option<(f64, f64, f64)> = None;
            for r in &res.runs {
                let t = &r.trace;
                let h15 = value_at(t, 15.0, |k| t.downstream[k].health);
                let y15 = value_at(t, 15.0, |k| t.downstream[k].total_y);
                let a15 = value_at(t, 15.0, |k| t.downstream[k].alive as f64);
                let d15 = value_at(t, 15.0, |k| t.downstream[k].d_star);
                let (g, x) = (r.config.frontier.g_a, r.config.downstream.xi_cann);
                if let Some(h) = h15 {
                    if worst.is_none_or(|w| h < w.2) {
                        worst = Some((g, x, h));
                    }
                }
                tab.push(vec![
                    f(g),
                    f(x),
                    fo(h15),
                    fo(y15),
                    fo(a15),
                    fo(d15),
                    fo(t.downstream.last().map(|d| d.health)),
                    h15.map(|h| (h < 0.5).to_string()).unwrap_or_default(),
                ]);
            }
            tables.push(tab);
            head.insert("lowest_health_y15".into(), json!(worst.map(|w| json!({"g_A": w.0, "xi_cann": w.1, "health": w.2}))));
        }
        StudyKind::MonteCarlo => {
            let h: Vec<f64> = res.metrics.iter().map(|m| m.final_hhi).collect();
            let (edges, counts) = histogram(&h, 20);
            let mut tab = Table::new("mc_hist.csv", &["bin_lo", "count"]);
            for (e, c) in edges.iter().zip(&counts) {
                tab.push(vec![f(*e), c.to_string()]);
            }
            tables.push(tab);
            head.insert(
                "final_hhi".into(),
                json!({
                    "median": median(&h),
                    "q05": quantile(&h, 0.05),
                    "q95": quantile(&h, 0.95),
                    "unimodal": is_unimodal(&counts),
                    "runs": h.len(),
                }),
            );
        }
        StudyKind::NSweep => {
            let mut tab = Table::new("nsweep.csv", &["N", "final_hhi", "inverse_N", "ratio"]);
            let mut rows = Vec::new();
            for (r, m) in res.runs.iter().zip(&res.metrics) {
                let n = r.config.upstream.n as f64;
                tab.push(vec![f(n), f(m.final_hhi), f(1.0 / n), f(m.final_hhi * n)]);
                rows.push(json!({"N": n, "final_hhi": m.final_hhi, "ratio": m.final_hhi * n}));
            }
            tables.push(tab);
            head.insert("nsweep".into(), json!(rows));
        }
        StudyKind::Stress => {
            let mut tab = Table::new("stress.csv", &["scenario", "shock_time", "recovery_time", "recovered", "final_hhi"]);
            let mut out = serde_json::Map::new();
            if let Some(c) = res.run("control") {
                for (r, m) in res.runs.iter().zip(&res.metrics) {
                    let rt = if r.label == "control" {
                        Some(0.0)
                    } else {
                        recovery_time(&c.trace, &r.trace, STRESS_TIME, RECOVERY_TOL)
                    };
                    tab.push(vec![
                        r.label.clone(),
                        f(STRESS_TIME),
                        fo(rt),
                        rt.is_some().to_string(),
                        f(m.final_hhi),
                    ]);
                    out.insert(r.label.clone(), json!({"recovery_time": rt, "recovered": rt.is_some()}));
                }
            }
            tables.push(tab);
            head.insert("stress".into(), Value::Object(out));
        }
        StudyKind::Ablation => {
            let series: Vec<Vec<f64>> = res.runs.iter().map(|r| r.trace.hhi_series()).collect();
            let mut tab = Table::new("ablation_hhi.csv", &["t", "full", "no_red_queen", "no_flywheel"]);
            if let Some(first) = res.runs.first() {
                let len = series.iter().map(|s| s.len()).min().unwrap_or(0);
                for k in 0..len {
                    let mut row = vec![f(first.trace.aggregates[k].t)];
                    row.extend(series.iter().map(|s| f(s[k])));
                    tab.push(row);
                }
            }
            tables.push(tab);
            let fin = |l: &str| res.metrics.iter().find(|m| m.label == l).map(|m| m.final_hhi).unwrap_or(f64::NAN);
            let full = fin("full");
            let mut cmp = Table::new("ablation.csv", &["variant", "final_hhi", "marginal_contribution"]);
            for l in ["full", "no_red_queen", "no_flywheel"] {
                cmp.push(vec![l.into(), f(fin(l)), f(full - fin(l))]);
            }
            tables.push(cmp);
            head.insert(
                "ablation".into(),
                json!({
                    "full": full,
                    "no_red_queen": fin("no_red_queen"),
                    "no_flywheel": fin("no_flywheel"),
                    "inverse_N": 1.0 / res.spec.base.upstream.n as f64,
                }),
            );
        }
        StudyKind::Custom => {}
    }
    res.tables = tables;
    res.headline = Value::Object(head);
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io { path: path.display().to_string(), source: e }
}

fn dir_name(index: usize, label: &str) -> String {
    let clean: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{index:03}_{clean}")
}

/// Refuse a nonempty directory unless `overwrite`.
pub fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<(), HarnessError> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir).map_err(io(dir))?.next().is_some();
        if nonempty && !overwrite {
            return Err(HarnessError::OutputExists(dir.display().to_string()));
        }
    }
    fs::create_dir_all(dir).map_err(io(dir))
}

/// Write the study tree: `config.toml`, `study.json`, `metrics.csv`,
/// `summary.json`, the plot-ready tables and `runs/<index>_<label>/`.
pub fn write_study(dir: &Path, res: &StudyResult, overwrite: bool) -> Result<Vec<PathBuf>, HarnessError> {
    prepare_out_dir(dir, overwrite)?;
    let runs_dir = dir.join("runs");
    if overwrite && runs_dir.exists() {
        fs::remove_dir_all(&runs_dir).map_err(io(&runs_dir))?;
    }
    let mut out = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<(), HarnessError> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(io(&p))?;
        out.push(p);
        Ok(())
    };
    put("config.toml", res.spec.base.to_toml_string().into_bytes())?;
    let spec = serde_json::to_string_pretty(&res.spec).expect("spec serializes");
    put("study.json", (spec + "\n").into_bytes())?;
    put("metrics.csv", res.metrics_csv()?)?;
    for t in &res.tables {
        let mut w = csv::Writer::from_writer(Vec::new());
        let werr = |e: csv::Error| HarnessError::Trace(TraceIoError::Csv { path: t.file.clone(), message: e.to_string() });
        w.write_record(&t.header).map_err(werr)?;
        for r in &t.rows {
            w.write_record(r).map_err(werr)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Io { path: t.file.clone(), source: e.into_error() })?;
        put(&t.file, bytes)?;
    }
    let failed: Vec<Value> = res
        .failed()
        .iter()
        .map(|m| json!({"run": m.run, "label": m.label, "reason": m.failure}))
        .collect();
    let summary = json!({
        "schema": STUDY_SCHEMA,
        "study": res.spec.name,
        "version": env!("CARGO_PKG_VERSION"),
        "master_seed": res.spec.master_seed,
        "seed_policy": res.spec.seed_policy,
        "base_config_hash": res.spec.base.hash(),
        "runs": res.runs.len(),
        "failed_runs": failed,
        "tables": res.tables.iter().map(|t| t.file.clone()).collect::<Vec<_>>(),
        "headline": res.headline,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    put("summary.json", (text + "\n").into_bytes())?;
    for r in &res.runs {
        let d = runs_dir.join(dir_name(r.index, &r.label));
        engine::write_trace_dir(&d, &r.trace, &r.config)?;
    }
    out.push(runs_dir);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for n in preset_names() {
            let c = preset(n).unwrap();
            assert_eq!(c.name, n);
        }
        assert!(matches!(preset("nope"), Err(HarnessError::UnknownPreset(_))));
    }

    #[test]
    fn baseline_preset_is_the_default_calibration() {
        let mut c = preset("baseline").unwrap();
        c.name = ScenarioConfig::default().name;
        assert_eq!(c, ScenarioConfig::default());
    }

    #[test]
    fn every_study_resolves() {
        for s in STUDIES {
            let spec = study_spec(s, None).unwrap();
            assert!(spec.runs() > 0, "{s}");
        }
        assert!(matches!(study_spec("exp9", None), Err(HarnessError::UnknownStudy(_))));
    }

    #[test]
    fn study_sizes() {
        assert_eq!(study_spec("exp4", None).unwrap().runs(), 21);
        assert_eq!(study_spec("exp5", None).unwrap().runs(), 81);
        assert_eq!(study_spec("mc", None).unwrap().runs(), 500);
        assert_eq!(study_spec("nsweep", None).unwrap().runs(), 4);
        assert_eq!(study_spec("ablation", None).unwrap().runs(), 3);
    }

    #[test]
    fn flywheel_grid_spans_the_range() {
        let g = flywheel_grid();
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], 0.5);
        assert!((g[20] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn seeds_are_distinct_across_a_study() {
        let mut s: Vec<u64> = (0..10_000).map(|i| derive_seed(42, i)).collect();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 10_000);
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference generator seeded with 0.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(0x9E37_79B9_7F4A_7C15), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn mc_jitter_stays_in_band() {
        let base = preset("robustness").unwrap();
        let spec = study_spec("mc", Some(7)).unwrap();
        for v in &spec.variations {
            let c = spec.resolve(v).unwrap();
            let r = c.upstream.delta2 / base.upstream.delta2;
            assert!((0.8..=1.2).contains(&r));
            let r = c.upstream.theta / base.upstream.theta;
            assert!((0.8..=1.2).contains(&r));
            let r = c.upstream.delta1_value() / base.upstream.delta1_value();
            assert!((0.8..=1.2).contains(&r));
        }
        assert_eq!(spec.variations, study_spec("mc", Some(7)).unwrap().variations);
        assert_ne!(spec.variations, study_spec("mc", Some(8)).unwrap().variations);
    }

    #[test]
    fn bad_override_path_is_rejected() {
        let mut spec = study_spec("exp4", None).unwrap();
        spec.variations.push(Variation::new("bad").set("upstream.no_such_key", 1.0));
        assert!(matches!(spec.validate(), Err(HarnessError::Variation { .. })));
        let mut spec = study_spec("exp4", None).unwrap();
        spec.variations.push(Variation::new("bad").set("upstream.theta", -1.0));
        assert!(spec.validate().is_err());
    }

    #[test]
    fn unimodality() {
        assert!(is_unimodal(&[0, 1, 3, 8, 12, 7, 2, 1, 0]));
        assert!(is_unimodal(&[9, 5, 2, 1, 0, 0]));
        assert!(!is_unimodal(&[0, 10, 10, 0, 0, 0, 0, 10, 10, 0]));
    }

    #[test]
    fn quantiles() {
        let x = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(median(&x), 2.5);
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 4.0);
        let (e, c) = histogram(&x, 3);
        assert_eq!(c.iter().sum::<usize>(), 4);
        assert_eq!(e[0], 1.0);
    }

    #[test]
    fn settling_time_requires_staying_below() {
        let p = |t: f64, c: f64| analysis::CvPoint { t, cv: Some(c) };
        let cv = [p(1.0, 0.8), p(2.0, 0.04), p(3.0, 0.2), p(4.0, 0.03), p(5.0, 0.01)];
        assert_eq!(cv_settling_time(&cv, 0.05), Some(4.0));
        assert_eq!(cv_settling_time(&cv[..3], 0.05), None);
    }

    #[test]
    fn no_shock_means_zero_recovery_time() {
        let cfg = preset("robustness").unwrap();
        let t = engine::run(&cfg);
        assert_eq!(recovery_time(&t, &t, STRESS_TIME, RECOVERY_TOL), Some(0.0));
    }

    #[test]
    fn symmetric_frontier_jump_leaves_hhi_unchanged() {
        let base = preset("baseline").unwrap();
        let mut shocked = base.clone();
        shocked.shocks.push(shock(STRESS_TIME, ShockKind::FrontierJumpFactor, all(), 1.3));
        let (a, b) = (engine::run(&base), engine::run(&shocked));
        assert!(b.is_complete());
        for k in 0..a.steps() {
            assert!((a.aggregates[k].hhi - b.aggregates[k].hhi).abs() < 1e-12);
        }
        assert_eq!(recovery_time(&a, &b, STRESS_TIME, RECOVERY_TOL), Some(0.0));
    }
}
