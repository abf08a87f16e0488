//! Closed-form stability analysis of the data flywheel and trace-derived
//! metrics: concentration, elasticities, growth dispersion, ecosystem health.

use crate::config::ScenarioConfig;
use crate::engine::SimulationTrace;
use crate::error::{ModelError, ModelResult};
use serde::Serialize;

pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    StableOligopoly,
    WinnerTakesAll,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub jacobian: Mat2,
    /// Real parts, larger first.
    pub eigenvalues: [f64; 2],
    pub regime: Regime,
    pub omega_star: f64,
    pub omega_actual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyState {
    pub k: f64,
    pub d: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlywheelParams {
    pub delta2: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub eta: f64,
    pub theta: f64,
    pub mu_d: f64,
}

impl FlywheelParams {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        let u = &cfg.upstream;
        FlywheelParams {
            delta2: u.delta2,
            gamma: u.gamma_scale,
            alpha: u.alpha,
            eta: u.eta_data(),
            theta: u.theta,
            mu_d: u.mu_d,
        }
    }

    pub fn omega(&self) -> f64 {
        self.eta / self.mu_d
    }
}

/// Linearized capability/data perturbation system.
pub fn flywheel_jacobian(ss: SteadyState, p: &FlywheelParams) -> ModelResult<Mat2> {
    if !(ss.k > 0.0 && ss.d > 0.0 && ss.q > 0.0) {
        return Err(ModelError::Domain(format!(
            "nonpositive steady state K={}, D={}, Q={}",
            ss.k, ss.d, ss.q
        )));
    }
    Ok([
        [-p.delta2, p.gamma * (1.0 - p.alpha) * ss.k / ss.d],
        [p.eta * p.theta * ss.q / ss.k, -p.mu_d],
    ])
}

/// Real parts of the eigenvalues of a 2x2 matrix, larger first.
pub fn eigenvalues(m: &Mat2) -> [f64; 2] {
    if m[0][1] * m[1][0] == 0.0 {
        // Triangular: the diagonal is the spectrum.
        let (a, b) = (m[0][0], m[1][1]);
        return if a >= b { [a, b] } else { [b, a] };
    }
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        // Avoid cancellation in the smaller root.
        let big = if tr >= 0.0 { tr / 2.0 + r } else { tr / 2.0 - r };
        let small = if big != 0.0 { det / big } else { tr / 2.0 - r };
        let (a, b) = if big >= small { (big, small) } else { (small, big) };
        [a, b]
    } else {
        [tr / 2.0, tr / 2.0]
    }
}

/// Characteristic polynomial `l^2 - tr l + det` at `l`.
pub fn char_poly(m: &Mat2, l: f64) -> f64 {
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    l * l - tr * l + det
}

/// Critical flywheel intensity `delta2 / (mu_D theta gamma (1 - alpha))`.
pub fn flywheel_threshold(delta2: f64, mu_d: f64, theta: f64, gamma: f64, alpha: f64) -> f64 {
    delta2 / (mu_d * theta * gamma * (1.0 - alpha))
}

/// Data stock implied by usage `q` when feedback runs at unit extraction
/// efficiency, `D = Q / mu_D`. At this point the Jacobian determinant
/// vanishes exactly at the closed-form threshold.
pub fn implied_steady_state(k: f64, q: f64, mu_d: f64) -> SteadyState {
    SteadyState { k, d: q / mu_d, q }
}

pub fn stability_report(ss: SteadyState, p: &FlywheelParams) -> ModelResult<StabilityReport> {
    let j = flywheel_jacobian(ss, p)?;
    let ev = eigenvalues(&j);
    Ok(StabilityReport {
        jacobian: j,
        eigenvalues: ev,
        regime: if ev[0] > 0.0 { Regime::WinnerTakesAll } else { Regime::StableOligopoly },
        omega_star: flywheel_threshold(p.delta2, p.mu_d, p.theta, p.gamma, p.alpha),
        omega_actual: p.omega(),
    })
}

/// Stability at the cross-firm average of the trace at step `step`, with
/// the data stock taken at its implied value.
pub fn stability_from_trace(trace: &SimulationTrace, cfg: &ScenarioConfig, step: usize) -> ModelResult<StabilityReport> {
    let n = trace.n_firms as f64;
    let rows = (0..trace.n_firms).map(|i| trace.firm(step, i));
    let (k, q) = rows.fold((0.0, 0.0), |(k, q), r| (k + r.k_ai / n, q + r.q / n));
    stability_report(implied_steady_state(k, q, cfg.upstream.mu_d), &FlywheelParams::from_config(cfg))
}

pub fn hhi(shares: &[f64]) -> ModelResult<f64> {
    let sum: f64 = shares.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(ModelError::Normalization(format!("shares sum to {sum}")));
    }
    if shares.iter().any(|s| *s < 0.0) {
        return Err(ModelError::Normalization("negative share".into()));
    }
    Ok(shares.iter().map(|s| s * s).sum())
}

/// `ln(Q1/Q0) / ln(p1/p0)`.
pub fn arc_elasticity(p0: f64, p1: f64, q0: f64, q1: f64) -> ModelResult<f64> {
    if !(p0 > 0.0 && p1 > 0.0 && q0 > 0.0 && q1 > 0.0) {
        return Err(ModelError::Degenerate("nonpositive price or quantity".into()));
    }
    if p0 == p1 {
        return Err(ModelError::Degenerate("equal prices".into()));
    }
    Ok((q1 / q0).ln() / (p1 / p0).ln())
}

/// Cross-firm dispersion of growth rates at one point in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CvPoint {
    pub t: f64,
    /// `None` when mean growth is too close to zero.
    pub cv: Option<f64>,
}

/// Cross-sectional `std / mean` of the rates `rates`; `None` if the mean is
/// within `1e-9` of zero. Population standard deviation.
pub fn coefficient_of_variation(rates: &[f64]) -> Option<f64> {
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    if mean.abs() < 1e-9 {
        return None;
    }
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean.abs())
}

/// CV of per-firm log-K growth over a trailing window of `window` steps.
pub fn growth_rate_cv(trace: &SimulationTrace, window: usize) -> ModelResult<Vec<CvPoint>> {
    if window < 2 {
        return Err(ModelError::Domain("window must be at least 2 steps".into()));
    }
    let span = (window - 1) as f64 * trace.dt;
    let mut out = Vec::new();
    for k in (window - 1)..trace.steps() {
        let a = k + 1 - window;
        let rates: Vec<f64> = (0..trace.n_firms)
            .map(|i| (trace.firm(k, i).k_ai / trace.firm(a, i).k_ai).ln() / span)
            .collect();
        out.push(CvPoint { t: trace.aggregates[k].t, cv: coefficient_of_variation(&rates) });
    }
    Ok(out)
}

/// Mean orchestration capital relative to its initial value.
pub fn ecosystem_health(trace: &SimulationTrace) -> ModelResult<Vec<f64>> {
    let first = trace
        .downstream
        .first()
        .ok_or_else(|| ModelError::Degenerate("empty trace".into()))?;
    if !(first.mean_o > 0.0) {
        return Err(ModelError::Degenerate("initial orchestration stock is zero".into()));
    }
    Ok(trace.downstream.iter().map(|r| r.mean_o / first.mean_o).collect())
}

/// Midpoint of the steepest final-HHI jump between adjacent sweep points.
pub fn detect_bifurcation(points: &[(f64, f64)]) -> ModelResult<f64> {
    if points.len() < 5 {
        return Err(ModelError::Domain("need at least 5 sweep points".into()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 0.2 {
        return Err(ModelError::NoBifurcation(format!("HHI range {:.4} below 0.2", hi - lo)));
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    for w in pts.windows(2) {
        let jump = (w[1].1 - w[0].1).abs();
        if jump > best.0 {
            best = (jump, 0.5 * (w[0].0 + w[1].0));
        }
    }
    Ok(best.1)
}

/// Log-decay rate of a positive series between two times, per year.
pub fn log_decay_rate(trace: &SimulationTrace, series: &[f64], t0: f64, t1: f64) -> ModelResult<f64> {
    let a = trace.step_at(t0).ok_or_else(|| ModelError::Degenerate(format!("t={t0} beyond trace")))?;
    let b = trace.step_at(t1).ok_or_else(|| ModelError::Degenerate(format!("t={t1} beyond trace")))?;
    if !(series[a] > 0.0 && series[b] > 0.0) || b <= a {
        return Err(ModelError::Degenerate("nonpositive series or empty window".into()));
    }
    let dt = trace.aggregates[b].t - trace.aggregates[a].t;
    Ok(-(series[b] / series[a]).ln() / dt)
}

/// Arc elasticity of tokens and expenditure change across a price shock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShockResponse {
    pub t: f64,
    pub p0: f64,
    pub p1: f64,
    pub q0: f64,
    pub q1: f64,
    pub expenditure0: f64,
    pub expenditure1: f64,
    pub d0: f64,
    pub d1: f64,
    pub elasticity: f64,
}

/// Compares the step before the first price-override step with that step.
pub fn price_shock_response(trace: &SimulationTrace) -> ModelResult<ShockResponse> {
    let k = trace
        .aggregates
        .iter()
        .position(|r| r.price_override)
        .ok_or_else(|| ModelError::Degenerate("trace has no price override".into()))?;
    if k == 0 {
        return Err(ModelError::Degenerate("override at the first step".into()));
    }
    let (a, b) = (&trace.aggregates[k - 1], &trace.aggregates[k]);
    Ok(ShockResponse {
        t: b.t,
        p0: a.mean_price,
        p1: b.mean_price,
        q0: a.q_total,
        q1: b.q_total,
        expenditure0: a.expenditure,
        expenditure1: b.expenditure,
        d0: trace.downstream[k - 1].d_star,
        d1: trace.downstream[k].d_star,
        elasticity: arc_elasticity(a.mean_price, b.mean_price, a.q_total, b.q_total)?,
    })
}
