//! Rivalry-driven valuation: competitive gaps, the shadow-value index,
//! endogenous depreciation and the stagnation diagnostics built on them.

use crate::error::{ModelError, ModelResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepreciationParams {
    pub delta0: f64,
    pub delta1: f64,
    pub delta2: f64,
}

/// Log capability deficit to the strongest rival, clamped at zero.
pub fn competitive_gap(k_i: f64, k_rivals: &[f64]) -> ModelResult<f64> {
    if !(k_i > 0.0) {
        return Err(ModelError::Domain(format!("nonpositive capability {k_i}")));
    }
    if k_rivals.is_empty() {
        return Err(ModelError::Domain("no rivals".into()));
    }
    let mut top = f64::NEG_INFINITY;
    for &k in k_rivals {
        if !(k > 0.0) {
            return Err(ModelError::Domain(format!("nonpositive rival capability {k}")));
        }
        top = top.max(k);
    }
    Ok((top / k_i).ln().max(0.0))
}

/// Gap of every firm against the others.
pub fn all_gaps(k: &[f64]) -> ModelResult<Vec<f64>> {
    let mut rivals = Vec::with_capacity(k.len().saturating_sub(1));
    (0..k.len())
        .map(|i| {
            rivals.clear();
            rivals.extend(k.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v));
            competitive_gap(k[i], &rivals)
        })
        .collect()
}

pub fn depreciation_rate(gap: f64, g_a: f64, d: &DepreciationParams) -> f64 {
    d.delta0 + d.delta1 * g_a + d.delta2 * gap
}

/// `theta * s * (1 - s) / K`, proportional to the marginal revenue product of
/// capability under Logit demand.
pub fn shadow_value_index(share: f64, k_ai: f64, theta: f64) -> ModelResult<f64> {
    if !(k_ai > 0.0) {
        return Err(ModelError::Domain(format!("nonpositive capability {k_ai}")));
    }
    Ok(theta * share * (1.0 - share) / k_ai)
}

/// Minimum reinvestment intensity that offsets depreciation, given the
/// marginal capability return per unit of intensity.
pub fn required_innovation_intensity(delta_total: f64, marginal_rd_productivity: f64) -> f64 {
    if delta_total == 0.0 {
        return 0.0;
    }
    if marginal_rd_productivity > 0.0 {
        delta_total / marginal_rd_productivity
    } else {
        f64::INFINITY
    }
}

/// `dln q_rival / dln K_leader` between two observations.
pub fn cross_elasticity(k_leader: (f64, f64), q_rival: (f64, f64)) -> ModelResult<f64> {
    let dk = (k_leader.1 / k_leader.0).ln();
    if dk == 0.0 || !dk.is_finite() {
        return Err(ModelError::Degenerate("leader capability unchanged".into()));
    }
    let dq = (q_rival.1 / q_rival.0).ln();
    Ok(dq / dk)
}

/// Cross-depreciation elasticity at a shock, measured over the first step in
/// which the leader's capital responds. Rival shadow values are averaged in
/// logs.
pub fn cross_depreciation_elasticity(
    trace: &crate::engine::SimulationTrace,
    shock_time: f64,
    leader: usize,
) -> ModelResult<f64> {
    let steps = trace.aggregates.len();
    let k_s = trace
        .aggregates
        .iter()
        .position(|r| r.t >= shock_time - 1e-9)
        .ok_or_else(|| ModelError::Degenerate("shock after end of trace".into()))?;
    if k_s < 2 || k_s + 2 > steps {
        return Err(ModelError::Degenerate("need two steps on each side of the shock".into()));
    }
    let (a, b) = (k_s, k_s + 1);
    let n = trace.n_firms;
    let row = |step: usize, i: usize| &trace.firms[step * n + i];
    let lq = |step: usize| {
        let v: Vec<f64> = (0..n)
            .filter(|i| *i != leader)
            .map(|i| row(step, i).q_shadow.ln())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let dk = (row(b, leader).k_ai / row(a, leader).k_ai).ln();
    if dk == 0.0 || !dk.is_finite() {
        return Err(ModelError::Degenerate("leader capability unchanged".into()));
    }
    Ok((lq(b) - lq(a)) / dk)
}
