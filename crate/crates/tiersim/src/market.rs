//! Static API market: Logit demand, congestion cost, oligopoly pricing and
//! the damped fixed-point equilibrium solver.

use crate::error::{ModelError, ModelResult};
use serde::Serialize;

/// Largest share of capacity a firm is priced at while rationing.
pub const RATION_CAP: f64 = 0.995;
/// Shares are clipped below one when evaluating the markup.
const SHARE_CLIP: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketParams {
    pub theta: f64,
    pub c0: f64,
    pub kappa: f64,
    pub q_bar: f64,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl MarketParams {
    pub fn from_config(cfg: &crate::ScenarioConfig) -> Self {
        MarketParams {
            theta: cfg.upstream.theta,
            c0: cfg.upstream.c0,
            kappa: cfg.upstream.kappa,
            q_bar: cfg.upstream.q_bar,
            damping: cfg.sim.fp_damping,
            tol: cfg.sim.fp_tol,
            max_iter: cfg.sim.fp_max_iter,
        }
    }

    /// Price of an unloaded firm in a symmetric market of `n`.
    pub fn unloaded_price(&self, n: usize) -> f64 {
        self.c0 + self.kappa + 1.0 / (1.0 - 1.0 / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketEquilibrium {
    pub prices: Vec<f64>,
    pub quantities: Vec<f64>,
    pub shares: Vec<f64>,
    /// Tokens demanded at the final prices, before any rationing.
    pub q_demanded: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Demand exceeded `RATION_CAP * Q_bar` for some firm and was scaled down.
    pub rationed: bool,
}

impl MarketEquilibrium {
    pub fn q_total(&self) -> f64 {
        self.quantities.iter().sum()
    }

    /// Share-weighted price paid by a buyer splitting demand across firms.
    pub fn mean_price(&self) -> f64 {
        mean_price(&self.shares, &self.prices)
    }

    pub fn expenditure(&self) -> f64 {
        self.prices
            .iter()
            .zip(&self.quantities)
            .map(|(p, q)| p * q)
            .sum()
    }
}

pub fn mean_price(shares: &[f64], prices: &[f64]) -> f64 {
    shares.iter().zip(prices).map(|(s, p)| s * p).sum()
}

/// Multinomial Logit shares `K^theta exp(-p)`, normalized in log space.
pub fn logit_shares(k: &[f64], p: &[f64], theta: f64) -> ModelResult<Vec<f64>> {
    if k.len() != p.len() || k.is_empty() {
        return Err(ModelError::Domain("capability and price vectors differ in length".into()));
    }
    if let Some(bad) = k.iter().find(|x| !(**x > 0.0)) {
        return Err(ModelError::Domain(format!("nonpositive capability {bad}")));
    }
    let u: Vec<f64> = k.iter().zip(p).map(|(k, p)| theta * k.ln() - p).collect();
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = u.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Operating cost with a logarithmic capacity barrier.
pub fn ops_cost(q: f64, c0: f64, kappa: f64, q_bar: f64) -> ModelResult<f64> {
    if q < 0.0 {
        return Err(ModelError::Domain(format!("negative quantity {q}")));
    }
    if q >= q_bar {
        return Err(ModelError::Capacity(format!("Q={q} at or above capacity {q_bar}")));
    }
    Ok(c0 * q - kappa * q_bar * (1.0 - q / q_bar).ln())
}

pub fn marginal_cost(q: f64, c0: f64, kappa: f64, q_bar: f64) -> ModelResult<f64> {
    if q >= q_bar {
        return Err(ModelError::Capacity(format!("Q={q} at or above capacity {q_bar}")));
    }
    Ok(c0 + kappa / (1.0 - q / q_bar))
}

/// Marginal cost plus the unit-price-coefficient Logit markup `1/(1-s)`.
pub fn pricing_rule(s: f64, q: f64, c0: f64, kappa: f64, q_bar: f64) -> ModelResult<f64> {
    if !(0.0..1.0).contains(&s) {
        return Err(ModelError::Domain(format!("share {s} outside [0,1)")));
    }
    Ok(marginal_cost(q, c0, kappa, q_bar)? + 1.0 / (1.0 - s))
}

/// Equilibrium with an exogenous token total.
pub fn solve_static_equilibrium(k: &[f64], q_total: f64, params: &MarketParams) -> ModelResult<MarketEquilibrium> {
    let n = k.len();
    if q_total < 0.0 {
        return Err(ModelError::Domain(format!("negative Q_total {q_total}")));
    }
    if q_total / n as f64 > params.q_bar {
        return Err(ModelError::Infeasible(format!(
            "Q_total/N = {} exceeds capacity {}",
            q_total / n as f64,
            params.q_bar
        )));
    }
    // Start from the symmetric price at this load.
    let load = (q_total / n as f64 / params.q_bar).min(RATION_CAP);
    let p_sym = params.c0 + params.kappa / (1.0 - load) + 1.0 / (1.0 - 1.0 / n as f64);
    solve_equilibrium(k, |_, _| q_total, &vec![p_sym; n], params)
}

/// Damped fixed point of the pricing rule with demand closed inside the loop.
///
/// `demand(mean_price, k_base)` returns total tokens demanded, where `k_base`
/// is the share-weighted capability. Each step moves prices a fraction
/// `damping` of a Newton step on `supply(p) - p`. The Jacobian of the supply
/// map is diagonal plus rank two (Logit cross-effects and the demand
/// response), so the step is solved exactly with the Woodbury identity using
/// only per-firm formulas and sums, which keeps symmetric markets exactly
/// symmetric.
pub fn solve_equilibrium<F>(k: &[f64], mut demand: F, p0: &[f64], params: &MarketParams) -> ModelResult<MarketEquilibrium>
where
    F: FnMut(f64, f64) -> f64,
{
    let n = k.len();
    let floor = params.c0 + params.kappa + 1.0;
    let mut p = p0.to_vec();
    let mut residual;
    let mut iterations = 0;
    let mut converged = false;
    let mut g = vec![0.0; n];
    let mut dg = vec![0.0; n];
    let mut u1 = vec![0.0; n];
    let mut u2 = vec![0.0; n];
    let mut v2 = vec![0.0; n];
    loop {
        let s = logit_shares(k, &p, params.theta)?;
        let pbar = mean_price(&s, &p);
        let kb = k_base(&s, k);
        let qt = demand(pbar, kb).max(0.0);
        let scale = ration_scale(&s, qt, params.q_bar);
        residual = 0.0;
        for i in 0..n {
            let si = s[i].min(SHARE_CLIP);
            let load = s[i] * qt * scale / params.q_bar;
            let supply = params.c0 + params.kappa / (1.0 - load) + 1.0 / (1.0 - si);
            g[i] = supply - p[i];
            residual = f64::max(residual, g[i].abs());
        }
        if !residual.is_finite() {
            return Err(ModelError::Domain("non-finite price iterate".into()));
        }
        if residual < params.tol {
            converged = true;
            break;
        }
        if iterations >= params.max_iter {
            break;
        }
        // Demand slopes in the mean price and in k_base, for the step only.
        let hp = 1e-6 * pbar.abs().max(1e-6);
        let dq_dp = (demand(pbar + hp, kb).max(0.0) - qt) / hp;
        let hk = 1e-6 * kb.abs().max(1e-12);
        let dq_dk = (demand(pbar, kb + hk).max(0.0) - qt) / hk;
        // J = diag(dg) + u1 s^T + u2 v2^T with
        // dS_i/dp_j = (A_i Q + M_i)(s_i s_j - s_i d_ij) + A_i s_i dQ/dp_j.
        for i in 0..n {
            let si = s[i].min(SHARE_CLIP);
            let load = s[i] * qt * scale / params.q_bar;
            let a = params.kappa * scale / params.q_bar / (1.0 - load).powi(2);
            let m = 1.0 / (1.0 - si).powi(2);
            let c = a * qt + m;
            dg[i] = -c * s[i] - 1.0;
            u1[i] = c * s[i];
            u2[i] = a * s[i];
            v2[i] = s[i] * (dq_dp * (1.0 - p[i] + pbar) - dq_dk * (k[i] - kb));
        }
        // Woodbury: x = D^-1 r - D^-1 U (I + V^T D^-1 U)^-1 V^T D^-1 r, r = -g.
        let (mut a11, mut a12, mut a21, mut a22, mut b1, mut b2) = (1.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        for i in 0..n {
            let r = -g[i] / dg[i];
            let w1 = u1[i] / dg[i];
            let w2 = u2[i] / dg[i];
            a11 += s[i] * w1;
            a12 += s[i] * w2;
            a21 += v2[i] * w1;
            a22 += v2[i] * w2;
            b1 += s[i] * r;
            b2 += v2[i] * r;
        }
        let det = a11 * a22 - a12 * a21;
        let (z1, z2) = if det.is_finite() && det.abs() > 1e-300 {
            ((a22 * b1 - a12 * b2) / det, (a11 * b2 - a21 * b1) / det)
        } else {
            (0.0, 0.0)
        };
        for i in 0..n {
            let step = (-g[i] - u1[i] * z1 - u2[i] * z2) / dg[i];
            let step = if step.is_finite() { step } else { g[i] };
            // Every fixed point lies above the unloaded floor.
            p[i] = (p[i] + params.damping * step).max(floor);
        }
        iterations += 1;
    }
    let shares = logit_shares(k, &p, params.theta)?;
    let q_demanded = demand(mean_price(&shares, &p), k_base(&shares, k)).max(0.0);
    let scale = ration_scale(&shares, q_demanded, params.q_bar);
    let quantities = shares.iter().map(|s| s * q_demanded * scale).collect();
    Ok(MarketEquilibrium {
        prices: p,
        quantities,
        shares,
        q_demanded,
        iterations,
        residual,
        converged,
        rationed: scale < 1.0,
    })
}

/// Share-weighted capability `sum_i s_i K_i`.
pub fn k_base(shares: &[f64], k: &[f64]) -> f64 {
    shares.iter().zip(k).map(|(s, k)| s * k).sum()
}

/// Market outcome at posted prices that bypass the solver.
pub fn clear_at_prices<F>(k: &[f64], prices: &[f64], mut demand: F, params: &MarketParams) -> ModelResult<MarketEquilibrium>
where
    F: FnMut(f64, f64) -> f64,
{
    let shares = logit_shares(k, prices, params.theta)?;
    let q_demanded = demand(mean_price(&shares, prices), k_base(&shares, k)).max(0.0);
    let scale = ration_scale(&shares, q_demanded, params.q_bar);
    Ok(MarketEquilibrium {
        prices: prices.to_vec(),
        quantities: shares.iter().map(|s| s * q_demanded * scale).collect(),
        shares,
        q_demanded,
        iterations: 0,
        residual: 0.0,
        converged: true,
        rationed: scale < 1.0,
    })
}

fn ration_scale(shares: &[f64], q_total: f64, q_bar: f64) -> f64 {
    let peak = shares.iter().cloned().fold(0.0, f64::max) * q_total;
    if peak > RATION_CAP * q_bar {
        RATION_CAP * q_bar / peak
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> MarketParams {
        MarketParams {
            theta: 2.5,
            c0: 0.1,
            kappa: 0.05,
            q_bar: 1.0,
            damping: 0.5,
            tol: 1e-10,
            max_iter: 1000,
        }
    }

    #[test]
    fn logit_examples() {
        let s = logit_shares(&[1.0; 4], &[1.0; 4], 2.5).unwrap();
        assert!(s.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let s = logit_shares(&[2.0, 1.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = logit_shares(&[2.0, 1.0], &[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn logit_rejects_nonpositive_capability() {
        assert!(logit_shares(&[1.0, 0.0], &[0.0, 0.0], 1.0).is_err());
        assert!(logit_shares(&[1.0, -1.0], &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn logit_survives_extreme_inputs() {
        let s = logit_shares(&[1e6, 1e-6], &[-100.0, 100.0], 64.0).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn ops_cost_examples() {
        assert_eq!(ops_cost(0.0, 0.1, 0.05, 1.0).unwrap(), 0.0);
        let v = ops_cost(0.5, 0.1, 0.05, 1.0).unwrap();
        assert!((v - 0.084_657_359_027_997_27).abs() < 1e-15, "{v}");
        assert!(matches!(ops_cost(1.0, 0.1, 0.05, 1.0), Err(ModelError::Capacity(_))));
        assert!(ops_cost(1.0 - 1e-12, 0.1, 0.05, 1.0).unwrap().is_finite());
    }

    #[test]
    fn pricing_examples() {
        assert!((pricing_rule(0.0, 0.0, 0.1, 0.05, 1.0).unwrap() - 1.15).abs() < 1e-15);
        let p = pricing_rule(0.25, 0.5, 0.1, 0.05, 1.0).unwrap();
        assert!((p - (0.2 + 4.0 / 3.0)).abs() < 1e-15);
        assert!((p - 1.533_333_333_333_333).abs() < 1e-12);
        assert!(pricing_rule(1.0, 0.0, 0.1, 0.05, 1.0).is_err());
        assert!(pricing_rule(0.5, 1.0, 0.1, 0.05, 1.0).is_err());
        assert!(pricing_rule(1.0 - 1e-9, 0.0, 0.1, 0.05, 1.0).unwrap() > 1e8);
    }

    #[test]
    fn symmetric_equilibrium() {
        let eq = solve_static_equilibrium(&[100.0; 4], 2.0, &params()).unwrap();
        assert!(eq.converged);
        for i in 1..4 {
            assert_eq!(eq.prices[i], eq.prices[0]);
            assert_eq!(eq.shares[i], eq.shares[0]);
        }
        assert!((eq.shares[0] - 0.25).abs() < 1e-15);
        let expect = pricing_rule(0.25, 0.5, 0.1, 0.05, 1.0).unwrap();
        assert!((eq.prices[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn unloaded_market() {
        let eq = solve_static_equilibrium(&[3.0; 4], 0.0, &params()).unwrap();
        let expect = 0.1 + 0.05 + 1.0 / (1.0 - 0.25);
        for i in 0..4 {
            assert!((eq.prices[i] - expect).abs() < 1e-12);
            assert_eq!(eq.quantities[i], 0.0);
        }
    }

    #[test]
    fn infeasible_total() {
        assert!(matches!(
            solve_static_equilibrium(&[1.0; 4], 4.5, &params()),
            Err(ModelError::Infeasible(_))
        ));
    }

    /// Independent check: grid search over the two distinct prices of the
    /// quasi-symmetric game `K = [1.2, 1, 1, 1]` for the pair at which both
    /// firm types price at their pricing rule given the other type's price.
    #[test]
    fn asymmetric_equilibrium_matches_grid_oracle() {
        let pm = params();
        let k = [1.2, 1.0, 1.0, 1.0];
        let qt = 2.0;
        let eq = solve_static_equilibrium(&k, qt, &pm).unwrap();
        assert!(eq.converged);
        assert!(eq.shares[0] > 0.25 && eq.shares[1] < 0.25);
        assert!(eq.prices[0] >= eq.prices[1]);

        let gap = |a: f64, b: f64| {
            let s = logit_shares(&k, &[a, b, b, b], pm.theta).unwrap();
            match (
                pricing_rule(s[0], s[0] * qt, pm.c0, pm.kappa, pm.q_bar),
                pricing_rule(s[1], s[1] * qt, pm.c0, pm.kappa, pm.q_bar),
            ) {
                (Ok(ra), Ok(rb)) => (ra - a).abs() + (rb - b).abs(),
                _ => f64::INFINITY,
            }
        };
        let (mut lo_a, mut hi_a, mut lo_b, mut hi_b) = (1.0, 3.0, 1.0, 3.0);
        let mut best = (0.0, 0.0);
        for _ in 0..8 {
            let mut best_v = f64::INFINITY;
            for i in 0..=200 {
                let a = lo_a + (hi_a - lo_a) * i as f64 / 200.0;
                for j in 0..=200 {
                    let b = lo_b + (hi_b - lo_b) * j as f64 / 200.0;
                    let v = gap(a, b);
                    if v < best_v {
                        best_v = v;
                        best = (a, b);
                    }
                }
            }
            let (wa, wb) = ((hi_a - lo_a) / 20.0, (hi_b - lo_b) / 20.0);
            lo_a = best.0 - wa;
            hi_a = best.0 + wa;
            lo_b = best.1 - wb;
            hi_b = best.1 + wb;
        }
        assert!((eq.prices[0] - best.0).abs() < 1e-6, "{:?} {:?}", eq.prices, best);
        assert!((eq.prices[1] - best.1).abs() < 1e-6, "{:?} {:?}", eq.prices, best);
    }

    #[test]
    fn equilibrium_satisfies_market_conditions() {
        let pm = params();
        let k = [1.5, 1.1, 0.9, 0.7];
        let eq = solve_static_equilibrium(&k, 1.6, &pm).unwrap();
        assert!(eq.converged && eq.residual < pm.tol);
        assert!((eq.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((eq.q_total() - 1.6).abs() < 1e-12);
        for i in 0..4 {
            let rule = pricing_rule(eq.shares[i], eq.quantities[i], pm.c0, pm.kappa, pm.q_bar).unwrap();
            assert!((rule - eq.prices[i]).abs() < 1e-8);
            assert!(eq.quantities[i] < pm.q_bar);
        }
    }

    #[test]
    fn near_monopoly_converges() {
        let pm = MarketParams { kappa: 1.0, ..params() };
        let eq = solve_static_equilibrium(&[100.0, 10.0, 10.0, 10.0], 0.9, &pm).unwrap();
        assert!(eq.converged, "{eq:?}");
        // The 1/(1-s) markup keeps the leader's share well away from one.
        assert!(eq.shares[0] > 0.6 && eq.shares[0] < 0.8, "{eq:?}");
        let rule = pricing_rule(eq.shares[0], eq.quantities[0], pm.c0, pm.kappa, pm.q_bar).unwrap();
        assert!((rule - eq.prices[0]).abs() < 1e-8);
    }

    #[test]
    fn endogenous_demand_rations_at_capacity() {
        let pm = params();
        let eq = solve_equilibrium(&[1.0; 4], |_, _| 10.0, &[1.5; 4], &pm).unwrap();
        assert!(eq.rationed);
        for q in &eq.quantities {
            assert!(*q <= RATION_CAP * pm.q_bar + 1e-15);
        }
    }

    #[test]
    fn solver_is_deterministic() {
        let pm = params();
        let k = [1.3, 1.0, 0.8];
        let a = solve_static_equilibrium(&k, 1.2, &pm).unwrap();
        let b = solve_static_equilibrium(&k, 1.2, &pm).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.prices.iter().zip(&b.prices) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn posted_prices_bypass_solver() {
        let pm = params();
        let eq = clear_at_prices(&[1.0; 2], &[0.5, 0.5], |pbar, _| 0.5 / pbar, &pm).unwrap();
        assert_eq!(eq.prices, vec![0.5, 0.5]);
        assert!(!eq.rationed);
        assert!((eq.q_total() - 1.0).abs() < 1e-12);
    }
}
