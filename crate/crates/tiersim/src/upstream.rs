//! Upstream firm state and the physical laws: CES intelligence production,
//! data accumulation and frontier growth.

use crate::error::{ModelError, ModelResult};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpstreamFirmState {
    pub k_ai: f64,
    pub d_eff: f64,
    /// TFP multiplier on the frontier level.
    pub tfp: f64,
    pub price: f64,
    pub share: f64,
    pub q: f64,
    pub q_shadow: f64,
    pub delta_cur: f64,
    pub invest_policy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrontierState {
    pub a_bar: f64,
    pub t: f64,
}

/// `A * [alpha C^rho + (1 - alpha) D^rho]^(gamma / rho)`.
///
/// With `rho < 0` the inputs are strict complements and a zero input gives
/// zero output.
pub fn gross_production(a: f64, c: f64, d: f64, alpha: f64, rho: f64, gamma: f64) -> ModelResult<f64> {
    if rho == 0.0 {
        return Err(ModelError::Domain(
            "rho_ces = 0 (Cobb-Douglas limit) is not supported".into(),
        ));
    }
    if c < 0.0 || d < 0.0 {
        return Err(ModelError::Domain(format!("negative input C={c}, D={d}")));
    }
    if rho < 0.0 && (c == 0.0 || d == 0.0) {
        return Ok(0.0);
    }
    let inner = alpha * c.powf(rho) + (1.0 - alpha) * d.powf(rho);
    Ok(a * inner.powf(gamma / rho))
}

/// Partial derivative of [`gross_production`] with respect to compute.
pub fn marginal_product_compute(a: f64, c: f64, d: f64, alpha: f64, rho: f64, gamma: f64) -> f64 {
    if c <= 0.0 || d <= 0.0 {
        return 0.0;
    }
    let inner = alpha * c.powf(rho) + (1.0 - alpha) * d.powf(rho);
    a * gamma * inner.powf(gamma / rho - 1.0) * alpha * c.powf(rho - 1.0)
}

pub fn step_data(d: f64, q: f64, eta_data: f64, mu_d: f64, dt: f64) -> f64 {
    (d + dt * (eta_data * q - mu_d * d)).max(0.0)
}

/// Exact exponential frontier update, optionally with a level jump.
pub fn step_frontier(f: FrontierState, g_a: f64, dt: f64, jump_factor: Option<f64>) -> FrontierState {
    FrontierState {
        a_bar: f.a_bar * (g_a * dt).exp() * jump_factor.unwrap_or(1.0),
        t: f.t + dt,
    }
}

/// Compute purchased with the reinvested share of revenue (unit compute price).
pub fn compute_from_investment(revenue: f64, invest_policy: f64) -> f64 {
    invest_policy * revenue
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: f64 = 0.35;
    const R: f64 = -0.2;
    const G: f64 = 1.3;

    #[test]
    fn production_examples() {
        assert!((gross_production(1.0, 1.0, 1.0, A, R, G).unwrap() - 1.0).abs() < 1e-15);
        assert!((gross_production(2.0, 1.0, 1.0, A, R, G).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(gross_production(1.0, 0.0, 10.0, A, R, G).unwrap(), 0.0);
        assert_eq!(gross_production(1.0, 10.0, 0.0, A, R, G).unwrap(), 0.0);
        // 50-digit evaluation of the formula at C = 4, D = 1
        let v = gross_production(1.0, 4.0, 1.0, A, R, G).unwrap();
        assert!((v - 1.778_240_408_339_793_6).abs() < 1e-13, "{v}");
    }

    #[test]
    fn production_cobb_douglas_limit_rejected() {
        assert!(matches!(
            gross_production(1.0, 1.0, 1.0, A, 0.0, G),
            Err(ModelError::Domain(_))
        ));
    }

    #[test]
    fn doubling_inputs() {
        let base = gross_production(1.0, 3.0, 5.0, A, R, G).unwrap();
        let dbl = gross_production(1.0, 6.0, 10.0, A, R, G).unwrap();
        assert!((dbl / base - 2f64.powf(1.3)).abs() < 1e-12);
        assert!((2f64.powf(1.3) - 2.462_288_826_689_832_5).abs() < 1e-14);
    }

    #[test]
    fn marginal_product_matches_finite_difference() {
        let (c, d) = (2.0, 3.0);
        let h = 1e-6;
        let fd = (gross_production(1.5, c + h, d, A, R, G).unwrap()
            - gross_production(1.5, c - h, d, A, R, G).unwrap())
            / (2.0 * h);
        let an = marginal_product_compute(1.5, c, d, A, R, G);
        assert!((fd - an).abs() < 1e-8, "{fd} {an}");
    }

    #[test]
    fn data_step_examples() {
        assert!((step_data(1.0, 0.0, 0.24, 0.2, 0.1) - 0.98).abs() < 1e-15);
        assert!((step_data(0.0, 1.0, 0.24, 0.2, 0.1) - 0.024).abs() < 1e-15);
        let (eta, mu, q) = (0.24, 0.2, 0.7);
        let ss = eta * q / mu;
        assert!((step_data(ss, q, eta, mu, 0.1) - ss).abs() < 1e-15);
        assert_eq!(step_data(0.0, 0.0, eta, mu, 0.1), 0.0);
    }

    #[test]
    fn data_converges_geometrically() {
        let (eta, mu, q) = (0.3, 0.2, 0.5);
        let mut d = 0.0;
        for _ in 0..2000 {
            d = step_data(d, q, eta, mu, 0.1);
        }
        assert!((d - eta * q / mu).abs() < 1e-12);
    }

    #[test]
    fn frontier_examples() {
        let mut f = FrontierState { a_bar: 1.0, t: 0.0 };
        for _ in 0..100 {
            f = step_frontier(f, 0.10, 0.1, None);
        }
        assert!((f.a_bar - std::f64::consts::E).abs() < 1e-12);
        let g = step_frontier(FrontierState { a_bar: 3.0, t: 0.0 }, 0.0, 5.0, None);
        assert_eq!(g.a_bar, 3.0);
        let j = step_frontier(FrontierState { a_bar: 1.0, t: 15.0 }, 0.0, 0.1, Some(1.3));
        assert!((j.a_bar - 1.3).abs() < 1e-15);
    }

    #[test]
    fn compute_examples() {
        assert_eq!(compute_from_investment(10.0, 0.3), 3.0);
        assert_eq!(compute_from_investment(10.0, 0.0), 0.0);
        let base = compute_from_investment(7.0, 0.3);
        assert!((compute_from_investment(7.0, 0.9) - 3.0 * base).abs() < 1e-12);
    }
}
