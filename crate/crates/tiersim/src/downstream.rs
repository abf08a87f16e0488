//! Downstream agent developers: production, architecture choice, token
//! demand, orchestration capital and the wrapper-trap test.

use crate::config::DownstreamParams;
use crate::error::{ModelError, ModelResult};
use serde::Serialize;

/// Upper bound on architecture complexity searched by the optimizer.
pub const D_MAX: f64 = 20.0;
/// Fixed split of complexity into reasoning, tool use and memory.
pub const ARCH_SPLIT: [f64; 3] = [0.45, 0.25, 0.30];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tech {
    pub psi_k: f64,
    pub phi_arch: f64,
    pub nu_arch: f64,
    pub xi_token: f64,
    pub xi_cann: f64,
    pub mu_o: f64,
    pub phi_learn: f64,
    pub wage: f64,
    pub p_y: f64,
}

impl From<&DownstreamParams> for Tech {
    fn from(d: &DownstreamParams) -> Self {
        Tech {
            psi_k: d.psi_k,
            phi_arch: d.phi_arch,
            nu_arch: d.nu_arch,
            xi_token: d.xi_token,
            xi_cann: d.xi_cann,
            mu_o: d.mu_o,
            phi_learn: d.phi_learn,
            wage: d.wage,
            p_y: d.p_y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DownstreamAgentState {
    pub o: f64,
    pub o_init: f64,
    pub l: f64,
    pub d_arch: f64,
    pub y: f64,
    pub tokens: f64,
    /// Firm supplying the largest fraction of this agent's tokens.
    pub supplier: usize,
    pub alive: bool,
    /// Time at which O first fell below the exit floor, if it is still there.
    pub low_since: Option<f64>,
}

impl DownstreamAgentState {
    pub fn new(o: f64) -> Self {
        DownstreamAgentState {
            o,
            o_init: o,
            l: 0.0,
            d_arch: 0.0,
            y: 0.0,
            tokens: 0.0,
            supplier: 0,
            alive: true,
            low_since: None,
        }
    }

    /// Reasoning, tool-use and memory components of the complexity choice.
    pub fn components(&self) -> [f64; 3] {
        ARCH_SPLIT.map(|w| w * self.d_arch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Growing,
    Shrinking,
    Boundary,
}

/// `h(d) = 1 + phi d^nu`.
pub fn arch_efficiency(d: f64, phi_arch: f64, nu_arch: f64) -> f64 {
    1.0 + phi_arch * d.powf(nu_arch)
}

/// `tau(d) = 1 + xi d`, tokens per unit of output.
pub fn token_multiplier(d: f64, xi_token: f64) -> f64 {
    1.0 + xi_token * d
}

/// `O * (K h(d))^psi * L^(1-psi)`.
pub fn agent_output(o: f64, k_base: f64, d: f64, l: f64, tech: &Tech) -> f64 {
    let h = arch_efficiency(d, tech.phi_arch, tech.nu_arch);
    o * (k_base * h).powf(tech.psi_k) * l.powf(1.0 - tech.psi_k)
}

/// Output price net of token cost per unit of output.
pub fn net_price(d: f64, p_api: f64, tech: &Tech) -> f64 {
    tech.p_y - p_api * token_multiplier(d, tech.xi_token)
}

/// Output when labor is set by its first-order condition
/// `(1 - psi) * net_price * Y / L = wage`.
pub fn output_at_optimal_labor(o: f64, k_base: f64, d: f64, p_api: f64, tech: &Tech) -> f64 {
    let net = net_price(d, p_api, tech);
    if net <= 0.0 || o <= 0.0 || k_base <= 0.0 {
        return 0.0;
    }
    let psi = tech.psi_k;
    let h = arch_efficiency(d, tech.phi_arch, tech.nu_arch);
    o.powf(1.0 / psi) * k_base * h * ((1.0 - psi) * net / tech.wage).powf((1.0 - psi) / psi)
}

pub fn optimal_labor(o: f64, k_base: f64, d: f64, p_api: f64, tech: &Tech) -> f64 {
    let net = net_price(d, p_api, tech);
    if net <= 0.0 {
        return 0.0;
    }
    (1.0 - tech.psi_k) * net * output_at_optimal_labor(o, k_base, d, p_api, tech) / tech.wage
}

/// `P_Y Y - w L - p tau(d) Y` at the optimal labor input.
pub fn profit(o: f64, k_base: f64, d: f64, p_api: f64, tech: &Tech) -> f64 {
    let net = net_price(d, p_api, tech);
    if net <= 0.0 {
        return 0.0;
    }
    tech.psi_k * net * output_at_optimal_labor(o, k_base, d, p_api, tech)
}

/// Derivative of log profit in `d`; zero at an interior optimum.
///
/// Profit is proportional to `h(d) * net_price(d)^(1/psi)`, so the optimum
/// depends only on `p_api / P_Y`.
pub fn architecture_foc(d: f64, p_api: f64, tech: &Tech) -> f64 {
    let h = arch_efficiency(d, tech.phi_arch, tech.nu_arch);
    let dh = tech.phi_arch * tech.nu_arch * d.powf(tech.nu_arch - 1.0);
    dh / h - p_api * tech.xi_token / (tech.psi_k * net_price(d, p_api, tech))
}

/// Profit-maximizing complexity on `[0, D_MAX]`.
///
/// The marginal efficiency term is unbounded at zero and decreasing, the
/// marginal token cost increasing, so the optimum is the unique root of the
/// first-order condition, found by bisection. Returns 0 when output is not
/// worth producing at any complexity.
pub fn optimal_architecture(p_api: f64, k_base: f64, o: f64, tech: &Tech) -> f64 {
    let _ = (k_base, o);
    if !(p_api > 0.0) || p_api >= tech.p_y {
        return 0.0;
    }
    let mut hi = D_MAX;
    if tech.xi_token > 0.0 {
        hi = hi.min((tech.p_y / p_api - 1.0) / tech.xi_token);
    }
    if architecture_foc(hi * (1.0 - 1e-12), p_api, tech) > 0.0 {
        return hi;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if architecture_foc(mid, p_api, tech) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Tokens per unit of `O^(1/psi) * K_base` at API price `p_api`.
pub fn token_intensity(p_api: f64, tech: &Tech) -> f64 {
    let d = optimal_architecture(p_api, 1.0, 1.0, tech);
    output_at_optimal_labor(1.0, 1.0, d, p_api, tech) * token_multiplier(d, tech.xi_token)
}

/// Forward Euler step of orchestration capital with linear learning
/// `phi_learn * Y`, natural decay and cannibalization by frontier growth.
pub fn step_orchestration(o: f64, y: f64, g_a: f64, tech: &Tech, dt: f64) -> f64 {
    (o + dt * (tech.phi_learn * y - tech.mu_o * o - tech.xi_cann * g_a * o)).max(0.0)
}

/// Sign of the orchestration drift: learning `Phi(Y)/O` against
/// `mu + xi g_A`.
pub fn wrapper_trap_check(o: f64, y: f64, g_a: f64, tech: &Tech) -> ModelResult<Trajectory> {
    if !(o > 0.0) {
        return Err(ModelError::Degenerate("orchestration capital is zero".into()));
    }
    let margin = tech.phi_learn * y / o - (tech.mu_o + tech.xi_cann * g_a);
    Ok(if margin.abs() <= 1e-12 {
        Trajectory::Boundary
    } else if margin > 0.0 {
        Trajectory::Growing
    } else {
        Trajectory::Shrinking
    })
}

/// Total tokens over live agents and the fractional split across suppliers.
pub fn aggregate_token_demand(agents: &[DownstreamAgentState], shares: &[f64]) -> (f64, Vec<f64>) {
    let total: f64 = agents.iter().filter(|a| a.alive).map(|a| a.tokens).sum();
    (total, shares.iter().map(|s| s * total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JevonsDecomposition {
    /// Output response along the optimal complexity path.
    pub eps_y_p: f64,
    pub eps_tau_d: f64,
    pub eps_d_p: f64,
    /// `dln Q / dln p` for `Q = Y tau(d*)`.
    pub total: f64,
}

/// Log-difference elasticities of token demand between prices `p0` and `p1`.
pub fn jevons_decomposition(p0: f64, p1: f64, tech: &Tech) -> JevonsDecomposition {
    let dlp = (p1 / p0).ln();
    let d0 = optimal_architecture(p0, 1.0, 1.0, tech);
    let d1 = optimal_architecture(p1, 1.0, 1.0, tech);
    let y0 = output_at_optimal_labor(1.0, 1.0, d0, p0, tech);
    let y1 = output_at_optimal_labor(1.0, 1.0, d1, p1, tech);
    let t0 = token_multiplier(d0, tech.xi_token);
    let t1 = token_multiplier(d1, tech.xi_token);
    let eps_tau_d = if d1 != d0 { (t1 / t0).ln() / (d1 / d0).ln() } else { 0.0 };
    JevonsDecomposition {
        eps_y_p: (y1 / y0).ln() / dlp,
        eps_tau_d,
        eps_d_p: (d1 / d0).ln() / dlp,
        total: ((y1 * t1) / (y0 * t0)).ln() / dlp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tech() -> Tech {
        Tech::from(&DownstreamParams::default())
    }

    #[test]
    fn efficiency_examples() {
        assert_eq!(arch_efficiency(0.0, 0.5, 0.5), 1.0);
        assert_eq!(arch_efficiency(1.0, 0.5, 0.5), 1.5);
        assert_eq!(arch_efficiency(4.0, 0.5, 0.5), 2.0);
    }

    #[test]
    fn token_multiplier_examples() {
        assert_eq!(token_multiplier(0.0, 1.8), 1.0);
        assert!((token_multiplier(5.0, 1.8) - 10.0).abs() < 1e-14);
        assert_eq!(token_multiplier(7.0, 0.0), 1.0);
    }

    #[test]
    fn tau_elasticity_identity() {
        let xi = 1.8;
        for &d in &[0.3, 1.0, 4.0, 9.0] {
            let h = 1e-5 * d;
            let fd = ((token_multiplier(d + h, xi)).ln() - (token_multiplier(d - h, xi)).ln())
                / ((d + h).ln() - (d - h).ln());
            let exact = xi * d / (1.0 + xi * d);
            assert!((fd - exact).abs() < 1e-8, "{fd} {exact}");
            assert!(exact < 1.0);
        }
    }

    #[test]
    fn output_examples() {
        let t = tech();
        assert!((agent_output(1.0, 1.0, 0.0, 1.0, &t) - 1.0).abs() < 1e-15);
        assert!((agent_output(2.0, 1.0, 0.0, 1.0, &t) - 2.0).abs() < 1e-15);
        assert_eq!(agent_output(1.0, 1.0, 0.0, 0.0, &t), 0.0);
    }

    #[test]
    fn optimal_labor_is_consistent_with_output() {
        let t = tech();
        let (o, k, d, p) = (1.3, 80.0, 2.0, 1.7);
        let l = optimal_labor(o, k, d, p, &t);
        let y = output_at_optimal_labor(o, k, d, p, &t);
        assert!((agent_output(o, k, d, l, &t) / y - 1.0).abs() < 1e-12);
        // labor FOC: profit is flat in L at L*
        let pf = |l: f64| {
            let y = agent_output(o, k, d, l, &t);
            net_price(d, p, &t) * y - t.wage * l
        };
        let h = 1e-6 * l;
        assert!(((pf(l + h) - pf(l - h)) / (2.0 * h)).abs() < 1e-6);
    }

    /// Pinned against an exhaustive grid over d in [0, 20] with step 1e-4.
    #[test]
    fn architecture_matches_grid_oracle() {
        let t = tech();
        let d1 = optimal_architecture(1.0, 1.0, 1.0, &t);
        let d05 = optimal_architecture(0.5, 1.0, 1.0, &t);
        assert!((d1 - 5.3218).abs() < 1.5e-4, "{d1}");
        assert!((d05 - 12.5270).abs() < 1.5e-4, "{d05}");
        assert!(d05 > d1);
        assert!(architecture_foc(d1, 1.0, &t).abs() < 1e-9);
    }

    #[test]
    fn architecture_corners() {
        let t = tech();
        assert_eq!(optimal_architecture(1e6, 1.0, 1.0, &t), 0.0);
        assert_eq!(optimal_architecture(t.p_y, 1.0, 1.0, &t), 0.0);
        let free = Tech { xi_token: 0.0, ..t };
        assert_eq!(optimal_architecture(1.0, 1.0, 1.0, &free), D_MAX);
    }

    #[test]
    fn architecture_maximizes_profit() {
        let t = tech();
        let p = 2.0;
        let d = optimal_architecture(p, 50.0, 1.0, &t);
        let best = profit(1.0, 50.0, d, p, &t);
        for k in 0..=2000 {
            let x = k as f64 * 0.01;
            assert!(profit(1.0, 50.0, x, p, &t) <= best * (1.0 + 1e-12));
        }
    }

    #[test]
    fn orchestration_examples() {
        let t = tech();
        let g = 0.1;
        let o = 2.0;
        let y = (t.mu_o + t.xi_cann * g) * o / t.phi_learn;
        assert!((step_orchestration(o, y, g, &t, 0.1) - o).abs() < 1e-15);
        assert_eq!(wrapper_trap_check(o, y, g, &t).unwrap(), Trajectory::Boundary);

        let free = Tech { xi_cann: 0.0, mu_o: 0.0, ..t };
        assert!(step_orchestration(1.0, 1.0, 0.1, &free, 0.1) > 1.0);

        let trap = Tech { xi_cann: 0.4, phi_learn: 0.0, ..t };
        let mut o = 1.0;
        for _ in 0..100 {
            o = step_orchestration(o, 0.0, 0.20, &trap, 0.01);
        }
        let rate = -o.ln();
        assert!((rate - (t.mu_o + 0.08)).abs() < 1e-3, "{rate}");
    }

    #[test]
    fn wrapper_trap_classification() {
        let t = tech();
        assert_eq!(wrapper_trap_check(1.0, 100.0, 0.1, &t).unwrap(), Trajectory::Growing);
        assert_eq!(wrapper_trap_check(1.0, 0.0, 0.1, &t).unwrap(), Trajectory::Shrinking);
        assert!(wrapper_trap_check(0.0, 1.0, 0.1, &t).is_err());
    }

    #[test]
    fn token_aggregation_examples() {
        let mut a = DownstreamAgentState::new(1.0);
        a.y = 1.0;
        a.tokens = 1.0;
        let (q, split) = aggregate_token_demand(&[a.clone()], &[0.5, 0.5]);
        assert_eq!(q, 1.0);
        assert_eq!(split, vec![0.5, 0.5]);
        let mut b = a.clone();
        b.tokens = 10.0;
        let mut c = b.clone();
        c.tokens = 10.0;
        let (q, _) = aggregate_token_demand(&[b, c], &[1.0]);
        assert_eq!(q, 20.0);
        let mut dead = a;
        dead.alive = false;
        assert_eq!(aggregate_token_demand(&[dead], &[1.0]).0, 0.0);
    }

    #[test]
    fn jevons_decomposition_adds_up() {
        let t = tech();
        for &p in &[1.0, 2.0, 4.0] {
            let j = jevons_decomposition(p, p * 0.999, &t);
            let approx = j.eps_y_p + j.eps_tau_d * j.eps_d_p;
            assert!(((approx - j.total) / j.total).abs() < 0.05, "{j:?}");
        }
    }

    #[test]
    fn super_elastic_at_low_relative_price() {
        let t = tech();
        let j = jevons_decomposition(2.0, 1.0, &t);
        assert!(j.total < -1.0, "{j:?}");
        assert!(j.eps_d_p < 0.0);
    }
}
