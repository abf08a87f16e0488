//! Scenario configuration: calibration, horizon, solver settings and shocks.
//!
//! Files are TOML (`.toml`) or JSON (`.json`) with the sections `frontier`,
//! `upstream`, `downstream`, `sim` and an optional `shocks` array. Every field
//! has a default; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("validation error: {0}")]
    Invalid(String),
}

/// `1 + theta * (1 - 1/N)`, the frontier-pressure coefficient implied by Logit
/// rivalry among `n` firms.
pub fn structural_delta1(theta: f64, n: usize) -> f64 {
    1.0 + theta * (1.0 - 1.0 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontierParams {
    /// Initial frontier level. When absent it is calibrated so that the
    /// symmetric initial state grows at `g_A`.
    #[serde(rename = "A0", skip_serializing_if = "Option::is_none")]
    pub a0: Option<f64>,
    #[serde(rename = "g_A")]
    pub g_a: f64,
}

impl Default for FrontierParams {
    fn default() -> Self {
        FrontierParams { a0: None, g_a: 0.10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delta1Mode {
    Structural,
}

/// Either an explicit coefficient or `"structural"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Delta1 {
    Value(f64),
    Mode(Delta1Mode),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpstreamParams {
    #[serde(rename = "N")]
    pub n: usize,
    pub alpha: f64,
    pub rho_ces: f64,
    pub gamma_scale: f64,
    pub theta: f64,
    pub c0: f64,
    pub kappa: f64,
    #[serde(rename = "Q_bar")]
    pub q_bar: f64,
    pub delta0: f64,
    pub delta1: Delta1,
    pub delta2: f64,
    pub eta_over_mu: f64,
    #[serde(rename = "mu_D")]
    pub mu_d: f64,
    pub invest_rate: f64,
    /// Common initial capital stock.
    #[serde(rename = "K0")]
    pub k0: f64,
    /// Per-firm initial capital, overriding `K0`.
    #[serde(rename = "K0_firms", skip_serializing_if = "Option::is_none")]
    pub k0_firms: Option<Vec<f64>>,
    /// Per-firm TFP multipliers on the frontier level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tfp: Option<Vec<f64>>,
    /// Per-firm multipliers on the initial steady-state data stock.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_advantage: Option<Vec<f64>>,
    /// Usage-independent data available to every firm.
    #[serde(rename = "D_public")]
    pub d_public: f64,
}

impl Default for UpstreamParams {
    fn default() -> Self {
        UpstreamParams {
            n: 4,
            alpha: 0.35,
            rho_ces: -0.2,
            gamma_scale: 1.3,
            theta: 2.5,
            c0: 0.1,
            kappa: 1.0,
            q_bar: 1.0,
            delta0: 0.08,
            delta1: Delta1::Mode(Delta1Mode::Structural),
            delta2: 0.6,
            eta_over_mu: 1.2,
            mu_d: 0.2,
            invest_rate: 0.3,
            k0: 100.0,
            k0_firms: None,
            tfp: None,
            data_advantage: None,
            d_public: 0.0,
        }
    }
}

impl UpstreamParams {
    pub fn delta1_value(&self) -> f64 {
        match self.delta1 {
            Delta1::Value(v) => v,
            Delta1::Mode(Delta1Mode::Structural) => structural_delta1(self.theta, self.n),
        }
    }

    pub fn eta_data(&self) -> f64 {
        self.eta_over_mu * self.mu_d
    }

    pub fn initial_capital(&self) -> Vec<f64> {
        match &self.k0_firms {
            Some(v) => v.clone(),
            None => vec![self.k0; self.n],
        }
    }

    pub fn tfp_multipliers(&self) -> Vec<f64> {
        self.tfp.clone().unwrap_or_else(|| vec![1.0; self.n])
    }

    pub fn data_multipliers(&self) -> Vec<f64> {
        self.data_advantage
            .clone()
            .unwrap_or_else(|| vec![1.0; self.n])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamParams {
    #[serde(rename = "M0")]
    pub m0: usize,
    #[serde(rename = "psi_K")]
    pub psi_k: f64,
    pub phi_arch: f64,
    pub nu_arch: f64,
    pub xi_token: f64,
    pub xi_cann: f64,
    #[serde(rename = "mu_O")]
    pub mu_o: f64,
    pub phi_learn: f64,
    pub wage: f64,
    #[serde(rename = "P_Y")]
    pub p_y: f64,
    #[serde(rename = "O_init_logmean")]
    pub o_init_logmean: f64,
    #[serde(rename = "O_init_logsd")]
    pub o_init_logsd: f64,
    pub entry_rate: f64,
    /// Target share of aggregate capacity used at t = 0; sets `Z` when `Z` is absent.
    pub utilization0: f64,
    /// Downstream productivity scale converting orchestration capital into
    /// service units.
    #[serde(rename = "Z", skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
}

impl Default for DownstreamParams {
    fn default() -> Self {
        DownstreamParams {
            m0: 50,
            psi_k: 0.4,
            phi_arch: 0.5,
            nu_arch: 0.5,
            xi_token: 1.8,
            xi_cann: 0.2,
            mu_o: 0.02,
            phi_learn: 0.05,
            wage: 1.0,
            p_y: 100.0,
            o_init_logmean: 0.0,
            o_init_logsd: 0.25,
            entry_rate: 1.0,
            utilization0: 0.5,
            z: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub seed: u64,
    pub fp_damping: f64,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    /// Interpret `rd_boost` magnitudes as relative (+x%) instead of absolute.
    pub rd_boost_relative: bool,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dt: 0.1,
            t_end: 20.0,
            seed: 42,
            fp_damping: 0.5,
            fp_tol: 1e-8,
            fp_max_iter: 1000,
            rd_boost_relative: false,
        }
    }
}

impl SimParams {
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShockKind {
    /// Adds `magnitude` to the reinvestment fraction.
    RdBoost,
    /// Sets the reinvestment fraction to zero.
    RdStop,
    /// Multiplies the reinvestment fraction by `magnitude`.
    RdMultiplier,
    /// Freezes posted prices at `magnitude` times the last posted prices.
    PriceOverrideFactor,
    /// Multiplies the frontier level by `magnitude`.
    FrontierJumpFactor,
    /// Multiplies downstream output demand by `magnitude`.
    DemandScaleFactor,
}

impl fmt::Display for ShockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShockKind::RdBoost => "rd_boost",
            ShockKind::RdStop => "rd_stop",
            ShockKind::RdMultiplier => "rd_multiplier",
            ShockKind::PriceOverrideFactor => "price_override_factor",
            ShockKind::FrontierJumpFactor => "frontier_jump_factor",
            ShockKind::DemandScaleFactor => "demand_scale_factor",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllFirms {
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Firm(usize),
    All(AllFirms),
}

impl Target {
    pub fn includes(&self, i: usize) -> bool {
        match self {
            Target::Firm(j) => *j == i,
            Target::All(_) => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShockSpec {
    pub time: f64,
    pub kind: ShockKind,
    #[serde(default = "default_target")]
    pub target: Target,
    #[serde(default = "one")]
    pub magnitude: f64,
}

fn default_target() -> Target {
    Target::All(AllFirms::All)
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub frontier: FrontierParams,
    pub upstream: UpstreamParams,
    pub downstream: DownstreamParams,
    pub sim: SimParams,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub shocks: Vec<ShockSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "baseline".into(),
            frontier: FrontierParams::default(),
            upstream: UpstreamParams::default(),
            downstream: DownstreamParams::default(),
            sim: SimParams::default(),
            shocks: Vec::new(),
        }
    }
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), ConfigError> {
    if cond {
        Ok(())
    } else {
        Err(ConfigError::Invalid(msg.into()))
    }
}

fn finite_all(name: &str, xs: &[f64]) -> Result<(), ConfigError> {
    check(xs.iter().all(|x| x.is_finite()), format!("{name} must be finite"))
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(s).map_err(|e| ConfigError::Parse {
            origin: "toml".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(s).map_err(|e| ConfigError::Parse {
            origin: "json".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes to json")
    }

    /// SHA-256 over the compact JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes to json");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn eta_data(&self) -> f64 {
        self.upstream.eta_data()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let f = &self.frontier;
        let u = &self.upstream;
        let d = &self.downstream;
        let s = &self.sim;

        if let Some(a0) = f.a0 {
            check(a0 > 0.0 && a0.is_finite(), "A0 must be > 0")?;
        }
        check(f.g_a >= 0.0 && f.g_a.is_finite(), "g_A must be >= 0")?;

        check(u.n >= 2, "N must be >= 2")?;
        check(u.alpha > 0.0 && u.alpha < 1.0, "alpha out of (0,1)")?;
        check(u.rho_ces < 1.0 && u.rho_ces != 0.0, "rho_ces must be < 1 and != 0")?;
        check(u.gamma_scale > 0.0, "gamma_scale must be > 0")?;
        check(u.theta > 0.0, "theta must be > 0")?;
        check(u.c0 >= 0.0, "c0 must be >= 0")?;
        check(u.kappa > 0.0, "kappa must be > 0")?;
        check(u.q_bar > 0.0, "Q_bar must be > 0")?;
        check(u.delta0 >= 0.0, "delta0 must be >= 0")?;
        check(u.delta1_value() >= 0.0, "delta1 must be >= 0")?;
        check(u.delta2 >= 0.0, "delta2 must be >= 0")?;
        check(u.eta_over_mu >= 0.0, "eta_over_mu must be >= 0")?;
        check(u.mu_d > 0.0, "mu_D must be > 0")?;
        check(
            (0.0..1.0).contains(&u.invest_rate),
            "invest_rate out of [0,1)",
        )?;
        check(u.k0 > 0.0, "K0 must be > 0")?;
        check(u.d_public >= 0.0, "D_public must be >= 0")?;
        finite_all(
            "upstream parameters",
            &[
                u.alpha,
                u.rho_ces,
                u.gamma_scale,
                u.theta,
                u.c0,
                u.kappa,
                u.q_bar,
                u.delta0,
                u.delta1_value(),
                u.delta2,
                u.eta_over_mu,
                u.mu_d,
                u.k0,
                u.d_public,
            ],
        )?;
        for (name, v) in [
            ("K0_firms", &u.k0_firms),
            ("tfp", &u.tfp),
            ("data_advantage", &u.data_advantage),
        ] {
            if let Some(v) = v {
                check(v.len() == u.n, format!("{name} must have N entries"))?;
                check(
                    v.iter().all(|x| *x > 0.0 && x.is_finite()),
                    format!("{name} entries must be > 0"),
                )?;
            }
        }

        check(d.m0 >= 1, "M0 must be >= 1")?;
        check(d.psi_k > 0.0 && d.psi_k < 1.0, "psi_K out of (0,1)")?;
        check(d.phi_arch > 0.0, "phi_arch must be > 0")?;
        check(d.nu_arch > 0.0 && d.nu_arch < 1.0, "nu_arch out of (0,1)")?;
        check(d.xi_token >= 0.0, "xi_token must be >= 0")?;
        check((0.0..=1.0).contains(&d.xi_cann), "xi_cann out of [0,1]")?;
        check(d.mu_o >= 0.0, "mu_O must be >= 0")?;
        check(d.phi_learn >= 0.0, "phi_learn must be >= 0")?;
        check(d.wage > 0.0, "wage must be > 0")?;
        check(d.p_y > 0.0, "P_Y must be > 0")?;
        check(d.o_init_logsd >= 0.0, "O_init_logsd must be >= 0")?;
        check(d.entry_rate >= 0.0, "entry_rate must be >= 0")?;
        check(
            d.utilization0 > 0.0 && d.utilization0 < 0.995,
            "utilization0 out of (0,0.995)",
        )?;
        if let Some(z) = d.z {
            check(z > 0.0 && z.is_finite(), "Z must be > 0")?;
        }
        finite_all(
            "downstream parameters",
            &[
                d.psi_k,
                d.phi_arch,
                d.nu_arch,
                d.xi_token,
                d.mu_o,
                d.phi_learn,
                d.wage,
                d.p_y,
                d.o_init_logmean,
                d.o_init_logsd,
                d.entry_rate,
            ],
        )?;

        check(s.dt > 0.0 && s.dt.is_finite(), "dt must be > 0")?;
        check(s.t_end > s.dt && s.t_end.is_finite(), "T must exceed dt")?;
        check(s.fp_tol > 0.0, "fp_tol must be > 0")?;
        check(
            s.fp_damping > 0.0 && s.fp_damping <= 1.0,
            "fp_damping out of (0,1]",
        )?;
        check(s.fp_max_iter >= 1, "fp_max_iter must be >= 1")?;

        for (k, sh) in self.shocks.iter().enumerate() {
            check(
                sh.time >= 0.0 && sh.time <= s.t_end,
                format!("shock {k}: time out of [0,T]"),
            )?;
            check(
                sh.magnitude.is_finite(),
                format!("shock {k}: magnitude must be finite"),
            )?;
            if let Target::Firm(i) = sh.target {
                check(i < u.n, format!("shock {k}: target firm {i} out of range"))?;
            }
            match sh.kind {
                ShockKind::RdStop => {}
                ShockKind::RdBoost => {}
                _ => check(
                    sh.magnitude > 0.0,
                    format!("shock {k}: {} magnitude must be > 0", sh.kind),
                )?,
            }
        }
        Ok(())
    }
}

/// Load and validate a scenario file; the format follows the extension.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let origin = path.display().to_string();
    let tag = |e: ConfigError| match e {
        ConfigError::Parse { message, .. } => ConfigError::Parse {
            origin: origin.clone(),
            message,
        },
        other => other,
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => ScenarioConfig::from_json_str(&text).map_err(tag),
        Some("toml") => ScenarioConfig::from_toml_str(&text).map_err(tag),
        other => Err(ConfigError::Parse {
            origin,
            message: format!("unsupported extension {other:?} (expected .toml or .json)"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_calibration_table() {
        let c = ScenarioConfig::default();
        assert_eq!(c.upstream.theta, 2.5);
        assert_eq!(c.upstream.n, 4);
        assert_eq!(c.upstream.delta0, 0.08);
        assert_eq!(c.upstream.delta2, 0.6);
        assert_eq!(c.upstream.eta_over_mu, 1.2);
        assert_eq!(c.upstream.q_bar, 1.0);
        assert_eq!(c.frontier.g_a, 0.10);
        assert_eq!(c.downstream.psi_k, 0.4);
        assert_eq!(c.downstream.xi_cann, 0.2);
        assert_eq!(c.sim.dt, 0.1);
        assert_eq!(c.sim.t_end, 20.0);
        assert_eq!(c.sim.steps(), 200);
        c.validate().unwrap();
    }

    #[test]
    fn missing_dt_defaults() {
        let c = ScenarioConfig::from_toml_str("[sim]\nT = 10.0\n").unwrap();
        assert_eq!(c.sim.dt, 0.1);
        assert_eq!(c.sim.t_end, 10.0);
    }

    #[test]
    fn alpha_out_of_range_is_rejected() {
        let err = ScenarioConfig::from_toml_str("[upstream]\nalpha = 1.2\n").unwrap_err();
        assert!(err.to_string().contains("alpha out of (0,1)"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ScenarioConfig::from_toml_str("[upstream]\nthetta = 2.0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }), "{err}");
        let err = ScenarioConfig::from_json_str(r#"{"sim": {"dtt": 0.1}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }), "{err}");
    }

    #[test]
    fn parse_error_carries_line_context() {
        let err = ScenarioConfig::from_toml_str("[upstream]\ntheta = = 2\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn structural_delta1_values() {
        assert_eq!(structural_delta1(2.5, 4), 2.875);
        assert_eq!(structural_delta1(2.5, 2), 1.0 + 2.5 / 2.0);
        assert!((structural_delta1(1e-12, 7) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn delta1_accepts_number_or_mode() {
        let c = ScenarioConfig::from_toml_str("[upstream]\ndelta1 = 1.5\n").unwrap();
        assert_eq!(c.upstream.delta1_value(), 1.5);
        let c = ScenarioConfig::from_toml_str("[upstream]\ndelta1 = \"structural\"\n").unwrap();
        assert_eq!(c.upstream.delta1_value(), 2.875);
    }

    #[test]
    fn shocks_parse_with_targets() {
        let text = r#"
[[shocks]]
time = 5.0
kind = "rd_boost"
target = 0
magnitude = 0.5

[[shocks]]
time = 15.0
kind = "frontier_jump_factor"
target = "all"
magnitude = 1.3
"#;
        let c = ScenarioConfig::from_toml_str(text).unwrap();
        assert_eq!(c.shocks.len(), 2);
        assert_eq!(c.shocks[0].target, Target::Firm(0));
        assert_eq!(c.shocks[1].target, Target::All(AllFirms::All));
        assert_eq!(c.shocks[1].kind, ShockKind::FrontierJumpFactor);
    }

    #[test]
    fn shock_target_out_of_range() {
        let text = "[[shocks]]\ntime = 1.0\nkind = \"rd_stop\"\ntarget = 9\n";
        assert!(ScenarioConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn roundtrip_toml_and_json() {
        let mut c = ScenarioConfig::default();
        c.upstream.data_advantage = Some(vec![1.1, 1.0, 1.0, 1.0]);
        c.frontier.a0 = Some(0.7);
        c.shocks.push(ShockSpec {
            time: 5.0,
            kind: ShockKind::RdBoost,
            target: Target::Firm(0),
            magnitude: 0.5,
        });
        let back = ScenarioConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        let back = ScenarioConfig::from_json_str(&c.to_json_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ScenarioConfig::default();
        let mut b = a.clone();
        b.sim.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
