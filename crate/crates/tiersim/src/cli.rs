//! Command-line front end: `run`, `study`, `analyze` and `validate`.
//!
//! Exit codes: 0 ok, 1 usage or validation error, 2 numerical failure,
//! 3 partial study failure.

use crate::analysis;
use crate::config::{load_scenario, ScenarioConfig};
use crate::engine::{self, SimulationTrace};
use crate::harness::{self, HarnessError};
use clap::{Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

/// Default output root when `--out` is absent.
pub const OUT_ENV: &str = "TIERSIM_OUT";

#[derive(Debug, Parser)]
#[command(name = "tiersim", version, about = "Two-tier AI industry simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write its trace.
    Run {
        /// Scenario file (.toml or .json) or embedded preset name.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Run a preset study.
    Study {
        /// One of exp1..exp5, mc, nsweep, stress, ablation.
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Compute a metric table from a trace or study directory.
    Analyze {
        path: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Output CSV; defaults to `<path>/analysis_<metric>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate scenario files; with no arguments, every embedded preset.
    Validate {
        #[arg(long)]
        scenario: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Hhi,
    Elasticity,
    Cv,
    Health,
    Stability,
}

impl Metric {
    fn name(self) -> &'static str {
        match self {
            Metric::Hhi => "hhi",
            Metric::Elasticity => "elasticity",
            Metric::Cv => "cv",
            Metric::Health => "health",
            Metric::Stability => "stability",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts: Vec<String>,
    pub log: String,
}

impl CommandResult {
    fn fail(code: i32, msg: impl Into<String>) -> Self {
        CommandResult { exit_code: code, artifacts: Vec::new(), log: msg.into() }
    }
}

/// Resolve `--scenario`: an existing file, the same path with `.toml` or
/// `.json` appended, or an embedded preset named by the file stem.
pub fn resolve_scenario(arg: &str) -> Result<ScenarioConfig, String> {
    let p = Path::new(arg);
    let candidates = [p.to_path_buf(), p.with_extension("toml"), p.with_extension("json")];
    for c in candidates.iter().filter(|c| c.extension().is_some()) {
        if c.is_file() {
            return load_scenario(c).map_err(|e| e.to_string());
        }
    }
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or(arg);
    match harness::preset(stem) {
        Ok(c) => Ok(c),
        Err(HarnessError::UnknownPreset(_)) => Err(format!(
            "scenario {arg:?} not found (no such file, and not one of the presets: {})",
            harness::preset_names().join(", ")
        )),
        Err(e) => Err(e.to_string()),
    }
}

fn default_out(kind: &str, name: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(kind).join(name.replace('/', "_"))
}

pub fn cmd_run(scenario: &str, out: Option<&Path>, seed: Option<u64>, overwrite: bool) -> CommandResult {
    let mut cfg = match resolve_scenario(scenario) {
        Ok(c) => c,
        Err(e) => return CommandResult::fail(EXIT_USAGE, e),
    };
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| default_out("run", &cfg.name));
    if let Err(e) = harness::prepare_out_dir(&out, overwrite) {
        return CommandResult::fail(EXIT_USAGE, e.to_string());
    }
    let trace = engine::run(&cfg);
    let artifacts = match engine::write_trace_dir(&out, &trace, &cfg) {
        Ok(a) => a,
        Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
    };
    let mut log = format!("{}: {} steps, seed {}", cfg.name, trace.steps(), cfg.sim.seed);
    let code = match &trace.failure {
        Some(f) => {
            let _ = write!(log, "\nrun halted at step {} (t={}): {}", f.step, f.t, f.reason);
            EXIT_NUMERIC
        }
        None => {
            let _ = write!(log, ", final HHI {:.4}", trace.final_hhi());
            EXIT_OK
        }
    };
    for a in &artifacts {
        let _ = write!(log, "\n  {a}");
    }
    CommandResult { exit_code: code, artifacts, log }
}

pub fn cmd_study(name: &str, out: Option<&Path>, workers: usize, seed: Option<u64>, overwrite: bool) -> CommandResult {
    let spec = match harness::study_spec(name, seed) {
        Ok(s) => s,
        Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
    };
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| default_out("study", name));
    if let Err(e) = harness::prepare_out_dir(&out, overwrite) {
        return CommandResult::fail(EXIT_USAGE, e.to_string());
    }
    let res = match harness::run_study(&spec, workers) {
        Ok(r) => r,
        Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
    };
    let artifacts: Vec<String> = match harness::write_study(&out, &res, true) {
        Ok(a) => a.iter().map(|p| p.display().to_string()).collect(),
        Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
    };
    let failed = res.failed();
    let mut log = format!("study {name}: {} runs, {} failed, written to {}", res.runs.len(), failed.len(), out.display());
    for m in &failed {
        let _ = write!(log, "\n  run {} ({}): {}", m.run, m.label, m.failure);
    }
    let _ = write!(
        log,
        "\n{}",
        serde_json::to_string_pretty(&res.headline).expect("headline serializes")
    );
    let code = if failed.is_empty() { EXIT_OK } else { EXIT_PARTIAL };
    CommandResult { exit_code: code, artifacts, log }
}

/// Metric table for one trace: header and rows.
pub fn metric_table(
    trace: &SimulationTrace,
    cfg: &ScenarioConfig,
    metric: Metric,
) -> Result<(Vec<&'static str>, Vec<Vec<String>>), String> {
    let f = |x: f64| format!("{x}");
    let t = trace.times();
    match metric {
        Metric::Hhi => Ok((
            vec!["t", "hhi"],
            trace.aggregates.iter().map(|a| vec![f(a.t), f(a.hhi)]).collect(),
        )),
        Metric::Elasticity => {
            let s = analysis::price_shock_response(trace).map_err(|e| e.to_string())?;
            Ok((
                vec!["t", "p0", "p1", "q0", "q1", "expenditure0", "expenditure1", "d_star0", "d_star1", "elasticity"],
                vec![vec![
                    f(s.t),
                    f(s.p0),
                    f(s.p1),
                    f(s.q0),
                    f(s.q1),
                    f(s.expenditure0),
                    f(s.expenditure1),
                    f(s.d0),
                    f(s.d1),
                    f(s.elasticity),
                ]],
            ))
        }
        Metric::Cv => {
            let cv = harness::convergence_cv(trace).map_err(|e| e.to_string())?;
            Ok((
                vec!["t", "cv"],
                cv.iter().map(|p| vec![f(p.t), p.cv.map(f).unwrap_or_default()]).collect(),
            ))
        }
        Metric::Health => {
            let h = analysis::ecosystem_health(trace).map_err(|e| e.to_string())?;
            Ok((vec!["t", "health"], t.iter().zip(h).map(|(t, h)| vec![f(*t), f(h)]).collect()))
        }
        Metric::Stability => {
            let mut rows = Vec::new();
            for (k, tk) in t.iter().enumerate() {
                let r = analysis::stability_from_trace(trace, cfg, k).map_err(|e| e.to_string())?;
                let regime = serde_json::to_value(r.regime).expect("regime serializes");
                rows.push(vec![
                    f(*tk),
                    f(r.eigenvalues[0]),
                    f(r.eigenvalues[1]),
                    regime.as_str().unwrap_or_default().to_string(),
                    f(r.omega_star),
                    f(r.omega_actual),
                ]);
            }
            Ok((vec!["t", "eig_max", "eig_min", "regime", "omega_star", "omega_actual"], rows))
        }
    }
}

fn trace_dirs(path: &Path) -> Vec<(String, PathBuf)> {
    let runs = path.join("runs");
    if path.join("firms.csv").is_file() || !runs.is_dir() {
        return vec![(String::new(), path.to_path_buf())];
    }
    let mut dirs: Vec<(String, PathBuf)> = std::fs::read_dir(&runs)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
                .collect()
        })
        .unwrap_or_default();
    dirs.sort();
    dirs
}

/// Accepts a trace directory or a study directory (every run under `runs/`,
/// with a leading `run` column).
pub fn cmd_analyze(path: &Path, metric: Metric, out: Option<&Path>) -> CommandResult {
    let dirs = trace_dirs(path);
    let study = dirs.len() > 1 || dirs.first().is_some_and(|d| !d.0.is_empty());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut wrote_header = false;
    let mut errors = Vec::new();
    for (label, dir) in &dirs {
        let (trace, cfg) = match engine::read_trace_dir(dir) {
            Ok(x) => x,
            Err(e) => return CommandResult::fail(EXIT_USAGE, e.to_string()),
        };
        match metric_table(&trace, &cfg, metric) {
            Ok((header, rows)) => {
                if !wrote_header {
                    let mut h: Vec<&str> = if study { vec!["run"] } else { Vec::new() };
                    h.extend(header);
                    w.write_record(&h).expect("in-memory csv");
                    wrote_header = true;
                }
                for r in rows {
                    let mut row = if study { vec![label.clone()] } else { Vec::new() };
                    row.extend(r);
                    w.write_record(&row).expect("in-memory csv");
                }
            }
            Err(e) => errors.push(format!("{}: {e}", dir.display())),
        }
    }
    if !wrote_header {
        return CommandResult::fail(EXIT_NUMERIC, errors.join("\n"));
    }
    let bytes = w.into_inner().expect("in-memory csv");
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| path.join(format!("analysis_{}.csv", metric.name())));
    if let Err(e) = std::fs::write(&out, &bytes) {
        return CommandResult::fail(EXIT_USAGE, format!("cannot write {}: {e}", out.display()));
    }
    let mut log = String::from_utf8_lossy(&bytes).into_owned();
    for e in &errors {
        let _ = write!(log, "\nskipped {e}");
    }
    let code = if errors.is_empty() { EXIT_OK } else { EXIT_PARTIAL };
    CommandResult { exit_code: code, artifacts: vec![out.display().to_string()], log }
}

pub fn cmd_validate(scenarios: &[String]) -> CommandResult {
    let names: Vec<String> = if scenarios.is_empty() {
        harness::preset_names().iter().map(|s| s.to_string()).collect()
    } else {
        scenarios.to_vec()
    };
    let mut log = String::new();
    let mut bad = 0;
    for n in &names {
        match resolve_scenario(n) {
            Ok(c) => {
                let _ = writeln!(log, "ok      {n} ({})", c.hash());
            }
            Err(e) => {
                bad += 1;
                let _ = writeln!(log, "invalid {n}: {e}");
            }
        }
    }
    CommandResult {
        exit_code: if bad == 0 { EXIT_OK } else { EXIT_USAGE },
        artifacts: Vec::new(),
        log: log.trim_end().to_string(),
    }
}

/// Parse and dispatch. Clap usage errors map to exit code 1; `--help` and
/// `--version` to 0.
pub fn run_cli<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return CommandResult::fail(code, e.render().to_string());
        }
    };
    match cli.command {
        Command::Run { scenario, out, seed, overwrite } => cmd_run(&scenario, out.as_deref(), seed, overwrite),
        Command::Study { name, out, workers, seed, overwrite } => {
            cmd_study(&name, out.as_deref(), workers, seed, overwrite)
        }
        Command::Analyze { path, metric, out } => cmd_analyze(&path, metric, out.as_deref()),
        Command::Validate { scenario } => cmd_validate(&scenario),
    }
}
