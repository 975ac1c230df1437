//! Scenario configuration: a flat `key = value` file plus command-line
//! overrides, resolved against per-system defaults.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::CliError;

const KNOWN_KEYS: &[&str] = &[
    "system",
    "integrator",
    "alpha",
    "h",
    "steps",
    "q0",
    "p0",
    "qf",
    "horizon",
    "tol",
    "matching_tol",
    "out",
];

pub const MECHANICAL_SYSTEMS: &[&str] =
    &["nonholonomic-particle", "free-particle", "oscillator", "bead"];
pub const CONTROL_SYSTEMS: &[&str] = &["lqr", "pendulum-control"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegratorKind {
    AlphaScheme,
    Rk4,
}

impl IntegratorKind {
    pub fn name(self) -> &'static str {
        match self {
            IntegratorKind::AlphaScheme => "alpha-scheme",
            IntegratorKind::Rk4 => "rk4",
        }
    }
}

/// Command-line overrides collected by the argument parser.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub system: Option<String>,
    pub alpha: Option<f64>,
    pub h: Option<f64>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub tol: Option<f64>,
}

/// Fully resolved scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub system: String,
    pub integrator: IntegratorKind,
    pub alpha: f64,
    pub h: f64,
    pub steps: usize,
    pub q0: Vec<f64>,
    pub p0: Vec<f64>,
    pub qf: Vec<f64>,
    pub horizon: f64,
    pub tol: Option<f64>,
    pub matching_tol: f64,
    pub out: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn is_mechanical(&self) -> bool {
        MECHANICAL_SYSTEMS.contains(&self.system.as_str())
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn parse_file(path: &PathBuf) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config file {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(config_err(format!(
                "line {} is not a `key = value` pair: {raw:?}",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(config_err(format!("unknown config key `{key}`")));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn parse_f64(map: &BTreeMap<String, String>, key: &str) -> Result<Option<f64>, CliError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<f64>()
            .map(Some)
            .map_err(|_| config_err(format!("value of `{key}` is not a number: {v:?}"))),
    }
}

fn parse_usize(map: &BTreeMap<String, String>, key: &str) -> Result<Option<usize>, CliError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<usize>()
            .map(Some)
            .map_err(|_| config_err(format!("value of `{key}` is not a count: {v:?}"))),
    }
}

fn parse_vector(map: &BTreeMap<String, String>, key: &str) -> Result<Option<Vec<f64>>, CliError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .split(',')
            .map(|part| part.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map(Some)
            .map_err(|_| config_err(format!("value of `{key}` is not a comma-separated vector: {v:?}"))),
    }
}

struct SystemDefaults {
    q0: &'static [f64],
    p0: &'static [f64],
    qf: &'static [f64],
}

fn defaults_for(system: &str) -> SystemDefaults {
    match system {
        // Feasible pair: p_z = y * p_x.
        "nonholonomic-particle" => SystemDefaults {
            q0: &[0.5, 1.0, 0.0],
            p0: &[0.8, -0.3, 0.8],
            qf: &[],
        },
        "free-particle" => SystemDefaults {
            q0: &[0.0],
            p0: &[1.0],
            qf: &[],
        },
        "oscillator" => SystemDefaults {
            q0: &[1.0],
            p0: &[0.0],
            qf: &[],
        },
        // Feasible pair: v = (0.8, q0[0] * 0.8), p = M v = (1.0, 0.4).
        "bead" => SystemDefaults {
            q0: &[0.5, 0.0],
            p0: &[1.0, 0.4],
            qf: &[],
        },
        "lqr" => SystemDefaults {
            q0: &[1.0],
            p0: &[],
            qf: &[0.0],
        },
        "pendulum-control" => SystemDefaults {
            q0: &[3.5],
            p0: &[],
            qf: &[3.0],
        },
        _ => SystemDefaults {
            q0: &[],
            p0: &[],
            qf: &[],
        },
    }
}

/// Reads the optional config file, applies the command-line overrides, and
/// validates the result.
pub fn resolve(overrides: &Overrides) -> Result<ScenarioConfig, CliError> {
    let map = match &overrides.config {
        Some(path) => parse_file(path)?,
        None => BTreeMap::new(),
    };

    let system = overrides
        .system
        .clone()
        .or_else(|| map.get("system").cloned())
        .ok_or_else(|| config_err("no system selected (use --system or a config file)"))?;
    if !MECHANICAL_SYSTEMS.contains(&system.as_str()) && !CONTROL_SYSTEMS.contains(&system.as_str())
    {
        return Err(config_err(format!(
            "unknown system `{system}` (available: {} / {})",
            MECHANICAL_SYSTEMS.join(", "),
            CONTROL_SYSTEMS.join(", ")
        )));
    }

    let integrator = match map.get("integrator").map(String::as_str) {
        None | Some("alpha-scheme") => IntegratorKind::AlphaScheme,
        Some("rk4") => IntegratorKind::Rk4,
        Some(other) => {
            return Err(config_err(format!(
                "unknown integrator `{other}` (alpha-scheme or rk4)"
            )))
        }
    };

    let alpha = overrides
        .alpha
        .or(parse_f64(&map, "alpha")?)
        .unwrap_or(0.5);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(config_err(format!("alpha = {alpha} outside [0, 1]")));
    }

    let h = overrides.h.or(parse_f64(&map, "h")?).unwrap_or(0.01);
    if h.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !h.is_finite() {
        return Err(config_err(format!("step size h = {h} must be positive")));
    }

    let horizon_cfg = parse_f64(&map, "horizon")?;
    let defaults = defaults_for(&system);
    let is_control = CONTROL_SYSTEMS.contains(&system.as_str());

    let steps = match (overrides.steps, parse_usize(&map, "steps")?, horizon_cfg) {
        (Some(n), _, _) => n,
        (None, Some(n), _) => n,
        (None, None, Some(t)) => (t / h).round().max(1.0) as usize,
        (None, None, None) => {
            if is_control {
                20
            } else {
                100
            }
        }
    };
    if steps < 1 {
        return Err(config_err("steps must be at least 1"));
    }

    let horizon = horizon_cfg.unwrap_or(if is_control { 1.0 } else { steps as f64 * h });
    if horizon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !horizon.is_finite() {
        return Err(config_err(format!("horizon = {horizon} must be positive")));
    }

    let q0 = parse_vector(&map, "q0")?.unwrap_or_else(|| defaults.q0.to_vec());
    let p0 = parse_vector(&map, "p0")?.unwrap_or_else(|| defaults.p0.to_vec());
    let qf = parse_vector(&map, "qf")?.unwrap_or_else(|| defaults.qf.to_vec());

    let dim = expected_dimension(&system);
    if q0.len() != dim {
        return Err(config_err(format!(
            "q0 has {} entries, system `{system}` needs {dim}",
            q0.len()
        )));
    }
    if !is_control && p0.len() != dim {
        return Err(config_err(format!(
            "p0 has {} entries, system `{system}` needs {dim}",
            p0.len()
        )));
    }
    if is_control && qf.len() != dim {
        return Err(config_err(format!(
            "qf has {} entries, system `{system}` needs {dim}",
            qf.len()
        )));
    }

    let tol = overrides.tol.or(parse_f64(&map, "tol")?);
    let matching_tol = parse_f64(&map, "matching_tol")?.unwrap_or(1e-8);
    let out = overrides
        .out
        .clone()
        .or_else(|| map.get("out").map(PathBuf::from));

    Ok(ScenarioConfig {
        system,
        integrator,
        alpha,
        h,
        steps,
        q0,
        p0,
        qf,
        horizon,
        tol,
        matching_tol,
        out,
    })
}

pub fn expected_dimension(system: &str) -> usize {
    match system {
        "nonholonomic-particle" => 3,
        "bead" => 2,
        _ => 1,
    }
}
