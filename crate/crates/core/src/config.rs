//! Flat JSON run configuration.
//!
//! ```json
//! {
//!   "num_states": 50, "num_actions": 20, "discount": 0.9,
//!   "alpha": "1/N", "reward_mean": 0.0, "reward_std": 0.1,
//!   "replicates": 100, "seed": 42
//! }
//! ```
//!
//! `alpha` is a positive number, `"1/N"`, or a path to a JSON array holding
//! either `N*A` per-pair values (symmetric rows) or the full `N*A*N` tensor,
//! nested or flat. `reward_mean` and `reward_std` are numbers or paths to
//! JSON arrays of `N*A` values. Relative paths resolve against the config
//! file's directory. Referenced files are read at parse time, so a parsed
//! [`RunConfig`] is self-contained and its digest covers their contents.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::dmfp::BackendKind;
use crate::error::{DmfpError, FieldError, Result};
use crate::harness::{default_snapshots, DEFAULT_RETAINED};
use crate::types::{AlphaSpec, PriorSpec};

const KEYS: &[&str] = &[
    "num_states",
    "num_actions",
    "discount",
    "alpha",
    "reward_mean",
    "reward_std",
    "replicates",
    "seed",
    "eps",
    "max_iters",
    "backend",
    "snapshots",
    "retained_pairs",
    "output_dir",
];

pub const DEFAULT_REPLICATES: usize = 100;
pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum AlphaSetting {
    Scalar(f64),
    InverseN,
    PerStateAction(Vec<f64>),
    Full(Vec<f64>),
}

impl AlphaSetting {
    pub fn to_spec(&self) -> AlphaSpec {
        match self {
            AlphaSetting::Scalar(x) => AlphaSpec::Scalar(*x),
            AlphaSetting::InverseN => AlphaSpec::InverseN,
            AlphaSetting::PerStateAction(v) => AlphaSpec::PerStateAction(v.clone()),
            AlphaSetting::Full(v) => AlphaSpec::Full(v.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub alpha: AlphaSetting,
    /// Per-pair reward posterior means, length `N*A`.
    pub reward_mean: Vec<f64>,
    /// Per-pair reward posterior standard deviations, length `N*A`.
    pub reward_std: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub eps: f64,
    pub max_iters: usize,
    pub backend: BackendKind,
    pub snapshots: Vec<usize>,
    pub retained_pairs: usize,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn prior(&self) -> Result<PriorSpec> {
        PriorSpec::new(
            self.num_states,
            self.num_actions,
            self.discount,
            &self.alpha.to_spec(),
            self.reward_mean.clone(),
            self.reward_std.iter().map(|s| s * s).collect(),
        )
    }

    /// Hex SHA-256 of the canonical JSON form. Output paths are excluded so
    /// that the digest identifies the experiment, not where it was written.
    pub fn digest(&self) -> String {
        let mut canonical = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut canonical {
            map.remove("output_dir");
        }
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Parses a config, resolving relative file references against the current
/// directory.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_in(text, Path::new("."))
}

/// Reads and parses a config file; relative references resolve against its
/// directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| DmfpError::io(path, e))?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    parse_config_in(&text, base)
}

struct Fields<'a> {
    map: &'a Map<String, Value>,
    errors: Vec<FieldError>,
}

impl Fields<'_> {
    fn fail(&mut self, field: &str, message: impl Into<String>) {
        self.errors.push(FieldError {
            field: field.into(),
            message: message.into(),
        });
    }

    fn number(&mut self, key: &str, default: Option<f64>) -> Option<f64> {
        match self.map.get(key) {
            None => {
                if default.is_none() {
                    self.fail(key, "missing required field");
                }
                default
            }
            Some(v) => match v.as_f64() {
                Some(x) if x.is_finite() => Some(x),
                _ => {
                    self.fail(key, format!("expected a finite number, got {v}"));
                    None
                }
            },
        }
    }

    fn count(&mut self, key: &str, default: Option<u64>, min: u64) -> Option<u64> {
        let v = match self.map.get(key) {
            None => {
                if default.is_none() {
                    self.fail(key, "missing required field");
                }
                return default;
            }
            Some(v) => v,
        };
        match v.as_u64() {
            Some(n) if n >= min => Some(n),
            Some(n) => {
                self.fail(key, format!("must be at least {min}, got {n}"));
                None
            }
            None => {
                self.fail(key, format!("expected a non-negative integer, got {v}"));
                None
            }
        }
    }
}

fn read_numbers(base: &Path, rel: &str) -> std::result::Result<Vec<f64>, String> {
    let path = base.join(rel);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    fn flatten(v: &Value, out: &mut Vec<f64>) -> bool {
        match v {
            Value::Array(items) => items.iter().all(|x| flatten(x, out)),
            Value::Number(n) => n.as_f64().map(|x| out.push(x)).is_some(),
            _ => false,
        }
    }
    if !matches!(value, Value::Array(_)) || !flatten(&value, &mut out) {
        return Err(format!(
            "{}: expected a (nested) array of numbers",
            path.display()
        ));
    }
    Ok(out)
}

/// A number broadcast to every pair, or a file of `N*A` numbers.
fn per_pair(
    f: &mut Fields,
    base: &Path,
    key: &str,
    n_sa: Option<usize>,
    default: Option<f64>,
) -> Option<Vec<f64>> {
    match f.map.get(key) {
        Some(Value::String(p)) => match read_numbers(base, p) {
            Ok(v) if n_sa.is_none_or(|n| v.len() == n) => Some(v),
            Ok(v) => {
                f.fail(
                    key,
                    format!(
                        "file has {} values, expected N*A = {}",
                        v.len(),
                        n_sa.unwrap_or(0)
                    ),
                );
                None
            }
            Err(e) => {
                f.fail(key, e);
                None
            }
        },
        _ => {
            let x = f.number(key, default)?;
            Some(vec![x; n_sa.unwrap_or(1)])
        }
    }
}

/// Parses a config, resolving relative file references against `base`.
/// Every problem found is reported, each naming its field.
pub fn parse_config_in(text: &str, base: &Path) -> Result<RunConfig> {
    let root: Value = serde_json::from_str(text).map_err(|e| {
        DmfpError::Config(vec![FieldError {
            field: "<document>".into(),
            message: e.to_string(),
        }])
    })?;
    let Value::Object(map) = &root else {
        return Err(DmfpError::Config(vec![FieldError {
            field: "<document>".into(),
            message: "expected a JSON object".into(),
        }]));
    };
    let mut f = Fields {
        map,
        errors: Vec::new(),
    };
    for key in map.keys() {
        if !KEYS.contains(&key.as_str()) {
            f.fail(key, "unknown key");
        }
    }

    let num_states = f.count("num_states", None, 1).map(|n| n as usize);
    let num_actions = f.count("num_actions", None, 1).map(|n| n as usize);
    let n_sa = num_states.zip(num_actions).map(|(n, a)| n * a);

    let discount = f.number("discount", None);
    if let Some(b) = discount {
        if !(0.0..1.0).contains(&b) {
            f.fail("discount", format!("must lie in [0, 1), got {b}"));
        }
    }

    let alpha = match map.get("alpha") {
        None => {
            f.fail("alpha", "missing required field");
            None
        }
        Some(Value::String(s)) if s.trim() == "1/N" => Some(AlphaSetting::InverseN),
        Some(Value::String(p)) => match (read_numbers(base, p), num_states, num_actions) {
            (Err(e), _, _) => {
                f.fail("alpha", e);
                None
            }
            (Ok(v), Some(n), Some(a)) if v.len() == n * a => Some(AlphaSetting::PerStateAction(v)),
            (Ok(v), Some(n), Some(a)) if v.len() == n * a * n => Some(AlphaSetting::Full(v)),
            (Ok(v), Some(n), Some(a)) => {
                f.fail(
                    "alpha",
                    format!(
                        "file has {} values, expected N*A = {} or N*A*N = {}",
                        v.len(),
                        n * a,
                        n * a * n
                    ),
                );
                None
            }
            _ => None,
        },
        Some(_) => f.number("alpha", None).map(AlphaSetting::Scalar),
    };
    let alpha_bad = match &alpha {
        Some(AlphaSetting::Scalar(x)) => !(*x > 0.0),
        Some(AlphaSetting::PerStateAction(v) | AlphaSetting::Full(v)) => {
            v.iter().any(|x| !(*x > 0.0))
        }
        _ => false,
    };
    if alpha_bad {
        f.fail("alpha", "concentrations must be positive");
    }

    let reward_mean = per_pair(&mut f, base, "reward_mean", n_sa, None);
    let reward_std = per_pair(&mut f, base, "reward_std", n_sa, None);
    if reward_std
        .as_ref()
        .is_some_and(|v| v.iter().any(|s| *s < 0.0))
    {
        f.fail("reward_std", "must be non-negative");
    }

    let replicates = f
        .count("replicates", Some(DEFAULT_REPLICATES as u64), 2)
        .map(|n| n as usize);
    let seed = f.count("seed", Some(0), 0);
    let eps = f.number("eps", Some(DEFAULT_EPS));
    if eps.is_some_and(|e| !(e > 0.0)) {
        f.fail("eps", "must be positive");
    }
    let max_iters = f
        .count("max_iters", Some(DEFAULT_MAX_ITERS as u64), 1)
        .map(|n| n as usize);

    let backend = match map.get("backend") {
        None => Some(BackendKind::Quadrature),
        Some(Value::String(s)) => match s.parse() {
            Ok(k) => Some(k),
            Err(_) => {
                f.fail(
                    "backend",
                    format!("expected \"gumbel\" or \"quadrature\", got {s:?}"),
                );
                None
            }
        },
        Some(v) => {
            f.fail("backend", format!("expected a string, got {v}"));
            None
        }
    };

    let snapshots = match map.get("snapshots") {
        None => max_iters.map(default_snapshots),
        Some(Value::Array(items)) => {
            let parsed: Option<Vec<usize>> = items
                .iter()
                .map(|v| v.as_u64().map(|n| n as usize))
                .collect();
            match parsed {
                Some(s) if s.first() != Some(&0) && s.windows(2).all(|w| w[0] < w[1]) => Some(s),
                _ => {
                    f.fail(
                        "snapshots",
                        "expected strictly increasing positive integers",
                    );
                    None
                }
            }
        }
        Some(v) => {
            f.fail("snapshots", format!("expected an array, got {v}"));
            None
        }
    };

    let retained_pairs = f
        .count("retained_pairs", Some(DEFAULT_RETAINED as u64), 0)
        .map(|n| n as usize);
    let output_dir = match map.get("output_dir") {
        None => Some(PathBuf::from("out")),
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(v) => {
            f.fail("output_dir", format!("expected a string, got {v}"));
            None
        }
    };

    if !f.errors.is_empty() {
        return Err(DmfpError::Config(f.errors));
    }
    let config = RunConfig {
        num_states: num_states.unwrap(),
        num_actions: num_actions.unwrap(),
        discount: discount.unwrap(),
        alpha: alpha.unwrap(),
        reward_mean: reward_mean.unwrap(),
        reward_std: reward_std.unwrap(),
        replicates: replicates.unwrap(),
        seed: seed.unwrap(),
        eps: eps.unwrap(),
        max_iters: max_iters.unwrap(),
        backend: backend.unwrap(),
        snapshots: snapshots.unwrap(),
        retained_pairs: retained_pairs.unwrap(),
        output_dir: output_dir.unwrap(),
    };
    config.prior()?;
    Ok(config)
}
