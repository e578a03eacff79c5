//! Experiment configuration documents.
//!
//! A configuration is a TOML document whose keys are read in flattened,
//! dotted form (`plant.u_max`, `solver.tolerance`, ...). `[plant]` tables and
//! `plant.u_max = ...` lines are therefore interchangeable. Every key has a
//! documented default that depends only on the preset; see [`KEYS`].
//!
//! Matrices are written row-major as arrays of arrays, or as a string
//! `"file:<path>"` naming a whitespace/comma separated text file relative to
//! the configuration's directory. Vectors are flat arrays. A bare number is
//! accepted wherever a scaled identity makes sense (`noise.covariance`,
//! `cost.q`, `cost.q_f`, `cost.r`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use toml::Value;

use crate::channel::{ChannelModel, Protocol};
use crate::model::{LinearSystem, NoiseModel};
use crate::moments::SaturationSpec;
use crate::qp::SolverSettings;
use crate::simulator::SimConfig;
use crate::smpc::{RotationMode, StabilityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Three protocols over an i.i.d. channel.
    Iid,
    /// Three protocols over the two-state network-state channel.
    Markov,
    /// Success probability × noise variance grid with the state started at
    /// the origin.
    MsbSweep,
    /// Same defaults as `iid`; meant for hand-edited plants.
    Custom,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Iid => "iid",
            Preset::Markov => "markov",
            Preset::MsbSweep => "msb-sweep",
            Preset::Custom => "custom",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "iid" => Some(Preset::Iid),
            "markov" => Some(Preset::Markov),
            "msb-sweep" => Some(Preset::MsbSweep),
            "custom" => Some(Preset::Custom),
            _ => None,
        }
    }
}

/// One problem found in a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    /// 1-based line in the configuration file, when the key was found there.
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.key.is_empty()) {
            (Some(l), false) => write!(f, "line {l}: `{}`: {}", self.key, self.message),
            (Some(l), true) => write!(f, "line {l}: {}", self.message),
            (None, false) => write!(f, "`{}`: {}", self.key, self.message),
            (None, true) => f.write_str(&self.message),
        }
    }
}

/// Every problem found while reading or checking a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub issues: Vec<ConfigIssue>,
}

impl ConfigError {
    fn single(key: &str, message: impl Into<String>) -> Self {
        Self {
            issues: vec![ConfigIssue {
                line: None,
                key: key.to_string(),
                message: message.into(),
            }],
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// A documented configuration key.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const EXAMPLE_A: &str = "[[0.0, -0.8, -0.6], [0.8, -0.36, 0.48], [0.6, 0.48, -0.64]]";

/// All accepted keys with their defaults (TOML syntax; `-` means "unset").
/// Preset-specific defaults are listed in [`preset_overrides`].
pub const KEYS: &[KeySpec] = &[
    KeySpec { key: "preset", default: "-", help: "iid | markov | msb-sweep | custom (required)" },
    KeySpec { key: "seed", default: "1", help: "master seed of the per-path random streams" },
    KeySpec { key: "paths", default: "300", help: "Monte Carlo sample paths per run" },
    KeySpec { key: "steps", default: "201", help: "simulated steps T, a multiple of the reachability index" },
    KeySpec { key: "protocols", default: r#"["tp1", "tp2", "tp3"]"#, help: "protocols to run" },
    KeySpec { key: "horizon", default: "4", help: "optimisation horizon N" },
    KeySpec { key: "x0", default: "[10.0, 10.0, -10.0]", help: "initial state" },
    KeySpec { key: "warm_start", default: "true", help: "warm-start each solve from the previous interval" },
    KeySpec { key: "plant.a", default: EXAMPLE_A, help: "state matrix, block diagonal (orthogonal block first)" },
    KeySpec { key: "plant.b", default: "[[0.16], [0.12], [0.14]]", help: "input matrix" },
    KeySpec { key: "plant.u_max", default: "15.0", help: "hard bound on every input coordinate" },
    KeySpec { key: "plant.d_o", default: "3", help: "size of the orthogonal block of A" },
    KeySpec { key: "noise.covariance", default: "2.0", help: "noise covariance matrix, or a variance for a scaled identity" },
    KeySpec { key: "channel.kind", default: r#""iid""#, help: "iid | markov" },
    KeySpec { key: "channel.p", default: "0.8", help: "success probability of the i.i.d. channel" },
    KeySpec { key: "channel.success", default: "[0.8, 0.4]", help: "per network state success probabilities" },
    KeySpec { key: "channel.transition", default: "[[0.7, 0.3], [0.9, 0.1]]", help: "network-state transition matrix" },
    KeySpec { key: "channel.initial_state", default: "0", help: "network state at t = 0" },
    KeySpec { key: "design.p", default: "-", help: "success probability used for the selection moments (default: channel mean rate)" },
    KeySpec { key: "cost.q", default: "1.0", help: "stage state weight Q" },
    KeySpec { key: "cost.q_f", default: "[[12.0, -0.1, -0.4], [-0.1, 19.0, -0.2], [-0.4, -0.2, 2.0]]", help: "final state weight" },
    KeySpec { key: "cost.r", default: "2.0", help: "input weight R" },
    KeySpec { key: "stability.r", default: "0.4729", help: "drift threshold r" },
    KeySpec { key: "stability.epsilon", default: "0.02", help: "drift margin" },
    KeySpec { key: "stability.zeta", default: "0.4729", help: "drift amount, strictly inside ]0, U_max / (sqrt(d_o) s1)[" },
    KeySpec { key: "stability.rotation", default: r#""proof-consistent""#, help: "proof-consistent | literal" },
    KeySpec { key: "saturation.kind", default: r#""sigmoid""#, help: "sigmoid | clamp" },
    KeySpec { key: "saturation.phi_max", default: "1.0", help: "clamp level (clamp only)" },
    KeySpec { key: "gain.max_lag", default: "-", help: "largest noise lag fed back (default: all)" },
    KeySpec { key: "moments.samples", default: "1000000", help: "Monte Carlo samples for the noise moments" },
    KeySpec { key: "moments.seed", default: "7", help: "seed of the noise moment estimate" },
    KeySpec { key: "moments.cache_dir", default: "-", help: "directory caching noise moments between runs" },
    KeySpec { key: "solver.max_iterations", default: "20000", help: "ADMM iteration cap" },
    KeySpec { key: "solver.tolerance", default: "1e-7", help: "primal and dual residual tolerance" },
    KeySpec { key: "solver.rho", default: "1.0", help: "initial penalty" },
    KeySpec { key: "solver.sigma", default: "1e-6", help: "primal regularisation" },
    KeySpec { key: "solver.alpha", default: "1.6", help: "relaxation" },
    KeySpec { key: "solver.adaptive_rho", default: "true", help: "rescale the penalty from the residual ratio" },
    KeySpec { key: "solver.polish", default: "true", help: "active-set polishing" },
    KeySpec { key: "sweep.p", default: "[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]", help: "msb-sweep success probabilities" },
    KeySpec { key: "sweep.variance", default: "[0.1, 1.0, 10.0]", help: "msb-sweep noise variances (covariance = variance * I)" },
    KeySpec { key: "output.trajectories", default: "true", help: "write trajectories.csv for each run" },
];

/// Defaults that differ from [`KEYS`] for a preset.
pub fn preset_overrides(preset: Preset) -> &'static [(&'static str, &'static str)] {
    match preset {
        Preset::Iid | Preset::Custom => &[],
        Preset::Markov => &[("channel.kind", r#""markov""#)],
        Preset::MsbSweep => &[("x0", "[0.0, 0.0, 0.0]"), ("paths", "100"), ("steps", "90"), ("output.trajectories", "false")],
    }
}

fn key_spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

/// Grid of the msb sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub p: Vec<f64>,
    pub variance: Vec<f64>,
}

/// A fully resolved experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Shared simulation settings; `protocol` is replaced per run.
    pub base: SimConfig,
    pub protocols: Vec<Protocol>,
    pub sweep: Option<SweepGrid>,
    pub moment_cache: Option<PathBuf>,
    pub write_trajectories: bool,
    /// Resolved key/value pairs after defaults, file and overrides.
    pub resolved: BTreeMap<String, Value>,
}

impl ExperimentConfig {
    /// Every simulation configuration this experiment runs, labelled.
    pub fn runs(&self) -> Vec<(String, SimConfig)> {
        let mut out = Vec::new();
        match &self.sweep {
            None => {
                for &protocol in &self.protocols {
                    out.push((protocol.name().to_string(), SimConfig { protocol, ..self.base.clone() }));
                }
            }
            Some(grid) => {
                let d = self.base.sys.state_dim();
                for &var in &grid.variance {
                    for &p in &grid.p {
                        for &protocol in &self.protocols {
                            let mut cfg = SimConfig { protocol, ..self.base.clone() };
                            // Values were checked while reading the grid.
                            if let Ok(noise) = NoiseModel::isotropic(d, var) {
                                cfg.noise = noise;
                            }
                            if let Ok(ch) = ChannelModel::iid(p) {
                                cfg.channel = ch;
                            }
                            cfg.design_p = Some(p);
                            out.push((format!("{}_p{p}_var{var}", protocol.name()), cfg));
                        }
                    }
                }
            }
        }
        out
    }

    /// Module-level checks of every run, without simulating.
    pub fn violations(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (label, cfg) in self.runs() {
            for v in cfg.violations() {
                let msg = if self.sweep.is_some() { format!("{label}: {v}") } else { v };
                if !out.contains(&msg) {
                    out.push(msg);
                }
            }
        }
        // Messages identical across protocols are reported once.
        out
    }
}

/// Parses a `key=value` override. The value is read as a TOML value and
/// falls back to a plain string.
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::single(s, "override must look like key=value"))?;
    let key = k.trim().to_string();
    if key.is_empty() {
        return Err(ConfigError::single(s, "override has an empty key"));
    }
    Ok((key, parse_value(v.trim())))
}

fn parse_value(text: &str) -> Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.to_string())),
        Err(_) => Value::String(text.to_string()),
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Best-effort line of a flattened key in the source text.
fn locate(src: &str, key: &str) -> Option<usize> {
    let last = key.rsplit('.').next().unwrap_or(key);
    let section = key.rsplit_once('.').map(|(s, _)| s);
    let mut current: Option<String> = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') && line.ends_with(']') {
            current = Some(line.trim_matches(|c| c == '[' || c == ']').trim().to_string());
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs = lhs.trim().replace(' ', "");
        let full = match &current {
            Some(s) => format!("{s}.{lhs}"),
            None => lhs.clone(),
        };
        if full == key || (lhs == last && current.as_deref() == section) {
            return Some(i + 1);
        }
    }
    None
}

/// Typed access to the merged key/value map, collecting every issue.
struct Reader<'a> {
    values: &'a BTreeMap<String, Value>,
    src: &'a str,
    base_dir: &'a Path,
    from_override: &'a BTreeMap<String, Value>,
    issues: Vec<ConfigIssue>,
}

impl<'a> Reader<'a> {
    fn issue(&mut self, key: &str, message: impl Into<String>) {
        let line = if self.from_override.contains_key(key) { None } else { locate(self.src, key) };
        let message = message.into();
        let message = if self.from_override.contains_key(key) { format!("{message} (from --set)") } else { message };
        self.issues.push(ConfigIssue {
            line,
            key: key.to_string(),
            message,
        });
    }

    fn raw(&self, key: &str) -> Option<&'a Value> {
        self.values.get(key)
    }

    fn f64(&mut self, key: &str) -> Option<f64> {
        match self.raw(key)? {
            Value::Float(v) => Some(*v),
            Value::Integer(v) => Some(*v as f64),
            other => {
                self.issue(key, format!("expected a number, found {}", other.type_str()));
                None
            }
        }
    }

    fn usize(&mut self, key: &str) -> Option<usize> {
        match self.raw(key)? {
            Value::Integer(v) if *v >= 0 => Some(*v as usize),
            other => {
                self.issue(key, format!("expected a non-negative integer, found {other}"));
                None
            }
        }
    }

    fn u64(&mut self, key: &str) -> Option<u64> {
        self.usize(key).map(|v| v as u64)
    }

    fn bool(&mut self, key: &str) -> Option<bool> {
        match self.raw(key)? {
            Value::Boolean(b) => Some(*b),
            other => {
                self.issue(key, format!("expected true or false, found {other}"));
                None
            }
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.raw(key)? {
            Value::String(s) => Some(s.clone()),
            other => {
                self.issue(key, format!("expected a string, found {other}"));
                None
            }
        }
    }

    fn numbers(&mut self, key: &str, v: &Value) -> Option<Vec<f64>> {
        let Value::Array(items) = v else {
            self.issue(key, format!("expected an array of numbers, found {}", v.type_str()));
            return None;
        };
        let mut out = Vec::with_capacity(items.len());
        for it in items {
            match it {
                Value::Float(x) => out.push(*x),
                Value::Integer(x) => out.push(*x as f64),
                other => {
                    self.issue(key, format!("expected a number, found {other}"));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn vector(&mut self, key: &str) -> Option<DVector<f64>> {
        let v = self.raw(key)?;
        if let Value::String(s) = v {
            return self.file_matrix(key, s).map(|m| DVector::from_iterator(m.len(), m.transpose().iter().copied()));
        }
        self.numbers(key, v).map(DVector::from_vec)
    }

    /// A matrix; a bare number `s` becomes `s·I` of size `identity_dim`.
    fn matrix(&mut self, key: &str, identity_dim: Option<usize>) -> Option<DMatrix<f64>> {
        let v = self.raw(key)?;
        match v {
            Value::Float(_) | Value::Integer(_) => {
                let s = self.f64(key)?;
                match identity_dim {
                    Some(d) => Some(DMatrix::identity(d, d) * s),
                    None => {
                        self.issue(key, "expected a matrix");
                        None
                    }
                }
            }
            Value::String(s) => self.file_matrix(key, s),
            Value::Array(rows) => {
                let mut data = Vec::new();
                let mut ncols = None;
                for row in rows {
                    let r = self.numbers(key, row)?;
                    if *ncols.get_or_insert(r.len()) != r.len() {
                        self.issue(key, "rows have different lengths");
                        return None;
                    }
                    data.extend(r);
                }
                let ncols = ncols.unwrap_or(0);
                Some(DMatrix::from_row_slice(rows.len(), ncols, &data))
            }
            other => {
                self.issue(key, format!("expected a matrix, found {}", other.type_str()));
                None
            }
        }
    }

    fn file_matrix(&mut self, key: &str, s: &str) -> Option<DMatrix<f64>> {
        let Some(rel) = s.strip_prefix("file:") else {
            self.issue(key, format!("expected numbers or \"file:<path>\", found \"{s}\""));
            return None;
        };
        let path = self.base_dir.join(rel.trim());
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                self.issue(key, format!("cannot read {}: {e}", path.display()));
                return None;
            }
        };
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
                match tok.parse::<f64>() {
                    Ok(x) => row.push(x),
                    Err(_) => {
                        self.issue(key, format!("{}: `{tok}` is not a number", path.display()));
                        return None;
                    }
                }
            }
            rows.push(row);
        }
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            self.issue(key, format!("{}: rows have different lengths", path.display()));
            return None;
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Some(DMatrix::from_row_slice(rows.len(), ncols, &data))
    }
}

/// Reads a configuration file and applies `key=value` overrides.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let src = std::fs::read_to_string(path).map_err(|e| ConfigError::single("", format!("cannot read {}: {e}", path.display())))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut parsed = Vec::new();
    for o in overrides {
        parsed.push(parse_override(o)?);
    }
    from_str(&src, &base_dir, &parsed)
}

/// Parses configuration text. `base_dir` anchors `file:` references.
pub fn from_str(src: &str, base_dir: &Path, overrides: &[(String, Value)]) -> Result<ExperimentConfig, ConfigError> {
    let table: toml::Table = src.parse().map_err(|e: toml::de::Error| {
        let line = e.span().map(|s| src[..s.start.min(src.len())].lines().count().max(1));
        ConfigError {
            issues: vec![ConfigIssue {
                line,
                key: String::new(),
                message: format!("not valid TOML: {}", e.message()),
            }],
        }
    })?;
    let mut file_values = BTreeMap::new();
    flatten("", &table, &mut file_values);
    let override_map: BTreeMap<String, Value> = overrides.iter().cloned().collect();

    let mut issues = Vec::new();
    for key in file_values.keys() {
        if key_spec(key).is_none() {
            issues.push(ConfigIssue {
                line: locate(src, key),
                key: key.clone(),
                message: "unknown key".into(),
            });
        }
    }
    for key in override_map.keys() {
        if key_spec(key).is_none() {
            issues.push(ConfigIssue {
                line: None,
                key: key.clone(),
                message: "unknown key (from --set)".into(),
            });
        }
    }

    let preset_value = override_map.get("preset").or_else(|| file_values.get("preset"));
    let preset = match preset_value {
        None => {
            issues.push(ConfigIssue {
                line: None,
                key: "preset".into(),
                message: "missing preset (expected iid, markov, msb-sweep or custom)".into(),
            });
            None
        }
        Some(Value::String(s)) => match Preset::parse(s) {
            Some(p) => Some(p),
            None => {
                issues.push(ConfigIssue {
                    line: locate(src, "preset"),
                    key: "preset".into(),
                    message: format!("unknown preset `{s}` (expected iid, markov, msb-sweep or custom)"),
                });
                None
            }
        },
        Some(other) => {
            issues.push(ConfigIssue {
                line: locate(src, "preset"),
                key: "preset".into(),
                message: format!("expected a string, found {other}"),
            });
            None
        }
    };
    let Some(preset) = preset else {
        return Err(ConfigError { issues });
    };

    let mut values: BTreeMap<String, Value> = BTreeMap::new();
    for spec in KEYS {
        if spec.default != "-" {
            values.insert(spec.key.to_string(), parse_value(spec.default));
        }
    }
    for (k, v) in preset_overrides(preset) {
        values.insert((*k).to_string(), parse_value(v));
    }
    for (k, v) in file_values.iter().chain(override_map.iter()) {
        if key_spec(k).is_some() {
            values.insert(k.clone(), v.clone());
        }
    }

    let mut rd = Reader {
        values: &values,
        src,
        base_dir,
        from_override: &override_map,
        issues,
    };
    let cfg = build(&mut rd, preset);
    if !rd.issues.is_empty() {
        return Err(ConfigError { issues: rd.issues });
    }
    let mut cfg = cfg.expect("no issues implies a complete configuration");
    cfg.resolved = values;
    Ok(cfg)
}

fn build(rd: &mut Reader<'_>, preset: Preset) -> Option<ExperimentConfig> {
    let seed = rd.u64("seed");
    let paths = rd.usize("paths");
    let steps = rd.usize("steps");
    let horizon = rd.usize("horizon");
    let warm_start = rd.bool("warm_start");
    let write_trajectories = rd.bool("output.trajectories");

    let protocols = match rd.raw("protocols") {
        Some(Value::Array(items)) => {
            let mut out = Vec::new();
            for it in items {
                match it.as_str().map(str::parse::<Protocol>) {
                    Some(Ok(p)) if !out.contains(&p) => out.push(p),
                    Some(Ok(_)) => {}
                    _ => rd.issue("protocols", format!("unknown protocol {it}")),
                }
            }
            if out.is_empty() {
                rd.issue("protocols", "at least one protocol is required");
            }
            Some(out)
        }
        _ => {
            rd.issue("protocols", "expected an array such as [\"tp1\", \"tp3\"]");
            None
        }
    };

    let a = rd.matrix("plant.a", None);
    let b = rd.matrix("plant.b", None);
    let u_max = rd.f64("plant.u_max");
    let d_o = rd.usize("plant.d_o");
    let sys = match (a, b, u_max, d_o) {
        (Some(a), Some(b), Some(u), Some(d_o)) => match LinearSystem::new(a, b, u, d_o) {
            Ok(s) => Some(s),
            Err(e) => {
                rd.issue("plant", e.to_string());
                None
            }
        },
        _ => None,
    };
    let d = sys.as_ref().map(LinearSystem::state_dim);
    let m = sys.as_ref().map(LinearSystem::input_dim);

    let x0 = rd.vector("x0");
    let noise = rd.matrix("noise.covariance", d).and_then(|c| match NoiseModel::gaussian(c) {
        Ok(n) => Some(n),
        Err(e) => {
            rd.issue("noise.covariance", e.to_string());
            None
        }
    });

    let channel = match rd.string("channel.kind").as_deref() {
        Some("iid") => rd.f64("channel.p").and_then(|p| match ChannelModel::iid(p) {
            Ok(c) => Some(c),
            Err(e) => {
                rd.issue("channel.p", e.to_string());
                None
            }
        }),
        Some("markov") => {
            let success = rd.raw("channel.success").cloned().and_then(|v| rd.numbers("channel.success", &v));
            let transition = rd.matrix("channel.transition", None);
            let init = rd.usize("channel.initial_state");
            match (success, transition, init) {
                (Some(s), Some(t), Some(i)) => match ChannelModel::markov(s, t, i) {
                    Ok(c) => Some(c),
                    Err(e) => {
                        rd.issue("channel", e.to_string());
                        None
                    }
                },
                _ => None,
            }
        }
        Some(other) => {
            rd.issue("channel.kind", format!("unknown channel kind `{other}` (expected iid or markov)"));
            None
        }
        None => None,
    };
    let design_p = if rd.raw("design.p").is_some() { rd.f64("design.p").map(Some) } else { Some(None) };

    let q = rd.matrix("cost.q", d);
    let q_f = rd.matrix("cost.q_f", d);
    let r = rd.matrix("cost.r", m);

    let rotation = match rd.string("stability.rotation").as_deref() {
        Some("proof-consistent") => Some(RotationMode::ProofConsistent),
        Some("literal") => Some(RotationMode::LiteralPaper),
        Some(other) => {
            rd.issue("stability.rotation", format!("unknown mode `{other}` (expected proof-consistent or literal)"));
            None
        }
        None => None,
    };
    let stability = match (rd.f64("stability.r"), rd.f64("stability.epsilon"), rd.f64("stability.zeta"), rotation) {
        // Range checks are part of `SimConfig::violations`, so validation
        // can report them alongside everything else.
        (Some(r), Some(epsilon), Some(zeta), Some(rotation_mode)) => Some(StabilityConfig {
            r,
            epsilon,
            zeta,
            rotation_mode,
        }),
        _ => None,
    };

    let saturation = match rd.string("saturation.kind").as_deref() {
        Some("sigmoid") => {
            if let Some(v) = rd.f64("saturation.phi_max") {
                if v != 1.0 {
                    rd.issue("saturation.phi_max", "the sigmoid is bounded by 1; phi_max only applies to clamp");
                }
            }
            Some(SaturationSpec::Sigmoid)
        }
        Some("clamp") => rd.f64("saturation.phi_max").and_then(|phi_max| {
            if phi_max > 0.0 && phi_max.is_finite() {
                Some(SaturationSpec::Clamp { phi_max })
            } else {
                rd.issue("saturation.phi_max", "must be positive");
                None
            }
        }),
        Some(other) => {
            rd.issue("saturation.kind", format!("unknown saturation `{other}` (expected sigmoid or clamp)"));
            None
        }
        None => None,
    };
    let gain_max_lag = if rd.raw("gain.max_lag").is_some() { rd.usize("gain.max_lag").map(Some) } else { Some(None) };
    let moment_samples = rd.usize("moments.samples");
    if moment_samples == Some(0) {
        rd.issue("moments.samples", "must be positive");
    }
    let moment_seed = rd.u64("moments.seed");
    let moment_cache = if rd.raw("moments.cache_dir").is_some() {
        rd.string("moments.cache_dir").map(|s| Some(rd.base_dir.join(s)))
    } else {
        Some(None)
    };

    let solver = SolverSettings {
        max_iterations: rd.usize("solver.max_iterations").unwrap_or(0),
        tolerance: rd.f64("solver.tolerance").unwrap_or(f64::NAN),
        rho: rd.f64("solver.rho").unwrap_or(f64::NAN),
        sigma: rd.f64("solver.sigma").unwrap_or(f64::NAN),
        alpha: rd.f64("solver.alpha").unwrap_or(f64::NAN),
        adaptive_rho: rd.bool("solver.adaptive_rho").unwrap_or(true),
        polish: rd.bool("solver.polish").unwrap_or(true),
        ..SolverSettings::default()
    };

    let sweep = if preset == Preset::MsbSweep {
        let p = rd.raw("sweep.p").cloned().and_then(|v| rd.numbers("sweep.p", &v));
        let var = rd.raw("sweep.variance").cloned().and_then(|v| rd.numbers("sweep.variance", &v));
        if let Some(p) = &p {
            if p.is_empty() || p.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) {
                rd.issue("sweep.p", "probabilities must be non-empty and lie in ]0, 1]");
            }
        }
        if let Some(v) = &var {
            if v.is_empty() || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                rd.issue("sweep.variance", "variances must be non-empty and positive");
            }
        }
        Some(SweepGrid { p: p?, variance: var? })
    } else {
        for key in ["sweep.p", "sweep.variance"] {
            if rd.from_override.contains_key(key) || locate(rd.src, key).is_some() {
                rd.issue(key, "only used by the msb-sweep preset");
            }
        }
        None
    };

    let base = SimConfig {
        sys: sys?,
        noise: noise?,
        channel: channel?,
        protocol: Protocol::Tp1,
        horizon: horizon?,
        q: q?,
        q_f: q_f?,
        r: r?,
        stability: stability?,
        saturation: saturation?,
        gain_max_lag: gain_max_lag?,
        x0: x0?,
        steps: steps?,
        paths: paths?,
        seed: seed?,
        design_p: design_p?,
        moment_samples: moment_samples?,
        moment_seed: moment_seed?,
        solver,
        warm_start: warm_start?,
        record_intervals: false,
    };
    Some(ExperimentConfig {
        preset,
        base,
        protocols: protocols?,
        sweep,
        moment_cache: moment_cache?,
        write_trajectories: write_trajectories?,
        resolved: BTreeMap::new(),
    })
}

/// A preset's resolved defaults as a commented TOML document.
pub fn preset_document(preset: Preset) -> String {
    let mut out = format!("preset = \"{}\"\n", preset.name());
    let over = preset_overrides(preset);
    for spec in KEYS.iter().skip(1) {
        let is_sweep = spec.key.starts_with("sweep.");
        if is_sweep && preset != Preset::MsbSweep {
            continue;
        }
        let value = over.iter().find(|(k, _)| *k == spec.key).map_or(spec.default, |(_, v)| *v);
        if value == "-" {
            out.push_str(&format!("# {} = ...   # {}\n", spec.key, spec.help));
        } else {
            out.push_str(&format!("{} = {}   # {}\n", spec.key, value, spec.help));
        }
    }
    out
}
