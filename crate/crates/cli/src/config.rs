//! Run configuration: JSON documents or flat `dotted.key = value` lines.

use std::path::{Path, PathBuf};

use findep_core::estimate::bench::BenchConfig;
use findep_core::estimate::monte_carlo::McConfig;
use findep_core::estimate::{CcpMode, EstimatorKind, WeightPath};
use findep_core::markov::EntryModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlanChoice {
    Sequential,
    #[default]
    TwoPeriod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub plan: PlanChoice,
    /// Horizon of sequential plans.
    pub rho: usize,
    pub origin: usize,
    /// Diagnosis threshold.
    pub tol: f64,
    pub weight_path: WeightPath,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            plan: PlanChoice::TwoPeriod,
            rho: 1,
            origin: 0,
            tol: 1e-10,
            weight_path: WeightPath::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationConfig {
    pub estimators: Vec<EstimatorKind>,
    pub ccp_mode: CcpMode,
    pub n_units: usize,
    pub n_periods: usize,
    pub reps: usize,
    pub seed: u64,
    /// Replication index used by `simulate`.
    pub replication: u64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        let mc = McConfig::default();
        EstimationConfig {
            estimators: mc.estimators,
            ccp_mode: mc.ccp_mode,
            n_units: mc.n_units,
            n_periods: mc.n_periods,
            reps: mc.reps,
            seed: mc.seed,
            replication: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchBlock {
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub solve: bool,
}

impl Default for BenchBlock {
    fn default() -> Self {
        let b = BenchConfig::default();
        BenchBlock {
            sizes: b.sizes,
            repeats: b.repeats,
            solve: b.solve,
        }
    }
}

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub panel: Option<PathBuf>,
    pub transitions: Option<PathBuf>,
    pub f0: Option<PathBuf>,
    pub f1: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: EntryModelConfig,
    pub solver: SolverConfig,
    pub estimation: EstimationConfig,
    pub bench: BenchBlock,
    pub inputs: Inputs,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ConfigError {
    pub message: String,
    pub keys: Vec<String>,
}

impl ConfigError {
    fn new(message: impl Into<String>, keys: Vec<String>) -> Self {
        ConfigError {
            message: message.into(),
            keys,
        }
    }
}

/// Flat lines become a nested object; each value is JSON when it parses
/// and a bare string otherwise.
pub fn parse_document(text: &str) -> Result<Value, ConfigError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        return serde_json::from_str(trimmed).map_err(|e| ConfigError::new(format!("invalid JSON: {e}"), vec![]));
    }
    let mut root = Map::new();
    let mut bad = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, raw)) = line.split_once('=') else {
            bad.push(format!("line {}: expected `key = value`", lineno + 1));
            continue;
        };
        let key = key.trim();
        let raw = raw.trim();
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        if insert(&mut root, key, value).is_err() {
            bad.push(key.to_string());
        }
    }
    if bad.is_empty() {
        Ok(Value::Object(root))
    } else {
        Err(ConfigError::new("malformed or conflicting keys", bad))
    }
}

fn insert(root: &mut Map<String, Value>, key: &str, value: Value) -> Result<(), ()> {
    let mut parts = key.split('.').peekable();
    let mut node = root;
    while let Some(p) = parts.next() {
        if p.is_empty() {
            return Err(());
        }
        if parts.peek().is_none() {
            if node.contains_key(p) {
                return Err(());
            }
            node.insert(p.to_string(), value);
            return Ok(());
        }
        node = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .ok_or(())?;
    }
    Err(())
}

fn unknown_keys(user: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(u), Value::Object(r)) = (user, reference) {
        for (k, v) in u {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match r.get(k) {
                None => out.push(format!("{path}: unknown key")),
                Some(rv) if v.is_object() && !rv.is_object() && !rv.is_null() => {
                    out.push(format!("{path}: expected a value, found a table"))
                }
                Some(rv) => unknown_keys(v, rv, &path, out),
            }
        }
    }
}

fn leaves(v: &Value, prefix: &str, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaves(x, &p, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        node = &mut node[*p];
    }
    node[parts[parts.len() - 1]] = value;
}

/// Typed config from a document; reports every unknown or ill-typed key.
pub fn from_value(user: &Value) -> Result<RunConfig, ConfigError> {
    let reference = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut errs = Vec::new();
    if !user.is_object() {
        return Err(ConfigError::new("config must be an object", vec![]));
    }
    unknown_keys(user, &reference, "", &mut errs);
    if !errs.is_empty() {
        return Err(ConfigError::new("unknown configuration keys", errs));
    }
    // Apply leaves one at a time over the defaults to pin type errors to keys.
    let mut all = Vec::new();
    leaves(user, "", &mut all);
    for (path, v) in all.iter().filter(|(p, _)| !p.is_empty()) {
        let mut doc = reference.clone();
        set_path(&mut doc, path, v.clone());
        if let Err(e) = serde_json::from_value::<RunConfig>(doc) {
            errs.push(format!("{path}: {e}"));
        }
    }
    if !errs.is_empty() {
        return Err(ConfigError::new("ill-typed configuration values", errs));
    }
    serde_json::from_value(user.clone()).map_err(|e| ConfigError::new(e.to_string(), vec![]))
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new(format!("cannot read {}: {e}", path.display()), vec!["--config".into()]))?;
    let mut cfg = from_value(&parse_document(&text)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let fix = |p: &mut Option<PathBuf>| {
        if let Some(x) = p {
            if x.is_relative() {
                *x = std::path::absolute(base.join(&*x)).unwrap_or_else(|_| base.join(&*x));
            }
        }
    };
    fix(&mut cfg.inputs.panel);
    fix(&mut cfg.inputs.transitions);
    fix(&mut cfg.inputs.f0);
    fix(&mut cfg.inputs.f1);
    fix(&mut cfg.out);
    Ok(cfg)
}

impl RunConfig {
    pub fn mc(&self) -> McConfig {
        McConfig {
            model: self.model.clone(),
            estimators: self.estimation.estimators.clone(),
            n_units: self.estimation.n_units,
            n_periods: self.estimation.n_periods,
            reps: self.estimation.reps,
            seed: self.estimation.seed,
            ccp_mode: self.estimation.ccp_mode,
            weight_path: self.solver.weight_path,
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            model: self.model.clone(),
            sizes: self.bench.sizes.clone(),
            repeats: self.bench.repeats,
            solve: self.bench.solve,
        }
    }

    /// First 12 hex digits of SHA-256 over the command and the canonical
    /// config, ignoring the output directory.
    pub fn hash(&self, command: &str) -> String {
        let mut c = self.clone();
        c.out = None;
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(b"\n");
        h.update(serde_json::to_string(&c).expect("config serializes").as_bytes());
        hex::encode(h.finalize())[..12].to_string()
    }
}

fn prefixed(errs: Vec<String>, prefix: &str) -> Vec<String> {
    errs.into_iter()
        .map(|e| if e.starts_with("model.") { e } else { format!("{prefix}{e}") })
        .collect()
}

/// Every semantic problem relevant to `command`.
pub fn validate(cfg: &RunConfig, command: &str) -> Vec<String> {
    let mut errs: Vec<String> = Vec::new();
    // The mc and bench validators already cover the model block.
    let needs_model = !matches!(command, "mc" | "bench")
        && !(command == "diagnose" && (cfg.inputs.f0.is_some() || cfg.inputs.transitions.is_some()))
        && !(command == "weights" && cfg.inputs.transitions.is_some());
    if needs_model {
        errs.extend(cfg.model.validate().into_iter().map(|e| format!("model.{e}")));
    }
    match command {
        "mc" => errs.extend(prefixed(cfg.mc().validate(), "estimation.")),
        "bench" => errs.extend(prefixed(cfg.bench_config().validate(), "bench.")),
        "simulate" => {
            for (k, v) in [("n_units", cfg.estimation.n_units), ("n_periods", cfg.estimation.n_periods)] {
                if v == 0 {
                    errs.push(format!("estimation.{k}: must be positive"));
                }
            }
            let h = cfg.model.n_periods();
            if h > 1 && cfg.estimation.n_periods > h {
                errs.push(format!("estimation.n_periods: {} exceeds the model horizon {h}", cfg.estimation.n_periods));
            }
        }
        "estimate" => {
            match &cfg.inputs.panel {
                None => errs.push("inputs.panel: required for estimate".into()),
                Some(p) if !p.join("panel.json").is_file() => {
                    errs.push(format!("inputs.panel: no panel found at {}", p.display()))
                }
                _ => {}
            }
            if cfg.estimation.estimators.is_empty() {
                errs.push("estimation.estimators: must name at least one estimator".into());
            }
            if cfg.model.n_periods() > 1 && cfg.estimation.estimators.contains(&EstimatorKind::HM) {
                errs.push("estimation.estimators: HM needs a stationary model".into());
            }
        }
        "diagnose" => {
            if cfg.inputs.f0.is_some() != cfg.inputs.f1.is_some() {
                errs.push("inputs.f1: f0 and f1 must be given together".into());
            }
            if !(cfg.solver.tol > 0.0) {
                errs.push("solver.tol: must be positive".into());
            }
        }
        "weights" => {
            if cfg.solver.rho == 0 {
                errs.push("solver.rho: must be at least 1".into());
            }
        }
        _ => {}
    }
    for (key, p) in [
        ("inputs.panel", &cfg.inputs.panel),
        ("inputs.transitions", &cfg.inputs.transitions),
        ("inputs.f0", &cfg.inputs.f0),
        ("inputs.f1", &cfg.inputs.f1),
    ] {
        if let Some(p) = p {
            if !p.exists() && !errs.iter().any(|e| e.starts_with(key)) {
                errs.push(format!("{key}: {} does not exist", p.display()));
            }
        }
    }
    errs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_and_json_forms_agree() {
        let flat = "# comment\nmodel.kz = 3\nmodel.action_feedback = 0.5\nestimation.estimators = [\"FD2\"]\nsolver.weight_path = dense\n";
        let json = r#"{"model": {"kz": 3, "action_feedback": 0.5}, "estimation": {"estimators": ["FD2"]}, "solver": {"weight_path": "dense"}}"#;
        let a = from_value(&parse_document(flat).unwrap()).unwrap();
        let b = from_value(&parse_document(json).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model.kz, 3);
        assert_eq!(a.solver.weight_path, WeightPath::Dense);
    }

    #[test]
    fn every_bad_key_is_listed() {
        let doc = parse_document("model.kz = \"many\"\nmodel.bogus = 1\nsolver.rho = -2\n").unwrap();
        let e = from_value(&doc).unwrap_err();
        assert_eq!(e.keys, vec!["model.bogus: unknown key"]);
        let doc = parse_document("model.kz = \"many\"\nsolver.rho = -2\n").unwrap();
        let e = from_value(&doc).unwrap_err();
        assert_eq!(e.keys.len(), 2);
        assert!(e.keys[0].starts_with("model.kz") && e.keys[1].starts_with("solver.rho"));
    }

    #[test]
    fn semantic_validation_lists_all() {
        let mut cfg = RunConfig::default();
        cfg.model.beta = 2.0;
        cfg.estimation.reps = 0;
        cfg.estimation.n_units = 0;
        let errs = validate(&cfg, "mc");
        for k in ["model.beta", "estimation.reps", "estimation.n_units"] {
            assert!(errs.iter().any(|e| e.starts_with(k)), "{k} missing from {errs:?}");
        }
    }

    #[test]
    fn hash_ignores_output_dir() {
        let mut a = RunConfig::default();
        let h = a.hash("mc");
        a.out = Some("elsewhere".into());
        assert_eq!(a.hash("mc"), h);
        assert_ne!(a.hash("bench"), h);
        assert_eq!(h.len(), 12);
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        assert!(parse_document("model.kz = 2\nmodel.kz = 3\n").is_err());
        assert!(parse_document("model = 1\nmodel.kz = 3\n").is_err());
    }
}
