//! JSON run configuration with path-annotated schema errors.

use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::frames::{frame_validate, FrameSpec, GaussianFactor};
use crate::laplace::{FunctionalSpec, PolicyKind, PolicyParams, TerminalFunctional};
use crate::measure::{Mixture, MixtureSpec};
use crate::pathsim::SdeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Entropy,
    Laplace,
    Optimize,
    Talagrand,
    Lsi,
    Epi,
    Bl,
    Rbl,
    VerifyAll,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Entropy,
        Command::Laplace,
        Command::Optimize,
        Command::Talagrand,
        Command::Lsi,
        Command::Epi,
        Command::Bl,
        Command::Rbl,
        Command::VerifyAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Entropy => "entropy",
            Command::Laplace => "laplace",
            Command::Optimize => "optimize",
            Command::Talagrand => "talagrand",
            Command::Lsi => "lsi",
            Command::Epi => "epi",
            Command::Bl => "bl",
            Command::Rbl => "rbl",
            Command::VerifyAll => "verify-all",
        }
    }

    pub fn parse(s: &str) -> Option<Command> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Blocks that must be present, then blocks that may be present.
    fn blocks(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Command::Entropy => (&["target"], &["test_hooks", "samples"]),
            Command::Laplace => (&["functional"], &["policy"]),
            Command::Optimize => (&["functional", "optimizer"], &[]),
            Command::Talagrand => (&["target"], &[]),
            Command::Lsi => (&["target"], &["samples"]),
            Command::Epi => (&["eta", "xi", "thetas"], &["samples"]),
            Command::Bl => (&["frame", "target"], &["factors", "samples"]),
            Command::Rbl => (&["frame", "targets"], &[]),
            Command::VerifyAll => (&[], &["samples"]),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const COMMON_KEYS: [&str; 5] = ["command", "seed", "sde", "output", "dump_paths"];
const BLOCK_KEYS: [&str; 12] = [
    "target",
    "targets",
    "functional",
    "policy",
    "optimizer",
    "eta",
    "xi",
    "thetas",
    "frame",
    "factors",
    "samples",
    "test_hooks",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSettings {
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
}

fn default_steps() -> usize {
    SdeConfig::DEFAULT_STEPS
}

fn default_paths() -> usize {
    SdeConfig::DEFAULT_PATHS
}

impl Default for SdeSettings {
    fn default() -> Self {
        Self {
            n_steps: SdeConfig::DEFAULT_STEPS,
            n_paths: SdeConfig::DEFAULT_PATHS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub kind: PolicyKind,
    #[serde(default = "default_pieces")]
    pub pieces: usize,
    pub iterations: usize,
    pub step_size: f64,
    pub batch: usize,
    /// CSV file for the (iteration, objective, std_error) trace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

fn default_pieces() -> usize {
    4
}

/// Fault injection used by the negative-path tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestHooks {
    /// Multiplies the bridge drift.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub sde: SdeSettings,
    /// Sample count for direct Monte-Carlo estimators; defaults to `sde.n_paths`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<MixtureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<MixtureSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional: Option<FunctionalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<MixtureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<MixtureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thetas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<FrameSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<Vec<GaussianFactor>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default)]
    pub dump_paths: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_hooks: Option<TestHooks>,
}

impl RunConfig {
    pub fn sde_config(&self, dim: usize) -> SdeConfig {
        SdeConfig::new(self.sde.n_steps, self.sde.n_paths, self.seed, dim)
    }

    pub fn samples(&self) -> usize {
        self.samples.unwrap_or(self.sde.n_paths)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SchemaError {
    /// JSONPath-like location, e.g. `$.target.components[1].weight`.
    pub path: String,
    pub message: String,
}

impl SchemaError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Command-line values that replace fields of the document before validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub output: Option<String>,
    pub dump_paths: bool,
}

pub fn apply_overrides(doc: &mut Value, ov: &Overrides) -> Result<(), SchemaError> {
    let Some(obj) = doc.as_object_mut() else {
        return Err(SchemaError::new("$", "config must be a JSON object"));
    };
    if let Some(cmd) = &ov.command {
        match obj.get("command") {
            Some(Value::String(existing)) if existing != cmd => {
                return Err(SchemaError::new(
                    "$.command",
                    format!("config says {existing:?} but the command line says {cmd:?}"),
                ));
            }
            _ => {
                obj.insert("command".into(), Value::String(cmd.clone()));
            }
        }
    }
    if let Some(seed) = ov.seed {
        obj.insert("seed".into(), seed.into());
    }
    if ov.paths.is_some() || ov.steps.is_some() {
        let sde = obj.entry("sde").or_insert_with(|| Value::Object(Map::new()));
        if let Some(sde) = sde.as_object_mut() {
            if let Some(p) = ov.paths {
                sde.insert("n_paths".into(), p.into());
            }
            if let Some(s) = ov.steps {
                sde.insert("n_steps".into(), s.into());
            }
        }
    }
    if let Some(out) = &ov.output {
        obj.insert("output".into(), Value::String(out.clone()));
    }
    if ov.dump_paths {
        obj.insert("dump_paths".into(), Value::Bool(true));
    }
    Ok(())
}

fn typed<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, errors: &mut Vec<SchemaError>) -> Option<T> {
    let v = obj.get(key)?;
    match serde_path_to_error::deserialize::<_, T>(v.clone()) {
        Ok(t) => Some(t),
        Err(e) => {
            let inner = e.path().to_string();
            let path = if inner == "." || inner.is_empty() {
                format!("$.{key}")
            } else if inner.starts_with('[') {
                format!("$.{key}{inner}")
            } else {
                format!("$.{key}.{inner}")
            };
            errors.push(SchemaError::new(path, e.into_inner().to_string()));
            None
        }
    }
}

/// Parses and validates a configuration document, collecting every error.
pub fn parse_config(text: &str, ov: &Overrides) -> Result<RunConfig, Vec<SchemaError>> {
    let mut doc: Value = serde_json::from_str(text).map_err(|e| vec![SchemaError::new("$", e.to_string())])?;
    apply_overrides(&mut doc, ov).map_err(|e| vec![e])?;
    parse_value(&doc)
}

pub fn parse_value(doc: &Value) -> Result<RunConfig, Vec<SchemaError>> {
    let Some(obj) = doc.as_object() else {
        return Err(vec![SchemaError::new("$", "config must be a JSON object")]);
    };
    let mut errors = Vec::new();
    for key in obj.keys() {
        if !COMMON_KEYS.contains(&key.as_str()) && !BLOCK_KEYS.contains(&key.as_str()) {
            errors.push(SchemaError::new(format!("$.{key}"), "unknown key"));
        }
    }
    let command = match obj.get("command") {
        None => {
            errors.push(SchemaError::new("$.command", "missing required key"));
            None
        }
        Some(Value::String(s)) => {
            let c = Command::parse(s);
            if c.is_none() {
                let names: Vec<&str> = Command::ALL.iter().map(|c| c.name()).collect();
                errors.push(SchemaError::new(
                    "$.command",
                    format!("unknown command {s:?}; expected one of {}", names.join(", ")),
                ));
            }
            c
        }
        Some(_) => {
            errors.push(SchemaError::new("$.command", "must be a string"));
            None
        }
    };
    if !obj.contains_key("seed") {
        errors.push(SchemaError::new("$.seed", "missing required key"));
    }
    let seed: Option<u64> = typed(obj, "seed", &mut errors);
    let sde: SdeSettings = typed(obj, "sde", &mut errors).unwrap_or_default();
    let mut cfg = RunConfig {
        command: command.unwrap_or(Command::VerifyAll),
        seed: seed.unwrap_or(0),
        sde,
        samples: typed(obj, "samples", &mut errors),
        target: typed(obj, "target", &mut errors),
        targets: typed(obj, "targets", &mut errors),
        functional: typed(obj, "functional", &mut errors),
        policy: typed(obj, "policy", &mut errors),
        optimizer: typed(obj, "optimizer", &mut errors),
        eta: typed(obj, "eta", &mut errors),
        xi: typed(obj, "xi", &mut errors),
        thetas: typed(obj, "thetas", &mut errors),
        frame: typed(obj, "frame", &mut errors),
        factors: typed(obj, "factors", &mut errors),
        output: typed(obj, "output", &mut errors),
        dump_paths: typed(obj, "dump_paths", &mut errors).unwrap_or(false),
        test_hooks: typed(obj, "test_hooks", &mut errors),
    };
    if let Some(c) = command {
        cfg.command = c;
        let (required, optional) = c.blocks();
        for key in required {
            if !obj.contains_key(*key) {
                errors.push(SchemaError::new(format!("$.{key}"), format!("required by command {c}")));
            }
        }
        for key in BLOCK_KEYS.iter() {
            if obj.contains_key(*key) && !required.contains(key) && !optional.contains(key) {
                errors.push(SchemaError::new(format!("$.{key}"), format!("not used by command {c}")));
            }
        }
    }
    validate_semantics(&cfg, &mut errors);
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

fn check_mixture(path: &str, spec: &MixtureSpec, errors: &mut Vec<SchemaError>) -> Option<Mixture> {
    match Mixture::new(spec) {
        Ok(m) => Some(m),
        Err(e) => {
            errors.push(SchemaError::new(path, format!("invalid mixture: {e}")));
            None
        }
    }
}

fn validate_semantics(cfg: &RunConfig, errors: &mut Vec<SchemaError>) {
    if cfg.sde.n_steps < 4 || cfg.sde.n_steps % 2 != 0 {
        errors.push(SchemaError::new("$.sde.n_steps", "must be an even number >= 4"));
    }
    if cfg.sde.n_paths < 2 {
        errors.push(SchemaError::new("$.sde.n_paths", "must be at least 2"));
    }
    if matches!(cfg.samples, Some(n) if n < 2) {
        errors.push(SchemaError::new("$.samples", "must be at least 2"));
    }
    if let Some(t) = &cfg.target {
        check_mixture("$.target", t, errors);
    }
    if let Some(ts) = &cfg.targets {
        for (i, t) in ts.iter().enumerate() {
            check_mixture(&format!("$.targets[{i}]"), t, errors);
        }
    }
    let eta = cfg.eta.as_ref().and_then(|s| check_mixture("$.eta", s, errors));
    let xi = cfg.xi.as_ref().and_then(|s| check_mixture("$.xi", s, errors));
    if let (Some(a), Some(b)) = (eta, xi) {
        if a.dim() != b.dim() {
            errors.push(SchemaError::new(
                "$.xi.dim",
                format!("must equal eta's dimension {}", a.dim()),
            ));
        }
    }
    if let Some(th) = &cfg.thetas {
        if th.is_empty() || th.iter().any(|t| !t.is_finite()) {
            errors.push(SchemaError::new("$.thetas", "must be a non-empty list of finite angles"));
        }
    }
    let functional = cfg.functional.as_ref().and_then(|f| match TerminalFunctional::new(f) {
        Ok(tf) => Some(tf),
        Err(e) => {
            errors.push(SchemaError::new("$.functional", e.to_string()));
            None
        }
    });
    if let Some(p) = &cfg.policy {
        if let Err(e) = p.validate() {
            errors.push(SchemaError::new("$.policy", e.to_string()));
        } else if let Some(f) = &functional {
            if p.dim() != f.dim() {
                errors.push(SchemaError::new(
                    "$.policy",
                    format!("dimension {} does not match the functional's {}", p.dim(), f.dim()),
                ));
            }
        }
    }
    if let Some(o) = &cfg.optimizer {
        if o.iterations == 0 {
            errors.push(SchemaError::new("$.optimizer.iterations", "must be positive"));
        }
        if !(o.step_size > 0.0) || !o.step_size.is_finite() {
            errors.push(SchemaError::new("$.optimizer.step_size", "must be positive"));
        }
        if o.batch < 2 {
            errors.push(SchemaError::new("$.optimizer.batch", "must be at least 2"));
        }
        if o.pieces == 0 {
            errors.push(SchemaError::new("$.optimizer.pieces", "must be positive"));
        }
    }
    if let Some(frame) = &cfg.frame {
        match frame_validate(frame) {
            Err(e) => errors.push(SchemaError::new("$.frame", e.to_string())),
            Ok(_) => {
                if let Some(t) = &cfg.target {
                    if t.dim != frame.ambient_dim && cfg.command == Command::Bl {
                        errors.push(SchemaError::new(
                            "$.target.dim",
                            format!("must equal the frame's ambient dimension {}", frame.ambient_dim),
                        ));
                    }
                }
                if let Some(ts) = &cfg.targets {
                    if ts.len() != frame.len() {
                        errors.push(SchemaError::new(
                            "$.targets",
                            format!("needs one target per frame item ({})", frame.len()),
                        ));
                    }
                    for (i, t) in ts.iter().enumerate().take(frame.len()) {
                        if t.dim != frame.rank(i) {
                            errors.push(SchemaError::new(
                                format!("$.targets[{i}].dim"),
                                format!("must equal the rank {} of frame item {i}", frame.rank(i)),
                            ));
                        }
                    }
                }
                if let Some(fs) = &cfg.factors {
                    if fs.len() != frame.len() {
                        errors.push(SchemaError::new(
                            "$.factors",
                            format!("needs one factor per frame item ({})", frame.len()),
                        ));
                    }
                    for (i, f) in fs.iter().enumerate() {
                        if let Err(e) = f.log_integral(i) {
                            errors.push(SchemaError::new(format!("$.factors[{i}]"), e.to_string()));
                        }
                    }
                }
            }
        }
    }
    if let Some(h) = &cfg.test_hooks {
        if matches!(h.drift_scale, Some(s) if !s.is_finite()) {
            errors.push(SchemaError::new("$.test_hooks.drift_scale", "must be finite"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"command":"entropy",
        "target":{"dim":1,"components":[{"weight":1,"mean":[0],"cov":[[1]]}]},
        "sde":{"n_steps":128,"n_paths":1000},"seed":42}"#;

    #[test]
    fn minimal_entropy_config_is_valid() {
        let cfg = parse_config(MINIMAL, &Overrides::default()).unwrap();
        assert_eq!(cfg.command, Command::Entropy);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.sde.n_steps, 128);
    }

    #[test]
    fn missing_seed_is_reported_at_its_path() {
        let text = MINIMAL.replace(r#","seed":42"#, "");
        let errs = parse_config(&text, &Overrides::default()).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].path, "$.seed");
    }

    #[test]
    fn errors_are_collected() {
        let text = r#"{"command":"entropy","bogus":1,
            "target":{"dim":1,"components":[{"weight":0.9,"mean":[0],"cov":[[1]]}]},
            "sde":{"n_steps":128,"n_paths":1000,"extra":true}}"#;
        let errs = parse_config(text, &Overrides::default()).unwrap_err();
        let paths: Vec<&str> = errs.iter().map(|e| e.path.as_str()).collect();
        assert!(paths.contains(&"$.bogus"));
        assert!(paths.contains(&"$.seed"));
        assert!(paths.iter().any(|p| p.starts_with("$.sde")), "{paths:?}");
        assert!(paths.contains(&"$.target"), "{paths:?}");
    }

    #[test]
    fn nested_type_errors_carry_paths() {
        let text = MINIMAL.replace(r#""weight":1"#, r#""weight":"one""#);
        let errs = parse_config(&text, &Overrides::default()).unwrap_err();
        assert_eq!(errs[0].path, "$.target.components[0].weight");
    }

    #[test]
    fn overrides_replace_fields() {
        let ov = Overrides {
            seed: Some(7),
            paths: Some(64),
            ..Default::default()
        };
        let cfg = parse_config(MINIMAL, &ov).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sde.n_paths, 64);
    }

    #[test]
    fn conflicting_command_is_rejected() {
        let ov = Overrides {
            command: Some("lsi".into()),
            ..Default::default()
        };
        let errs = parse_config(MINIMAL, &ov).unwrap_err();
        assert_eq!(errs[0].path, "$.command");
    }
}
