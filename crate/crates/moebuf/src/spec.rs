//! Experiment specs: one JSON file describing a complete scenario run.
//!
//! Parsing is strict. Every unknown key anywhere in the document is
//! collected and reported at once, and validation errors name the offending
//! field by its dotted path. Omitted keys take the defaults below, and
//! [`ExperimentSpec::echo`] writes the fully resolved spec back out; the echo
//! re-parses to an equal value.

use std::fs;
use std::path::{Path, PathBuf};

use moebuf_core::attack::{AttackConfig, LossScale, Objective};
use moebuf_core::{BatchShape, ModelConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{spec_err, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Iteration budget for the integrity scenarios when none is given.
pub const DEFAULT_ITERATIONS: usize = 500;
/// Iteration budget for the denial scenario when none is given.
pub const DEFAULT_DENIAL_ITERATIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Demo,
    CapacitySweep,
    PositionStudy,
    Denial,
    Transfer,
    MitigationSuite,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Demo => "demo",
            Scenario::CapacitySweep => "capacity_sweep",
            Scenario::PositionStudy => "position_study",
            Scenario::Denial => "denial",
            Scenario::Transfer => "transfer",
            Scenario::MitigationSuite => "mitigation_suite",
        }
    }

    /// Scenarios that evaluate a pinned adversarial fixture instead of searching.
    pub fn uses_fixture(self) -> bool {
        matches!(self, Scenario::Transfer | Scenario::MitigationSuite)
    }
}

/// Which routing the deployment under attack uses. Capacities come from the
/// model's slack; sampled routing draws with the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingKind {
    #[default]
    Vanilla,
    Unlimited,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSettings {
    /// `M`; scenario default when absent.
    pub iterations: Option<usize>,
    pub replace_per_seq: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Victim's batch slot; last when absent.
    pub target_position: Option<usize>,
    pub loss_scale: LossScale,
    pub sentinel_init: bool,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            iterations: None,
            replace_per_seq: 3,
            batch_size: 4,
            seq_len: 8,
            target_position: None,
            loss_scale: LossScale::Probability,
            sentinel_init: false,
        }
    }
}

impl AttackSettings {
    pub fn shape(&self) -> Result<BatchShape> {
        BatchShape::new(self.batch_size, self.seq_len).map_err(|e| field_err("attack", e))
    }

    pub fn position(&self) -> usize {
        self.target_position
            .unwrap_or(self.batch_size.saturating_sub(1))
    }

    pub fn config(&self, seed: u64, objective: Objective) -> AttackConfig {
        AttackConfig {
            iterations: self.iterations.unwrap_or(DEFAULT_ITERATIONS),
            replace_per_seq: self.replace_per_seq,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            target_position: self.position(),
            seed,
            objective,
            loss_scale: self.loss_scale,
            sentinel_init: self.sentinel_init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenialTarget {
    pub layer: usize,
    /// Expert to block; the victim's most used expert in `layer` when absent.
    pub expert: Option<usize>,
    /// Slack of the attacked deployment. Large enough that the victim
    /// usually keeps its preferred expert against random batch-mates.
    pub capacity_slack: f64,
}

impl Default for DenialTarget {
    fn default() -> Self {
        Self {
            layer: 0,
            expert: None,
            capacity_slack: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub scenario: Scenario,
    /// First run seed; runs use `seed, seed+1, ...`.
    pub seed: u64,
    pub seeds: usize,
    pub model: ModelConfig,
    pub attack: AttackSettings,
    pub routing: RoutingKind,
    /// Seeds the victim selection.
    pub victim_seed: u64,
    /// Slack values for the capacity sweep; both endpoints are always added.
    pub capacity_values: Vec<f64>,
    /// Permutations per seed in the shuffle mitigation.
    pub shuffles: usize,
    pub denial: DenialTarget,
    /// Probe count for the transfer scenario, the victim included.
    pub probes: usize,
    /// Fixture file for transfer and mitigation; the built-in one when absent.
    pub fixture: Option<PathBuf>,
    /// Load weights from this checkpoint instead of initialising from `model`.
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario: Scenario::Demo,
            seed: 0,
            seeds: 5,
            model: ModelConfig::default(),
            attack: AttackSettings::default(),
            routing: RoutingKind::Vanilla,
            victim_seed: 0,
            capacity_values: vec![0.4, 0.8, 1.2, 1.6],
            shuffles: 20,
            denial: DenialTarget::default(),
            probes: 8,
            fixture: None,
            checkpoint: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "schema_version",
    "scenario",
    "seed",
    "seeds",
    "model",
    "attack",
    "routing",
    "victim_seed",
    "capacity_values",
    "shuffles",
    "denial",
    "probes",
    "fixture",
    "checkpoint",
    "output_dir",
];
const MODEL_KEYS: &[&str] = &[
    "blocks",
    "d_model",
    "vocab",
    "max_seq_len",
    "experts",
    "top_k",
    "capacity_slack",
    "d_ff",
    "seed",
];
const ATTACK_KEYS: &[&str] = &[
    "iterations",
    "replace_per_seq",
    "batch_size",
    "seq_len",
    "target_position",
    "loss_scale",
    "sentinel_init",
];
const DENIAL_KEYS: &[&str] = &["layer", "expert", "capacity_slack"];

fn unknown_keys(value: &Value) -> Vec<String> {
    fn scan(obj: &serde_json::Map<String, Value>, prefix: &str, known: &[&str], out: &mut Vec<String>) {
        for key in obj.keys() {
            if !known.contains(&key.as_str()) {
                out.push(format!("{prefix}{key}"));
            }
        }
    }
    let mut out = Vec::new();
    let Some(top) = value.as_object() else {
        return out;
    };
    scan(top, "", TOP_KEYS, &mut out);
    for (key, known) in [("model", MODEL_KEYS), ("attack", ATTACK_KEYS), ("denial", DENIAL_KEYS)] {
        if let Some(obj) = top.get(key).and_then(Value::as_object) {
            scan(obj, &format!("{key}."), known, &mut out);
        }
    }
    out
}

fn field_err(prefix: &str, e: moebuf_core::Error) -> Error {
    let msg = match e {
        moebuf_core::Error::Parameter(m) | moebuf_core::Error::Shape(m) | moebuf_core::Error::Input(m) => m,
        other => other.to_string(),
    };
    spec_err(format!("{prefix}.{msg}"))
}

impl ExperimentSpec {
    /// Defaults for `scenario` with nothing else set.
    pub fn for_scenario(scenario: Scenario) -> Self {
        Self {
            scenario,
            ..Self::default()
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| spec_err(format!("not valid JSON: {e}")))?;
        if !value.is_object() {
            return Err(spec_err("top level must be an object"));
        }
        let unknown = unknown_keys(&value);
        if !unknown.is_empty() {
            return Err(spec_err(format!("unknown keys: {}", unknown.join(", "))));
        }
        if value.get("scenario").is_none() {
            return Err(spec_err("scenario: required"));
        }
        let spec: Self = serde_json::from_value(value).map_err(|e| spec_err(e.to_string()))?;
        spec.validate()?;
        Ok(spec.resolved())
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| spec_err(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Fills scenario-dependent defaults so the echo is complete.
    pub fn resolved(mut self) -> Self {
        if self.attack.iterations.is_none() {
            self.attack.iterations = Some(match self.scenario {
                Scenario::Denial => DEFAULT_DENIAL_ITERATIONS,
                _ => DEFAULT_ITERATIONS,
            });
        }
        if self.attack.target_position.is_none() {
            self.attack.target_position = Some(self.attack.position());
        }
        self
    }

    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialises")
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(spec_err(format!(
                "schema_version: {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds == 0 {
            return Err(spec_err("seeds must be at least 1"));
        }
        self.model.validate().map_err(|e| field_err("model", e))?;
        let a = &self.attack;
        a.shape()?;
        if a.seq_len > self.model.max_seq_len {
            return Err(spec_err(format!(
                "attack.seq_len = {} exceeds model.max_seq_len = {}",
                a.seq_len, self.model.max_seq_len
            )));
        }
        a.config(0, Objective::Integrity)
            .validate(self.model.vocab)
            .map_err(|e| field_err("attack", e))?;
        if self.scenario == Scenario::CapacitySweep && self.capacity_values.is_empty() {
            return Err(spec_err("capacity_values must not be empty for capacity_sweep"));
        }
        if let Some(c) = self.capacity_values.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(spec_err(format!("capacity_values: {c} is not a finite value >= 0")));
        }
        if self.shuffles == 0 {
            return Err(spec_err("shuffles must be at least 1"));
        }
        if self.probes == 0 {
            return Err(spec_err("probes must be at least 1"));
        }
        if self.denial.layer >= self.model.blocks {
            return Err(spec_err(format!(
                "denial.layer = {} must lie in 0..{} (model.blocks)",
                self.denial.layer, self.model.blocks
            )));
        }
        if let Some(e) = self.denial.expert.filter(|&e| e >= self.model.experts) {
            return Err(spec_err(format!(
                "denial.expert = {e} must lie in 0..{} (model.experts)",
                self.model.experts
            )));
        }
        let c = self.denial.capacity_slack;
        if !(c.is_finite() && c >= 0.0) {
            return Err(spec_err(format!("denial.capacity_slack: {c} is not a finite value >= 0")));
        }
        Ok(())
    }
}
