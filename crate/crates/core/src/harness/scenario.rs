//! Scenario files.
//!
//! A scenario is a TOML document describing the cluster, the pipeline, the
//! network and the scripted migrations:
//!
//! ```toml
//! seed = 7
//! run_steps = 1200
//!
//! [[source]]
//! name = "gateway-a"
//! node = 1
//! plugs = 5
//!
//! [[operator]]
//! name = "forecast"
//! logic = "forecast"
//! inputs = ["gateway-a"]
//! nodes = [10]
//! params = { window = 2 }
//!
//! [sink]
//! node = 20
//! inputs = ["forecast"]
//!
//! [[migration]]
//! at_step = 400
//! operator = "forecast"
//! target_node = 30
//!
//! [cluster]
//! spare_nodes = [30]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enclave::{policy_by_name, DEFAULT_PAGE_FRAME};
use crate::migration::DEFAULT_SYNC_WINDOW;
use crate::runtime::{LogicRegistry, Params, DEFAULT_FANOUT_BITS};
use crate::simnet::{Delay, LinkConfig, NodeId};
use crate::workloads::{standard_registry, AnomalyBurst, PlugGenerator};

/// Budget used when a scenario enables the enclave without naming one.
pub const HARNESS_MEMORY_BUDGET: u64 = 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnclaveConfig {
    pub enabled: bool,
    pub memory_budget_bytes: u64,
    pub page_frame_bytes: u64,
    pub key_seed: String,
    /// Marker planted in every event key; must never show up in bytes
    /// that leave an enclave.
    pub sentinel: Option<String>,
    pub policy: String,
}

impl Default for EnclaveConfig {
    fn default() -> Self {
        EnclaveConfig {
            enabled: false,
            memory_budget_bytes: HARNESS_MEMORY_BUDGET,
            page_frame_bytes: DEFAULT_PAGE_FRAME,
            key_seed: "elastream".into(),
            sentinel: None,
            policy: "lru".into(),
        }
    }
}

fn default_readings() -> u64 {
    100
}
fn default_one() -> u64 {
    1
}
fn default_base() -> f64 {
    100.0
}
fn default_diurnal() -> f64 {
    0.3
}
fn default_noise() -> f64 {
    0.1
}
fn default_slots() -> u32 {
    96
}
fn default_watermark_every() -> u64 {
    10
}

/// A gateway node emitting the readings of a group of plugs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub name: String,
    pub node: u64,
    pub plugs: u64,
    #[serde(default)]
    pub first_plug: u64,
    #[serde(default = "default_readings")]
    pub readings_per_plug: u64,
    #[serde(default = "default_one")]
    pub period: u64,
    #[serde(default = "default_one")]
    pub start_step: u64,
    #[serde(default = "default_base")]
    pub base_watts: f64,
    #[serde(default = "default_diurnal")]
    pub diurnal: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_slots")]
    pub slots: u32,
    #[serde(default = "default_watermark_every")]
    pub watermark_every: u64,
    #[serde(default)]
    pub anomalies: Vec<AnomalyBurst>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub name: String,
    pub logic: String,
    pub inputs: Vec<String>,
    /// One node per partition.
    pub nodes: Vec<u64>,
    #[serde(default)]
    pub params: BTreeMap<String, toml::Value>,
    #[serde(default)]
    pub commutative: bool,
    /// Deliver in arrival order instead of total order. Requires
    /// `commutative`.
    #[serde(default)]
    pub relaxed: bool,
    /// Hex digest every replica must attest to (enclave mode only).
    #[serde(default)]
    pub expected_measurement: Option<String>,
}

fn default_sink_name() -> String {
    "sink".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkConfig {
    #[serde(default = "default_sink_name")]
    pub name: String,
    pub node: u64,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkOverride {
    pub from: u64,
    pub to: u64,
    #[serde(default)]
    pub delay: Option<Delay>,
    #[serde(default)]
    pub duplicate_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub delay: Delay,
    pub duplicate_prob: f64,
    pub link: Vec<LinkOverride>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            delay: Delay::default(),
            duplicate_prob: 0.0,
            link: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MigrationConfig {
    pub at_step: u64,
    pub operator: String,
    #[serde(default)]
    pub partition: u32,
    pub target_node: u64,
    /// Flip one bit of the snapshot in transit (fault injection).
    #[serde(default)]
    pub corrupt_transfer: bool,
    #[serde(default)]
    pub sync_window: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub spare_nodes: Vec<u64>,
    pub failed_nodes: Vec<u64>,
}

fn default_name() -> String {
    "scenario".into()
}
fn default_sync_window() -> usize {
    DEFAULT_SYNC_WINDOW
}
fn default_fanout_bits() -> u8 {
    DEFAULT_FANOUT_BITS
}
fn default_stall_steps() -> u64 {
    400
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub run_steps: u64,
    #[serde(default = "default_sync_window")]
    pub sync_window: usize,
    #[serde(default = "default_fanout_bits")]
    pub fanout_bits: u8,
    /// Steps without low-watermark progress before a buffer is reported
    /// as stalled.
    #[serde(default = "default_stall_steps")]
    pub stall_steps: u64,
    #[serde(default)]
    pub enclave: EnclaveConfig,
    #[serde(rename = "source")]
    pub sources: Vec<SourceConfig>,
    #[serde(rename = "operator")]
    pub operators: Vec<OperatorConfig>,
    pub sink: SinkConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(rename = "migration", default)]
    pub migrations: Vec<MigrationConfig>,
    #[serde(default)]
    pub cluster: ClusterConfig,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Where a pipeline input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upstream {
    Source(usize),
    Operator(usize),
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ConfigError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            ConfigError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        scenario.validate(&standard_registry())?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn resolve(&self, name: &str) -> Option<Upstream> {
        if let Some(i) = self.sources.iter().position(|s| s.name == name) {
            return Some(Upstream::Source(i));
        }
        self.operators
            .iter()
            .position(|o| o.name == name)
            .map(Upstream::Operator)
    }

    pub fn operator_index(&self, name: &str) -> Option<usize> {
        self.operators.iter().position(|o| o.name == name)
    }

    /// Operator ids start at 1, in declaration order.
    pub fn op_id(index: usize) -> u64 {
        index as u64 + 1
    }

    pub fn generator(&self, index: usize) -> PlugGenerator {
        let s = &self.sources[index];
        PlugGenerator {
            seed: self.seed,
            first_plug: s.first_plug,
            plugs: s.plugs,
            readings_per_plug: s.readings_per_plug,
            period: s.period,
            start_step: s.start_step,
            base_watts: s.base_watts,
            diurnal: s.diurnal,
            noise: s.noise,
            slots: s.slots,
            watermark_every: s.watermark_every,
            anomalies: s.anomalies.clone(),
            key_prefix: self.key_prefix(),
        }
    }

    /// Bytes prepended to event keys: the sentinel when the enclave is on.
    pub fn key_prefix(&self) -> Vec<u8> {
        match (&self.enclave.sentinel, self.enclave.enabled) {
            (Some(s), true) => s.as_bytes().to_vec(),
            _ => Vec::new(),
        }
    }

    /// Operator params as the string map handed to logic factories.
    pub fn params(&self, index: usize) -> Params {
        self.operators[index]
            .params
            .iter()
            .map(|(k, v)| {
                let text = match v {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), text)
            })
            .collect()
    }

    pub fn nodes(&self) -> BTreeSet<NodeId> {
        let mut nodes: BTreeSet<NodeId> = self.sources.iter().map(|s| NodeId(s.node)).collect();
        for op in &self.operators {
            nodes.extend(op.nodes.iter().map(|&n| NodeId(n)));
        }
        nodes.insert(NodeId(self.sink.node));
        nodes.extend(self.cluster.spare_nodes.iter().map(|&n| NodeId(n)));
        nodes
    }

    /// Links between every ordered pair of nodes, self-links included.
    pub fn links(&self) -> Vec<LinkConfig> {
        let nodes = self.nodes();
        let mut links = Vec::new();
        for &from in &nodes {
            for &to in &nodes {
                let mut link = LinkConfig {
                    from,
                    to,
                    delay: self.network.delay,
                    duplicate_prob: self.network.duplicate_prob,
                };
                for o in self
                    .network
                    .link
                    .iter()
                    .filter(|o| o.from == from.0 && o.to == to.0)
                {
                    if let Some(d) = o.delay {
                        link.delay = d;
                    }
                    if let Some(p) = o.duplicate_prob {
                        link.duplicate_prob = p;
                    }
                }
                links.push(link);
            }
        }
        links
    }

    pub fn validate(&self, registry: &LogicRegistry) -> Result<(), ConfigError> {
        if self.run_steps == 0 {
            return Err(invalid("run_steps", "must be positive"));
        }
        if self.sync_window == 0 {
            return Err(invalid("sync_window", "must be at least 1"));
        }
        if !(1..=32).contains(&self.fanout_bits) {
            return Err(invalid("fanout_bits", "must be within 1..=32"));
        }
        if self.stall_steps == 0 {
            return Err(invalid("stall_steps", "must be positive"));
        }
        if self.enclave.memory_budget_bytes == 0 {
            return Err(invalid("enclave.memory_budget_bytes", "must be positive"));
        }
        if policy_by_name(&self.enclave.policy).is_none() {
            return Err(invalid(
                "enclave.policy",
                format!("unknown eviction policy '{}'", self.enclave.policy),
            ));
        }
        if self.sources.is_empty() {
            return Err(invalid("source", "at least one source is required"));
        }

        let mut names = BTreeSet::new();
        let mut plugs: BTreeMap<u64, &str> = BTreeMap::new();
        for (i, s) in self.sources.iter().enumerate() {
            let field = |f: &str| format!("source[{i}].{f}");
            if !names.insert(s.name.as_str()) {
                return Err(invalid(
                    field("name"),
                    format!("duplicate name '{}'", s.name),
                ));
            }
            if s.plugs == 0 {
                return Err(invalid(field("plugs"), "must be positive"));
            }
            if s.period == 0 {
                return Err(invalid(field("period"), "must be positive"));
            }
            if s.start_step == 0 {
                return Err(invalid(field("start_step"), "must be at least 1"));
            }
            if s.slots == 0 {
                return Err(invalid(field("slots"), "must be positive"));
            }
            if !(s.noise >= 0.0 && s.diurnal >= 0.0 && s.base_watts >= 0.0) {
                return Err(invalid(
                    field("noise"),
                    "base_watts, diurnal and noise must be non-negative",
                ));
            }
            for plug in s.first_plug..s.first_plug + s.plugs {
                if let Some(other) = plugs.insert(plug, &s.name) {
                    return Err(invalid(
                        field("first_plug"),
                        format!("plug {plug} is also emitted by '{other}'"),
                    ));
                }
            }
        }

        for (i, op) in self.operators.iter().enumerate() {
            let field = |f: &str| format!("operator[{i}].{f}");
            if !names.insert(op.name.as_str()) {
                return Err(invalid(
                    field("name"),
                    format!("duplicate name '{}'", op.name),
                ));
            }
            if op.nodes.is_empty() {
                return Err(invalid(field("nodes"), "needs one node per partition"));
            }
            if op.inputs.is_empty() {
                return Err(invalid(field("inputs"), "needs at least one input"));
            }
            for input in &op.inputs {
                match self.resolve(input) {
                    Some(Upstream::Source(_)) => {}
                    Some(Upstream::Operator(j)) if j < i => {}
                    Some(Upstream::Operator(_)) => {
                        return Err(invalid(
                            field("inputs"),
                            format!("'{input}' must be declared before '{}'", op.name),
                        ))
                    }
                    None => {
                        return Err(invalid(field("inputs"), format!("unknown input '{input}'")))
                    }
                }
            }
            if !registry.contains(&op.logic) {
                return Err(invalid(
                    field("logic"),
                    format!("unknown logic '{}'", op.logic),
                ));
            }
            registry
                .build(&op.logic, &self.params(i))
                .map_err(|e| invalid(field("params"), e.to_string()))?;
            if op.relaxed && !op.commutative {
                return Err(invalid(
                    field("relaxed"),
                    "relaxed delivery requires commutative = true",
                ));
            }
            if let Some(m) = &op.expected_measurement {
                if hex::decode(m).map(|b| b.len()) != Ok(32) {
                    return Err(invalid(
                        field("expected_measurement"),
                        "must be 64 hex digits",
                    ));
                }
            }
        }

        if self.sink.inputs.is_empty() {
            return Err(invalid("sink.inputs", "needs at least one input"));
        }
        for input in &self.sink.inputs {
            if self.resolve(input).is_none() {
                return Err(invalid("sink.inputs", format!("unknown input '{input}'")));
            }
        }

        for (i, link) in self.links().iter().enumerate() {
            link.validate().map_err(|m| {
                invalid(
                    format!("network (link {}->{}, #{i})", link.from, link.to),
                    m,
                )
            })?;
        }
        let nodes = self.nodes();
        for (i, o) in self.network.link.iter().enumerate() {
            if !nodes.contains(&NodeId(o.from)) || !nodes.contains(&NodeId(o.to)) {
                return Err(invalid(
                    format!("network.link[{i}]"),
                    "refers to a node outside the cluster",
                ));
            }
        }

        let failed: BTreeSet<u64> = self.cluster.failed_nodes.iter().copied().collect();
        let mut hosts: Vec<(String, u64)> = self
            .sources
            .iter()
            .map(|s| (format!("source '{}'", s.name), s.node))
            .collect();
        for op in &self.operators {
            hosts.extend(
                op.nodes
                    .iter()
                    .map(|&n| (format!("operator '{}'", op.name), n)),
            );
        }
        hosts.push(("sink".into(), self.sink.node));
        for (what, node) in hosts {
            if failed.contains(&node) {
                return Err(invalid(
                    "cluster.failed_nodes",
                    format!("node {node} hosts {what}"),
                ));
            }
        }

        for (i, m) in self.migrations.iter().enumerate() {
            let field = |f: &str| format!("migration[{i}].{f}");
            let Some(op) = self.operator_index(&m.operator) else {
                return Err(invalid(
                    field("operator"),
                    format!("unknown operator '{}'", m.operator),
                ));
            };
            if m.partition as usize >= self.operators[op].nodes.len() {
                return Err(invalid(
                    field("partition"),
                    format!(
                        "operator '{}' has {} partition(s)",
                        m.operator,
                        self.operators[op].nodes.len()
                    ),
                ));
            }
            if m.at_step == 0 || m.at_step > self.run_steps {
                return Err(invalid(
                    field("at_step"),
                    format!("must be within 1..={}", self.run_steps),
                ));
            }
            if m.sync_window == Some(0) {
                return Err(invalid(field("sync_window"), "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
run_steps = 100

[[source]]
name = "g"
node = 1
plugs = 2

[[operator]]
name = "f"
logic = "forecast"
inputs = ["g"]
nodes = [2]
params = { window = 2 }

[sink]
node = 3
inputs = ["f"]
"#;

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let s = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(s.sync_window, 16);
        assert_eq!(s.fanout_bits, 16);
        assert!(!s.enclave.enabled);
        assert_eq!(s.enclave.memory_budget_bytes, 1 << 20);
        assert_eq!(s.params(0).get("window").map(String::as_str), Some("2"));
        assert_eq!(s.nodes().len(), 3);
        assert_eq!(s.links().len(), 9);
    }

    #[test]
    fn round_trips_through_toml() {
        let s = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(Scenario::parse(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn syntax_errors_carry_line() {
        let text = MINIMAL.replace("plugs = 2", "plugs = = 2");
        match Scenario::parse(&text) {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = MINIMAL.replace("plugs = 2", "plugs = 2\nplgus = 3");
        assert!(matches!(
            Scenario::parse(&text),
            Err(ConfigError::Parse { .. })
        ));
    }

    fn field_of(text: &str) -> String {
        match Scenario::parse(text) {
            Err(ConfigError::Invalid { field, .. }) => field,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn references_must_resolve() {
        assert_eq!(
            field_of(&MINIMAL.replace("inputs = [\"g\"]", "inputs = [\"x\"]")),
            "operator[0].inputs"
        );
        assert_eq!(
            field_of(&MINIMAL.replace("inputs = [\"f\"]", "inputs = [\"y\"]")),
            "sink.inputs"
        );
        assert_eq!(
            field_of(&MINIMAL.replace("logic = \"forecast\"", "logic = \"nope\"")),
            "operator[0].logic"
        );
    }

    #[test]
    fn migrations_are_checked() {
        let base =
            format!("{MINIMAL}\n[[migration]]\nat_step = 500\noperator = \"f\"\ntarget_node = 9\n");
        assert_eq!(field_of(&base), "migration[0].at_step");
        let bad_part = base.replace("at_step = 500", "at_step = 5\npartition = 1");
        assert_eq!(field_of(&bad_part), "migration[0].partition");
    }

    #[test]
    fn bad_params_and_links() {
        assert_eq!(
            field_of(&MINIMAL.replace("window = 2", "window = 0")),
            "operator[0].params"
        );
        let dup = format!("{MINIMAL}\n[network]\nduplicate_prob = 2.0\n");
        assert!(field_of(&dup).starts_with("network"));
    }
}
