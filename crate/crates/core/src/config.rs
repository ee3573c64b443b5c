//! Experiment configuration: a TOML document mirroring the engine's
//! parameters field-for-field, with dotted-path command-line overrides,
//! strict unknown-key rejection, and validation that names the offending
//! key and constraint.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricConfig;
use crate::model::{ModelSpec, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config error at {key}: {message}")]
    Constraint { key: String, message: String },
    #[error("bad override {entry:?}: {message}")]
    Override { entry: String, message: String },
}

fn constraint(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Constraint {
        key: key.to_string(),
        message: message.into(),
    }
}

/// A value that can be given explicitly or left as the literal string
/// `"auto"` for the engine to derive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr<T> {
    Value(T),
    Auto(AutoKeyword),
}

/// The `"auto"` marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoKeyword {
    #[serde(rename = "auto")]
    Auto,
}

impl<T: Copy> AutoOr<T> {
    pub const AUTO: AutoOr<T> = AutoOr::Auto(AutoKeyword::Auto);

    /// The explicit value, if one was given.
    pub fn explicit(&self) -> Option<T> {
        match self {
            AutoOr::Value(v) => Some(*v),
            AutoOr::Auto(_) => None,
        }
    }

    /// Resolves `"auto"` to the supplied derivation.
    pub fn resolve_with(&self, auto: impl FnOnce() -> T) -> T {
        match self {
            AutoOr::Value(v) => *v,
            AutoOr::Auto(_) => auto(),
        }
    }
}

/// Temporal pattern of adversary participation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionScheme {
    /// Uniform sampling of all clients in every phase.
    RandomSampling,
    /// All malicious clients participate in exactly one coordinated round.
    SingleShot,
    /// One malicious client forced in every `poison_frequency`-th attack
    /// round.
    FixedFrequency,
    /// Every malicious client participates in every attack round.
    Continuous,
}

/// Phase lengths in rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundsConfig {
    pub pretrain: u64,
    /// `"auto"` derives 15% of the pretrain length (floor).
    pub warmup: AutoOr<u64>,
    pub attack_window: u64,
    pub post_attack: u64,
}

impl RoundsConfig {
    pub fn warmup_rounds(&self) -> u64 {
        self.warmup.resolve_with(|| self.pretrain * 15 / 100)
    }

    pub fn total_rounds(&self) -> u64 {
        self.pretrain + self.warmup_rounds() + self.attack_window + self.post_attack
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSourceKind {
    Synthetic,
    Mnist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Dirichlet,
    Uniform,
}

/// Dataset source and client partitioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSourceKind,
    /// Synthetic generator knobs (ignored for file-backed sources).
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_n_features")]
    pub n_features: usize,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Directory holding the IDX image/label files (file-backed sources).
    #[serde(default)]
    pub dir: Option<String>,
    pub partition: PartitionKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Per-client training-set cap; a uniform random subset is kept after
    /// partitioning. 0 disables the cap.
    #[serde(default = "default_max_samples_per_client")]
    pub max_samples_per_client: usize,
    /// Fixed random subset of the test set used for per-round evaluation;
    /// 0 evaluates on the full test set.
    #[serde(default)]
    pub eval_subsample: usize,
    #[serde(default)]
    pub allow_empty_clients: bool,
}

fn default_n_samples() -> usize {
    2000
}
fn default_n_features() -> usize {
    32
}
fn default_n_classes() -> usize {
    4
}
fn default_spread() -> f64 {
    0.15
}
fn default_alpha() -> f64 {
    0.5
}
fn default_max_samples_per_client() -> usize {
    500
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKindConfig {
    FixedPattern,
    DistributedPattern,
    EdgeCase,
    OptimizedPattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelPoisonKind {
    #[default]
    None,
    ModelReplacement,
    ConstrainAndScale,
    NeurotoxinMask,
}

/// Rectangular pixel patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    /// Top-left corner `[row, col]`.
    pub origin: [usize; 2],
    /// Extent `[height, width]`.
    pub size: [usize; 2],
    /// Replacement value for every patch pixel.
    pub value: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            origin: [0, 0],
            size: [3, 3],
            value: 1.0,
        }
    }
}

/// Synthetic out-of-distribution pool for edge-case attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgePoolConfig {
    #[serde(default = "default_edge_pool_samples")]
    pub n_samples: usize,
    #[serde(default = "default_edge_pool_spread")]
    pub spread: f64,
}

impl Default for EdgePoolConfig {
    fn default() -> Self {
        Self {
            n_samples: default_edge_pool_samples(),
            spread: default_edge_pool_spread(),
        }
    }
}

fn default_edge_pool_samples() -> usize {
    200
}
fn default_edge_pool_spread() -> f64 {
    0.05
}

/// Malicious-client behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub attack_kind: AttackKindConfig,
    #[serde(default)]
    pub model_poison: ModelPoisonKind,
    pub target_class: usize,
    #[serde(default = "default_poison_count")]
    pub poison_count_per_batch: usize,
    /// Update boost for model replacement; `"auto"` derives
    /// `clients_per_round / (server_lr · cohort_size)`.
    #[serde(default = "default_auto_f64")]
    pub scale_factor: AutoOr<f64>,
    /// Task-loss weight in the constrain-and-scale blend.
    #[serde(default = "default_alpha_blend")]
    pub alpha_blend: f64,
    /// Fraction of coordinates the dormant-coordinate mask keeps.
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default = "default_trigger_opt_steps")]
    pub trigger_opt_steps: usize,
    #[serde(default = "default_trigger_opt_lr")]
    pub trigger_opt_lr: f64,
    /// Samples drawn for each trigger-optimization pass.
    #[serde(default = "default_trigger_opt_batch")]
    pub trigger_opt_batch: usize,
    /// Re-optimize the trigger at every attack round (otherwise only the
    /// first).
    #[serde(default = "default_true")]
    pub reoptimize_each_round: bool,
    /// Number of fragments a distributed pattern splits into; default is
    /// one per malicious client.
    #[serde(default)]
    pub fragment_count: Option<usize>,
    #[serde(default)]
    pub patch: Option<PatchConfig>,
    #[serde(default)]
    pub edge_pool: Option<EdgePoolConfig>,
    /// Attacker-side overrides of the benign training hyperparameters.
    #[serde(default)]
    pub local_epochs: Option<u32>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

fn default_poison_count() -> usize {
    20
}
fn default_auto_f64() -> AutoOr<f64> {
    AutoOr::AUTO
}
fn default_alpha_blend() -> f64 {
    0.5
}
fn default_mask_ratio() -> f64 {
    0.25
}
fn default_trigger_opt_steps() -> usize {
    20
}
fn default_trigger_opt_lr() -> f64 {
    0.1
}
fn default_trigger_opt_batch() -> usize {
    64
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DefenseRuleKind {
    #[default]
    Fedavg,
    Median,
    TrimmedMean,
    Krum,
    MultiKrum,
    Rfa,
    Foolsgold,
    Rlr,
    NormClipping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    #[default]
    None,
    MkrumDetector,
}

/// Server- and client-side defenses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub rule: DefenseRuleKind,
    pub trim_k: usize,
    pub krum_f: usize,
    pub krum_m: usize,
    pub rfa_tol: f64,
    pub rfa_max_iter: usize,
    pub rlr_threshold: u64,
    /// Update-norm bound for the clipping rule; `"auto"` uses the median
    /// benign update norm observed during warm-up.
    pub norm_bound: AutoOr<f64>,
    /// Post-aggregation Gaussian noise deviation (0 disables).
    pub weakdp_sigma: f64,
    /// Client-side clip bound and noise deviation; both present enables
    /// local differential privacy on benign clients.
    pub ldp_bound: Option<f64>,
    pub ldp_sigma: Option<f64>,
    pub detector: DetectorKind,
    /// Flag budget for the detector; `"auto"` uses the true number of
    /// malicious participants each round.
    pub detector_f: AutoOr<usize>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            rule: DefenseRuleKind::Fedavg,
            trim_k: 1,
            krum_f: 1,
            krum_m: 1,
            rfa_tol: crate::defenses::RFA_DEFAULT_TOL,
            rfa_max_iter: crate::defenses::RFA_DEFAULT_MAX_ITER,
            rlr_threshold: 4,
            norm_bound: AutoOr::AUTO,
            weakdp_sigma: 0.0,
            ldp_bound: None,
            ldp_sigma: None,
            detector: DetectorKind::None,
            detector_f: AutoOr::AUTO,
        }
    }
}

/// The whole experiment: federation shape, phases, data, model, training,
/// attack, defense, and metric knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run name; outputs land in `<runs dir>/<name>/`.
    pub name: String,
    pub master_seed: u64,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub server_lr: f64,
    #[serde(default = "default_malicious_fraction")]
    pub malicious_fraction: f64,
    pub selection_scheme: SelectionScheme,
    /// Attack-round period for the fixed-frequency scheme.
    #[serde(default)]
    pub poison_frequency: Option<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
    /// Dropping slow clients voids the bit-determinism guarantee.
    #[serde(default)]
    pub enforce_timeouts: bool,
    pub rounds: RoundsConfig,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
}

fn default_malicious_fraction() -> f64 {
    0.10
}
fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    /// Number of malicious clients: the lowest `⌈malicious_fraction · N⌉`
    /// client ids.
    pub fn n_malicious(&self) -> usize {
        (self.malicious_fraction * self.num_clients as f64).ceil() as usize
    }

    /// Checks every cross-field constraint, naming the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() {
            return Err(constraint("name", "run name must not be empty"));
        }
        if self.num_clients == 0 {
            return Err(constraint("num_clients", "need at least one client"));
        }
        if self.clients_per_round == 0 {
            return Err(constraint(
                "clients_per_round",
                "need at least one participant per round",
            ));
        }
        if self.clients_per_round > self.num_clients {
            return Err(constraint(
                "clients_per_round",
                format!(
                    "constraint clients_per_round ≤ num_clients violated ({} > {})",
                    self.clients_per_round, self.num_clients
                ),
            ));
        }
        if !(self.server_lr > 0.0) {
            return Err(constraint("server_lr", "must be > 0"));
        }
        if !(0.0..0.5).contains(&self.malicious_fraction) {
            return Err(constraint(
                "malicious_fraction",
                format!(
                    "must satisfy 0 ≤ malicious_fraction < 0.5, got {}",
                    self.malicious_fraction
                ),
            ));
        }
        if self.workers == 0 {
            return Err(constraint("workers", "need at least one worker"));
        }
        if self.selection_scheme == SelectionScheme::FixedFrequency {
            match self.poison_frequency {
                Some(f) if f >= 1 => {}
                Some(_) => {
                    return Err(constraint("poison_frequency", "must be ≥ 1"));
                }
                None => {
                    return Err(constraint(
                        "poison_frequency",
                        "required when selection_scheme = \"fixed_frequency\"",
                    ));
                }
            }
        }
        if matches!(
            self.selection_scheme,
            SelectionScheme::SingleShot | SelectionScheme::Continuous
        ) && self.rounds.attack_window > 0
            && self.clients_per_round < self.n_malicious()
        {
            return Err(constraint(
                "clients_per_round",
                format!(
                    "coordinated attack rounds need clients_per_round ≥ the {} malicious clients",
                    self.n_malicious()
                ),
            ));
        }
        if self.selection_scheme == SelectionScheme::FixedFrequency
            && self.clients_per_round > self.num_clients - self.n_malicious()
        {
            return Err(constraint(
                "clients_per_round",
                "fixed_frequency fills rounds from the benign pool; need \
                 clients_per_round ≤ num_clients − the malicious count",
            ));
        }
        self.model
            .validate()
            .map_err(|e| constraint("model", e.to_string()))?;
        if !(self.train.learning_rate > 0.0) {
            return Err(constraint("train.learning_rate", "must be > 0"));
        }
        if self.train.batch_size == 0 {
            return Err(constraint("train.batch_size", "must be ≥ 1"));
        }
        if self.train.local_epochs == 0 {
            return Err(constraint("train.local_epochs", "must be ≥ 1"));
        }
        if !(self.train.momentum >= 0.0 && self.train.momentum < 1.0) {
            return Err(constraint("train.momentum", "must be in [0, 1)"));
        }
        if self.train.weight_decay < 0.0 {
            return Err(constraint("train.weight_decay", "must be ≥ 0"));
        }
        match self.data.source {
            DataSourceKind::Mnist => {
                if self.data.dir.is_none() {
                    return Err(constraint(
                        "data.dir",
                        "required when data.source = \"mnist\"",
                    ));
                }
            }
            DataSourceKind::Synthetic => {
                if self.data.n_classes < 2 {
                    return Err(constraint("data.n_classes", "need at least 2 classes"));
                }
                if self.data.n_samples == 0 {
                    return Err(constraint("data.n_samples", "must be ≥ 1"));
                }
                if !(self.data.spread >= 0.0) {
                    return Err(constraint("data.spread", "must be ≥ 0"));
                }
            }
        }
        if self.data.partition == PartitionKind::Dirichlet && !(self.data.alpha > 0.0) {
            return Err(constraint("data.alpha", "Dirichlet concentration must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.attack.alpha_blend) {
            return Err(constraint("attack.alpha_blend", "must be in [0, 1]"));
        }
        if !(self.attack.mask_ratio > 0.0 && self.attack.mask_ratio <= 1.0) {
            return Err(constraint("attack.mask_ratio", "must be in (0, 1]"));
        }
        if let Some(v) = self.attack.scale_factor.explicit() {
            if !(v > 0.0) {
                return Err(constraint("attack.scale_factor", "must be > 0 (or \"auto\")"));
            }
        }
        if let Some(lr) = self.attack.learning_rate {
            if !(lr > 0.0) {
                return Err(constraint("attack.learning_rate", "must be > 0"));
            }
        }
        if let Some(e) = self.attack.local_epochs {
            if e == 0 {
                return Err(constraint("attack.local_epochs", "must be ≥ 1"));
            }
        }
        if !(self.attack.trigger_opt_lr > 0.0) {
            return Err(constraint("attack.trigger_opt_lr", "must be > 0"));
        }
        if let Some(p) = &self.attack.patch {
            if p.size[0] == 0 || p.size[1] == 0 {
                return Err(constraint("attack.patch.size", "patch must be non-empty"));
            }
            if !(0.0..=1.0).contains(&p.value) {
                return Err(constraint("attack.patch.value", "must be in [0, 1]"));
            }
        }
        if let Some(c) = self.attack.fragment_count {
            if c == 0 {
                return Err(constraint("attack.fragment_count", "must be ≥ 1"));
            }
        }
        if self.defense.rule == DefenseRuleKind::Rlr && self.defense.rlr_threshold < 1 {
            return Err(constraint("defense.rlr_threshold", "must be ≥ 1"));
        }
        if self.defense.rule == DefenseRuleKind::Rfa {
            if !(self.defense.rfa_tol > 0.0) {
                return Err(constraint("defense.rfa_tol", "must be > 0"));
            }
            if self.defense.rfa_max_iter == 0 {
                return Err(constraint("defense.rfa_max_iter", "must be ≥ 1"));
            }
        }
        if let Some(b) = self.defense.norm_bound.explicit() {
            if !(b > 0.0) {
                return Err(constraint("defense.norm_bound", "must be > 0 (or \"auto\")"));
            }
        }
        if self.defense.weakdp_sigma < 0.0 {
            return Err(constraint("defense.weakdp_sigma", "must be ≥ 0"));
        }
        match (self.defense.ldp_bound, self.defense.ldp_sigma) {
            (None, None) | (Some(_), Some(_)) => {}
            _ => {
                return Err(constraint(
                    "defense.ldp_bound",
                    "ldp_bound and ldp_sigma must be set together",
                ));
            }
        }
        if let Some(b) = self.defense.ldp_bound {
            if !(b > 0.0) {
                return Err(constraint("defense.ldp_bound", "must be > 0"));
            }
        }
        if let Some(s) = self.defense.ldp_sigma {
            if s < 0.0 {
                return Err(constraint("defense.ldp_sigma", "must be ≥ 0"));
            }
        }
        if self.metrics.t == 0 {
            return Err(constraint("metrics.t", "must be ≥ 1"));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }
}

/// Parses one `--set key.path=value` override. The right-hand side is
/// interpreted as a TOML literal when possible, falling back to a string.
fn parse_override(entry: &str) -> Result<(Vec<String>, toml::Value), ConfigError> {
    let (path, raw) = entry.split_once('=').ok_or_else(|| ConfigError::Override {
        entry: entry.to_string(),
        message: "expected key.path=value".into(),
    })?;
    let path = path.trim();
    if path.is_empty() {
        return Err(ConfigError::Override {
            entry: entry.to_string(),
            message: "empty key path".into(),
        });
    }
    let keys: Vec<String> = path.split('.').map(|s| s.trim().to_string()).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override {
            entry: entry.to_string(),
            message: "empty key segment".into(),
        });
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("x = {raw}")) {
        Ok(table) => table["x"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((keys, value))
}

fn apply_override(doc: &mut toml::Table, entry: &str) -> Result<(), ConfigError> {
    let (keys, value) = parse_override(entry)?;
    let mut table = doc;
    for key in &keys[..keys.len() - 1] {
        table = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override {
                entry: entry.to_string(),
                message: format!("{key} is not a table"),
            })?;
    }
    table.insert(keys[keys.len() - 1].clone(), value);
    Ok(())
}

/// Parses a TOML document plus dotted-path overrides into a validated
/// configuration.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut doc: toml::Table =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    for entry in overrides {
        apply_override(&mut doc, entry)?;
    }
    let config: ExperimentConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Reads and parses a config file with overrides.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text, overrides)
}
