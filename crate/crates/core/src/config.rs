//! Experiment configuration: a sectioned TOML file describing the model
//! shape, data skew, executor topology, strategy, and optimization switches.
//!
//! Field groups expand into individual fields (`<prefix>_0 .. <prefix>_n`),
//! each with its own embedding table. Interaction modules may name fields
//! explicitly or via group prefixes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interleaving::StartLayer;
use crate::strategy::{ExecutorTopology, StrategyKind};
use crate::workload::{Archetype, FeatureField, InteractionModule, ModelConfig};

#[derive(Debug, Clone, Deserialize)]
struct RawConfig {
    name: Option<String>,
    archetype: Archetype,
    skew: RawSkew,
    topology: RawTopology,
    #[serde(default)]
    strategy: RawStrategy,
    run: RawRun,
    #[serde(default)]
    cache: RawCache,
    #[serde(default)]
    optimizations: RawSwitches,
    #[serde(default)]
    interleaving: RawInterleaving,
    #[serde(default)]
    field_group: Vec<RawFieldGroup>,
    #[serde(default)]
    interaction: Vec<RawInteraction>,
    mlp: RawMlp,
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct RawSkew {
    pub head_fraction: f64,
    pub head_mass: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct RawTopology {
    executors: usize,
    compute_rate: f64,
    intra_bw: f64,
    inter_bw: f64,
    device_mem_bytes: u64,
    hot_storage_bytes: u64,
    #[serde(default = "default_one")]
    ps_servers: usize,
}

#[derive(Debug, Clone, Deserialize)]
struct RawStrategy {
    #[serde(default = "default_strategy")]
    kind: StrategyKind,
}

impl Default for RawStrategy {
    fn default() -> Self {
        RawStrategy { kind: default_strategy() }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct RawRun {
    batch_size: usize,
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default = "default_warmup_batches")]
    warmup_batches: usize,
    seeds: Vec<u64>,
    #[serde(default = "default_launch_overhead_us")]
    launch_overhead_us: f64,
    #[serde(default = "default_bwd_compute")]
    backward_compute_factor: f64,
    #[serde(default = "default_bwd_comm")]
    backward_comm_factor: f64,
    #[serde(default)]
    audit_equivalence: bool,
}

#[derive(Debug, Clone, Deserialize)]
struct RawCache {
    #[serde(default = "default_cache_warmup")]
    warmup_iters: u64,
    #[serde(default = "default_flush_iters")]
    flush_iters: u64,
    #[serde(default = "default_promote_threshold")]
    promote_threshold: f64,
}

impl Default for RawCache {
    fn default() -> Self {
        RawCache {
            warmup_iters: default_cache_warmup(),
            flush_iters: default_flush_iters(),
            promote_threshold: default_promote_threshold(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
pub struct Switches {
    #[serde(default = "default_true")]
    pub packing: bool,
    #[serde(default = "default_true")]
    pub interleaving: bool,
    #[serde(default = "default_true")]
    pub caching: bool,
}

type RawSwitches = Switches;

impl Default for Switches {
    fn default() -> Self {
        Switches { packing: true, interleaving: true, caching: true }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct RawInterleaving {
    #[serde(default = "default_max_micro")]
    max_micro_batch: usize,
    #[serde(default = "default_start_layer")]
    start_layer: StartLayer,
    /// 0 derives the group count from the capacity bound.
    #[serde(default)]
    groups: usize,
    /// 0 derives the micro-batch size from the resource profile.
    #[serde(default)]
    micro_batch: usize,
    #[serde(default = "default_fm_budget")]
    feature_map_budget_fraction: f64,
    #[serde(default = "default_staging_budget")]
    staging_budget_fraction: f64,
    #[serde(default)]
    excluded_fields: Vec<String>,
    #[serde(default = "default_mlp_act")]
    mlp_act_bytes_per_instance: f64,
}

impl Default for RawInterleaving {
    fn default() -> Self {
        RawInterleaving {
            max_micro_batch: default_max_micro(),
            start_layer: default_start_layer(),
            groups: 0,
            micro_batch: 0,
            feature_map_budget_fraction: default_fm_budget(),
            staging_budget_fraction: default_staging_budget(),
            excluded_fields: Vec::new(),
            mlp_act_bytes_per_instance: default_mlp_act(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct RawFieldGroup {
    prefix: String,
    count: usize,
    dim: usize,
    vocab_size: u64,
    #[serde(default = "default_one")]
    ids_per_instance: usize,
}

#[derive(Debug, Clone, Deserialize)]
struct RawInteraction {
    name: String,
    #[serde(default)]
    input_fields: Vec<String>,
    #[serde(default)]
    input_prefixes: Vec<String>,
    compute_cost_per_instance: f64,
    #[serde(default)]
    params: u64,
}

#[derive(Debug, Clone, Deserialize)]
struct RawMlp {
    compute_cost_per_instance: f64,
    #[serde(default)]
    params: u64,
}

fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_strategy() -> StrategyKind {
    StrategyKind::Hybrid
}
fn default_steps() -> usize {
    10
}
fn default_warmup_batches() -> usize {
    100
}
fn default_launch_overhead_us() -> f64 {
    5.0
}
fn default_bwd_compute() -> f64 {
    2.0
}
fn default_bwd_comm() -> f64 {
    1.0
}
fn default_cache_warmup() -> u64 {
    10
}
fn default_flush_iters() -> u64 {
    5
}
fn default_promote_threshold() -> f64 {
    crate::hybrid_hash::DEFAULT_PROMOTE_THRESHOLD
}
fn default_max_micro() -> usize {
    crate::interleaving::DEFAULT_MAX_MICRO_BATCH
}
fn default_start_layer() -> StartLayer {
    StartLayer::Embedding
}
fn default_fm_budget() -> f64 {
    0.25
}
fn default_staging_budget() -> f64 {
    0.05
}
fn default_mlp_act() -> f64 {
    0.0
}

/// Fully resolved experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelConfig,
    pub skew: RawSkew,
    pub topology: ExecutorTopology,
    pub strategy: StrategyKind,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_batches: usize,
    pub seeds: Vec<u64>,
    pub launch_overhead_s: f64,
    pub backward_compute_factor: f64,
    pub backward_comm_factor: f64,
    pub audit_equivalence: bool,
    pub cache_warmup_iters: u64,
    pub cache_flush_iters: u64,
    pub promote_threshold: f64,
    pub switches: Switches,
    pub max_micro_batch: usize,
    pub start_layer: StartLayer,
    pub groups_override: Option<usize>,
    pub micro_batch_override: Option<usize>,
    pub feature_map_budget_fraction: f64,
    pub staging_budget_fraction: f64,
    pub excluded_fields: Vec<String>,
    pub mlp_act_bytes_per_instance: f64,
    raw_text: String,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
        Self::from_toml(stem, &text)
    }

    pub fn from_toml(default_name: &str, text: &str) -> Result<ExperimentConfig> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        if raw.field_group.is_empty() {
            return Err(Error::Config("at least one [[field_group]] is required".into()));
        }
        if raw.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }

        let mut fields = Vec::new();
        for g in &raw.field_group {
            if g.count == 0 {
                return Err(Error::Config(format!("field group `{}` has count 0", g.prefix)));
            }
            for i in 0..g.count {
                let name = format!("{}_{i}", g.prefix);
                fields.push(FeatureField {
                    table_ref: name.clone(),
                    name,
                    dim: g.dim,
                    ids_per_instance: g.ids_per_instance,
                    vocab_size: g.vocab_size,
                });
            }
        }
        let mut interaction_modules = Vec::new();
        for m in &raw.interaction {
            let mut inputs = m.input_fields.clone();
            for prefix in &m.input_prefixes {
                let mut matched: Vec<String> = fields
                    .iter()
                    .filter(|f| f.name.starts_with(&format!("{prefix}_")))
                    .map(|f| f.name.clone())
                    .collect();
                if matched.is_empty() {
                    return Err(Error::Config(format!(
                        "interaction `{}` references unknown prefix `{prefix}`",
                        m.name
                    )));
                }
                inputs.append(&mut matched);
            }
            interaction_modules.push(InteractionModule {
                name: m.name.clone(),
                input_fields: inputs,
                compute_cost_per_instance: m.compute_cost_per_instance,
                params: m.params,
            });
        }
        let model = ModelConfig {
            fields,
            interaction_modules,
            mlp_cost_per_instance: raw.mlp.compute_cost_per_instance,
            mlp_params: raw.mlp.params,
            archetype: raw.archetype,
        };
        model.validate()?;

        let topology = ExecutorTopology {
            n_executors: raw.topology.executors,
            compute_rate: raw.topology.compute_rate,
            intra_bw: raw.topology.intra_bw,
            inter_bw: raw.topology.inter_bw,
            device_mem_bytes: raw.topology.device_mem_bytes,
            hot_storage_bytes: raw.topology.hot_storage_bytes,
            ps_servers: raw.topology.ps_servers,
        };
        topology.validate()?;

        for f in &raw.interleaving.excluded_fields {
            if !model.fields.iter().any(|x| &x.name == f) {
                return Err(Error::Config(format!("excluded field `{f}` does not exist")));
            }
        }

        Ok(ExperimentConfig {
            name: raw.name.unwrap_or_else(|| default_name.to_string()),
            model,
            skew: raw.skew,
            topology,
            strategy: raw.strategy.kind,
            batch_size: raw.run.batch_size,
            steps: raw.run.steps,
            warmup_batches: raw.run.warmup_batches,
            seeds: raw.run.seeds.clone(),
            launch_overhead_s: raw.run.launch_overhead_us * 1e-6,
            backward_compute_factor: raw.run.backward_compute_factor,
            backward_comm_factor: raw.run.backward_comm_factor,
            audit_equivalence: raw.run.audit_equivalence,
            cache_warmup_iters: raw.cache.warmup_iters,
            cache_flush_iters: raw.cache.flush_iters,
            promote_threshold: raw.cache.promote_threshold,
            switches: raw.optimizations,
            max_micro_batch: raw.interleaving.max_micro_batch,
            start_layer: raw.interleaving.start_layer,
            groups_override: (raw.interleaving.groups > 0).then_some(raw.interleaving.groups),
            micro_batch_override: (raw.interleaving.micro_batch > 0)
                .then_some(raw.interleaving.micro_batch),
            feature_map_budget_fraction: raw.interleaving.feature_map_budget_fraction,
            staging_budget_fraction: raw.interleaving.staging_budget_fraction,
            excluded_fields: raw.interleaving.excluded_fields,
            mlp_act_bytes_per_instance: raw.interleaving.mlp_act_bytes_per_instance,
            raw_text: text.to_string(),
        })
    }

    /// Hash tying every report row to the exact configuration and seed that
    /// produced it.
    pub fn config_hash(&self, seed: u64) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.raw_text.as_bytes());
        hasher.update(seed.to_le_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
archetype = "io_memory"

[skew]
head_fraction = 0.2
head_mass = 0.7

[topology]
executors = 2
compute_rate = 1.0e9
intra_bw = 1.0e9
inter_bw = 1.0e9
device_mem_bytes = 1000000000
hot_storage_bytes = 1000000

[run]
batch_size = 32
seeds = [1]

[mlp]
compute_cost_per_instance = 10.0
params = 100

[[field_group]]
prefix = "a"
count = 3
dim = 8
vocab_size = 1000

[[interaction]]
name = "ix"
input_prefixes = ["a"]
compute_cost_per_instance = 5.0
params = 10
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::from_toml("test", MINIMAL).unwrap();
        assert_eq!(cfg.model.fields.len(), 3);
        assert_eq!(cfg.model.interaction_modules[0].input_fields.len(), 3);
        assert_eq!(cfg.strategy, StrategyKind::Hybrid);
        assert_eq!(cfg.warmup_batches, 100);
        assert!(cfg.switches.packing && cfg.switches.interleaving && cfg.switches.caching);
    }

    #[test]
    fn hash_depends_on_seed() {
        let cfg = ExperimentConfig::from_toml("test", MINIMAL).unwrap();
        assert_ne!(cfg.config_hash(1), cfg.config_hash(2));
        assert_eq!(cfg.config_hash(1), cfg.config_hash(1));
    }

    #[test]
    fn unknown_excluded_field_rejected() {
        let bad = MINIMAL.replace(
            "[run]",
            "[interleaving]\nexcluded_fields = [\"nope\"]\n\n[run]",
        );
        assert!(ExperimentConfig::from_toml("test", &bad).is_err());
    }
}
