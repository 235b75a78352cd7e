//! Experiment orchestration: warmup statistics, planning, cache probing,
//! per-step simulation, ablations, sweeps and the functional verification
//! suite.

use std::collections::BTreeSet;

use crate::config::{ExperimentConfig, Switches};
use crate::dag::{build_dag, measure_payloads, BuildSettings};
use crate::embedding::{
    lookup_packed, lookup_packed_ordered, lookup_reference, EmbeddingTable, Matrix, ReduceMode,
    TableSet,
};
use crate::error::Result;
use crate::hybrid_hash::HybridHashState;
use crate::interleaving::{
    capacity_interleave_group, estimate_micro_batch, plan_k_interleaving, slice_micro_batches,
    InterleavePlan, MicroBatch, OpProfile, ResourceProfile,
};
use crate::ops::{OpKind, Resource};
use crate::packing::{plan_d_packing_with_exclusions, plan_unpacked, PackPlan, WarmupStats};
use crate::sim::{measure, simulate, Metrics, SimTrace};
use crate::strategy::{place, ExecutorTopology};
use crate::workload::{generate_batch, resolve_skew, Batch, ModelConfig, SkewSpec};

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Seed of the batch drawn at `step` of a run seeded with `seed`.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    splitmix64(seed ^ splitmix64(step as u64 + 0x51ED))
}

/// Per-run overrides applied by ablations and sweeps.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub steps: Option<usize>,
    pub switches: Option<Switches>,
    pub groups: Option<usize>,
    pub micro_batch: Option<usize>,
    pub n_executors: Option<usize>,
    pub hot_storage_bytes: Option<u64>,
    pub keep_traces: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub per_step: Vec<Metrics>,
    pub traces: Vec<SimTrace>,
    pub pack_report: String,
    pub interleave_report: String,
    pub hit_ratio: f64,
    pub n_groups: usize,
    pub micro_batch: usize,
    pub n_pack_shards: usize,
    pub dag_nodes: usize,
    pub audit_passed: Option<bool>,
}

/// Frequency-tracking hot/cold membership probes, one per (table, shard).
/// They mirror the cache decisions without materializing any rows.
pub struct CacheProbe {
    tables: Vec<String>,
    n_executors: usize,
    states: Vec<HybridHashState>,
}

impl CacheProbe {
    pub fn new(model: &ModelConfig, topology: &ExecutorTopology, cfg: &ExperimentConfig) -> CacheProbe {
        let mut tables: Vec<(String, usize)> = Vec::new();
        for f in &model.fields {
            if !tables.iter().any(|(t, _)| t == &f.table_ref) {
                tables.push((f.table_ref.clone(), f.dim));
            }
        }
        let capacity = topology.hot_storage_bytes / tables.len().max(1) as u64;
        let n = topology.n_executors;
        let mut states = Vec::with_capacity(tables.len() * n);
        for (t, dim) in &tables {
            for _ in 0..n {
                states.push(HybridHashState::with_threshold(
                    EmbeddingTable::new(t, *dim),
                    capacity,
                    cfg.cache_warmup_iters,
                    cfg.cache_flush_iters,
                    cfg.promote_threshold,
                ));
            }
        }
        CacheProbe { tables: tables.into_iter().map(|(t, _)| t).collect(), n_executors: n, states }
    }

    /// Feed one training step's post-unique per-owner queries.
    pub fn observe(&mut self, model: &ModelConfig, batch: &Batch) {
        let n = self.n_executors;
        for fids in batch.fields() {
            let Some(field) = model.field(&fids.field) else { continue };
            let Some(t) = self.tables.iter().position(|t| t == &field.table_ref) else { continue };
            let ids: Vec<u64> = fids.pairs.iter().map(|(_, id)| *id).collect();
            let uq = crate::embedding::unique(&ids);
            let part = crate::embedding::partition(&uq.unique_ids, n);
            for (e, owned) in part.per_executor_ids.iter().enumerate() {
                if !owned.is_empty() {
                    self.states[t * n + e].probe(owned);
                }
            }
        }
        for s in &mut self.states {
            s.end_iteration();
        }
    }

    pub fn hit_ratio(&self) -> f64 {
        let hot: u64 = self.states.iter().map(|s| s.stats().hot_hits).sum();
        let queries: u64 = self.states.iter().map(|s| s.stats().queries).sum();
        if queries == 0 {
            0.0
        } else {
            hot as f64 / queries as f64
        }
    }
}

fn effective_topology(cfg: &ExperimentConfig, ov: &Overrides) -> ExecutorTopology {
    let mut topo = cfg.topology;
    if let Some(n) = ov.n_executors {
        topo.n_executors = n;
    }
    if let Some(h) = ov.hot_storage_bytes {
        topo.hot_storage_bytes = h;
    }
    topo
}

fn build_pack_plan(
    cfg: &ExperimentConfig,
    switches: &Switches,
    stats: &WarmupStats,
) -> Result<PackPlan> {
    let excluded: BTreeSet<String> = cfg.excluded_fields.iter().cloned().collect();
    if switches.packing {
        plan_d_packing_with_exclusions(&cfg.model, stats, &excluded)
    } else {
        plan_unpacked(&cfg.model, stats)
    }
}

/// Resource profile measured from one full warmup batch.
fn build_profile(
    cfg: &ExperimentConfig,
    topology: &ExecutorTopology,
    pack_plan: &PackPlan,
    sample: &Batch,
) -> Result<ResourceProfile> {
    let micro = MicroBatch { start_instance: 0, batch: sample.clone() };
    let payloads = measure_payloads(&cfg.model, &[micro], pack_plan, topology.n_executors)?;
    let expanded_bytes: f64 = payloads[0]
        .shards
        .values()
        .map(|s| (s.unique_rows + s.input_ids) as f64 * s.dim as f64 * 4.0)
        .sum();
    let emb_rinstance = expanded_bytes / sample.batch_size.max(1) as f64;
    let fm_budget = topology.device_mem_bytes as f64 * cfg.feature_map_budget_fraction;
    let staging_budget = topology.device_mem_bytes as f64 * cfg.staging_budget_fraction;

    let mut profile = ResourceProfile::default();
    profile.insert(
        OpKind::Gather,
        OpProfile {
            dominant: Resource::IntraBw,
            rbound: fm_budget,
            rinstance: emb_rinstance,
            rparam: 4.0,
        },
    );
    profile.insert(
        OpKind::Shuffle,
        OpProfile {
            dominant: Resource::InterBw,
            rbound: staging_budget,
            rinstance: 0.0,
            rparam: 4.0,
        },
    );
    profile.insert(
        OpKind::Mlp,
        OpProfile {
            dominant: Resource::Compute,
            rbound: fm_budget,
            rinstance: cfg.mlp_act_bytes_per_instance,
            rparam: 0.0,
        },
    );
    Ok(profile)
}

fn build_interleave_plan(
    cfg: &ExperimentConfig,
    topology: &ExecutorTopology,
    pack_plan: &PackPlan,
    sample: &Batch,
    ov: &Overrides,
) -> Result<InterleavePlan> {
    let profile = build_profile(cfg, topology, pack_plan, sample)?;
    let bs_micro = ov
        .micro_batch
        .or(cfg.micro_batch_override)
        .unwrap_or_else(|| {
            estimate_micro_batch(&profile, &[OpKind::Gather, OpKind::Mlp], cfg.max_micro_batch)
        })
        .max(1);
    let capacity = capacity_interleave_group(&profile, &[OpKind::Gather, OpKind::Shuffle]);
    let excluded = pack_plan.excluded_shards();
    let groups_override = ov.groups.or(cfg.groups_override);
    let mut plan = plan_k_interleaving(pack_plan, capacity, &excluded, groups_override)?;
    plan.micro_batch_size = bs_micro;
    plan.slice_start_layer = cfg.start_layer;
    Ok(plan)
}

/// One full pipeline run: warmup statistics, planning, optional caching, and
/// `steps` simulated training steps.
pub fn run_once(cfg: &ExperimentConfig, seed: u64, ov: &Overrides) -> Result<RunOutput> {
    cfg.model.validate()?;
    let topology = effective_topology(cfg, ov);
    topology.validate()?;
    let switches = ov.switches.unwrap_or(cfg.switches);
    let steps = ov.steps.unwrap_or(cfg.steps).max(1);
    let skew = resolve_skew(cfg.skew.head_fraction, cfg.skew.head_mass, max_vocab(&cfg.model))?;

    let warmup: Vec<Batch> = (0..cfg.warmup_batches.max(1))
        .map(|i| generate_batch(&cfg.model, &skew, cfg.batch_size, step_seed(seed, i)))
        .collect();
    let stats = WarmupStats::collect(&cfg.model, &warmup);
    let pack_plan = build_pack_plan(cfg, &switches, &stats)?;

    let interleave = if switches.interleaving {
        Some(build_interleave_plan(cfg, &topology, &pack_plan, warmup.last().unwrap(), ov)?)
    } else {
        None
    };

    let mut cache = switches.caching.then(|| CacheProbe::new(&cfg.model, &topology, cfg));
    if let Some(c) = &mut cache {
        for b in &warmup {
            c.observe(&cfg.model, b);
        }
    }

    let strategy_plan = place(&cfg.model, &topology, cfg.strategy);
    let base_settings = BuildSettings {
        launch_overhead_s: cfg.launch_overhead_s,
        backward_compute_factor: cfg.backward_compute_factor,
        backward_comm_factor: cfg.backward_comm_factor,
        hit_ratio: 0.0,
        packing: switches.packing,
        mlp_act_bytes_per_instance: cfg.mlp_act_bytes_per_instance,
    };

    let mut per_step = Vec::with_capacity(steps);
    let mut traces = Vec::new();
    let mut dag_nodes = 0;
    for s in 0..steps {
        let batch =
            generate_batch(&cfg.model, &skew, cfg.batch_size, step_seed(seed, cfg.warmup_batches + s));
        let hit = match &mut cache {
            Some(c) => {
                c.observe(&cfg.model, &batch);
                c.hit_ratio()
            }
            None => 0.0,
        };
        let settings = BuildSettings { hit_ratio: hit, ..base_settings };
        let dag = build_dag(
            &cfg.model,
            &strategy_plan,
            &pack_plan,
            interleave.as_ref(),
            &batch,
            &topology,
            &settings,
        )?;
        dag_nodes = dag.node_count();
        let trace = simulate(&dag, &topology)?;
        let mut m = measure(&trace, cfg.batch_size * topology.n_executors, topology.n_executors);
        m.hit_ratio = hit;
        per_step.push(m);
        if ov.keep_traces {
            traces.push(trace);
        }
    }

    let audit_passed = if cfg.audit_equivalence {
        Some(audit_equivalence(&cfg.model, &pack_plan, &skew, cfg.batch_size.min(64), seed, topology.n_executors.min(4))?)
    } else {
        None
    };

    let hit_ratio = cache.as_ref().map(|c| c.hit_ratio()).unwrap_or(0.0);
    Ok(RunOutput {
        metrics: Metrics::mean(&per_step),
        per_step,
        traces,
        pack_report: pack_plan.report(),
        interleave_report: interleave
            .as_ref()
            .map(|p| p.report())
            .unwrap_or_else(|| "interleaving disabled\n".to_string()),
        hit_ratio,
        n_groups: interleave.as_ref().map(|p| p.n_groups()).unwrap_or(1),
        micro_batch: interleave
            .as_ref()
            .map(|p| p.micro_batch_size)
            .unwrap_or(cfg.batch_size),
        n_pack_shards: pack_plan.n_shards(),
        dag_nodes,
        audit_passed,
    })
}

fn max_vocab(model: &ModelConfig) -> u64 {
    model.fields.iter().map(|f| f.vocab_size).max().unwrap_or(10)
}

/// The four-row ablation: full, then each optimization removed in turn, on
/// identical seeds and batch streams.
pub fn ablate(cfg: &ExperimentConfig, seed: u64, ov: &Overrides) -> Result<Vec<(String, RunOutput)>> {
    let variants: [(&str, Switches); 4] = [
        ("full", Switches { packing: true, interleaving: true, caching: true }),
        ("w/o packing", Switches { packing: false, interleaving: true, caching: true }),
        ("w/o interleaving", Switches { packing: true, interleaving: false, caching: true }),
        ("w/o caching", Switches { packing: true, interleaving: true, caching: false }),
    ];
    let mut out = Vec::with_capacity(4);
    for (name, sw) in variants {
        let run = run_once(cfg, seed, &Overrides { switches: Some(sw), ..*ov })?;
        out.push((name.to_string(), run));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Groups,
    Scale,
    HotStorage,
    MicroBatch,
}

/// One sweep row: the axis value and the run it produced.
pub type SweepRow = (String, f64, RunOutput);

pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, seed: u64, ov: &Overrides) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    match axis {
        SweepAxis::Groups => {
            for k in 1..=11usize {
                let run = run_once(cfg, seed, &Overrides { groups: Some(k), ..*ov })?;
                rows.push((format!("groups={k}"), k as f64, run));
            }
        }
        SweepAxis::Scale => {
            for n in [1usize, 2, 4, 8, 16] {
                let run = run_once(cfg, seed, &Overrides { n_executors: Some(n), ..*ov })?;
                rows.push((format!("executors={n}"), n as f64, run));
            }
        }
        SweepAxis::HotStorage => {
            for mult in [0.25f64, 0.5, 1.0, 2.0, 4.0] {
                let bytes = (cfg.topology.hot_storage_bytes as f64 * mult) as u64;
                let run = run_once(cfg, seed, &Overrides { hot_storage_bytes: Some(bytes), ..*ov })?;
                rows.push((format!("hot_storage={bytes}"), mult, run));
            }
        }
        SweepAxis::MicroBatch => {
            for mult in [0.0625f64, 0.125, 0.25, 0.5, 1.0] {
                let bs = ((cfg.batch_size as f64 * mult) as usize).max(1);
                let run = run_once(cfg, seed, &Overrides { micro_batch: Some(bs), ..*ov })?;
                rows.push((format!("micro_batch={bs}"), mult, run));
            }
        }
    }
    Ok(rows)
}

pub fn outputs_bit_equal(a: &[(String, Matrix)], b: &[(String, Matrix)]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((n1, m1), (n2, m2))| n1 == n2 && m1.bit_eq(m2))
}

fn vstack(parts: &[Vec<(String, Matrix)>]) -> Vec<(String, Matrix)> {
    let mut out: Vec<(String, Matrix)> = Vec::new();
    for (name, first) in &parts[0] {
        let mut m = Matrix::with_capacity(0, first.cols());
        for part in parts {
            let mat = &part.iter().find(|(n, _)| n == name).unwrap().1;
            for r in 0..mat.rows() {
                m.push_row(mat.row(r));
            }
        }
        out.push((name.clone(), m));
    }
    out
}

/// Packed-vs-reference equivalence on fresh tables; used by the run audit.
fn audit_equivalence(
    model: &ModelConfig,
    plan: &PackPlan,
    skew: &SkewSpec,
    batch_size: usize,
    seed: u64,
    n_executors: usize,
) -> Result<bool> {
    let batch = generate_batch(model, skew, batch_size.max(1), splitmix64(seed));
    let mut ref_tables = TableSet::from_model(model, n_executors)?;
    let reference = lookup_reference(&batch, model, &mut ref_tables, ReduceMode::Sum)?;
    let mut packed_tables = TableSet::from_model(model, n_executors)?;
    let packed = lookup_packed(&batch, model, plan, &mut packed_tables, ReduceMode::Sum)?;
    Ok(outputs_bit_equal(&reference, &packed))
}

#[derive(Debug, Clone)]
pub struct VerifyCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<VerifyCheck>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// The functional invariant suite: packed-vs-reference equivalence, cache
/// transparency, slice-concat equivalence, group-order independence, and
/// simulator determinism, on a shrunk copy of the configured model.
pub fn verify(cfg: &ExperimentConfig, seed: u64) -> Result<VerifyReport> {
    let model = &cfg.model;
    let n_exec = cfg.topology.n_executors.clamp(1, 4);
    let batch_size = cfg.batch_size.clamp(8, 48);
    let skew = resolve_skew(cfg.skew.head_fraction, cfg.skew.head_mass, max_vocab(model))?;
    let warmup: Vec<Batch> =
        (0..2).map(|i| generate_batch(model, &skew, batch_size, step_seed(seed, i))).collect();
    let stats = WarmupStats::collect(model, &warmup);
    let excluded: BTreeSet<String> = cfg.excluded_fields.iter().cloned().collect();
    let plan = plan_d_packing_with_exclusions(model, &stats, &excluded)?;
    let batch = generate_batch(model, &skew, batch_size, step_seed(seed, 7));

    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(VerifyCheck { name: name.to_string(), passed, detail });
    };

    // 1. packed == reference, bitwise.
    let mut ref_tables = TableSet::from_model(model, n_exec)?;
    let reference = lookup_reference(&batch, model, &mut ref_tables, ReduceMode::Sum)?;
    let mut packed_tables = TableSet::from_model(model, n_exec)?;
    let packed = lookup_packed(&batch, model, &plan, &mut packed_tables, ReduceMode::Sum)?;
    push(
        "packed equals reference",
        outputs_bit_equal(&reference, &packed),
        format!("{} fields compared", reference.len()),
    );

    // 2. cache transparency: cached packed path equals plain reference.
    let mut cached_tables = TableSet::from_model(model, n_exec)?;
    cached_tables.enable_cache(
        cfg.topology.hot_storage_bytes / model.fields.len().max(1) as u64,
        1,
        cfg.cache_flush_iters.max(1),
        cfg.promote_threshold,
    );
    let mut ok = true;
    for round in 0..3 {
        let b = generate_batch(model, &skew, batch_size, step_seed(seed, 20 + round));
        let mut plain = TableSet::from_model(model, n_exec)?;
        let want = lookup_reference(&b, model, &mut plain, ReduceMode::Sum)?;
        let got = lookup_packed(&b, model, &plan, &mut cached_tables, ReduceMode::Sum)?;
        cached_tables.advance_iteration();
        ok &= outputs_bit_equal(&want, &got);
    }
    push("cache tier transparency", ok, "3 rounds through hot/cold tiers".into());

    // 3. slice-concat equivalence.
    let slices = slice_micro_batches(&batch, batch_size.div_ceil(3), cfg.start_layer)?;
    let mut sliced_tables = TableSet::from_model(model, n_exec)?;
    let parts: Vec<Vec<(String, Matrix)>> = slices
        .iter()
        .map(|m| lookup_packed(&m.batch, model, &plan, &mut sliced_tables, ReduceMode::Sum))
        .collect::<Result<_>>()?;
    let stitched = vstack(&parts);
    push(
        "slice-concat equivalence",
        outputs_bit_equal(&stitched, &packed),
        format!("{} micro-batches", slices.len()),
    );

    // 4. group-order independence.
    let mut order = plan.shard_refs();
    order.reverse();
    let mut reordered_tables = TableSet::from_model(model, n_exec)?;
    let reordered =
        lookup_packed_ordered(&batch, model, &plan, &mut reordered_tables, ReduceMode::Sum, &order)?;
    push("group-order independence", outputs_bit_equal(&reordered, &packed), String::new());

    // 5. plan coverage.
    push("plan covers batch", plan.check_covers(&batch).is_ok(), String::new());

    // 6. simulator determinism.
    let topology = ExecutorTopology { n_executors: n_exec, ..cfg.topology };
    let strategy_plan = place(model, &topology, cfg.strategy);
    let settings = BuildSettings {
        launch_overhead_s: cfg.launch_overhead_s,
        packing: true,
        mlp_act_bytes_per_instance: cfg.mlp_act_bytes_per_instance,
        ..Default::default()
    };
    let dag = build_dag(model, &strategy_plan, &plan, None, &batch, &topology, &settings)?;
    let t1 = simulate(&dag, &topology)?;
    let t2 = simulate(&dag, &topology)?;
    push("simulator determinism", t1 == t2, format!("{} events", t1.events.len()));

    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    const CFG: &str = r#"
archetype = "io_memory"

[skew]
head_fraction = 0.2
head_mass = 0.7

[topology]
executors = 2
compute_rate = 1.0e9
intra_bw = 1.0e9
inter_bw = 1.0e9
device_mem_bytes = 100000000
hot_storage_bytes = 100000

[run]
batch_size = 24
steps = 2
warmup_batches = 3
seeds = [1]

[interleaving]
micro_batch = 8
groups = 2

[mlp]
compute_cost_per_instance = 100.0
params = 1000

[[field_group]]
prefix = "a"
count = 4
dim = 8
vocab_size = 500

[[field_group]]
prefix = "b"
count = 2
dim = 16
vocab_size = 200

[[interaction]]
name = "ix"
input_prefixes = ["a"]
compute_cost_per_instance = 50.0
params = 500
"#;

    #[test]
    fn run_once_produces_metrics() {
        let cfg = ExperimentConfig::from_toml("t", CFG).unwrap();
        let out = run_once(&cfg, 1, &Overrides::default()).unwrap();
        assert!(out.metrics.ips > 0.0);
        assert!(out.metrics.makespan > 0.0);
        assert!(out.n_groups >= 1);
        assert!(out.dag_nodes > 0);
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = ExperimentConfig::from_toml("t", CFG).unwrap();
        let ov = Overrides { keep_traces: true, ..Default::default() };
        let a = run_once(&cfg, 9, &ov).unwrap();
        let b = run_once(&cfg, 9, &ov).unwrap();
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn verify_suite_passes() {
        let cfg = ExperimentConfig::from_toml("t", CFG).unwrap();
        let report = verify(&cfg, 3).unwrap();
        for c in &report.checks {
            assert!(c.passed, "check `{}` failed: {}", c.name, c.detail);
        }
    }

    #[test]
    fn ablation_produces_four_rows() {
        let cfg = ExperimentConfig::from_toml("t", CFG).unwrap();
        let rows = ablate(&cfg, 1, &Overrides { steps: Some(1), ..Default::default() }).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].0, "full");
    }
}
