//! Resource-annotated operation graphs for one simulated training step.
//!
//! Demands are derived from the actual batch payloads: bytes moved for
//! memory and communication kernels, cost-units times instances for compute
//! kernels. Every node carries a launch overhead, so fragmentary unpacked
//! graphs pay for their operation count even when demands are identical.
//!
//! Interleave groups advance stage by stage — each stage of a group waits
//! for the whole previous stage of that group, and consecutive groups chain
//! their communication stages — so a single group degenerates to the
//! bulk-synchronous baseline while more groups stagger different resources.

use std::collections::BTreeMap;

use crate::embedding::owner_of;
use crate::error::{Error, Result};
use crate::interleaving::{slice_micro_batches, InterleavePlan, MicroBatch, StartLayer};
use crate::ops::{KernelClass, OpKind, Resource};
use crate::packing::{apply_k_packing, classify_kernels, PackPlan, ShardRef};
use crate::strategy::{StrategyKind, StrategyPlan};
use crate::strategy::ExecutorTopology;
use crate::workload::{Batch, ModelConfig};

pub const NO_TAG: u32 = u32::MAX;

/// Locates a node within the step structure, for fusion and tracing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeTag {
    pub micro: u32,
    pub group: u32,
    pub shard: u32,
}

impl NodeTag {
    pub fn none() -> Self {
        NodeTag { micro: NO_TAG, group: NO_TAG, shard: NO_TAG }
    }
}

#[derive(Debug, Clone)]
pub struct OpNode {
    pub id: usize,
    pub kind: OpKind,
    pub class: KernelClass,
    pub executor: usize,
    pub resource: Resource,
    /// Resource units: bytes for memory/communication, cost units for compute.
    pub demand: f64,
    pub deps: Vec<usize>,
    pub launch_overhead: f64,
    pub tag: NodeTag,
}

#[derive(Debug, Clone, Default)]
pub struct OpDag {
    pub nodes: Vec<OpNode>,
}

impl OpDag {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Total demand across nodes, launch overheads excluded.
    pub fn total_demand(&self) -> f64 {
        self.nodes.iter().map(|n| n.demand).sum()
    }

    pub fn validate_acyclic(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        for node in &self.nodes {
            for &d in &node.deps {
                succ[d].push(node.id);
                indegree[node.id] += 1;
            }
        }
        let mut queue: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(u) = queue.pop() {
            seen += 1;
            for &v in &succ[u] {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    queue.push(v);
                }
            }
        }
        if seen == n {
            Ok(())
        } else {
            Err(Error::CycleDetected)
        }
    }

    fn push(
        &mut self,
        kind: OpKind,
        executor: usize,
        demand: f64,
        overhead: f64,
        deps: Vec<usize>,
        tag: NodeTag,
    ) -> usize {
        let id = self.nodes.len();
        let class = kind.kernel_class();
        self.nodes.push(OpNode {
            id,
            kind,
            class,
            executor,
            resource: class.resource(),
            demand,
            deps,
            launch_overhead: overhead,
            tag,
        });
        id
    }
}

/// Payload of one pack shard within one micro-batch.
#[derive(Debug, Clone)]
pub struct ShardPayload {
    /// Positions in the packed ID tensor (pre-unique).
    pub input_ids: u64,
    pub unique_rows: u64,
    /// Unique rows owned by each executor under the `id % n` placement.
    pub owned_per_executor: Vec<u64>,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct MicroPayload {
    pub instances: usize,
    pub shards: BTreeMap<ShardRef, ShardPayload>,
    pub total_input_ids: u64,
}

/// Count unique and per-owner rows for every shard of every micro-batch.
/// Pure counting: no embedding rows are materialized.
pub fn measure_payloads(
    model: &ModelConfig,
    micros: &[MicroBatch],
    plan: &PackPlan,
    n_executors: usize,
) -> Result<Vec<MicroPayload>> {
    let mut out = Vec::with_capacity(micros.len());
    for micro in micros {
        let mut shards = BTreeMap::new();
        let mut total_input = 0u64;
        for sref in plan.shard_refs() {
            let dim = plan.shard_dim(sref);
            let mut seen: std::collections::HashSet<(usize, u64)> = std::collections::HashSet::new();
            let mut owned = vec![0u64; n_executors];
            let mut input_ids = 0u64;
            for member in plan.shard_members(sref) {
                let field = model
                    .field(member)
                    .ok_or_else(|| Error::PlanMismatch(format!("unknown field `{member}`")))?;
                let t_key = model.field_index(&field.name).unwrap_or(0);
                if let Some(fids) = micro.batch.field_ids(member) {
                    input_ids += fids.pairs.len() as u64;
                    // Distinct tables never collide, so keying by the field's
                    // table index keeps packed uniqueness exact.
                    let table_key = model
                        .fields
                        .iter()
                        .position(|f| f.table_ref == field.table_ref)
                        .unwrap_or(t_key);
                    for (_, id) in &fids.pairs {
                        if seen.insert((table_key, *id)) {
                            owned[owner_of(*id, n_executors)] += 1;
                        }
                    }
                }
            }
            total_input += input_ids;
            shards.insert(
                sref,
                ShardPayload {
                    input_ids,
                    unique_rows: seen.len() as u64,
                    owned_per_executor: owned,
                    dim,
                },
            );
        }
        out.push(MicroPayload { instances: micro.batch.batch_size, shards, total_input_ids: total_input });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct BuildSettings {
    pub launch_overhead_s: f64,
    pub backward_compute_factor: f64,
    pub backward_comm_factor: f64,
    /// Measured post-warmup cache hit ratio; shrinks the cold-path gather
    /// bytes proportionally.
    pub hit_ratio: f64,
    /// Fuse unique+partition and shuffle+stitch pairs.
    pub packing: bool,
    /// Dense feature-map bytes per instance, for the device-memory check.
    pub mlp_act_bytes_per_instance: f64,
}

impl Default for BuildSettings {
    fn default() -> Self {
        BuildSettings {
            launch_overhead_s: 5e-6,
            backward_compute_factor: 2.0,
            backward_comm_factor: 1.0,
            hit_ratio: 0.0,
            packing: true,
            mlp_act_bytes_per_instance: 0.0,
        }
    }
}

const ID_BYTES: f64 = 8.0;
const FLOAT_BYTES: f64 = 4.0;

struct StepShape {
    emb_micros: Vec<MicroBatch>,
    compute_micro_of_emb: Vec<Vec<usize>>,
    compute_instances: Vec<usize>,
    groups: Vec<Vec<ShardRef>>,
    excluded: Vec<ShardRef>,
}

fn step_shape(
    pack_plan: &PackPlan,
    interleave: Option<&InterleavePlan>,
    batch: &Batch,
) -> Result<StepShape> {
    let (emb_micros, compute_instances, compute_of_emb) = match interleave {
        None => (
            vec![MicroBatch { start_instance: 0, batch: batch.clone() }],
            vec![batch.batch_size],
            vec![vec![0]],
        ),
        Some(plan) => match plan.slice_start_layer {
            StartLayer::Embedding => {
                let slices = slice_micro_batches(batch, plan.micro_batch_size, plan.slice_start_layer)?;
                let inst: Vec<usize> = slices.iter().map(|m| m.batch.batch_size).collect();
                let link = (0..slices.len()).map(|i| vec![i]).collect();
                (slices, inst, link)
            }
            StartLayer::Mlp => {
                let slices = slice_micro_batches(batch, plan.micro_batch_size, plan.slice_start_layer)?;
                let inst: Vec<usize> = slices.iter().map(|m| m.batch.batch_size).collect();
                // Embedding runs at full batch; every compute slice hangs off it.
                (
                    vec![MicroBatch { start_instance: 0, batch: batch.clone() }],
                    inst,
                    vec![(0..slices.len()).collect()],
                )
            }
        },
    };
    let (groups, excluded) = match interleave {
        Some(plan) => (plan.groups.clone(), plan.excluded.iter().copied().collect()),
        None => (vec![pack_plan.shard_refs()], Vec::new()),
    };
    Ok(StepShape {
        emb_micros,
        compute_micro_of_emb: compute_of_emb,
        compute_instances,
        groups,
        excluded,
    })
}

/// Build the full forward + mirrored backward graph for one training step.
pub fn build_dag(
    model: &ModelConfig,
    strategy: &StrategyPlan,
    pack_plan: &PackPlan,
    interleave: Option<&InterleavePlan>,
    batch: &Batch,
    topology: &ExecutorTopology,
    settings: &BuildSettings,
) -> Result<OpDag> {
    let shape = step_shape(pack_plan, interleave, batch)?;
    let n = topology.n_executors;

    // Device-memory capacity check: the resident feature maps of the widest
    // in-flight slices must fit.
    let emb_act = model.embedding_bytes_per_instance();
    let max_emb = shape.emb_micros.iter().map(|m| m.batch.batch_size).max().unwrap_or(0);
    let max_compute = shape.compute_instances.iter().copied().max().unwrap_or(0);
    let needed = emb_act * max_emb as f64
        + settings.mlp_act_bytes_per_instance * max_compute as f64
        + model.dense_param_bytes() as f64;
    if needed > topology.device_mem_bytes as f64 {
        return Err(Error::OutOfMemory {
            needed: needed as u64,
            available: topology.device_mem_bytes,
        });
    }

    let payloads = measure_payloads(model, &shape.emb_micros, pack_plan, n)?;
    let hit = settings.hit_ratio.clamp(0.0, 1.0);
    let oh = settings.launch_overhead_s;

    // Per-field shard lookup for interaction dependencies.
    let mut field_shard: BTreeMap<&str, ShardRef> = BTreeMap::new();
    for sref in pack_plan.shard_refs() {
        for f in pack_plan.shard_members(sref) {
            field_shard.insert(f.as_str(), sref);
        }
    }

    let mut dag = OpDag::default();
    let is_ps = strategy.kind == StrategyKind::Ps;
    let server = n; // PS server cost center sits past the worker executors.

    let ps_pull = if is_ps {
        // Every worker pulls its embedding rows and a dense replica through
        // the server uplink.
        let rows_bytes: f64 = payloads
            .iter()
            .flat_map(|p| p.shards.values())
            .map(|s| s.unique_rows as f64 * s.dim as f64 * FLOAT_BYTES)
            .sum();
        let bytes = (rows_bytes + model.dense_param_bytes() as f64) * n as f64;
        Some(dag.push(
            OpKind::PsPull,
            server,
            bytes / topology.ps_servers as f64,
            oh,
            vec![],
            NodeTag::none(),
        ))
    } else {
        None
    };

    // Terminal backward nodes feeding the step-level gradient exchange.
    let mut dense_grad_ready: Vec<usize> = Vec::new();
    let mut embedding_grad_ready: Vec<usize> = Vec::new();

    for e in 0..n {
        let mut sr_nodes_per_micro: Vec<BTreeMap<ShardRef, usize>> = Vec::new();
        let mut interaction_b_per_compute: Vec<Vec<usize>> = vec![Vec::new(); shape.compute_instances.len()];
        let mut mlp_fwd: Vec<usize> = Vec::new();

        // -- forward --
        for (m, payload) in payloads.iter().enumerate() {
            let tag_m = m as u32;
            let load_bytes = payload.total_input_ids as f64 * ID_BYTES;
            let mut load_deps = Vec::new();
            if let Some(p) = ps_pull {
                load_deps.push(p);
            }
            let data_load = dag.push(
                OpKind::DataLoad,
                e,
                load_bytes,
                oh,
                load_deps,
                NodeTag { micro: tag_m, group: NO_TAG, shard: NO_TAG },
            );

            let mut sr_nodes: BTreeMap<ShardRef, usize> = BTreeMap::new();
            let mut prev_group_comm: Vec<usize> = Vec::new();
            let grouped: Vec<(u32, Vec<ShardRef>, bool)> = shape
                .groups
                .iter()
                .enumerate()
                .map(|(gi, g)| (gi as u32, g.clone(), false))
                .chain(shape.excluded.iter().map(|r| (NO_TAG, vec![*r], true)))
                .collect();

            for (gi, members, excluded) in grouped {
                let mut partition_nodes = Vec::new();
                let mut gather_nodes = Vec::new();
                let mut stitch_nodes = Vec::new();
                let mut per_shard: Vec<(ShardRef, NodeTag, &ShardPayload)> = Vec::new();
                for (si, sref) in members.iter().enumerate() {
                    let tag = NodeTag { micro: tag_m, group: gi, shard: si as u32 };
                    per_shard.push((*sref, tag, &payload.shards[sref]));
                }

                // Stage 1: unique + partition chains.
                for (_, tag, pl) in &per_shard {
                    let u = dag.push(
                        OpKind::Unique,
                        e,
                        pl.input_ids as f64 * ID_BYTES,
                        oh,
                        vec![data_load],
                        *tag,
                    );
                    let p = dag.push(
                        OpKind::Partition,
                        e,
                        pl.unique_rows as f64 * ID_BYTES,
                        oh,
                        vec![u],
                        *tag,
                    );
                    partition_nodes.push(p);
                }
                // Stage 2: gathers wait for the whole group's partitions.
                for (i, (_, tag, pl)) in per_shard.iter().enumerate() {
                    let deps = if excluded { vec![partition_nodes[i]] } else { partition_nodes.clone() };
                    let g = dag.push(
                        OpKind::Gather,
                        e,
                        gather_bytes(pl, e, n, strategy) * (1.0 - hit),
                        oh,
                        deps,
                        *tag,
                    );
                    gather_nodes.push(g);
                }
                // Stage 3: shuffle (+ stitch) with the cross-group comm chain.
                for (i, (_, tag, pl)) in per_shard.iter().enumerate() {
                    let mut deps = if excluded { vec![gather_nodes[i]] } else { gather_nodes.clone() };
                    if !excluded {
                        deps.extend(prev_group_comm.iter().copied());
                    }
                    let s = dag.push(OpKind::Shuffle, e, shuffle_bytes(pl, e, n, strategy), oh, deps, *tag);
                    // Stitch is pointer assembly of rows already accounted
                    // for by gather/shuffle, so it carries launch cost only.
                    let st = dag.push(OpKind::Stitch, e, 0.0, oh, vec![s], *tag);
                    stitch_nodes.push(st);
                }
                // Stage 4: segment reductions wait for the group's stitches.
                for (i, (sref, tag, pl)) in per_shard.iter().enumerate() {
                    let deps = if excluded { vec![stitch_nodes[i]] } else { stitch_nodes.clone() };
                    let sr = dag.push(
                        OpKind::SegmentReduce,
                        e,
                        pl.input_ids as f64 * pl.dim as f64 * FLOAT_BYTES,
                        oh,
                        deps,
                        *tag,
                    );
                    sr_nodes.insert(*sref, sr);
                }
                if !excluded {
                    prev_group_comm = stitch_nodes;
                }
            }

            // Dense forward for every compute slice fed by this embedding
            // micro-batch.
            for &mc in &shape.compute_micro_of_emb[m] {
                let instances = shape.compute_instances[mc] as f64;
                let tag_c = NodeTag { micro: mc as u32, group: NO_TAG, shard: NO_TAG };
                let mut interaction_nodes = Vec::new();
                let mut covered: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
                for module in &model.interaction_modules {
                    let mut deps = Vec::new();
                    for f in &module.input_fields {
                        covered.insert(f.as_str());
                        if let Some(sref) = field_shard.get(f.as_str()) {
                            deps.push(sr_nodes[sref]);
                        }
                    }
                    deps.sort_unstable();
                    deps.dedup();
                    let node = dag.push(
                        OpKind::Interaction,
                        e,
                        module.compute_cost_per_instance * instances,
                        oh,
                        deps,
                        tag_c,
                    );
                    interaction_nodes.push(node);
                }
                let mut mlp_deps = interaction_nodes.clone();
                for field in &model.fields {
                    if !covered.contains(field.name.as_str()) {
                        if let Some(sref) = field_shard.get(field.name.as_str()) {
                            mlp_deps.push(sr_nodes[sref]);
                        }
                    }
                }
                mlp_deps.sort_unstable();
                mlp_deps.dedup();

                // Model-parallel dense layers exchange activations.
                if strategy.kind == StrategyKind::Mp && n > 1 {
                    let bytes = instances * emb_act * (n as f64 - 1.0) / n as f64;
                    let x = dag.push(OpKind::AllToAllv, e, bytes, oh, mlp_deps.clone(), tag_c);
                    mlp_deps = vec![x];
                }
                let mlp = dag.push(
                    OpKind::Mlp,
                    e,
                    model.mlp_cost_per_instance * instances,
                    oh,
                    mlp_deps,
                    tag_c,
                );
                mlp_fwd.push(mlp);
                let _ = interaction_nodes;
            }
            sr_nodes_per_micro.push(sr_nodes);
        }

        // -- backward: a mirror image of the forward pass --
        for (mc, &mlp) in mlp_fwd.iter().enumerate() {
            let instances = shape.compute_instances[mc] as f64;
            let tag_c = NodeTag { micro: mc as u32, group: NO_TAG, shard: NO_TAG };
            let mlp_b = dag.push(
                OpKind::MlpBackward,
                e,
                model.mlp_cost_per_instance * instances * settings.backward_compute_factor,
                oh,
                vec![mlp],
                tag_c,
            );
            dense_grad_ready.push(mlp_b);
            let mut back_root = vec![mlp_b];
            if strategy.kind == StrategyKind::Mp && n > 1 {
                let bytes =
                    instances * emb_act * (n as f64 - 1.0) / n as f64 * settings.backward_comm_factor;
                let x = dag.push(OpKind::AllToAllv, e, bytes, oh, back_root.clone(), tag_c);
                back_root = vec![x];
            }
            for module in &model.interaction_modules {
                let b = dag.push(
                    OpKind::InteractionBackward,
                    e,
                    module.compute_cost_per_instance * instances * settings.backward_compute_factor,
                    oh,
                    back_root.clone(),
                    tag_c,
                );
                interaction_b_per_compute[mc].push(b);
                dense_grad_ready.push(b);
            }
            if interaction_b_per_compute[mc].is_empty() {
                interaction_b_per_compute[mc] = back_root;
            }
        }

        for (m, payload) in payloads.iter().enumerate() {
            let tag_m = m as u32;
            // Gradients flow back once every dependent compute slice is done.
            let grad_sources: Vec<usize> = shape.compute_micro_of_emb[m]
                .iter()
                .flat_map(|&mc| interaction_b_per_compute[mc].iter().copied())
                .collect();

            let mut prev_group_comm: Vec<usize> = Vec::new();
            let grouped: Vec<(u32, Vec<ShardRef>, bool)> = shape
                .groups
                .iter()
                .enumerate()
                .rev()
                .map(|(gi, g)| (gi as u32, g.clone(), false))
                .chain(shape.excluded.iter().map(|r| (NO_TAG, vec![*r], true)))
                .collect();
            for (gi, members, excluded) in grouped {
                let mut comm_nodes = Vec::new();
                for (si, sref) in members.iter().enumerate() {
                    let tag = NodeTag { micro: tag_m, group: gi, shard: si as u32 };
                    let pl = &payload.shards[sref];
                    let mut deps = grad_sources.clone();
                    if !excluded {
                        deps.extend(prev_group_comm.iter().copied());
                    }
                    deps.sort_unstable();
                    deps.dedup();
                    let sb = dag.push(
                        OpKind::ShuffleBackward,
                        e,
                        shuffle_bytes(pl, e, n, strategy) * settings.backward_comm_factor,
                        oh,
                        deps,
                        tag,
                    );
                    // Hot rows update in device memory; only the cold
                    // fraction pays the scatter back into the cold store.
                    let gb = dag.push(
                        OpKind::GatherBackward,
                        e,
                        pl.unique_rows as f64 * pl.dim as f64 * FLOAT_BYTES * (1.0 - hit),
                        oh,
                        vec![sb],
                        tag,
                    );
                    comm_nodes.push(sb);
                    embedding_grad_ready.push(gb);
                }
                if !excluded {
                    prev_group_comm = comm_nodes;
                }
            }
        }
    }

    // Step-level gradient exchange.
    match strategy.kind {
        StrategyKind::Hybrid => {
            let bytes = model.dense_param_bytes() as f64;
            let factor = if n > 1 { 2.0 * (n as f64 - 1.0) / n as f64 } else { 0.0 };
            for e in 0..n {
                let deps: Vec<usize> =
                    dense_grad_ready.iter().copied().filter(|&i| dag.nodes[i].executor == e).collect();
                dag.push(OpKind::Allreduce, e, bytes * factor, oh, deps, NodeTag::none());
            }
        }
        StrategyKind::Dp => {
            // Replicated embeddings ride the ring too.
            let row_bytes: f64 = payloads
                .iter()
                .flat_map(|p| p.shards.values())
                .map(|s| s.unique_rows as f64 * s.dim as f64 * FLOAT_BYTES)
                .sum();
            let bytes = model.dense_param_bytes() as f64 + row_bytes;
            let factor = if n > 1 { 2.0 * (n as f64 - 1.0) / n as f64 } else { 0.0 };
            for e in 0..n {
                let deps: Vec<usize> = dense_grad_ready
                    .iter()
                    .chain(embedding_grad_ready.iter())
                    .copied()
                    .filter(|&i| dag.nodes[i].executor == e)
                    .collect();
                dag.push(OpKind::Allreduce, e, bytes * factor, oh, deps, NodeTag::none());
            }
        }
        StrategyKind::Mp => {} // dense activations already exchanged inline
        StrategyKind::Ps => {
            let rows_bytes: f64 = payloads
                .iter()
                .flat_map(|p| p.shards.values())
                .map(|s| s.unique_rows as f64 * s.dim as f64 * FLOAT_BYTES)
                .sum();
            let bytes = (rows_bytes + model.dense_param_bytes() as f64) * n as f64;
            let mut deps: Vec<usize> = dense_grad_ready.clone();
            deps.extend(embedding_grad_ready.iter().copied());
            dag.push(
                OpKind::PsPush,
                server,
                bytes / topology.ps_servers as f64,
                oh,
                deps,
                NodeTag::none(),
            );
        }
    }

    let dag = if settings.packing { apply_k_packing(&dag, &classify_kernels()) } else { dag };
    dag.validate_acyclic()?;
    Ok(dag)
}

fn gather_bytes(pl: &ShardPayload, e: usize, n: usize, strategy: &StrategyPlan) -> f64 {
    let row = pl.dim as f64 * FLOAT_BYTES;
    match strategy.kind {
        // Each executor serves its owned rows to every requester.
        StrategyKind::Mp | StrategyKind::Hybrid => {
            pl.owned_per_executor.get(e).copied().unwrap_or(0) as f64 * n as f64 * row
        }
        // Replica or pulled copy: the full unique set is local.
        StrategyKind::Dp | StrategyKind::Ps => pl.unique_rows as f64 * row,
    }
}

fn shuffle_bytes(pl: &ShardPayload, e: usize, n: usize, strategy: &StrategyPlan) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let row = pl.dim as f64 * FLOAT_BYTES;
    match strategy.kind {
        // Receive volume on a full-duplex link; aggregate send equals
        // aggregate receive, and receive volume stays additive across shard
        // compositions (work conservation under packing).
        StrategyKind::Mp | StrategyKind::Hybrid => {
            let owned = pl.owned_per_executor.get(e).copied().unwrap_or(0) as f64;
            (pl.unique_rows as f64 - owned) * row
        }
        StrategyKind::Dp | StrategyKind::Ps => 0.0,
    }
}

/// Forward embedding stage only, on one executor: the operator-count view of
/// a plan. Unfused this is six operators per shard; fused it is four.
pub fn build_embedding_stage(
    model: &ModelConfig,
    pack_plan: &PackPlan,
    batch: &Batch,
    fused: bool,
) -> Result<OpDag> {
    let micro = MicroBatch { start_instance: 0, batch: batch.clone() };
    let payloads = measure_payloads(model, &[micro], pack_plan, 1)?;
    let payload = &payloads[0];
    let mut dag = OpDag::default();
    for (si, sref) in pack_plan.shard_refs().into_iter().enumerate() {
        let pl = &payload.shards[&sref];
        let tag = NodeTag { micro: 0, group: sref.group as u32, shard: si as u32 };
        let row = pl.dim as f64 * FLOAT_BYTES;
        let u = dag.push(OpKind::Unique, 0, pl.input_ids as f64 * ID_BYTES, 0.0, vec![], tag);
        let p = dag.push(OpKind::Partition, 0, pl.unique_rows as f64 * ID_BYTES, 0.0, vec![u], tag);
        let g = dag.push(OpKind::Gather, 0, pl.unique_rows as f64 * row, 0.0, vec![p], tag);
        let s = dag.push(OpKind::Shuffle, 0, 0.0, 0.0, vec![g], tag);
        let st = dag.push(OpKind::Stitch, 0, 0.0, 0.0, vec![s], tag);
        let _ =
            dag.push(OpKind::SegmentReduce, 0, pl.input_ids as f64 * row, 0.0, vec![st], tag);
    }
    if fused {
        Ok(apply_k_packing(&dag, &classify_kernels()))
    } else {
        Ok(dag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packing::{plan_d_packing, plan_unpacked, WarmupStats};
    use crate::strategy::place;
    use crate::workload::{generate_batch, Archetype, FeatureField, ModelConfig, SkewSpec};

    fn model(n_fields: usize, dim: usize) -> ModelConfig {
        ModelConfig {
            fields: (0..n_fields)
                .map(|i| FeatureField {
                    name: format!("f{i}"),
                    table_ref: format!("f{i}"),
                    dim,
                    ids_per_instance: 2,
                    vocab_size: 50,
                })
                .collect(),
            interaction_modules: vec![crate::workload::InteractionModule {
                name: "ix".into(),
                input_fields: (0..n_fields).map(|i| format!("f{i}")).collect(),
                compute_cost_per_instance: 10.0,
                params: 100,
            }],
            mlp_cost_per_instance: 5.0,
            mlp_params: 100,
            archetype: Archetype::IoMemory,
        }
    }

    fn topo(n: usize) -> ExecutorTopology {
        ExecutorTopology {
            n_executors: n,
            compute_rate: 1e9,
            intra_bw: 1e9,
            inter_bw: 1e9,
            device_mem_bytes: 1 << 30,
            hot_storage_bytes: 1 << 20,
            ps_servers: 1,
        }
    }

    #[test]
    fn fig_style_operator_counts() {
        let m = model(3, 8);
        let skew = SkewSpec::uniform();
        let batch = generate_batch(&m, &skew, 16, 1);
        let stats = WarmupStats::collect(&m, &[batch.clone()]);

        let unpacked = plan_unpacked(&m, &stats).unwrap();
        let dag = build_embedding_stage(&m, &unpacked, &batch, false).unwrap();
        assert_eq!(dag.node_count(), 18);

        let packed = plan_d_packing(&m, &stats).unwrap();
        assert_eq!(packed.n_shards(), 1);
        let dag = build_embedding_stage(&m, &packed, &batch, true).unwrap();
        assert_eq!(dag.node_count(), 4);
    }

    #[test]
    fn demand_is_conserved_under_packing() {
        let m = model(6, 8);
        let skew = SkewSpec::uniform();
        let batch = generate_batch(&m, &skew, 32, 5);
        let stats = WarmupStats::collect(&m, &[batch.clone()]);
        let t = topo(2);
        let strat = place(&m, &t, StrategyKind::Hybrid);

        let packed_plan = plan_d_packing(&m, &stats).unwrap();
        let packed = build_dag(
            &m,
            &strat,
            &packed_plan,
            None,
            &batch,
            &t,
            &BuildSettings { packing: true, ..Default::default() },
        )
        .unwrap();
        let unpacked_plan = plan_unpacked(&m, &stats).unwrap();
        let unpacked = build_dag(
            &m,
            &strat,
            &unpacked_plan,
            None,
            &batch,
            &t,
            &BuildSettings { packing: false, ..Default::default() },
        )
        .unwrap();
        assert!(packed.node_count() < unpacked.node_count());
        let diff = (packed.total_demand() - unpacked.total_demand()).abs();
        assert!(diff < 1e-6, "demand differs by {diff}");
    }

    #[test]
    fn oom_without_slicing_fixed_by_micro_batches() {
        let m = model(4, 64);
        let skew = SkewSpec::uniform();
        let batch = generate_batch(&m, &skew, 1024, 2);
        let stats = WarmupStats::collect(&m, &[batch.clone()]);
        let mut t = topo(1);
        // Room for ~256 instances of feature maps only.
        t.device_mem_bytes = (m.embedding_bytes_per_instance() * 300.0) as u64;
        let strat = place(&m, &t, StrategyKind::Hybrid);
        let plan = plan_d_packing(&m, &stats).unwrap();

        let full = build_dag(&m, &strat, &plan, None, &batch, &t, &BuildSettings::default());
        assert!(matches!(full, Err(Error::OutOfMemory { .. })));

        let interleave = InterleavePlan {
            micro_batch_size: 256,
            slice_start_layer: StartLayer::Embedding,
            groups: vec![plan.shard_refs()],
            capacity_g: f64::INFINITY,
            excluded: Default::default(),
            warnings: vec![],
        };
        let sliced =
            build_dag(&m, &strat, &plan, Some(&interleave), &batch, &t, &BuildSettings::default());
        assert!(sliced.is_ok());
    }

    #[test]
    fn fusion_is_a_valid_quotient() {
        let m = model(5, 8);
        let batch = generate_batch(&m, &SkewSpec::uniform(), 16, 3);
        let stats = WarmupStats::collect(&m, &[batch.clone()]);
        let plan = plan_d_packing(&m, &stats).unwrap();
        let t = topo(2);
        let strat = place(&m, &t, StrategyKind::Hybrid);
        let unfused = build_dag(
            &m,
            &strat,
            &plan,
            None,
            &batch,
            &t,
            &BuildSettings { packing: false, ..Default::default() },
        )
        .unwrap();
        let (fused, map) =
            crate::packing::apply_k_packing_with_map(&unfused, &crate::packing::classify_kernels());
        assert!(fused.node_count() < unfused.node_count());
        // Every original edge maps to an edge or collapses inside a node.
        for node in &unfused.nodes {
            for &d in &node.deps {
                let (a, b) = (map[d], map[node.id]);
                if a == b {
                    continue;
                }
                assert!(
                    fused.nodes[b].deps.contains(&a),
                    "edge {} -> {} lost in fusion",
                    d,
                    node.id
                );
            }
        }
    }
}
