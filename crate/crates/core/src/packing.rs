//! Dimension-based packing of embedding lookups and kernel-group-aware
//! fusion.
//!
//! Fields whose tables share an embedding dimension are packed into one
//! group so a single operation processes them all. Groups whose estimated
//! parameter volume sits above the average are split evenly into shards,
//! re-evaluating until no shard stays above the running average; under
//! uniform traffic this splits a dim-32 group four ways against a dim-8
//! baseline. Kernels are classified by their dominant resource and only the
//! unique+partition and shuffle+stitch pairs fuse, keeping distinct resource
//! classes interleavable.

use std::collections::{BTreeMap, BTreeSet};

use crate::dag::{OpDag, OpNode};
use crate::error::{Error, Result};
use crate::ops::{KernelClass, OpKind};
use crate::workload::{Batch, ModelConfig};

/// Empirical per-field ID frequencies measured over warmup batches.
/// Frequencies are globally normalized: `freq(field, id) = count / n_total_ids`.
#[derive(Debug, Clone)]
pub struct WarmupStats {
    pub n_total_ids: u64,
    /// Number of warmup batches the counts were accumulated over.
    pub n_batches: u64,
    field_names: Vec<String>,
    counts: Vec<BTreeMap<u64, u64>>,
}

impl WarmupStats {
    pub fn collect(model: &ModelConfig, batches: &[Batch]) -> WarmupStats {
        let field_names: Vec<String> = model.fields.iter().map(|f| f.name.clone()).collect();
        let mut counts: Vec<BTreeMap<u64, u64>> = vec![BTreeMap::new(); field_names.len()];
        let mut n_total = 0u64;
        for batch in batches {
            for (fi, name) in field_names.iter().enumerate() {
                if let Some(fids) = batch.field_ids(name) {
                    for (_, id) in &fids.pairs {
                        *counts[fi].entry(*id).or_insert(0) += 1;
                        n_total += 1;
                    }
                }
            }
        }
        WarmupStats {
            n_total_ids: n_total,
            n_batches: batches.len().max(1) as u64,
            field_names,
            counts,
        }
    }

    /// ID occurrences of one training step: the cumulative count averaged
    /// over the warmup batches.
    pub fn ids_per_step(&self) -> u64 {
        self.n_total_ids / self.n_batches.max(1)
    }

    /// Exact stats for perfectly uniform traffic: every field carries the
    /// same mass.
    pub fn uniform(model: &ModelConfig, per_field_count: u64) -> WarmupStats {
        let field_names: Vec<String> = model.fields.iter().map(|f| f.name.clone()).collect();
        let counts = field_names.iter().map(|_| BTreeMap::from([(0u64, per_field_count)])).collect();
        WarmupStats {
            n_total_ids: per_field_count * field_names.len() as u64,
            n_batches: 1,
            field_names,
            counts,
        }
    }

    pub fn from_counts(entries: Vec<(String, BTreeMap<u64, u64>)>, n_total_ids: u64) -> WarmupStats {
        let (field_names, counts) = entries.into_iter().unzip();
        WarmupStats { n_total_ids, n_batches: 1, field_names, counts }
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.field_names.iter().position(|n| n == name)
    }

    /// Summed frequency of every ID seen for this field.
    pub fn field_mass(&self, name: &str) -> Result<f64> {
        let idx = self
            .field_index(name)
            .ok_or_else(|| Error::MissingFrequency(name.to_string()))?;
        if self.n_total_ids == 0 {
            return Ok(0.0);
        }
        let c: u64 = self.counts[idx].values().sum();
        Ok(c as f64 / self.n_total_ids as f64)
    }

    pub fn freq(&self, name: &str, id: u64) -> Result<f64> {
        let idx = self
            .field_index(name)
            .ok_or_else(|| Error::MissingFrequency(name.to_string()))?;
        if self.n_total_ids == 0 {
            return Ok(0.0);
        }
        Ok(self.counts[idx].get(&id).copied().unwrap_or(0) as f64 / self.n_total_ids as f64)
    }
}

/// All fields sharing one embedding dimension, with the shard layout the
/// volume estimate produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PackGroup {
    pub dim: usize,
    pub member_fields: Vec<String>,
    pub shards: Vec<Vec<String>>,
    pub vparam: f64,
}

/// Identifies one pack shard: `groups[group].shards[shard]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShardRef {
    pub group: usize,
    pub shard: usize,
}

#[derive(Debug, Clone)]
pub struct PackPlan {
    pub groups: Vec<PackGroup>,
    pub n_total_ids: u64,
    pub stats: WarmupStats,
    excluded_fields: BTreeSet<String>,
}

impl PackPlan {
    pub fn shard_refs(&self) -> Vec<ShardRef> {
        let mut refs = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            for s in 0..group.shards.len() {
                refs.push(ShardRef { group: g, shard: s });
            }
        }
        refs
    }

    pub fn n_shards(&self) -> usize {
        self.groups.iter().map(|g| g.shards.len()).sum()
    }

    pub fn shard_members(&self, r: ShardRef) -> &[String] {
        &self.groups[r.group].shards[r.shard]
    }

    pub fn shard_dim(&self, r: ShardRef) -> usize {
        self.groups[r.group].dim
    }

    /// Estimated parameter volume of one shard.
    pub fn shard_vparam(&self, r: ShardRef) -> f64 {
        let dim = self.groups[r.group].dim;
        self.shard_members(r)
            .iter()
            .map(|f| {
                dim as f64 * self.stats.field_mass(f).unwrap_or(0.0) * self.n_total_ids as f64
            })
            .sum()
    }

    /// Shards that must stay free of cross-group control dependencies.
    pub fn excluded_shards(&self) -> BTreeSet<ShardRef> {
        let mut out = BTreeSet::new();
        for r in self.shard_refs() {
            let members = self.shard_members(r);
            if !members.is_empty() && members.iter().all(|m| self.excluded_fields.contains(m)) {
                out.insert(r);
            }
        }
        out
    }

    pub fn field_shard(&self, field: &str) -> Option<ShardRef> {
        for r in self.shard_refs() {
            if self.shard_members(r).iter().any(|m| m == field) {
                return Some(r);
            }
        }
        None
    }

    /// Every field of the batch must appear in exactly one shard.
    pub fn check_covers(&self, batch: &Batch) -> Result<()> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for g in &self.groups {
            for shard in &g.shards {
                for f in shard {
                    *seen.entry(f.as_str()).or_insert(0) += 1;
                }
            }
        }
        for f in batch.fields() {
            match seen.get(f.field.as_str()) {
                Some(1) => {}
                Some(n) => {
                    return Err(Error::PlanMismatch(format!(
                        "field `{}` appears in {n} shards",
                        f.field
                    )))
                }
                None => {
                    return Err(Error::PlanMismatch(format!("field `{}` not planned", f.field)))
                }
            }
        }
        Ok(())
    }

    /// Human-readable plan summary.
    pub fn report(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "pack plan: fields={} groups={} shards={} n_total_ids={}",
            self.groups.iter().map(|g| g.member_fields.len()).sum::<usize>(),
            self.groups.len(),
            self.n_shards(),
            self.n_total_ids
        );
        for (g, group) in self.groups.iter().enumerate() {
            let _ = writeln!(
                out,
                "  group {g}: dim={} members={} shards={} vparam={:.1}",
                group.dim,
                group.member_fields.len(),
                group.shards.len(),
                group.vparam
            );
            for (s, shard) in group.shards.iter().enumerate() {
                let r = ShardRef { group: g, shard: s };
                let shown: Vec<&str> = shard.iter().take(6).map(|f| f.as_str()).collect();
                let suffix = if shard.len() > 6 {
                    format!(" +{} more", shard.len() - 6)
                } else {
                    String::new()
                };
                let excl = if self.excluded_shards().contains(&r) { " [excluded]" } else { "" };
                let _ = writeln!(
                    out,
                    "    shard {s}: vparam={:.1} fields: {}{}{}",
                    self.shard_vparam(r),
                    shown.join(" "),
                    suffix,
                    excl
                );
            }
        }
        out
    }
}

/// Parameter-volume estimate of a packed group: the total ID count times the
/// frequency-weighted dimension across member tables.
pub fn calc_vparam(group: &PackGroup, stats: &WarmupStats, n_total_ids: u64) -> Result<f64> {
    let mut sum = 0.0;
    for field in &group.member_fields {
        sum += group.dim as f64 * stats.field_mass(field)?;
    }
    Ok(n_total_ids as f64 * sum)
}

struct WorkGroup {
    dim: usize,
    shards: Vec<Vec<String>>,
}

fn field_vparam(dim: usize, mass: f64, n_total: u64) -> f64 {
    dim as f64 * mass * n_total as f64
}

pub fn plan_d_packing(model: &ModelConfig, stats: &WarmupStats) -> Result<PackPlan> {
    plan_d_packing_with_exclusions(model, stats, &BTreeSet::new())
}

/// Group fields by dimension and split overloaded groups. Fields listed in
/// `excluded_fields` get dedicated groups so the interleave planner can leave
/// them free of cross-group dependencies.
pub fn plan_d_packing_with_exclusions(
    model: &ModelConfig,
    stats: &WarmupStats,
    excluded_fields: &BTreeSet<String>,
) -> Result<PackPlan> {
    if model.fields.is_empty() {
        return Err(Error::InvalidArgument("cannot plan a model with zero fields".into()));
    }
    let mut masses: BTreeMap<&str, f64> = BTreeMap::new();
    for f in &model.fields {
        masses.insert(f.name.as_str(), stats.field_mass(&f.name)?);
    }
    let n_total = stats.ids_per_step();

    // One work group per distinct dim, plus one per excluded field.
    let mut by_dim: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let mut excluded_groups: Vec<WorkGroup> = Vec::new();
    for f in &model.fields {
        if excluded_fields.contains(&f.name) {
            excluded_groups.push(WorkGroup { dim: f.dim, shards: vec![vec![f.name.clone()]] });
        } else {
            by_dim.entry(f.dim).or_default().push(f.name.clone());
        }
    }
    let mut work: Vec<WorkGroup> = by_dim
        .into_iter()
        .map(|(dim, members)| WorkGroup { dim, shards: vec![members] })
        .collect();
    work.extend(excluded_groups);

    // Groups above the average volume split evenly, each shard sized to
    // carry about as much as a typical below-average group. Under uniform
    // traffic with equal table counts this turns one dim-32 group against a
    // dim-8 baseline into exactly four shards.
    let group_v: Vec<f64> = work
        .iter()
        .map(|g| {
            g.shards
                .iter()
                .flatten()
                .map(|f| field_vparam(g.dim, masses[f.as_str()], n_total))
                .sum()
        })
        .collect();
    let mean = group_v.iter().sum::<f64>() / group_v.len().max(1) as f64;
    let below: Vec<f64> = group_v.iter().copied().filter(|v| *v <= mean * (1.0 + 1e-9)).collect();
    let target = below.iter().sum::<f64>() / below.len().max(1) as f64;
    if mean > 0.0 && target > 0.0 {
        for (g, &v) in work.iter_mut().zip(&group_v) {
            let members = g.shards[0].len();
            if v <= mean * (1.0 + 1e-9) || members < 2 {
                continue;
            }
            let parts = ((v / target).round() as usize).clamp(2, members);
            // Round-robin by descending per-field volume to balance the
            // resulting shards.
            let mut order: Vec<String> = g.shards[0].clone();
            order.sort_by(|a, b| {
                let va = field_vparam(g.dim, masses[a.as_str()], n_total);
                let vb = field_vparam(g.dim, masses[b.as_str()], n_total);
                vb.partial_cmp(&va).unwrap().then(a.cmp(b))
            });
            let mut split: Vec<Vec<String>> = vec![Vec::new(); parts];
            for (i, f) in order.into_iter().enumerate() {
                split[i % parts].push(f);
            }
            g.shards = split;
        }
    }

    let mut groups = Vec::with_capacity(work.len());
    for g in work {
        let member_fields: Vec<String> = g.shards.iter().flatten().cloned().collect();
        let group = PackGroup { dim: g.dim, member_fields, shards: g.shards, vparam: 0.0 };
        let vparam = calc_vparam(&group, stats, n_total)?;
        groups.push(PackGroup { vparam, ..group });
    }
    Ok(PackPlan {
        groups,
        n_total_ids: n_total,
        stats: stats.clone(),
        excluded_fields: excluded_fields.clone(),
    })
}

/// Degenerate plan used when packing is disabled: every field is its own
/// group and shard.
pub fn plan_unpacked(model: &ModelConfig, stats: &WarmupStats) -> Result<PackPlan> {
    if model.fields.is_empty() {
        return Err(Error::InvalidArgument("cannot plan a model with zero fields".into()));
    }
    let mut groups = Vec::with_capacity(model.fields.len());
    for f in &model.fields {
        let group = PackGroup {
            dim: f.dim,
            member_fields: vec![f.name.clone()],
            shards: vec![vec![f.name.clone()]],
            vparam: 0.0,
        };
        let vparam = calc_vparam(&group, stats, stats.ids_per_step())?;
        groups.push(PackGroup { vparam, ..group });
    }
    Ok(PackPlan {
        groups,
        n_total_ids: stats.ids_per_step(),
        stats: stats.clone(),
        excluded_fields: BTreeSet::new(),
    })
}

/// Total classification of every op kind into its kernel group.
pub fn classify_kernels() -> BTreeMap<OpKind, KernelClass> {
    OpKind::ALL.iter().map(|&k| (k, k.kernel_class())).collect()
}

const FUSION_RULES: [(OpKind, OpKind, OpKind); 2] = [
    (OpKind::Unique, OpKind::Partition, OpKind::UniquePartition),
    (OpKind::Shuffle, OpKind::Stitch, OpKind::ShuffleStitch),
];

/// Fuse adjacent fusible pairs within each shard pipeline. Only the
/// unique+partition and shuffle+stitch pairs fuse; the latter absorbs the
/// stitch by writing a stitched output straight from the shuffle kernel.
/// Returns the fused graph and the old-node to new-node mapping.
pub fn apply_k_packing_with_map(
    dag: &OpDag,
    classes: &BTreeMap<OpKind, KernelClass>,
) -> (OpDag, Vec<usize>) {
    let n = dag.nodes.len();
    let mut successors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for node in &dag.nodes {
        for &d in &node.deps {
            successors[d].push(node.id);
        }
    }
    // absorbed_into[v] = u means v is merged into u.
    let mut absorbed_into: Vec<Option<usize>> = vec![None; n];
    let mut fused_kind: Vec<Option<OpKind>> = vec![None; n];
    for u in 0..n {
        if absorbed_into[u].is_some() || fused_kind[u].is_some() {
            continue;
        }
        if successors[u].len() != 1 {
            continue;
        }
        let v = successors[u][0];
        let (nu, nv) = (&dag.nodes[u], &dag.nodes[v]);
        let rule = FUSION_RULES.iter().find(|(a, b, _)| *a == nu.kind && *b == nv.kind);
        let Some((_, _, fused)) = rule else { continue };
        if nv.deps.len() != 1 || nu.executor != nv.executor || nu.tag != nv.tag {
            continue;
        }
        debug_assert!(classes.contains_key(&nu.kind) && classes.contains_key(&nv.kind));
        absorbed_into[v] = Some(u);
        fused_kind[u] = Some(*fused);
    }

    let mut mapping = vec![usize::MAX; n];
    let mut nodes: Vec<OpNode> = Vec::new();
    for u in 0..n {
        if absorbed_into[u].is_some() {
            continue;
        }
        let id = nodes.len();
        mapping[u] = id;
        let src = &dag.nodes[u];
        let (kind, demand, overhead) = match fused_kind[u] {
            Some(k) => {
                let v = successors[u][0];
                (
                    k,
                    src.demand + dag.nodes[v].demand,
                    src.launch_overhead.max(dag.nodes[v].launch_overhead),
                )
            }
            None => (src.kind, src.demand, src.launch_overhead),
        };
        nodes.push(OpNode {
            id,
            kind,
            class: kind.kernel_class(),
            executor: src.executor,
            resource: kind.kernel_class().resource(),
            demand,
            deps: Vec::new(),
            launch_overhead: overhead,
            tag: src.tag,
        });
    }
    for (old, &new_id) in mapping.iter().enumerate() {
        if new_id == usize::MAX {
            continue;
        }
        // Deps come from the surviving node plus anything its absorbed
        // partner depended on beyond the pair itself.
        let mut dep_sources: Vec<usize> = dag.nodes[old].deps.clone();
        if fused_kind[old].is_some() {
            let v = successors[old][0];
            dep_sources.extend(dag.nodes[v].deps.iter().copied().filter(|&d| d != old));
        }
        let mut deps: Vec<usize> = dep_sources
            .into_iter()
            .map(|d| match absorbed_into[d] {
                Some(host) => mapping[host],
                None => mapping[d],
            })
            .collect();
        deps.sort_unstable();
        deps.dedup();
        nodes[new_id].deps = deps;
    }
    let map: Vec<usize> = (0..n)
        .map(|u| match absorbed_into[u] {
            Some(host) => mapping[host],
            None => mapping[u],
        })
        .collect();
    (OpDag { nodes }, map)
}

pub fn apply_k_packing(dag: &OpDag, classes: &BTreeMap<OpKind, KernelClass>) -> OpDag {
    apply_k_packing_with_map(dag, classes).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{Archetype, FeatureField};

    fn model_with_dims(dims: &[(usize, usize)]) -> ModelConfig {
        // (dim, how many fields of that dim)
        let mut fields = Vec::new();
        for (dim, count) in dims {
            for i in 0..*count {
                let name = format!("f{dim}_{i}");
                fields.push(FeatureField {
                    name: name.clone(),
                    table_ref: name,
                    dim: *dim,
                    ids_per_instance: 1,
                    vocab_size: 1000,
                });
            }
        }
        ModelConfig {
            fields,
            interaction_modules: vec![],
            mlp_cost_per_instance: 0.0,
            mlp_params: 0,
            archetype: Archetype::IoMemory,
        }
    }

    #[test]
    fn vparam_empty_group_is_zero() {
        let stats = WarmupStats::from_counts(vec![], 100);
        let group = PackGroup { dim: 8, member_fields: vec![], shards: vec![], vparam: 0.0 };
        assert_eq!(calc_vparam(&group, &stats, 100).unwrap(), 0.0);
    }

    #[test]
    fn vparam_hand_example() {
        let stats = WarmupStats::from_counts(
            vec![
                ("a".into(), BTreeMap::from([(0u64, 30u64), (1, 20)])),
                ("b".into(), BTreeMap::from([(7u64, 50u64)])),
            ],
            100,
        );
        let group = PackGroup {
            dim: 4,
            member_fields: vec!["a".into(), "b".into()],
            shards: vec![vec!["a".into(), "b".into()]],
            vparam: 0.0,
        };
        assert_eq!(calc_vparam(&group, &stats, 100).unwrap(), 400.0);
    }

    #[test]
    fn vparam_linear_in_dim() {
        let model = model_with_dims(&[(8, 3), (32, 3)]);
        let stats = WarmupStats::uniform(&model, 100);
        let plan = plan_d_packing(&model, &stats).unwrap();
        let g8 = plan.groups.iter().find(|g| g.dim == 8).unwrap();
        let g32 = plan.groups.iter().find(|g| g.dim == 32).unwrap();
        assert!((g32.vparam / g8.vparam - 4.0).abs() < 1e-9);
    }

    #[test]
    fn single_dim_single_group() {
        let model = model_with_dims(&[(8, 5)]);
        let stats = WarmupStats::uniform(&model, 50);
        let plan = plan_d_packing(&model, &stats).unwrap();
        assert_eq!(plan.groups.len(), 1);
        assert_eq!(plan.groups[0].shards.len(), 1);
    }

    #[test]
    fn uniform_dim32_group_splits_into_four() {
        let model = model_with_dims(&[(8, 8), (32, 8)]);
        let stats = WarmupStats::uniform(&model, 100);
        let plan = plan_d_packing(&model, &stats).unwrap();
        let g8 = plan.groups.iter().find(|g| g.dim == 8).unwrap();
        let g32 = plan.groups.iter().find(|g| g.dim == 32).unwrap();
        assert_eq!(g8.shards.len(), 1);
        assert_eq!(g32.shards.len(), 4);
        for shard in &g32.shards {
            assert_eq!(shard.len(), 2); // a quarter of the tables each
        }
    }

    #[test]
    fn every_field_covered_once() {
        let model = model_with_dims(&[(8, 68), (16, 68), (32, 68)]);
        let batches = vec![crate::workload::generate_batch(
            &model,
            &crate::workload::resolve_skew(0.2, 0.7, 1000).unwrap(),
            256,
            3,
        )];
        let stats = WarmupStats::collect(&model, &batches);
        let plan = plan_d_packing(&model, &stats).unwrap();
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for g in &plan.groups {
            for s in &g.shards {
                for f in s {
                    *seen.entry(f.as_str()).or_insert(0) += 1;
                }
            }
        }
        assert_eq!(seen.len(), 204);
        assert!(seen.values().all(|&c| c == 1));
        assert!(plan.groups.len() >= 3);
    }

    #[test]
    fn excluded_fields_get_dedicated_shards() {
        let model = model_with_dims(&[(8, 4)]);
        let excluded: BTreeSet<String> = ["f8_0".to_string()].into();
        let stats = WarmupStats::uniform(&model, 10);
        let plan = plan_d_packing_with_exclusions(&model, &stats, &excluded).unwrap();
        let excl = plan.excluded_shards();
        assert_eq!(excl.len(), 1);
        let r = *excl.iter().next().unwrap();
        assert_eq!(plan.shard_members(r), &["f8_0".to_string()]);
    }

    #[test]
    fn classification_is_total() {
        let classes = classify_kernels();
        assert_eq!(classes.len(), OpKind::ALL.len());
        assert_eq!(classes[&OpKind::Gather], KernelClass::Memory);
        assert_eq!(classes[&OpKind::Shuffle], KernelClass::Communication);
        assert_eq!(classes[&OpKind::Mlp], KernelClass::Computation);
    }
}
