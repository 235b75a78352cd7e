//! Micro-batch sizing and interleave-group planning.
//!
//! The micro-batch size is the tightest per-instance resource bound across
//! the profiled operators; interleave groups are capacity-bounded sets of
//! pack shards, ordered so that consecutive groups stagger their use of each
//! hardware resource instead of racing for the same one.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::ops::{OpKind, Resource};
use crate::packing::{PackPlan, ShardRef};
use crate::workload::Batch;

/// Cost figures of one operator against its dominant resource.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpProfile {
    pub dominant: Resource,
    /// Budget of the dominant resource, in resource units.
    pub rbound: f64,
    /// Units consumed per training instance.
    pub rinstance: f64,
    /// Units consumed per trained parameter.
    pub rparam: f64,
}

/// Per-op-kind resource profile, measured from warmup iterations.
#[derive(Debug, Clone, Default)]
pub struct ResourceProfile {
    entries: BTreeMap<OpKind, OpProfile>,
}

impl ResourceProfile {
    pub fn insert(&mut self, kind: OpKind, profile: OpProfile) {
        assert!(profile.rbound > 0.0, "rbound must be positive");
        assert!(profile.rinstance >= 0.0 && profile.rparam >= 0.0);
        self.entries.insert(kind, profile);
    }

    pub fn get(&self, kind: OpKind) -> Option<&OpProfile> {
        self.entries.get(&kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.entries.keys().copied()
    }
}

pub const DEFAULT_MAX_MICRO_BATCH: usize = 65_536;

/// Micro-batch size: the floor of the tightest `rbound / rinstance` ratio
/// over the layer's ops. Ops with zero per-instance cost are unbounded and
/// drop out of the minimum; if every op is unbounded the configured maximum
/// is returned.
pub fn estimate_micro_batch(profile: &ResourceProfile, layer_ops: &[OpKind], max_micro_batch: usize) -> usize {
    let mut best: Option<f64> = None;
    for kind in layer_ops {
        let Some(p) = profile.get(*kind) else { continue };
        if p.rinstance == 0.0 {
            continue;
        }
        let bound = p.rbound / p.rinstance;
        best = Some(match best {
            Some(b) => b.min(bound),
            None => bound,
        });
    }
    match best {
        Some(b) => (b.floor() as usize).clamp(1, max_micro_batch),
        None => max_micro_batch,
    }
}

/// Interleave-group capacity in trained parameters: the tightest
/// `rbound / rparam` ratio over the layer's ops. Parameter volume is the
/// cost unit for embedding lookup and exchange.
pub fn capacity_interleave_group(profile: &ResourceProfile, layer_ops: &[OpKind]) -> f64 {
    let mut best: Option<f64> = None;
    for kind in layer_ops {
        let Some(p) = profile.get(*kind) else { continue };
        if p.rparam == 0.0 {
            continue;
        }
        let bound = p.rbound / p.rparam;
        best = Some(match best {
            Some(b) => b.min(bound),
            None => bound,
        });
    }
    best.unwrap_or(f64::INFINITY)
}

/// Which layer the batch is sliced from. Slicing at the embedding layer
/// micro-batches the whole pipeline; slicing at the MLP leaves the embedding
/// at full batch and only pipelines the dense part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartLayer {
    Embedding,
    Mlp,
}

/// One slice of a batch; `start_instance` locates it in the parent batch.
#[derive(Debug, Clone)]
pub struct MicroBatch {
    pub start_instance: usize,
    pub batch: Batch,
}

/// Evenly divide a batch into `ceil(batch_size / bs_micro)` slices whose
/// sizes differ by at most one. Concatenating per-slice pipeline outputs
/// reproduces the full-batch outputs exactly.
pub fn slice_micro_batches(batch: &Batch, bs_micro: usize, _start_layer: StartLayer) -> Result<Vec<MicroBatch>> {
    if bs_micro < 1 {
        return Err(Error::InvalidArgument("micro-batch size must be >= 1".into()));
    }
    let n = batch.batch_size.div_ceil(bs_micro);
    let base = batch.batch_size / n;
    let rem = batch.batch_size % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < rem);
        out.push(MicroBatch { start_instance: start, batch: batch.slice(start, start + len) });
        start += len;
    }
    debug_assert_eq!(start, batch.batch_size);
    Ok(out)
}

/// Capacity-bounded ordered groups of pack shards plus the micro-batch
/// decision. Groups partition the non-excluded shards; excluded shards carry
/// no cross-group control dependencies.
#[derive(Debug, Clone)]
pub struct InterleavePlan {
    pub micro_batch_size: usize,
    pub slice_start_layer: StartLayer,
    pub groups: Vec<Vec<ShardRef>>,
    pub capacity_g: f64,
    pub excluded: BTreeSet<ShardRef>,
    pub warnings: Vec<String>,
}

impl InterleavePlan {
    /// Single-group plan at full batch: the no-interleaving baseline.
    pub fn disabled(plan: &PackPlan, batch_size: usize) -> InterleavePlan {
        InterleavePlan {
            micro_batch_size: batch_size.max(1),
            slice_start_layer: StartLayer::Embedding,
            groups: vec![plan.shard_refs()],
            capacity_g: f64::INFINITY,
            excluded: BTreeSet::new(),
            warnings: Vec::new(),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Execution order: grouped shards in group order, then excluded shards.
    pub fn flat_order(&self) -> Vec<ShardRef> {
        let mut out: Vec<ShardRef> = self.groups.iter().flatten().copied().collect();
        out.extend(self.excluded.iter().copied());
        out
    }

    pub fn report(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "interleave plan: micro_batch={} start={:?} groups={} capacity={:.1}",
            self.micro_batch_size,
            self.slice_start_layer,
            self.groups.len(),
            self.capacity_g
        );
        for (i, g) in self.groups.iter().enumerate() {
            let names: Vec<String> =
                g.iter().map(|r| format!("g{}s{}", r.group, r.shard)).collect();
            let _ = writeln!(out, "  group {i}: {}", names.join(" "));
        }
        if !self.excluded.is_empty() {
            let names: Vec<String> =
                self.excluded.iter().map(|r| format!("g{}s{}", r.group, r.shard)).collect();
            let _ = writeln!(out, "  excluded: {}", names.join(" "));
        }
        for w in &self.warnings {
            let _ = writeln!(out, "  warning: {w}");
        }
        out
    }
}

/// Pack shards into capacity-bounded ordered groups, first-fit-decreasing by
/// shard volume. A shard larger than the capacity becomes a singleton group
/// with a warning. `n_groups_override` rescales the capacity so the plan
/// lands on exactly that many groups (clamped to the shard count).
pub fn plan_k_interleaving(
    plan: &PackPlan,
    capacity: f64,
    excluded: &BTreeSet<ShardRef>,
    n_groups_override: Option<usize>,
) -> Result<InterleavePlan> {
    if !(capacity > 0.0) {
        return Err(Error::InvalidArgument("interleave capacity must be positive".into()));
    }
    let mut shards: Vec<(ShardRef, f64)> = plan
        .shard_refs()
        .into_iter()
        .filter(|r| !excluded.contains(r))
        .map(|r| (r, plan.shard_vparam(r)))
        .collect();
    shards.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let total: f64 = shards.iter().map(|(_, v)| v).sum();
    let mut warnings = Vec::new();
    let mut groups: Vec<(Vec<ShardRef>, f64)> = Vec::new();
    let capacity_eff = match n_groups_override {
        Some(k) => {
            let k = k.clamp(1, shards.len().max(1));
            // Proportionally rescaled capacity; assignment below balances
            // into exactly k groups.
            for _ in 0..k {
                groups.push((Vec::new(), 0.0));
            }
            total / k as f64
        }
        None => capacity,
    };

    if n_groups_override.is_some() {
        // Longest-processing-time into exactly k bins.
        for (r, v) in &shards {
            let (idx, _) = groups
                .iter()
                .enumerate()
                .min_by(|(i, a), (j, b)| a.1.partial_cmp(&b.1).unwrap().then(i.cmp(j)))
                .unwrap();
            groups[idx].0.push(*r);
            groups[idx].1 += v;
        }
        groups.retain(|(g, _)| !g.is_empty());
    } else {
        for (r, v) in &shards {
            if *v > capacity_eff {
                warnings.push(format!(
                    "shard g{}s{} volume {:.1} exceeds group capacity {:.1}; placed alone",
                    r.group, r.shard, v, capacity_eff
                ));
                groups.push((vec![*r], *v));
                continue;
            }
            match groups.iter_mut().find(|(_, load)| *load + v <= capacity_eff) {
                Some(slot) => {
                    slot.0.push(*r);
                    slot.1 += v;
                }
                None => groups.push((vec![*r], *v)),
            }
        }
    }

    Ok(InterleavePlan {
        micro_batch_size: 1,
        slice_start_layer: StartLayer::Embedding,
        groups: groups.into_iter().map(|(g, _)| g).collect(),
        capacity_g: capacity_eff,
        excluded: excluded.clone(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate_batch, Archetype, FeatureField, ModelConfig, SkewSpec};

    fn profile_of(entries: &[(OpKind, f64, f64, f64)]) -> ResourceProfile {
        let mut p = ResourceProfile::default();
        for (kind, rbound, rinstance, rparam) in entries {
            p.insert(
                *kind,
                OpProfile {
                    dominant: Resource::IntraBw,
                    rbound: *rbound,
                    rinstance: *rinstance,
                    rparam: *rparam,
                },
            );
        }
        p
    }

    #[test]
    fn micro_batch_single_op() {
        let p = profile_of(&[(OpKind::Gather, 32e9, 1e6, 1.0)]);
        assert_eq!(estimate_micro_batch(&p, &[OpKind::Gather], DEFAULT_MAX_MICRO_BATCH), 32_000);
    }

    #[test]
    fn micro_batch_takes_the_min() {
        let p = profile_of(&[(OpKind::Gather, 32e9, 1e6, 1.0), (OpKind::Shuffle, 16e9, 2e6, 1.0)]);
        assert_eq!(
            estimate_micro_batch(&p, &[OpKind::Gather, OpKind::Shuffle], DEFAULT_MAX_MICRO_BATCH),
            8_000
        );
    }

    #[test]
    fn micro_batch_unbounded_ops_fall_back_to_max() {
        let p = profile_of(&[(OpKind::Gather, 32e9, 0.0, 1.0)]);
        assert_eq!(estimate_micro_batch(&p, &[OpKind::Gather], 4096), 4096);
    }

    #[test]
    fn capacity_examples() {
        let p = profile_of(&[(OpKind::Gather, 1e9, 1.0, 4.0)]);
        assert!((capacity_interleave_group(&p, &[OpKind::Gather]) - 2.5e8).abs() < 1e-3);

        let p = profile_of(&[(OpKind::Gather, 1e9, 1.0, 4.0), (OpKind::Shuffle, 6e8, 1.0, 4.0)]);
        assert!(
            (capacity_interleave_group(&p, &[OpKind::Gather, OpKind::Shuffle]) - 1.5e8).abs()
                < 1e-3
        );
    }

    #[test]
    fn capacity_is_homogeneous_in_rbound() {
        let p1 = profile_of(&[(OpKind::Gather, 1e9, 1.0, 4.0), (OpKind::Shuffle, 5e8, 1.0, 2.0)]);
        let p2 = profile_of(&[(OpKind::Gather, 3e9, 1.0, 4.0), (OpKind::Shuffle, 1.5e9, 1.0, 2.0)]);
        let ops = [OpKind::Gather, OpKind::Shuffle];
        let c1 = capacity_interleave_group(&p1, &ops);
        let c2 = capacity_interleave_group(&p2, &ops);
        assert!((c2 / c1 - 3.0).abs() < 1e-9);
    }

    fn tiny_batch(batch_size: usize) -> Batch {
        let model = ModelConfig {
            fields: vec![FeatureField {
                name: "a".into(),
                table_ref: "a".into(),
                dim: 4,
                ids_per_instance: 2,
                vocab_size: 100,
            }],
            interaction_modules: vec![],
            mlp_cost_per_instance: 0.0,
            mlp_params: 0,
            archetype: Archetype::IoMemory,
        };
        generate_batch(&model, &SkewSpec::uniform(), batch_size, 5)
    }

    #[test]
    fn slicing_is_even() {
        let b = tiny_batch(100);
        let slices = slice_micro_batches(&b, 40, StartLayer::Embedding).unwrap();
        let sizes: Vec<usize> = slices.iter().map(|m| m.batch.batch_size).collect();
        assert_eq!(sizes, vec![34, 33, 33]);
        assert_eq!(slices.iter().map(|m| m.batch.total_ids()).sum::<usize>(), b.total_ids());
    }

    #[test]
    fn oversized_micro_batch_single_slice() {
        let b = tiny_batch(10);
        let slices = slice_micro_batches(&b, 64, StartLayer::Mlp).unwrap();
        assert_eq!(slices.len(), 1);
        assert_eq!(slices[0].batch.batch_size, 10);
    }

    #[test]
    fn zero_micro_batch_rejected() {
        let b = tiny_batch(4);
        assert!(slice_micro_batches(&b, 0, StartLayer::Embedding).is_err());
    }
}
