//! Distributed training strategies as placement rules plus analytic
//! communication cost models.
//!
//! Parameter-server exchange serializes at the server uplink; data-parallel
//! gradient aggregation uses the ring model; model-parallel embedding
//! exchange uses a congestion-free AllToAllv bound. The hybrid strategy
//! partitions embeddings (model-parallel) and replicates the dense layers
//! (data-parallel, synchronous).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::workload::ModelConfig;

/// Per-executor hardware budget. Executors are homogeneous; device memory is
/// a capacity, the rest are rates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExecutorTopology {
    pub n_executors: usize,
    /// Cost units per second.
    pub compute_rate: f64,
    /// Bytes per second between host memory and the device.
    pub intra_bw: f64,
    /// Bytes per second between executors.
    pub inter_bw: f64,
    pub device_mem_bytes: u64,
    pub hot_storage_bytes: u64,
    /// Server count used by the parameter-server strategy.
    pub ps_servers: usize,
}

impl ExecutorTopology {
    pub fn validate(&self) -> crate::error::Result<()> {
        if self.n_executors < 1
            || self.compute_rate <= 0.0
            || self.intra_bw <= 0.0
            || self.inter_bw <= 0.0
            || self.ps_servers < 1
        {
            return Err(crate::error::Error::InvalidArgument(
                "topology rates must be positive and executor/server counts >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Ps,
    Dp,
    Mp,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensePlacement {
    Replicated,
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    Sync,
    Async,
}

/// Placement decision for a whole model under one strategy.
#[derive(Debug, Clone)]
pub struct StrategyPlan {
    pub kind: StrategyKind,
    /// (table, shard) -> executor. Replicated tables list one entry per
    /// executor-local copy.
    pub embedding_placement: BTreeMap<(String, usize), usize>,
    pub dense_placement: DensePlacement,
    pub sync: SyncMode,
}

impl StrategyPlan {
    /// Partitioned embeddings shard by the `id % n` placement rule (shard j
    /// lives on executor j).
    pub fn embeddings_partitioned(&self) -> bool {
        matches!(self.kind, StrategyKind::Mp | StrategyKind::Hybrid)
    }
}

pub fn place(model: &ModelConfig, topology: &ExecutorTopology, kind: StrategyKind) -> StrategyPlan {
    let n = topology.n_executors;
    let mut placement = BTreeMap::new();
    let mut tables: Vec<&str> = model.fields.iter().map(|f| f.table_ref.as_str()).collect();
    tables.dedup();
    match kind {
        StrategyKind::Mp | StrategyKind::Hybrid => {
            for t in &tables {
                for j in 0..n {
                    placement.insert((t.to_string(), j), j);
                }
            }
        }
        StrategyKind::Dp => {
            // Full replica on every executor.
            for t in &tables {
                for j in 0..n {
                    placement.insert((t.to_string(), j), j);
                }
            }
        }
        StrategyKind::Ps => {
            // One logical shard per table, held by the server cost center
            // (modeled as an extra executor index).
            for t in &tables {
                placement.insert((t.to_string(), 0), n);
            }
        }
    }
    let (dense_placement, sync) = match kind {
        StrategyKind::Ps => (DensePlacement::Server, SyncMode::Async),
        StrategyKind::Dp | StrategyKind::Hybrid => (DensePlacement::Replicated, SyncMode::Sync),
        StrategyKind::Mp => (DensePlacement::Replicated, SyncMode::Sync),
    };
    StrategyPlan { kind, embedding_placement: placement, dense_placement, sync }
}

/// Congestion-free AllToAllv bound: every executor is limited by the larger
/// of its total send and total receive volume over the inter-executor link.
pub fn cost_alltoallv(bytes_matrix: &[Vec<f64>], topology: &ExecutorTopology) -> f64 {
    let n = bytes_matrix.len();
    let mut worst = 0.0f64;
    for e in 0..n {
        let sent: f64 = bytes_matrix[e].iter().enumerate().filter(|(j, _)| *j != e).map(|(_, b)| b).sum();
        let recv: f64 = (0..n).filter(|&j| j != e).map(|j| bytes_matrix[j][e]).sum();
        worst = worst.max(sent.max(recv) / topology.inter_bw);
    }
    worst
}

/// Ring gradient aggregation: `2 (n-1)/n * bytes / inter_bw`.
pub fn cost_allreduce(bytes: f64, n: usize, topology: &ExecutorTopology) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    2.0 * (n as f64 - 1.0) / n as f64 * bytes / topology.inter_bw
}

/// Parameter-server exchange: pulls and pushes serialize at the server
/// uplink, spread across the configured server count. Asynchrony overlaps
/// compute but cannot widen the server link.
pub fn cost_ps_exchange(
    pull_bytes: f64,
    push_bytes: f64,
    n_workers: usize,
    topology: &ExecutorTopology,
) -> f64 {
    let _ = n_workers;
    (pull_bytes + push_bytes) / (topology.inter_bw * topology.ps_servers as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{Archetype, FeatureField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn topo(n: usize, inter_bw: f64) -> ExecutorTopology {
        ExecutorTopology {
            n_executors: n,
            compute_rate: 1e12,
            intra_bw: 1e10,
            inter_bw,
            device_mem_bytes: 1 << 32,
            hot_storage_bytes: 1 << 28,
            ps_servers: 1,
        }
    }

    fn model() -> ModelConfig {
        ModelConfig {
            fields: vec![FeatureField {
                name: "a".into(),
                table_ref: "a".into(),
                dim: 8,
                ids_per_instance: 1,
                vocab_size: 100,
            }],
            interaction_modules: vec![],
            mlp_cost_per_instance: 1.0,
            mlp_params: 10,
            archetype: Archetype::Communication,
        }
    }

    #[test]
    fn placement_shapes() {
        let m = model();
        let t = topo(4, 1e9);
        let hybrid = place(&m, &t, StrategyKind::Hybrid);
        assert!(hybrid.embeddings_partitioned());
        assert_eq!(hybrid.dense_placement, DensePlacement::Replicated);
        assert_eq!(hybrid.sync, SyncMode::Sync);

        let ps = place(&m, &t, StrategyKind::Ps);
        assert_eq!(ps.sync, SyncMode::Async);
        assert_eq!(ps.dense_placement, DensePlacement::Server);
        assert_eq!(ps.embedding_placement[&("a".to_string(), 0)], 4);
    }

    #[test]
    fn alltoallv_examples() {
        let t = topo(2, 1e9);
        assert_eq!(cost_alltoallv(&[vec![0.0, 0.0], vec![0.0, 0.0]], &t), 0.0);
        let m = vec![vec![0.0, 1e9], vec![1e9, 0.0]];
        assert!((cost_alltoallv(&m, &t) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alltoallv_matches_bruteforce_oracle() {
        let t = topo(5, 3.7e8);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let m: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..5).map(|_| rng.gen_range(0.0..1e8)).collect())
                .collect();
            let got = cost_alltoallv(&m, &t);
            // Brute force over rows/columns.
            let mut expect = 0.0f64;
            for e in 0..5 {
                let mut sent = 0.0;
                let mut recv = 0.0;
                for j in 0..5 {
                    if j != e {
                        sent += m[e][j];
                        recv += m[j][e];
                    }
                }
                expect = expect.max(sent.max(recv) / t.inter_bw);
            }
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn allreduce_examples() {
        let t = topo(2, 1e9);
        assert_eq!(cost_allreduce(1e9, 1, &t), 0.0);
        assert!((cost_allreduce(1e9, 2, &t) - 1.0).abs() < 1e-12);
        let once = cost_allreduce(3e8, 4, &t);
        let twice = cost_allreduce(6e8, 4, &t);
        assert!((twice / once - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cost_functions_nonnegative_monotone_zero_at_zero() {
        let t = topo(4, 2e9);
        assert_eq!(cost_allreduce(0.0, 4, &t), 0.0);
        assert_eq!(cost_ps_exchange(0.0, 0.0, 4, &t), 0.0);
        let mut prev = 0.0;
        for i in 1..10 {
            let b = i as f64 * 1e7;
            let c = cost_allreduce(b, 4, &t);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn ps_server_link_dominates_alltoallv() {
        // Equal total payload across both primitives, n = 8.
        let t = topo(8, 1e9);
        let per_pair = 1e8;
        let m: Vec<Vec<f64>> = (0..8)
            .map(|e| (0..8).map(|j| if j == e { 0.0 } else { per_pair }).collect())
            .collect();
        let total: f64 = m.iter().flatten().sum();
        let a2a = cost_alltoallv(&m, &t);
        let ps = cost_ps_exchange(total / 2.0, total / 2.0, 8, &t);
        assert!(ps >= a2a, "ps {ps} < alltoallv {a2a}");
    }
}
