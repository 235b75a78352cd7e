//! Deterministic discrete-event execution of an operation graph.
//!
//! Each (executor, resource) pair is a serial server. A node becomes ready
//! when all dependencies finished; its duration is
//! `launch_overhead + demand / rate`. Time advances through completion
//! events: at every event time all completions are applied first, then each
//! idle server starts its lowest-id ready node. Ties therefore resolve by
//! node id alone, making traces reproducible event for event.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Write;

use crate::dag::OpDag;
use crate::error::{Error, Result};
use crate::ops::{OpKind, Resource};
use crate::strategy::ExecutorTopology;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub node: usize,
    pub kind: OpKind,
    pub executor: usize,
    pub resource: Resource,
    pub start: f64,
    pub end: f64,
    pub demand: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimTrace {
    pub events: Vec<TraceEvent>,
    pub makespan: f64,
    /// Busy seconds per (executor, resource) server.
    pub busy: BTreeMap<(usize, Resource), f64>,
}

impl SimTrace {
    /// Newline-delimited records for external timeline plotting.
    pub fn export<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "node,kind,executor,resource,start,end")?;
        for e in &self.events {
            writeln!(w, "{},{},{},{},{:.9},{:.9}", e.node, e.kind, e.executor, e.resource, e.start, e.end)?;
        }
        Ok(())
    }
}

pub fn resource_rate(topology: &ExecutorTopology, resource: Resource) -> f64 {
    match resource {
        Resource::Compute => topology.compute_rate,
        Resource::IntraBw => topology.intra_bw,
        Resource::InterBw => topology.inter_bw,
    }
}

#[derive(PartialEq)]
struct TimeKey(f64, usize);

impl Eq for TimeKey {}

impl PartialOrd for TimeKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TimeKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Run the list-scheduling simulation over the graph.
pub fn simulate(dag: &OpDag, topology: &ExecutorTopology) -> Result<SimTrace> {
    let n = dag.nodes.len();
    let mut indegree = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for node in &dag.nodes {
        for &d in &node.deps {
            succ[d].push(node.id);
            indegree[node.id] += 1;
        }
    }

    type Server = (usize, Resource);
    let mut ready: BTreeMap<Server, BinaryHeap<Reverse<usize>>> = BTreeMap::new();
    let mut running: BTreeMap<Server, bool> = BTreeMap::new();
    let mut events: BinaryHeap<Reverse<TimeKey>> = BinaryHeap::new();
    let mut trace: Vec<TraceEvent> = Vec::with_capacity(n);
    let mut node_end = vec![0.0f64; n];
    let mut done = 0usize;

    let server_of = |id: usize| -> Server { (dag.nodes[id].executor, dag.nodes[id].resource) };
    let duration = |id: usize| -> f64 {
        let node = &dag.nodes[id];
        node.launch_overhead + node.demand / resource_rate(topology, node.resource)
    };

    let mut touched: Vec<Server> = Vec::new();
    for node in &dag.nodes {
        if indegree[node.id] == 0 {
            ready.entry(server_of(node.id)).or_default().push(Reverse(node.id));
            touched.push(server_of(node.id));
        }
    }

    let dispatch = |t: f64,
                        touched: &mut Vec<Server>,
                        ready: &mut BTreeMap<Server, BinaryHeap<Reverse<usize>>>,
                        running: &mut BTreeMap<Server, bool>,
                        events: &mut BinaryHeap<Reverse<TimeKey>>,
                        trace: &mut Vec<TraceEvent>,
                        node_end: &mut Vec<f64>| {
        touched.sort_unstable();
        touched.dedup();
        for server in touched.drain(..) {
            if *running.get(&server).unwrap_or(&false) {
                continue;
            }
            let Some(queue) = ready.get_mut(&server) else { continue };
            let Some(Reverse(id)) = queue.pop() else { continue };
            let end = t + duration(id);
            node_end[id] = end;
            running.insert(server, true);
            events.push(Reverse(TimeKey(end, id)));
            let node = &dag.nodes[id];
            trace.push(TraceEvent {
                node: id,
                kind: node.kind,
                executor: node.executor,
                resource: node.resource,
                start: t,
                end,
                demand: node.demand,
            });
        }
    };

    dispatch(0.0, &mut touched, &mut ready, &mut running, &mut events, &mut trace, &mut node_end);

    let mut makespan = 0.0f64;
    loop {
        let t = match events.peek() {
            Some(Reverse(key)) => key.0,
            None => break,
        };
        // Apply every completion at this instant before dispatching.
        while let Some(Reverse(TimeKey(et, id))) = events.peek() {
            if *et > t {
                break;
            }
            let id = *id;
            events.pop();
            done += 1;
            makespan = makespan.max(node_end[id]);
            let server = server_of(id);
            running.insert(server, false);
            touched.push(server);
            for &v in &succ[id] {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    ready.entry(server_of(v)).or_default().push(Reverse(v));
                    touched.push(server_of(v));
                }
            }
        }
        dispatch(t, &mut touched, &mut ready, &mut running, &mut events, &mut trace, &mut node_end);
    }

    if done != n {
        return Err(Error::CycleDetected);
    }

    trace.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.node.cmp(&b.node)));
    let mut busy: BTreeMap<(usize, Resource), f64> = BTreeMap::new();
    for e in &trace {
        *busy.entry((e.executor, e.resource)).or_insert(0.0) += e.end - e.start;
    }
    Ok(SimTrace { events: trace, makespan, busy })
}

/// Throughput and utilization figures of one or more simulated steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Instances per second per executor.
    pub ips: f64,
    pub makespan: f64,
    /// Busy fraction of the makespan, averaged over worker executors.
    pub utilization: BTreeMap<Resource, f64>,
    pub comm_gbps: f64,
    pub intra_gbps: f64,
    pub hit_ratio: f64,
}

/// Summarize one step. `batch_size` counts instances across the whole
/// cluster for the step.
pub fn measure(trace: &SimTrace, batch_size: usize, n_executors: usize) -> Metrics {
    let mut utilization = BTreeMap::new();
    let makespan = trace.makespan.max(f64::MIN_POSITIVE);
    for resource in [Resource::Compute, Resource::IntraBw, Resource::InterBw] {
        let busy: f64 = (0..n_executors)
            .map(|e| trace.busy.get(&(e, resource)).copied().unwrap_or(0.0))
            .sum();
        utilization.insert(resource, (busy / (makespan * n_executors as f64)).min(1.0));
    }
    let bytes_of = |resource: Resource| -> f64 {
        trace
            .events
            .iter()
            .filter(|e| e.resource == resource && e.executor < n_executors)
            .map(|e| e.demand)
            .sum()
    };
    let comm_gbps = bytes_of(Resource::InterBw) * 8.0 / makespan / 1e9 / n_executors as f64;
    let intra_gbps = bytes_of(Resource::IntraBw) * 8.0 / makespan / 1e9 / n_executors as f64;
    Metrics {
        ips: batch_size as f64 / (makespan * n_executors as f64),
        makespan,
        utilization,
        comm_gbps,
        intra_gbps,
        hit_ratio: 0.0,
    }
}

impl Metrics {
    /// Steady-state average over per-step metrics.
    pub fn mean(steps: &[Metrics]) -> Metrics {
        assert!(!steps.is_empty());
        let k = steps.len() as f64;
        let mut utilization = BTreeMap::new();
        for resource in [Resource::Compute, Resource::IntraBw, Resource::InterBw] {
            let v: f64 = steps.iter().map(|m| m.utilization.get(&resource).copied().unwrap_or(0.0)).sum();
            utilization.insert(resource, v / k);
        }
        Metrics {
            ips: steps.iter().map(|m| m.ips).sum::<f64>() / k,
            makespan: steps.iter().map(|m| m.makespan).sum::<f64>() / k,
            utilization,
            comm_gbps: steps.iter().map(|m| m.comm_gbps).sum::<f64>() / k,
            intra_gbps: steps.iter().map(|m| m.intra_gbps).sum::<f64>() / k,
            hit_ratio: steps.iter().map(|m| m.hit_ratio).sum::<f64>() / k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{NodeTag, OpNode};
    use crate::ops::KernelClass;

    fn topo() -> ExecutorTopology {
        ExecutorTopology {
            n_executors: 1,
            compute_rate: 10.0,
            intra_bw: 10.0,
            inter_bw: 10.0,
            device_mem_bytes: 1 << 30,
            hot_storage_bytes: 0,
            ps_servers: 1,
        }
    }

    fn node(id: usize, resource: Resource, demand: f64, deps: Vec<usize>) -> OpNode {
        let (kind, class) = match resource {
            Resource::Compute => (OpKind::Mlp, KernelClass::Computation),
            Resource::IntraBw => (OpKind::Gather, KernelClass::Memory),
            Resource::InterBw => (OpKind::Shuffle, KernelClass::Communication),
        };
        OpNode {
            id,
            kind,
            class,
            executor: 0,
            resource,
            demand,
            deps,
            launch_overhead: 0.0,
            tag: NodeTag::none(),
        }
    }

    #[test]
    fn independent_nodes_overlap() {
        let dag = OpDag {
            nodes: vec![
                node(0, Resource::InterBw, 100.0, vec![]),
                node(1, Resource::Compute, 50.0, vec![]),
            ],
        };
        let trace = simulate(&dag, &topo()).unwrap();
        assert_eq!(trace.makespan, 10.0);
    }

    #[test]
    fn dependent_nodes_serialize() {
        let dag = OpDag {
            nodes: vec![
                node(0, Resource::InterBw, 100.0, vec![]),
                node(1, Resource::Compute, 50.0, vec![0]),
            ],
        };
        let trace = simulate(&dag, &topo()).unwrap();
        assert_eq!(trace.makespan, 15.0);
    }

    #[test]
    fn same_resource_is_exclusive_and_ties_break_by_id() {
        let dag = OpDag {
            nodes: vec![
                node(0, Resource::Compute, 50.0, vec![]),
                node(1, Resource::Compute, 50.0, vec![]),
            ],
        };
        let trace = simulate(&dag, &topo()).unwrap();
        assert_eq!(trace.makespan, 10.0);
        assert_eq!(trace.events[0].node, 0);
        assert_eq!(trace.events[1].start, trace.events[0].end);
    }

    #[test]
    fn dependency_safety_holds() {
        let dag = OpDag {
            nodes: vec![
                node(0, Resource::Compute, 20.0, vec![]),
                node(1, Resource::IntraBw, 30.0, vec![0]),
                node(2, Resource::InterBw, 10.0, vec![0, 1]),
                node(3, Resource::Compute, 5.0, vec![2]),
            ],
        };
        let trace = simulate(&dag, &topo()).unwrap();
        let end = |i: usize| trace.events.iter().find(|e| e.node == i).unwrap().end;
        let start = |i: usize| trace.events.iter().find(|e| e.node == i).unwrap().start;
        for n in &dag.nodes {
            for &d in &n.deps {
                assert!(start(n.id) >= end(d));
            }
        }
    }

    #[test]
    fn cycles_are_detected() {
        let dag = OpDag {
            nodes: vec![
                node(0, Resource::Compute, 1.0, vec![1]),
                node(1, Resource::Compute, 1.0, vec![0]),
            ],
        };
        assert!(matches!(simulate(&dag, &topo()), Err(Error::CycleDetected)));
    }

    #[test]
    fn traces_are_reproducible() {
        let mut nodes = Vec::new();
        for i in 0..20 {
            let resource = match i % 3 {
                0 => Resource::Compute,
                1 => Resource::IntraBw,
                _ => Resource::InterBw,
            };
            let deps = if i >= 3 { vec![i - 3, i - 1] } else { vec![] };
            nodes.push(node(i, resource, (i as f64 + 1.0) * 3.0, deps));
        }
        let dag = OpDag { nodes };
        let a = simulate(&dag, &topo()).unwrap();
        let b = simulate(&dag, &topo()).unwrap();
        assert_eq!(a, b);
    }
}
