//! Peak memory usage (PMU) of a computation graph.
//!
//! Buffers follow a simple liveness rule: a node's output buffer is allocated
//! when the node executes and released once every consumer has executed. While
//! a node runs, its inputs and its output are live at the same time. Nothing
//! runs in place, except that `Add` may accumulate into a summand whose last
//! reader it is (see [`PlannerOptions::add_accumulate`]).
//!
//! [`precise_pmu`] finds the execution order with the smallest peak by dynamic
//! programming over the sets of already-executed nodes. [`imprecise_pmu`] is the
//! schedule-oblivious per-operator estimate; it never exceeds the precise value.

mod brute;
mod dp;

use serde::{Deserialize, Serialize};

use crate::graph::{Architecture, Graph, LayerKind, NodeId};
use crate::par::Parallelism;

pub use brute::{brute_force_pmu, simulate_schedule, ScheduleTrace, BRUTE_FORCE_MAX_NODES};
pub use dp::precise_pmu;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerOptions {
    /// Let `Add` write its result into a summand it is the last reader of.
    pub add_accumulate: bool,
    /// Upper bound on graph size (the DP keys states by a 128-bit set).
    pub max_nodes: usize,
    /// Upper bound on the number of executed-set states explored.
    pub max_states: usize,
    pub parallelism: Parallelism,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        PlannerOptions {
            add_accumulate: false,
            max_nodes: 128,
            max_states: 1 << 22,
            parallelism: Parallelism::default(),
        }
    }
}

/// An execution order together with its peak and the buffers live at the peak.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub order: Vec<NodeId>,
    pub peak_bytes: u64,
    /// Index into `order` of the first step reaching the peak.
    pub peak_step: usize,
    /// Nodes whose buffers make up the peak, sorted by id. Their sizes sum to
    /// `peak_bytes`.
    pub bottleneck: Vec<NodeId>,
}

/// Per-operator working-set estimate and the operator that maximises it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImprecisePlan {
    pub peak_bytes: u64,
    pub node: NodeId,
    pub bottleneck: Vec<NodeId>,
}

/// Activation buffer sizes in bytes for every node under width multipliers `pi`.
pub fn tensor_sizes(arch: &Architecture, pi: &[f64], element_bytes: u64) -> Vec<u64> {
    (0..arch.graph.len())
        .map(|n| arch.effective_elements(n, pi) as u64 * element_bytes)
        .collect()
}

/// Whether an `Add` at this point may reuse the buffer of input `p`, given a
/// predicate telling whether a consumer has already executed.
pub(crate) fn can_alias(
    graph: &Graph,
    node: NodeId,
    executed: impl Fn(NodeId) -> bool,
    options: &PlannerOptions,
) -> Option<NodeId> {
    if !options.add_accumulate || graph.node(node).kind != LayerKind::Add {
        return None;
    }
    graph
        .node(node)
        .inputs
        .iter()
        .copied()
        .find(|&p| graph.consumers(p).iter().all(|&c| c == node || executed(c)))
}

/// Largest input-plus-output working set over individual operators.
pub fn imprecise_pmu(graph: &Graph, sizes: &[u64], options: &PlannerOptions) -> ImprecisePlan {
    let mut best: Option<ImprecisePlan> = None;
    for id in 0..graph.len() {
        let node = graph.node(id);
        let mut inputs: Vec<NodeId> = node.inputs.clone();
        inputs.sort_unstable();
        inputs.dedup();
        let in_bytes: u64 = inputs.iter().map(|&p| sizes[p]).sum();
        let accumulate = options.add_accumulate && node.kind == LayerKind::Add;
        let mut bottleneck = inputs;
        let total = if accumulate {
            in_bytes
        } else {
            bottleneck.push(id);
            in_bytes + sizes[id]
        };
        bottleneck.sort_unstable();
        if best.as_ref().is_none_or(|b| total > b.peak_bytes) {
            best = Some(ImprecisePlan {
                peak_bytes: total,
                node: id,
                bottleneck,
            });
        }
    }
    best.expect("graphs are never empty")
}

/// Straight-through gradient of a bottleneck's total size with respect to each
/// group's width multiplier: every bottleneck buffer in group `g` contributes
/// `C_base * H * W * element_bytes`.
pub fn bottleneck_subgradient(
    arch: &Architecture,
    bottleneck: &[NodeId],
    element_bytes: u64,
) -> Vec<f64> {
    let mut grad = vec![0.0; arch.num_groups()];
    for &t in bottleneck {
        if let Some(g) = arch.groups.group_of(t) {
            grad[g] += (arch.shapes[t].elements() as u64 * element_bytes) as f64;
        }
    }
    grad
}

/// Per-group subgradient of the precise PMU at the plan's peak step.
pub fn pmu_subgradient(plan: &MemoryPlan, arch: &Architecture, element_bytes: u64) -> Vec<f64> {
    bottleneck_subgradient(arch, &plan.bottleneck, element_bytes)
}
