use super::{can_alias, PlannerOptions};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

pub const BRUTE_FORCE_MAX_NODES: usize = 8;

/// Memory in use at each step of a schedule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduleTrace {
    pub step_bytes: Vec<u64>,
    pub peak_bytes: u64,
}

/// Replays `order` and records the live bytes at every step.
///
/// This walks the schedule with explicit reference counts and is kept apart
/// from the planner's set-based bookkeeping so each can check the other.
///
/// # Panics
///
/// If `order` is not a topological order of `graph`.
pub fn simulate_schedule(
    graph: &Graph,
    sizes: &[u64],
    order: &[NodeId],
    options: &PlannerOptions,
) -> ScheduleTrace {
    assert_eq!(order.len(), graph.len(), "order must cover every node");
    let mut pending: Vec<usize> = (0..graph.len()).map(|n| graph.consumers(n).len()).collect();
    let mut done = vec![false; graph.len()];
    let mut live = vec![false; graph.len()];
    let mut live_bytes = 0u64;
    let mut step_bytes = Vec::with_capacity(order.len());

    for &n in order {
        let node = graph.node(n);
        assert!(!done[n], "node {n} scheduled twice");
        assert!(
            node.inputs.iter().all(|&p| done[p]),
            "node {n} scheduled before its inputs"
        );
        let aliased = can_alias(graph, n, |c| done[c], options).is_some();
        step_bytes.push(live_bytes + if aliased { 0 } else { sizes[n] });

        done[n] = true;
        live[n] = true;
        live_bytes += sizes[n];
        for &p in &node.inputs {
            pending[p] -= 1;
        }
        for &p in &node.inputs {
            if pending[p] == 0 && live[p] {
                live[p] = false;
                live_bytes -= sizes[p];
            }
        }
        if pending[n] == 0 {
            live[n] = false;
            live_bytes -= sizes[n];
        }
    }
    let peak_bytes = step_bytes.iter().copied().max().unwrap_or(0);
    ScheduleTrace {
        step_bytes,
        peak_bytes,
    }
}

/// Minimum peak over every topological order, by explicit enumeration.
/// Only for tiny graphs; used as a test oracle for the planner.
pub fn brute_force_pmu(graph: &Graph, sizes: &[u64], options: &PlannerOptions) -> Result<u64> {
    if graph.len() > BRUTE_FORCE_MAX_NODES {
        return Err(Error::TooManyNodes {
            actual: graph.len(),
            limit: BRUTE_FORCE_MAX_NODES,
        });
    }
    let mut best = u64::MAX;
    let mut order = Vec::with_capacity(graph.len());
    let mut used = vec![false; graph.len()];
    enumerate(graph, &mut order, &mut used, &mut |o| {
        best = best.min(simulate_schedule(graph, sizes, o, options).peak_bytes);
    });
    Ok(best)
}

/// Calls `visit` with every topological order of `graph`.
pub(crate) fn enumerate(
    graph: &Graph,
    order: &mut Vec<NodeId>,
    used: &mut [bool],
    visit: &mut dyn FnMut(&[NodeId]),
) {
    if order.len() == graph.len() {
        visit(order);
        return;
    }
    for n in 0..graph.len() {
        if used[n] || !graph.node(n).inputs.iter().all(|&p| used[p]) {
            continue;
        }
        used[n] = true;
        order.push(n);
        enumerate(graph, order, used, visit);
        order.pop();
        used[n] = false;
    }
}
