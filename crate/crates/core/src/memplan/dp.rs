use super::{can_alias, MemoryPlan, PlannerOptions};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::par::map_indices;

type Set = u128;

fn bit(n: NodeId) -> Set {
    1u128 << n
}

struct Planner<'a> {
    graph: &'a Graph,
    sizes: &'a [u64],
    options: &'a PlannerOptions,
    input_mask: Vec<Set>,
    consumer_mask: Vec<Set>,
    full: Set,
}

impl Planner<'_> {
    /// Bytes held by executed nodes that still have pending consumers.
    fn live_bytes(&self, done: Set) -> u64 {
        let mut total = 0;
        let mut rest = done;
        while rest != 0 {
            let m = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            if self.consumer_mask[m] & !done != 0 {
                total += self.sizes[m];
            }
        }
        total
    }

    fn ready(&self, done: Set) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.graph.len())
            .filter(move |&n| done & bit(n) == 0 && self.input_mask[n] & !done == 0)
    }

    fn aliased(&self, done: Set, n: NodeId) -> bool {
        can_alias(self.graph, n, |c| done & bit(c) != 0, self.options).is_some()
    }

    fn step_bytes(&self, done: Set, live: u64, n: NodeId) -> u64 {
        live + if self.aliased(done, n) {
            0
        } else {
            self.sizes[n]
        }
    }

    fn bottleneck(&self, done: Set, n: NodeId) -> Vec<NodeId> {
        let mut b: Vec<NodeId> = (0..self.graph.len())
            .filter(|&m| done & bit(m) != 0 && self.consumer_mask[m] & !done != 0)
            .collect();
        if !self.aliased(done, n) {
            b.push(n);
        }
        b.sort_unstable();
        b
    }
}

/// Minimum peak memory over all topological orders.
///
/// States are the sets of executed nodes reachable from the empty set (the
/// downward-closed sets of the DAG); the live memory of a state depends only on
/// the set, so each state is stored once. A backward pass computes, for every
/// state, the smallest peak any completion of it can achieve. The returned
/// order is the lexicographically smallest order attaining the optimum, which
/// makes the bottleneck deterministic.
///
/// Frontier expansion runs in parallel under [`crate::par::Parallelism::Parallel`];
/// the result is identical either way.
pub fn precise_pmu(graph: &Graph, sizes: &[u64], options: &PlannerOptions) -> Result<MemoryPlan> {
    let n = graph.len();
    let node_limit = options.max_nodes.min(Set::BITS as usize);
    if n > node_limit {
        return Err(Error::StateSpace {
            what: "nodes",
            actual: n,
            limit: node_limit,
        });
    }
    assert_eq!(sizes.len(), n, "one buffer size per node");

    let mut input_mask = vec![0; n];
    let mut consumer_mask = vec![0; n];
    for (id, mask) in input_mask.iter_mut().enumerate() {
        for &p in &graph.node(id).inputs {
            *mask |= bit(p);
            consumer_mask[p] |= bit(id);
        }
    }
    let full = if n == Set::BITS as usize {
        Set::MAX
    } else {
        bit(n) - 1
    };
    let planner = Planner {
        graph,
        sizes,
        options,
        input_mask,
        consumer_mask,
        full,
    };

    // Forward: enumerate reachable states layer by layer.
    let mut layers: Vec<Vec<Set>> = vec![vec![0]];
    let mut total_states = 1usize;
    for _ in 0..n {
        let frontier = layers.last().unwrap();
        let successors = map_indices(options.parallelism, frontier.len(), |i| {
            let s = frontier[i];
            planner.ready(s).map(|r| s | bit(r)).collect::<Vec<_>>()
        });
        let mut next: Vec<Set> = successors.into_iter().flatten().collect();
        next.sort_unstable();
        next.dedup();
        total_states += next.len();
        if total_states > options.max_states {
            return Err(Error::StateSpace {
                what: "states",
                actual: total_states,
                limit: options.max_states,
            });
        }
        layers.push(next);
    }
    debug_assert_eq!(layers[n], vec![planner.full]);

    // Backward: best achievable peak from each state to completion.
    let mut best: Vec<Vec<u64>> = vec![Vec::new(); n + 1];
    best[n] = vec![0];
    for k in (0..n).rev() {
        let states = &layers[k];
        let next_states = &layers[k + 1];
        let next_best = &best[k + 1];
        best[k] = map_indices(options.parallelism, states.len(), |i| {
            let s = states[i];
            let live = planner.live_bytes(s);
            planner
                .ready(s)
                .map(|r| {
                    let j = next_states
                        .binary_search(&(s | bit(r)))
                        .expect("successor enumerated in forward pass");
                    planner.step_bytes(s, live, r).max(next_best[j])
                })
                .min()
                .expect("non-final states have a ready node")
        });
    }
    let peak_bytes = best[0][0];

    // Reconstruct the lexicographically smallest optimal order.
    let mut order = Vec::with_capacity(n);
    let mut done: Set = 0;
    let mut peak_step = None;
    let mut bottleneck = Vec::new();
    for k in 0..n {
        let live = planner.live_bytes(done);
        let (r, step) = planner
            .ready(done)
            .find_map(|r| {
                let next = done | bit(r);
                let j = layers[k + 1].binary_search(&next).unwrap();
                let step = planner.step_bytes(done, live, r);
                (step.max(best[k + 1][j]) <= peak_bytes).then_some((r, step))
            })
            .expect("an optimal continuation exists");
        if peak_step.is_none() && step == peak_bytes {
            peak_step = Some(k);
            bottleneck = planner.bottleneck(done, r);
        }
        order.push(r);
        done |= bit(r);
    }

    Ok(MemoryPlan {
        order,
        peak_bytes,
        peak_step: peak_step.expect("the peak is attained at some step"),
        bottleneck,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::diamond;
    use super::super::{brute_force_pmu, imprecise_pmu, simulate_schedule};
    use super::*;
    use crate::graph::parse_model_spec;
    use crate::par::Parallelism;

    #[test]
    fn single_node_after_input() {
        let g = parse_model_spec(
            "in: input(channels=1, height=1, width=5)\n\
             a: relu() <- in\n\
             out: output() <- a\n",
        )
        .unwrap();
        let plan = precise_pmu(&g, &[5, 7, 7], &PlannerOptions::default()).unwrap();
        // in | in + a = 12 | a + out = 14
        assert_eq!(plan.peak_bytes, 14);
        assert_eq!(plan.order, vec![0, 1, 2]);
        assert_eq!(plan.peak_step, 2);
        assert_eq!(plan.bottleneck, vec![1, 2]);
    }

    #[test]
    fn diamond_matches_enumeration() {
        let g = diamond();
        let sizes = [4, 10, 2, 4, 4];
        let opts = PlannerOptions::default();
        let plan = precise_pmu(&g, &sizes, &opts).unwrap();
        assert_eq!(plan.peak_bytes, 16);
        assert_eq!(plan.peak_bytes, brute_force_pmu(&g, &sizes, &opts).unwrap());
        // Both orders peak at 16; the lexicographically smaller one wins.
        assert_eq!(plan.order, vec![0, 1, 2, 3, 4]);
        let sum: u64 = plan.bottleneck.iter().map(|&b| sizes[b]).sum();
        assert_eq!(sum, plan.peak_bytes);
    }

    #[test]
    fn two_branch_residual_matches_enumeration() {
        let g = parse_model_spec(
            "in: input(channels=1, height=1, width=1)\n\
             a1: relu() <- in\n\
             a2: relu() <- a1\n\
             b1: relu() <- in\n\
             b2: relu() <- b1\n\
             s: add() <- a2, b2\n\
             out: output() <- s\n",
        )
        .unwrap();
        let sizes = [1, 50, 1, 20, 1, 1, 1];
        let opts = PlannerOptions::default();
        let plan = precise_pmu(&g, &sizes, &opts).unwrap();
        let trace = simulate_schedule(&g, &sizes, &plan.order, &opts);
        assert_eq!(trace.peak_bytes, plan.peak_bytes);
        assert_eq!(plan.peak_bytes, brute_force_pmu(&g, &sizes, &opts).unwrap());
        assert_eq!(plan.peak_bytes, 52);
        assert!(imprecise_pmu(&g, &sizes, &opts).peak_bytes <= plan.peak_bytes);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let g = diamond();
        let sizes = [3, 9, 5, 3, 3];
        let seq = precise_pmu(
            &g,
            &sizes,
            &PlannerOptions {
                parallelism: Parallelism::Sequential,
                ..Default::default()
            },
        )
        .unwrap();
        let par = precise_pmu(&g, &sizes, &PlannerOptions::default()).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn state_cap_is_enforced() {
        // Eight independent branches: 2^8 downsets in the middle.
        let mut text = String::from("in: input(channels=1, height=1, width=1)\n");
        for i in 0..8 {
            text += &format!("b{i}: relu() <- in\n");
        }
        let mut acc = "b0".to_string();
        for i in 1..8 {
            text += &format!("s{i}: add() <- {acc}, b{i}\n");
            acc = format!("s{i}");
        }
        text += &format!("out: output() <- {acc}\n");
        let g = parse_model_spec(&text).unwrap();
        let opts = PlannerOptions {
            max_states: 100,
            ..Default::default()
        };
        let err = precise_pmu(&g, &vec![1; g.len()], &opts).unwrap_err();
        assert!(
            matches!(err, Error::StateSpace { what: "states", .. }),
            "{err}"
        );
        let opts = PlannerOptions {
            max_nodes: 10,
            ..Default::default()
        };
        let err = precise_pmu(&g, &vec![1; g.len()], &opts).unwrap_err();
        assert!(
            matches!(err, Error::StateSpace { what: "nodes", .. }),
            "{err}"
        );
    }

    #[test]
    fn accumulate_reuses_a_dying_summand() {
        let g = diamond();
        let sizes = [4, 10, 2, 4, 4];
        let opts = PlannerOptions {
            add_accumulate: true,
            ..Default::default()
        };
        let plan = precise_pmu(&g, &sizes, &opts).unwrap();
        // The add step now costs 10 + 2; the peak moves to the branch step.
        assert_eq!(plan.peak_bytes, 16);
        assert_eq!(plan.peak_bytes, brute_force_pmu(&g, &sizes, &opts).unwrap());
        let trace = simulate_schedule(&g, &sizes, &plan.order, &opts);
        assert_eq!(trace.step_bytes[3], 12);
    }
}
