use super::{Graph, LayerKind, NodeId};

pub type GroupId = usize;

/// Partition of channel-producing layers into groups that must share one
/// pruning mask.
///
/// Every node's output channels originate at a *source*: the network input, a
/// convolution or a fully-connected layer. Parameter-free layers and depthwise
/// convolutions pass their producer's channels through. An `Add` forces the
/// sources of both summands to keep identical channels, so groups are the
/// connected components of the "summed together" relation over sources.
///
/// Components that contain the network input, or that reach the output node
/// (the classifier's logits), are fixed and receive no group id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGroups {
    group_of: Vec<Option<GroupId>>,
    members: Vec<Vec<NodeId>>,
    masked: Vec<Vec<NodeId>>,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so the representative is deterministic.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

impl MaskGroups {
    pub fn compute(graph: &Graph) -> Self {
        let n = graph.len();
        let mut source = vec![0usize; n];
        let mut sets = DisjointSet::new(n);
        for &id in graph.topo_order() {
            let node = graph.node(id);
            source[id] = match node.kind {
                LayerKind::Input { .. }
                | LayerKind::Conv2d { .. }
                | LayerKind::FullyConnected { .. } => id,
                LayerKind::Add => {
                    let (a, b) = (source[node.inputs[0]], source[node.inputs[1]]);
                    sets.union(a, b);
                    a
                }
                _ => source[node.inputs[0]],
            };
        }

        let fixed_a = sets.find(source[graph.input()]);
        let fixed_b = sets.find(source[graph.output()]);

        let mut root_group: Vec<Option<GroupId>> = vec![None; n];
        let mut members: Vec<Vec<NodeId>> = Vec::new();
        for id in 0..n {
            if !graph.node(id).kind.produces_channels() {
                continue;
            }
            let root = sets.find(id);
            if root == fixed_a || root == fixed_b {
                continue;
            }
            let g = *root_group[root].get_or_insert_with(|| {
                members.push(Vec::new());
                members.len() - 1
            });
            members[g].push(id);
        }

        let mut group_of = vec![None; n];
        let mut masked = vec![Vec::new(); members.len()];
        for id in 0..n {
            let root = sets.find(source[id]);
            group_of[id] = root_group[root];
            if let Some(g) = group_of[id] {
                if graph.node(id).kind.has_params() {
                    masked[g].push(id);
                }
            }
        }

        MaskGroups {
            group_of,
            members,
            masked,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Group governing the output channels of `node`, if prunable.
    pub fn group_of(&self, node: NodeId) -> Option<GroupId> {
        self.group_of[node]
    }

    /// Convolution / fully-connected layers whose widths the group controls.
    pub fn members(&self, g: GroupId) -> &[NodeId] {
        &self.members[g]
    }

    /// Parameterised layers whose outputs carry the group mask (members plus
    /// depthwise convolutions operating on the group's channels).
    pub fn masked_nodes(&self, g: GroupId) -> &[NodeId] {
        &self.masked[g]
    }

    /// The group partition as sorted member lists, for order-independent
    /// comparisons.
    pub fn partition(&self) -> Vec<Vec<NodeId>> {
        let mut p: Vec<Vec<NodeId>> = self
            .members
            .iter()
            .map(|m| {
                let mut m = m.clone();
                m.sort_unstable();
                m
            })
            .collect();
        p.sort();
        p
    }
}
