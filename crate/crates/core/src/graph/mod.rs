//! Computation-graph representation of a CNN.
//!
//! A [`Graph`] is an immutable DAG of layer nodes. Channel counts in the graph
//! are the *base* (unpruned) widths; pruned widths are derived from a vector
//! of per-group width multipliers through [`Architecture::effective_channels`].

mod groups;
mod shapes;
mod spec;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use groups::{GroupId, MaskGroups};
pub use shapes::{infer_shapes, Shape, ShapeTable};
pub use spec::{parse_model_spec, write_model_spec};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    /// Convolution, optionally followed by batch normalisation.
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        out_channels: usize,
        batch_norm: bool,
    },
    DepthwiseConv2d {
        kernel: usize,
        stride: usize,
        padding: usize,
        batch_norm: bool,
    },
    FullyConnected {
        out_units: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Add,
    Flatten,
    Output,
}

impl LayerKind {
    /// Number of producers this kind of node takes.
    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Input { .. } => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    /// Layers that own weights and choose their own output width.
    pub fn produces_channels(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. }
        )
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. }
                | LayerKind::DepthwiseConv2d { .. }
                | LayerKind::FullyConnected { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::DepthwiseConv2d { .. } => "dwconv2d",
            LayerKind::FullyConnected { .. } => "fc",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::GlobalAvgPool => "gap",
            LayerKind::Add => "add",
            LayerKind::Flatten => "flatten",
            LayerKind::Output => "output",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    /// Producers, in argument order.
    pub inputs: Vec<NodeId>,
}

impl Node {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: Vec<NodeId>) -> Self {
        Node {
            name: name.into(),
            kind,
            inputs,
        }
    }
}

/// A validated computation graph. Node ids are dense `0..len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    nodes: Vec<Node>,
    consumers: Vec<Vec<NodeId>>,
    input: NodeId,
    output: NodeId,
    topo: Vec<NodeId>,
}

impl Graph {
    /// Validates `nodes` and builds the graph.
    pub fn new(nodes: Vec<Node>) -> Result<Self> {
        let n = nodes.len();
        let bad = |m: String| Err(Error::InvalidGraph(m));

        let mut names = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if names.insert(node.name.as_str(), id).is_some() {
                return bad(format!("duplicate node name `{}`", node.name));
            }
        }

        let inputs: Vec<_> = ids_where(&nodes, |k| matches!(k, LayerKind::Input { .. }));
        let outputs: Vec<_> = ids_where(&nodes, |k| matches!(k, LayerKind::Output));
        let input = match inputs.as_slice() {
            [] => return bad("no input node".into()),
            [i] => *i,
            _ => return bad("more than one input node".into()),
        };
        let output = match outputs.as_slice() {
            [] => return bad("no output node".into()),
            [o] => *o,
            _ => return bad("more than one output node".into()),
        };

        let mut consumers = vec![Vec::new(); n];
        for (id, node) in nodes.iter().enumerate() {
            if node.inputs.len() != node.kind.arity() {
                return bad(format!(
                    "node `{}` ({}) takes {} input(s), got {}",
                    node.name,
                    node.kind.name(),
                    node.kind.arity(),
                    node.inputs.len()
                ));
            }
            for &p in &node.inputs {
                if p >= n {
                    return bad(format!("node `{}` references unknown node {p}", node.name));
                }
                if p == id {
                    return bad(format!("node `{}` consumes itself", node.name));
                }
                consumers[p].push(id);
            }
            match node.kind {
                LayerKind::Conv2d {
                    kernel_h,
                    kernel_w,
                    stride,
                    out_channels,
                    ..
                } => {
                    if out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                        return bad(format!("conv `{}` has a zero-sized parameter", node.name));
                    }
                }
                LayerKind::DepthwiseConv2d { kernel, stride, .. }
                | LayerKind::MaxPool { kernel, stride } => {
                    if kernel == 0 || stride == 0 {
                        return bad(format!("node `{}` has a zero-sized parameter", node.name));
                    }
                }
                LayerKind::FullyConnected { out_units: 0 } => {
                    return bad(format!("fc `{}` has zero output units", node.name));
                }
                LayerKind::Input {
                    channels,
                    height,
                    width,
                } if channels == 0 || height == 0 || width == 0 => {
                    return bad(format!("input `{}` has an empty dimension", node.name));
                }
                _ => {}
            }
        }
        if !consumers[output].is_empty() {
            return bad("the output node cannot feed other nodes".into());
        }

        let topo = topological_order(&nodes, &consumers)
            .ok_or_else(|| Error::InvalidGraph("graph contains a cycle".into()))?;

        // Reachability from the input and to the output.
        let mut from_input = vec![false; n];
        from_input[input] = true;
        for &id in &topo {
            if nodes[id].inputs.iter().any(|&p| from_input[p]) {
                from_input[id] = true;
            }
        }
        let mut to_output = vec![false; n];
        to_output[output] = true;
        for &id in topo.iter().rev() {
            if consumers[id].iter().any(|&c| to_output[c]) {
                to_output[id] = true;
            }
        }
        for id in 0..n {
            if !from_input[id] {
                return bad(format!(
                    "node `{}` is unreachable from the input",
                    nodes[id].name
                ));
            }
            if !to_output[id] {
                return bad(format!(
                    "node `{}` does not reach the output",
                    nodes[id].name
                ));
            }
        }

        Ok(Graph {
            nodes,
            consumers,
            input,
            output,
            topo,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn consumers(&self, id: NodeId) -> &[NodeId] {
        &self.consumers[id]
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    /// A fixed topological order (Kahn's algorithm, smallest ready id first).
    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Number of directed edges.
    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.inputs.len()).sum()
    }

    /// Rebuilds the graph with node ids permuted: old id `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[NodeId]) -> Result<Graph> {
        assert_eq!(perm.len(), self.len());
        let mut nodes: Vec<Option<Node>> = vec![None; self.len()];
        for (old, node) in self.nodes.iter().enumerate() {
            let mut node = node.clone();
            node.inputs = node.inputs.iter().map(|&p| perm[p]).collect();
            nodes[perm[old]] = Some(node);
        }
        Graph::new(
            nodes
                .into_iter()
                .map(|n| n.expect("perm is a bijection"))
                .collect(),
        )
    }
}

fn ids_where(nodes: &[Node], pred: impl Fn(&LayerKind) -> bool) -> Vec<NodeId> {
    nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| pred(&n.kind))
        .map(|(i, _)| i)
        .collect()
}

fn topological_order(nodes: &[Node], consumers: &[Vec<NodeId>]) -> Option<Vec<NodeId>> {
    let mut indegree: Vec<usize> = nodes.iter().map(|n| n.inputs.len()).collect();
    let mut ready: BTreeSet<NodeId> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(id) = ready.pop_first() {
        order.push(id);
        for &c in &consumers[id] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    (order.len() == nodes.len()).then_some(order)
}

/// A graph together with its shapes and mask groups: everything the resource
/// models and the training engine need to know about an architecture.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub graph: Graph,
    pub shapes: ShapeTable,
    pub groups: MaskGroups,
}

impl Architecture {
    pub fn new(graph: Graph) -> Result<Self> {
        let shapes = infer_shapes(&graph)?;
        let groups = MaskGroups::compute(&graph);
        Ok(Architecture {
            graph,
            shapes,
            groups,
        })
    }

    pub fn from_spec(text: &str) -> Result<Self> {
        Architecture::new(parse_model_spec(text)?)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Output channels of `node` under width multipliers `pi`.
    ///
    /// Pruned widths are `floor(pi_g * C)` clamped to at least one channel;
    /// nodes outside any prunable group keep their base width.
    pub fn effective_channels(&self, node: NodeId, pi: &[f64]) -> usize {
        let base = self.shapes[node].channels;
        match self.groups.group_of(node) {
            Some(g) => keep_count(pi[g], base),
            None => base,
        }
    }

    /// Real-valued relaxation of [`Self::effective_channels`] (no floor).
    pub fn relaxed_channels(&self, node: NodeId, pi: &[f64]) -> f64 {
        let base = self.shapes[node].channels as f64;
        match self.groups.group_of(node) {
            Some(g) => pi[g] * base,
            None => base,
        }
    }

    /// Elements per sample in the output of `node` under `pi`.
    pub fn effective_elements(&self, node: NodeId, pi: &[f64]) -> usize {
        let s = &self.shapes[node];
        self.effective_channels(node, pi) * s.height * s.width
    }

    pub fn unpruned(&self) -> Vec<f64> {
        vec![1.0; self.num_groups()]
    }
}

/// Channels kept out of `base` for width multiplier `pi`.
pub fn keep_count(pi: f64, base: usize) -> usize {
    // The epsilon absorbs representation error in products like 0.7 * 10.
    let k = (pi * base as f64 + 1e-9).floor() as usize;
    k.clamp(1, base.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Vec<Node> {
        vec![
            Node::new(
                "in",
                LayerKind::Input {
                    channels: 3,
                    height: 8,
                    width: 8,
                },
                vec![],
            ),
            Node::new(
                "c",
                LayerKind::Conv2d {
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: 1,
                    out_channels: 4,
                    batch_norm: true,
                },
                vec![0],
            ),
            Node::new("out", LayerKind::Output, vec![1]),
        ]
    }

    #[test]
    fn valid_chain() {
        let g = Graph::new(chain()).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.topo_order(), &[0, 1, 2]);
        assert_eq!(g.consumers(0), &[1]);
    }

    #[test]
    fn rejects_missing_output() {
        let mut nodes = chain();
        nodes.pop();
        let err = Graph::new(nodes).unwrap_err().to_string();
        assert!(err.contains("no output node"), "{err}");
    }

    #[test]
    fn rejects_cycles_and_bad_arity() {
        let mut nodes = chain();
        nodes.push(Node::new("r", LayerKind::Relu, vec![3]));
        assert!(Graph::new(nodes).is_err());

        let mut nodes = chain();
        nodes[2].inputs = vec![1, 0];
        let err = Graph::new(nodes).unwrap_err().to_string();
        assert!(err.contains("takes 1 input"), "{err}");
    }

    #[test]
    fn rejects_dead_ends() {
        let mut nodes = chain();
        nodes.push(Node::new("dangling", LayerKind::Relu, vec![1]));
        let err = Graph::new(nodes).unwrap_err().to_string();
        assert!(err.contains("does not reach the output"), "{err}");
    }

    #[test]
    fn keep_count_floors_with_minimum_one() {
        assert_eq!(keep_count(1.0, 64), 64);
        assert_eq!(keep_count(0.5, 64), 32);
        assert_eq!(keep_count(0.7, 10), 7);
        assert_eq!(keep_count(0.01, 64), 1);
        assert_eq!(keep_count(1e-9, 1), 1);
    }
}
