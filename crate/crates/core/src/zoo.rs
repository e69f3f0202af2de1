//! Bundled model specs and seeded generators of random graphs and networks.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::graph::{Architecture, Graph, LayerKind, Node, NodeId};

/// VGG-16 adapted to 32x32 CIFAR-10 inputs.
pub const VGG16_CIFAR: &str = include_str!("../models/vgg16_cifar.spec");

/// Six-layer CNN with one expanding residual block for 16x16 inputs.
pub const RESNET6_SYNTH: &str = include_str!("../models/resnet6_synth.spec");

/// Bundled spec by name (`vgg16_cifar`, `resnet6_synth`).
pub fn builtin(name: &str) -> Option<&'static str> {
    match name {
        "vgg16_cifar" => Some(VGG16_CIFAR),
        "resnet6_synth" => Some(RESNET6_SYNTH),
        _ => None,
    }
}

/// A random DAG of `n >= 2` nodes: an input, ReLU / Add nodes, an output.
///
/// Only the topology is meaningful (there are no shapes); intended for
/// exercising memory planners with arbitrary buffer sizes.
pub fn random_dag<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Graph {
    assert!(n >= 2, "a graph needs an input and an output");
    let mut nodes = vec![Node::new(
        "in",
        LayerKind::Input {
            channels: 1,
            height: 1,
            width: 1,
        },
        vec![],
    )];
    // Nodes without a consumer yet; all but one must be consumed before the
    // output node.
    let mut open: Vec<NodeId> = vec![0];
    let inner = n - 2;
    for i in 1..=inner {
        let remaining = inner - i + 1;
        let pick_open = |rng: &mut R, open: &mut Vec<NodeId>| {
            let k = rng.gen_range(0..open.len());
            open.swap_remove(k)
        };
        let kind_inputs = if open.len() > remaining {
            // Must merge two dangling nodes to finish in time.
            let a = pick_open(rng, &mut open);
            let b = pick_open(rng, &mut open);
            (LayerKind::Add, vec![a, b])
        } else if i >= 2 && rng.gen_bool(0.4) {
            let a = if open.len() == remaining || rng.gen_bool(0.7) {
                pick_open(rng, &mut open)
            } else {
                rng.gen_range(0..i)
            };
            let mut b = rng.gen_range(0..i);
            while b == a {
                b = rng.gen_range(0..i);
            }
            open.retain(|&x| x != b);
            (LayerKind::Add, vec![a, b])
        } else {
            let a = if open.len() == remaining || rng.gen_bool(0.6) {
                pick_open(rng, &mut open)
            } else {
                let a = rng.gen_range(0..i);
                open.retain(|&x| x != a);
                a
            };
            (LayerKind::Relu, vec![a])
        };
        nodes.push(Node::new(format!("n{i}"), kind_inputs.0, kind_inputs.1));
        open.push(i);
    }
    assert_eq!(open.len(), 1, "generator leaves exactly one sink");
    nodes.push(Node::new("out", LayerKind::Output, vec![open[0]]));
    Graph::new(nodes).expect("generated graphs are valid")
}

/// A chain `input -> relu -> ... -> output` of `n >= 2` nodes.
pub fn chain(n: usize) -> Graph {
    assert!(n >= 2);
    let mut nodes = vec![Node::new(
        "in",
        LayerKind::Input {
            channels: 1,
            height: 1,
            width: 1,
        },
        vec![],
    )];
    for i in 1..n - 1 {
        nodes.push(Node::new(format!("n{i}"), LayerKind::Relu, vec![i - 1]));
    }
    nodes.push(Node::new("out", LayerKind::Output, vec![n - 2]));
    Graph::new(nodes).expect("chains are valid")
}

/// Options for [`random_network`].
#[derive(Clone, Debug)]
pub struct RandomNetOptions {
    pub max_params: usize,
    pub classes: usize,
    pub residual: bool,
    pub depthwise: bool,
}

impl Default for RandomNetOptions {
    fn default() -> Self {
        RandomNetOptions {
            max_params: 5000,
            classes: 3,
            residual: true,
            depthwise: true,
        }
    }
}

/// A random small CNN spec built from conv / residual / depthwise / pool
/// blocks with a GAP or flatten classifier head.
pub fn random_network<R: Rng + ?Sized>(rng: &mut R, opts: &RandomNetOptions) -> String {
    loop {
        let text = random_network_once(rng, opts);
        let arch = Architecture::from_spec(&text).expect("generated specs are valid");
        if crate::resources::model_size(&arch, &arch.unpruned()) as usize <= opts.max_params {
            return text;
        }
    }
}

fn random_network_once<R: Rng + ?Sized>(rng: &mut R, opts: &RandomNetOptions) -> String {
    let mut s = String::new();
    let cin = rng.gen_range(1..=3);
    let mut hw = rng.gen_range(5..=8);
    writeln!(s, "in: input(channels={cin}, height={hw}, width={hw})").unwrap();
    let mut prev = "in".to_string();
    let mut id = 0;
    let mut next = |p: &str| {
        id += 1;
        format!("{p}{id}")
    };
    let bn = |rng: &mut R| if rng.gen_bool(0.7) { "true" } else { "false" };
    let blocks = rng.gen_range(1..=3);
    for _ in 0..blocks {
        let mut choices = vec![0, 0, 3];
        if opts.residual {
            choices.push(1);
        }
        if opts.depthwise {
            choices.push(2);
        }
        match *choices.choose(rng).unwrap() {
            0 => {
                let k = *[1, 3].choose(rng).unwrap();
                let c = next("conv");
                let r = next("relu");
                writeln!(
                    s,
                    "{c}: conv2d(out={}, kernel={k}, padding={}, bn={}) <- {prev}",
                    rng.gen_range(2..=6),
                    k / 2,
                    bn(rng)
                )
                .unwrap();
                writeln!(s, "{r}: relu() <- {c}").unwrap();
                prev = r;
            }
            1 => {
                let w = rng.gen_range(2..=5);
                let (a, ra, b, add, r) = (
                    next("conv"),
                    next("relu"),
                    next("conv"),
                    next("add"),
                    next("relu"),
                );
                writeln!(
                    s,
                    "{a}: conv2d(out={w}, kernel=3, padding=1, bn={}) <- {prev}",
                    bn(rng)
                )
                .unwrap();
                writeln!(s, "{ra}: relu() <- {a}").unwrap();
                writeln!(
                    s,
                    "{b}: conv2d(out={w}, kernel=3, padding=1, bn={}) <- {ra}",
                    bn(rng)
                )
                .unwrap();
                writeln!(s, "{add}: add() <- {ra}, {b}").unwrap();
                writeln!(s, "{r}: relu() <- {add}").unwrap();
                prev = r;
            }
            2 => {
                let (d, r) = (next("dw"), next("relu"));
                writeln!(
                    s,
                    "{d}: dwconv2d(kernel=3, padding=1, bn={}) <- {prev}",
                    bn(rng)
                )
                .unwrap();
                writeln!(s, "{r}: relu() <- {d}").unwrap();
                prev = r;
            }
            _ => {
                if hw >= 4 {
                    let p = next("pool");
                    writeln!(s, "{p}: maxpool(kernel=2) <- {prev}").unwrap();
                    hw /= 2;
                    prev = p;
                }
            }
        }
    }
    if rng.gen_bool(0.5) {
        let g = next("gap");
        writeln!(s, "{g}: gap() <- {prev}").unwrap();
        prev = g;
    } else {
        let f = next("flat");
        writeln!(s, "{f}: flatten() <- {prev}").unwrap();
        prev = f;
        if rng.gen_bool(0.5) {
            let (h, r) = (next("fc"), next("relu"));
            writeln!(s, "{h}: fc(out={}) <- {prev}", rng.gen_range(2..=6)).unwrap();
            writeln!(s, "{r}: relu() <- {h}").unwrap();
            prev = r;
        }
    }
    writeln!(s, "logits: fc(out={}) <- {prev}", opts.classes).unwrap();
    writeln!(s, "out: output() <- logits").unwrap();
    s
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn bundled_specs_parse() {
        assert_eq!(
            Architecture::from_spec(VGG16_CIFAR).unwrap().graph.len(),
            35
        );
        let a = Architecture::from_spec(RESNET6_SYNTH).unwrap();
        assert_eq!(a.num_groups(), 4);
    }

    #[test]
    fn random_dags_are_valid_at_every_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 2..=9 {
            for _ in 0..50 {
                assert_eq!(random_dag(&mut rng, n).len(), n);
            }
        }
    }

    #[test]
    fn random_networks_respect_the_parameter_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..30 {
            let a =
                Architecture::from_spec(&random_network(&mut rng, &RandomNetOptions::default()))
                    .unwrap();
            assert!(crate::resources::model_size(&a, &a.unpruned()) <= 5000);
        }
    }
}
