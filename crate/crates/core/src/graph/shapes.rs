use std::ops::Index;

use serde::{Deserialize, Serialize};

use super::{Graph, LayerKind, NodeId};
use crate::error::{Error, Result};

/// Per-sample output shape of a node, at base (unpruned) width.
///
/// Flattened and fully-connected outputs keep a channel-major layout: a
/// flatten of `(C, H, W)` still reports `(C, H, W)` so that masking channel
/// `c` of its producer maps onto `H * W` contiguous features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn elements(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTable {
    shapes: Vec<Shape>,
}

impl ShapeTable {
    pub fn as_slice(&self) -> &[Shape] {
        &self.shapes
    }
}

impl Index<NodeId> for ShapeTable {
    type Output = Shape;

    fn index(&self, id: NodeId) -> &Shape {
        &self.shapes[id]
    }
}

fn conv_out(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Infers base output shapes for every node of a validated graph.
pub fn infer_shapes(graph: &Graph) -> Result<ShapeTable> {
    let mut shapes = vec![Shape::new(0, 0, 0); graph.len()];
    for &id in graph.topo_order() {
        let node = graph.node(id);
        let fail = |message: String| Error::Shape {
            node: node.name.clone(),
            message,
        };
        let inp = node.inputs.first().map(|&p| shapes[p]);
        let spatial = |h: Option<usize>, w: Option<usize>| match (h, w) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(fail("non-positive spatial dimension".into())),
        };
        let out = match node.kind {
            LayerKind::Input {
                channels,
                height,
                width,
            } => Shape::new(channels, height, width),
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                stride,
                padding,
                out_channels,
                ..
            } => {
                let s = inp.unwrap();
                let (h, w) = spatial(
                    conv_out(s.height, kernel_h, stride, padding),
                    conv_out(s.width, kernel_w, stride, padding),
                )?;
                Shape::new(out_channels, h, w)
            }
            LayerKind::DepthwiseConv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let s = inp.unwrap();
                let (h, w) = spatial(
                    conv_out(s.height, kernel, stride, padding),
                    conv_out(s.width, kernel, stride, padding),
                )?;
                Shape::new(s.channels, h, w)
            }
            LayerKind::MaxPool { kernel, stride } => {
                let s = inp.unwrap();
                let (h, w) = spatial(
                    conv_out(s.height, kernel, stride, 0),
                    conv_out(s.width, kernel, stride, 0),
                )?;
                Shape::new(s.channels, h, w)
            }
            LayerKind::FullyConnected { out_units } => Shape::new(out_units, 1, 1),
            LayerKind::GlobalAvgPool => Shape::new(inp.unwrap().channels, 1, 1),
            LayerKind::Relu | LayerKind::Flatten | LayerKind::Output => inp.unwrap(),
            LayerKind::Add => {
                let a = shapes[node.inputs[0]];
                let b = shapes[node.inputs[1]];
                if a != b {
                    return Err(fail(format!("Add shape mismatch: {a} vs {b}")));
                }
                a
            }
        };
        shapes[id] = out;
    }
    Ok(ShapeTable { shapes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_model_spec;

    fn shapes_of(spec: &str) -> Result<(Graph, ShapeTable)> {
        let g = parse_model_spec(spec)?;
        let s = infer_shapes(&g)?;
        Ok((g, s))
    }

    #[test]
    fn same_padding_conv_keeps_spatial_dims() {
        let (g, s) = shapes_of(
            "in: input(channels=3, height=32, width=32)\n\
             c: conv2d(out=64, kernel=3, padding=1) <- in\n\
             p: maxpool(kernel=2, stride=2) <- c\n\
             out: output() <- p\n",
        )
        .unwrap();
        assert_eq!(s[g.find("c").unwrap()], Shape::new(64, 32, 32));
        assert_eq!(s[g.find("p").unwrap()], Shape::new(64, 16, 16));
    }

    #[test]
    fn strided_conv_uses_floor_arithmetic() {
        let (g, s) = shapes_of(
            "in: input(channels=1, height=7, width=6)\n\
             c: conv2d(out=2, kernel=3, stride=2) <- in\n\
             out: output() <- c\n",
        )
        .unwrap();
        // floor((7 - 3) / 2) + 1 = 3, floor((6 - 3) / 2) + 1 = 2
        assert_eq!(s[g.find("c").unwrap()], Shape::new(2, 3, 2));
    }

    #[test]
    fn add_shape_mismatch_is_rejected() {
        let err = shapes_of(
            "in: input(channels=3, height=16, width=16)\n\
             a: conv2d(out=64, kernel=1) <- in\n\
             b: conv2d(out=32, kernel=1) <- in\n\
             s: add() <- a, b\n\
             out: output() <- s\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("Add shape mismatch"), "{err}");
    }

    #[test]
    fn non_positive_spatial_dimension() {
        let err = shapes_of(
            "in: input(channels=3, height=2, width=2)\n\
             c: conv2d(out=4, kernel=3) <- in\n\
             out: output() <- c\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("spatial"), "{err}");
    }

    #[test]
    fn classifier_head_shapes() {
        let (g, s) = shapes_of(
            "in: input(channels=3, height=8, width=8)\n\
             c: conv2d(out=5, kernel=3, padding=1) <- in\n\
             f: flatten() <- c\n\
             fc: fc(out=10) <- f\n\
             out: output() <- fc\n",
        )
        .unwrap();
        assert_eq!(s[g.find("f").unwrap()], Shape::new(5, 8, 8));
        assert_eq!(s[g.find("fc").unwrap()], Shape::new(10, 1, 1));
    }
}
