use serde::{Deserialize, Serialize};

use super::{BnStats, LayerParams, Masks, Model, Params, Scalar};
use crate::error::Result;
use crate::graph::{Architecture, Graph, LayerKind, Node};

/// Physically removes masked-off channels, returning a smaller model whose
/// evaluation-mode outputs equal the masked model's.
pub fn materialize_pruned<T: Scalar>(model: &Model<T>, masks: &Masks) -> Result<Model<T>> {
    let arch = model.arch();
    let g = &arch.graph;
    let kept: Vec<Vec<usize>> = (0..g.len()).map(|n| masks.kept_channels(arch, n)).collect();

    let nodes: Vec<Node> = g
        .nodes()
        .iter()
        .enumerate()
        .map(|(id, node)| {
            let kind = match node.kind.clone() {
                LayerKind::Conv2d {
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                    batch_norm,
                    ..
                } => LayerKind::Conv2d {
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                    out_channels: kept[id].len(),
                    batch_norm,
                },
                LayerKind::FullyConnected { .. } => LayerKind::FullyConnected {
                    out_units: kept[id].len(),
                },
                k => k,
            };
            Node::new(node.name.clone(), kind, node.inputs.clone())
        })
        .collect();
    let new_arch = Architecture::new(Graph::new(nodes)?)?;

    let pick = |v: &[T], idx: &[usize]| -> Vec<T> { idx.iter().map(|&i| v[i]).collect() };
    let mut layers = Vec::with_capacity(g.len());
    let mut stats = Vec::with_capacity(g.len());
    for id in 0..g.len() {
        let node = g.node(id);
        let p = &model.params.layers[id];
        let s = &model.stats[id];
        let out = &kept[id];
        let weight = match node.kind {
            LayerKind::Conv2d {
                kernel_h, kernel_w, ..
            } => {
                let src = node.inputs[0];
                let cin = arch.shapes[src].channels;
                let taps = kernel_h * kernel_w;
                let mut w = Vec::with_capacity(out.len() * kept[src].len() * taps);
                for &co in out {
                    for &ci in &kept[src] {
                        let at = (co * cin + ci) * taps;
                        w.extend_from_slice(&p.weight[at..at + taps]);
                    }
                }
                w
            }
            LayerKind::DepthwiseConv2d { kernel, .. } => {
                let taps = kernel * kernel;
                out.iter()
                    .flat_map(|&c| p.weight[c * taps..(c + 1) * taps].iter().copied())
                    .collect()
            }
            LayerKind::FullyConnected { .. } => {
                let src = node.inputs[0];
                let shape = arch.shapes[src];
                let f = shape.elements();
                let hw = shape.spatial();
                let mut w = Vec::new();
                for &u in out {
                    for &c in &kept[src] {
                        let at = u * f + c * hw;
                        w.extend_from_slice(&p.weight[at..at + hw]);
                    }
                }
                w
            }
            _ => Vec::new(),
        };
        let select = |v: &Vec<T>| {
            if v.is_empty() {
                Vec::new()
            } else {
                pick(v, out)
            }
        };
        layers.push(LayerParams {
            weight,
            bias: select(&p.bias),
            gamma: select(&p.gamma),
            beta: select(&p.beta),
        });
        stats.push(BnStats {
            mean: select(&s.mean),
            var: select(&s.var),
        });
    }
    Model::from_parts(new_arch, Params { layers }, stats)
}

/// An int8 tensor with its per-tensor affine mapping
/// `w ~ (q - zero_point) * scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub values: Vec<i8>,
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&q| (q as i32 - self.zero_point) as f64 * self.scale)
            .collect()
    }
}

/// Asymmetric per-tensor quantisation with `scale = (max - min) / 255`. A
/// constant tensor gets `scale = 1` and `zero_point = -round(w)`.
pub fn affine_quantize(w: &[f64]) -> QuantizedTensor {
    let (lo, hi) = w
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let (scale, zero_point) = if w.is_empty() || hi <= lo {
        let c = if w.is_empty() { 0.0 } else { lo };
        (1.0, (-c.round()).clamp(-128.0, 127.0) as i32)
    } else {
        let scale = (hi - lo) / 255.0;
        (
            scale,
            (-128.0 - lo / scale).round().clamp(-128.0, 127.0) as i32,
        )
    };
    let values = w
        .iter()
        .map(|&x| ((x / scale).round() + zero_point as f64).clamp(-128.0, 127.0) as i8)
        .collect();
    QuantizedTensor {
        values,
        scale,
        zero_point,
    }
}

/// Quantises every non-empty parameter tensor, in node order (weight, bias,
/// gamma, beta).
pub fn affine_quantize_weights<T: Scalar>(params: &Params<T>) -> Vec<QuantizedTensor> {
    params
        .tensors()
        .into_iter()
        .filter(|t| !t.is_empty())
        .map(|t| affine_quantize(&t.iter().map(|x| x.as_f64()).collect::<Vec<_>>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_range_scale() {
        let q = affine_quantize(&[-1.0, 0.0, 0.5, 1.0]);
        assert!((q.scale - 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(q.values[0], -128);
        assert_eq!(q.values[3], 127);
    }

    #[test]
    fn zeros_map_to_the_zero_point() {
        let q = affine_quantize(&[0.0; 5]);
        assert_eq!(q.scale, 1.0);
        assert!(q.values.iter().all(|&v| v as i32 == q.zero_point));
    }

    #[test]
    fn constant_tensor_round_trips() {
        let q = affine_quantize(&[3.0; 4]);
        assert_eq!(q.zero_point, -3);
        assert!(q.dequantize().iter().all(|&v| (v - 3.0).abs() <= 0.5));
    }
}
