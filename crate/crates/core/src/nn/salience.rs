use super::{Model, Scalar};
use crate::error::{Error, Result};
use crate::graph::{GroupId, LayerKind, NodeId};

/// Per-output-channel importance of a prunable layer.
///
/// Convolutions with batch norm use `|gamma_i|`; other convolutions and
/// fully-connected layers use the L2 norm of the weights producing output
/// `i`. A depthwise convolution has no width of its own and reports the
/// salience of its group.
pub fn salience<T: Scalar>(model: &Model<T>, node: NodeId) -> Result<Vec<f64>> {
    let arch = model.arch();
    let not_prunable = || Error::NotPrunable(arch.graph.node(node).name.clone());
    let group = arch.groups.group_of(node).ok_or_else(not_prunable)?;
    let p = &model.params.layers[node];
    match arch.graph.node(node).kind {
        LayerKind::Conv2d {
            batch_norm: true, ..
        } => Ok(p.gamma.iter().map(|g| g.as_f64().abs()).collect()),
        LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. } => {
            let rows = arch.shapes[node].channels;
            let per = p.weight.len() / rows;
            Ok(p.weight
                .chunks(per)
                .map(|r| r.iter().map(|w| w.as_f64().powi(2)).sum::<f64>().sqrt())
                .collect())
        }
        LayerKind::DepthwiseConv2d { .. } => Ok(group_salience(model, group)),
        _ => Err(not_prunable()),
    }
}

/// Elementwise maximum of the members' saliences.
pub fn group_salience<T: Scalar>(model: &Model<T>, g: GroupId) -> Vec<f64> {
    let members = model.arch().groups.members(g);
    let mut out: Option<Vec<f64>> = None;
    for &m in members {
        let s = salience(model, m).expect("group members are prunable");
        out = Some(match out {
            None => s,
            Some(acc) => acc.iter().zip(&s).map(|(a, b)| a.max(*b)).collect(),
        });
    }
    out.expect("groups are non-empty")
}
