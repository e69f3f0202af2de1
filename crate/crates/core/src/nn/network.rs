use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, BnCache, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::graph::{Architecture, GroupId, LayerKind, NodeId};
use crate::par::Parallelism;

/// Learnable tensors of one node. Unused fields are empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn count(&self) -> usize {
        self.weight.len() + self.bias.len() + self.gamma.len() + self.beta.len()
    }

    fn zeros_like(&self) -> Self {
        let z = |v: &Vec<T>| vec![T::zero(); v.len()];
        LayerParams {
            weight: z(&self.weight),
            bias: z(&self.bias),
            gamma: z(&self.gamma),
            beta: z(&self.beta),
        }
    }

    fn cast<U: Scalar>(&self) -> LayerParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::from_f64(x.as_f64())).collect();
        LayerParams {
            weight: c(&self.weight),
            bias: c(&self.bias),
            gamma: c(&self.gamma),
            beta: c(&self.beta),
        }
    }
}

/// One [`LayerParams`] per graph node, indexed by node id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Params<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros_like(&self) -> Self {
        Params {
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.layers.iter().map(LayerParams::count).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            layers: self.layers.iter().map(LayerParams::cast).collect(),
        }
    }

    /// Every tensor with a flag telling whether weight decay applies to it.
    pub fn tensors_mut(&mut self) -> Vec<(&mut Vec<T>, bool)> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push((&mut l.weight, true));
            out.push((&mut l.bias, false));
            out.push((&mut l.gamma, false));
            out.push((&mut l.beta, false));
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Vec<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias, &l.gamma, &l.beta])
            .collect()
    }
}

/// Batch-norm running statistics of one node (empty without batch norm).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Binary keep masks, one vector per mask group over the group's base width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Masks {
    groups: Vec<Vec<bool>>,
}

impl Masks {
    pub fn ones(arch: &Architecture) -> Self {
        Masks {
            groups: (0..arch.num_groups())
                .map(|g| vec![true; group_width(arch, g)])
                .collect(),
        }
    }

    pub fn new(arch: &Architecture, groups: Vec<Vec<bool>>) -> Result<Self> {
        if groups.len() != arch.num_groups() {
            return Err(Error::TensorShape(format!(
                "{} mask vectors for {} groups",
                groups.len(),
                arch.num_groups()
            )));
        }
        for (g, m) in groups.iter().enumerate() {
            if m.len() != group_width(arch, g) {
                return Err(Error::TensorShape(format!(
                    "mask of group {g} has {} entries, expected {}",
                    m.len(),
                    group_width(arch, g)
                )));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::TensorShape(format!(
                    "mask of group {g} keeps no channel"
                )));
            }
        }
        Ok(Masks { groups })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group(&self, g: GroupId) -> &[bool] {
        &self.groups[g]
    }

    pub fn groups(&self) -> &[Vec<bool>] {
        &self.groups
    }

    pub fn set_group(&mut self, g: GroupId, mask: Vec<bool>) {
        assert_eq!(mask.len(), self.groups[g].len(), "mask width");
        assert!(
            mask.iter().any(|&b| b),
            "a mask must keep at least one channel"
        );
        self.groups[g] = mask;
    }

    pub fn popcount(&self, g: GroupId) -> usize {
        self.groups[g].iter().filter(|&&b| b).count()
    }

    /// Kept channel indices of `node`'s output.
    pub fn kept_channels(&self, arch: &Architecture, node: NodeId) -> Vec<usize> {
        match arch.groups.group_of(node) {
            Some(g) => (0..self.groups[g].len())
                .filter(|&c| self.groups[g][c])
                .collect(),
            None => (0..arch.shapes[node].channels).collect(),
        }
    }

    /// Fraction of entries that differ from `other`.
    pub fn churn(&self, other: &Masks) -> f64 {
        let (mut diff, mut total) = (0usize, 0usize);
        for (a, b) in self.groups.iter().zip(&other.groups) {
            diff += a.iter().zip(b).filter(|(x, y)| x != y).count();
            total += a.len();
        }
        if total == 0 {
            0.0
        } else {
            diff as f64 / total as f64
        }
    }
}

/// Base width of a mask group.
pub fn group_width(arch: &Architecture, g: GroupId) -> usize {
    arch.shapes[arch.groups.members(g)[0]].channels
}

/// Which statistics batch normalisation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch (training and gradient probing).
    Batch,
    /// Running statistics (evaluation).
    Running,
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    outputs: Vec<Tensor<T>>,
    pre_mask: Vec<Option<Tensor<T>>>,
    bn: Vec<Option<BnCache<T>>>,
    argmax: Vec<Vec<u32>>,
    output: NodeId,
}

impl<T: Scalar> ForwardPass<T> {
    /// Network output as `(N, K, 1, 1)`.
    pub fn logits(&self) -> &Tensor<T> {
        &self.outputs[self.output]
    }

    pub fn into_logits(mut self) -> Tensor<T> {
        self.outputs.swap_remove(self.output)
    }

    pub fn activation(&self, node: NodeId) -> &Tensor<T> {
        &self.outputs[node]
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: Params<T>,
    /// `dL/dM` per group and channel, evaluated at the current masks.
    pub masks: Vec<Vec<f64>>,
}

/// A network: architecture, parameters and batch-norm statistics.
///
/// Parameters always have the architecture's base widths; pruning is expressed
/// through [`Masks`] until [`super::materialize_pruned`] shrinks the tensors.
#[derive(Clone, Debug)]
pub struct Model<T> {
    arch: Architecture,
    pub params: Params<T>,
    pub stats: Vec<BnStats<T>>,
    /// Node whose output carries each group's mask. A masked layer followed
    /// only by a ReLU is masked after the ReLU.
    mask_site: Vec<Option<GroupId>>,
}

fn param_shapes(arch: &Architecture, id: NodeId) -> (usize, usize, usize, usize) {
    let g = &arch.graph;
    let node = g.node(id);
    let cin = node.inputs.first().map_or(0, |&p| arch.shapes[p].channels);
    let out = arch.shapes[id].channels;
    match node.kind {
        LayerKind::Conv2d {
            kernel_h,
            kernel_w,
            batch_norm,
            ..
        } => {
            let bn = if batch_norm { out } else { 0 };
            (kernel_h * kernel_w * cin * out, out, bn, bn)
        }
        LayerKind::DepthwiseConv2d {
            kernel, batch_norm, ..
        } => {
            let bn = if batch_norm { out } else { 0 };
            (kernel * kernel * out, 0, bn, bn)
        }
        LayerKind::FullyConnected { out_units } => {
            let f = arch.shapes[node.inputs[0]].elements();
            (f * out_units, out_units, 0, 0)
        }
        _ => (0, 0, 0, 0),
    }
}

fn fan_in(arch: &Architecture, id: NodeId) -> usize {
    let (w, ..) = param_shapes(arch, id);
    w / arch.shapes[id].channels.max(1)
}

impl<T: Scalar> Model<T> {
    /// He-normal convolution weights, `N(0, 1/fan_in)` classifier weights,
    /// zero biases, unit batch-norm scales.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let n = arch.graph.len();
        let mut layers = Vec::with_capacity(n);
        let mut stats = Vec::with_capacity(n);
        for id in 0..n {
            let (w, b, gm, bt) = param_shapes(&arch, id);
            let gain = match arch.graph.node(id).kind {
                LayerKind::FullyConnected { .. } => 1.0,
                _ => 2.0,
            };
            let std = if w > 0 {
                (gain / fan_in(&arch, id) as f64).sqrt()
            } else {
                0.0
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            layers.push(LayerParams {
                weight: (0..w).map(|_| T::from_f64(normal.sample(rng))).collect(),
                bias: vec![T::zero(); b],
                gamma: vec![T::one(); gm],
                beta: vec![T::zero(); bt],
            });
            stats.push(BnStats {
                mean: vec![T::zero(); gm],
                var: vec![T::one(); gm],
            });
        }
        Self::assemble(arch, Params { layers }, stats)
    }

    /// Rebuilds a model from stored tensors, checking every size.
    pub fn from_parts(
        arch: Architecture,
        params: Params<T>,
        stats: Vec<BnStats<T>>,
    ) -> Result<Self> {
        let n = arch.graph.len();
        if params.layers.len() != n || stats.len() != n {
            return Err(Error::TensorShape(format!(
                "parameters for {} nodes, statistics for {}, graph has {n}",
                params.layers.len(),
                stats.len()
            )));
        }
        for (id, (l, s)) in params.layers.iter().zip(&stats).enumerate() {
            let (w, b, gm, bt) = param_shapes(&arch, id);
            let got = (l.weight.len(), l.bias.len(), l.gamma.len(), l.beta.len());
            if got != (w, b, gm, bt) || s.mean.len() != gm || s.var.len() != gm {
                return Err(Error::TensorShape(format!(
                    "node `{}`: parameter sizes {got:?}, expected {:?}",
                    arch.graph.node(id).name,
                    (w, b, gm, bt)
                )));
            }
        }
        Ok(Self::assemble(arch, params, stats))
    }

    fn assemble(arch: Architecture, params: Params<T>, stats: Vec<BnStats<T>>) -> Self {
        let g = &arch.graph;
        let mut mask_site = vec![None; g.len()];
        for grp in 0..arch.num_groups() {
            for &n in arch.groups.masked_nodes(grp) {
                let consumers = g.consumers(n);
                let site = match consumers {
                    [c] if g.node(*c).kind == LayerKind::Relu => *c,
                    _ => n,
                };
                mask_site[site] = Some(grp);
            }
        }
        Model {
            arch,
            params,
            stats,
            mask_site,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
            stats: self
                .stats
                .iter()
                .map(|s| BnStats {
                    mean: s.mean.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
                    var: s.var.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
                })
                .collect(),
            mask_site: self.mask_site.clone(),
        }
    }

    fn geom(&self, id: NodeId) -> ConvGeom {
        let node = self.arch.graph.node(id);
        let s = self.arch.shapes[node.inputs[0]];
        match node.kind {
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                stride,
                padding,
                ..
            } => ConvGeom::new(
                s.channels, s.height, s.width, kernel_h, kernel_w, stride, padding,
            ),
            LayerKind::DepthwiseConv2d {
                kernel,
                stride,
                padding,
                ..
            } => ConvGeom::new(
                s.channels, s.height, s.width, kernel, kernel, stride, padding,
            ),
            _ => unreachable!("not a convolution"),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        masks: &Masks,
        mode: BnMode,
        par: Parallelism,
    ) -> Result<ForwardPass<T>> {
        let g = &self.arch.graph;
        let input_shape = self.arch.shapes[g.input()];
        let [_, c, h, w] = x.shape();
        if (c, h, w) != (input_shape.channels, input_shape.height, input_shape.width) {
            return Err(Error::TensorShape(format!(
                "input batch {:?} does not match model input {input_shape}",
                x.shape()
            )));
        }
        if masks.len() != self.arch.num_groups() {
            return Err(Error::TensorShape(
                "mask count does not match the model".into(),
            ));
        }
        let n = g.len();
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut pre_mask = vec![None; n];
        let mut bn = vec![None; n];
        let mut argmax = vec![Vec::new(); n];
        for &id in g.topo_order() {
            let node = g.node(id);
            let inp = |k: usize| outputs[node.inputs[k]].as_ref().expect("topological order");
            let p = &self.params.layers[id];
            let mut out = match node.kind {
                LayerKind::Input { .. } => x.clone(),
                LayerKind::Conv2d {
                    out_channels,
                    batch_norm,
                    ..
                } => {
                    let mut u = ops::conv_forward(
                        &self.geom(id),
                        inp(0),
                        &p.weight,
                        &p.bias,
                        out_channels,
                        par,
                    );
                    if batch_norm {
                        bn[id] = Some(self.batch_norm(id, &mut u, mode));
                    }
                    u
                }
                LayerKind::DepthwiseConv2d { batch_norm, .. } => {
                    let mut u = ops::depthwise_forward(&self.geom(id), inp(0), &p.weight, par);
                    if batch_norm {
                        bn[id] = Some(self.batch_norm(id, &mut u, mode));
                    }
                    u
                }
                LayerKind::FullyConnected { out_units } => {
                    ops::linear_forward(inp(0), &p.weight, &p.bias, out_units)
                }
                LayerKind::Relu => {
                    let mut y = inp(0).clone();
                    for v in y.data_mut() {
                        *v = v.max(T::zero());
                    }
                    y
                }
                LayerKind::MaxPool { kernel, stride } => {
                    let (y, a) = ops::max_pool_forward(inp(0), kernel, stride);
                    argmax[id] = a;
                    y
                }
                LayerKind::GlobalAvgPool => ops::global_avg_pool_forward(inp(0)),
                LayerKind::Add => {
                    let mut y = inp(0).clone();
                    ops::add_into(y.data_mut(), inp(1).data());
                    y
                }
                LayerKind::Flatten | LayerKind::Output => inp(0).clone(),
            };
            if let Some(grp) = self.mask_site[id] {
                pre_mask[id] = Some(out.clone());
                apply_channel_mask(&mut out, masks.group(grp));
            }
            if cfg!(debug_assertions) && !out.all_finite() {
                return Err(Error::TensorShape(format!(
                    "non-finite activation at `{}`",
                    node.name
                )));
            }
            outputs[id] = Some(out);
        }
        Ok(ForwardPass {
            outputs: outputs
                .into_iter()
                .map(|o| o.expect("every node executed"))
                .collect(),
            pre_mask,
            bn,
            argmax,
            output: g.output(),
        })
    }

    fn batch_norm(&self, id: NodeId, u: &mut Tensor<T>, mode: BnMode) -> BnCache<T> {
        let p = &self.params.layers[id];
        let s = &self.stats[id];
        let running = match mode {
            BnMode::Batch => None,
            BnMode::Running => Some((s.mean.as_slice(), s.var.as_slice())),
        };
        ops::batch_norm_forward(u, &p.gamma, &p.beta, running)
    }

    /// Convenience: evaluation-mode logits.
    pub fn predict(&self, x: &Tensor<T>, masks: &Masks, par: Parallelism) -> Result<Tensor<T>> {
        Ok(self.forward(x, masks, BnMode::Running, par)?.into_logits())
    }

    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        dlogits: &Tensor<T>,
        masks: &Masks,
        par: Parallelism,
    ) -> Gradients<T> {
        let g = &self.arch.graph;
        let n = g.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut pgrads = self.params.zeros_like();
        let mut mgrads: Vec<Vec<f64>> = masks.groups().iter().map(|m| vec![0.0; m.len()]).collect();
        assert_eq!(dlogits.shape(), pass.logits().shape(), "dlogits shape");
        grads[g.output()] = Some(dlogits.clone());

        let accumulate =
            |grads: &mut Vec<Option<Tensor<T>>>, p: NodeId, d: Tensor<T>| match &mut grads[p] {
                Some(acc) => ops::add_into(acc.data_mut(), d.data()),
                slot @ None => *slot = Some(d),
            };

        for &id in g.topo_order().iter().rev() {
            let Some(mut dy) = grads[id].take() else {
                continue;
            };
            let node = g.node(id);
            if let Some(grp) = self.mask_site[id] {
                let pre = pass.pre_mask[id]
                    .as_ref()
                    .expect("mask sites keep their input");
                let hw = dy.spatial();
                let c = dy.channels();
                for (i, (dplane, zplane)) in
                    dy.data().chunks(hw).zip(pre.data().chunks(hw)).enumerate()
                {
                    let s: T = dplane.iter().zip(zplane).map(|(&a, &b)| a * b).sum();
                    mgrads[grp][i % c] += s.as_f64();
                }
                apply_channel_mask(&mut dy, masks.group(grp));
            }
            let need_dx = |p: NodeId| p != g.input();
            let pg = &mut pgrads.layers[id];
            let p = &self.params.layers[id];
            match node.kind {
                LayerKind::Input { .. } => {}
                LayerKind::Output | LayerKind::Flatten => {
                    accumulate(&mut grads, node.inputs[0], dy);
                }
                LayerKind::Relu => {
                    let x = &pass.outputs[node.inputs[0]];
                    for (d, &v) in dy.data_mut().iter_mut().zip(x.data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], dy);
                }
                LayerKind::Conv2d { batch_norm, .. } => {
                    if batch_norm {
                        let cache = pass.bn[id].as_ref().expect("batch-norm cache");
                        let (du, dgamma, dbeta) = ops::batch_norm_backward(cache, &p.gamma, &dy);
                        pg.gamma = dgamma;
                        pg.beta = dbeta;
                        dy = du;
                    }
                    let src = node.inputs[0];
                    let (dw, db, dx) = ops::conv_backward(
                        &self.geom(id),
                        &pass.outputs[src],
                        &p.weight,
                        &dy,
                        need_dx(src),
                        par,
                    );
                    pg.weight = dw;
                    pg.bias = db;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, src, dx);
                    }
                }
                LayerKind::DepthwiseConv2d { batch_norm, .. } => {
                    if batch_norm {
                        let cache = pass.bn[id].as_ref().expect("batch-norm cache");
                        let (du, dgamma, dbeta) = ops::batch_norm_backward(cache, &p.gamma, &dy);
                        pg.gamma = dgamma;
                        pg.beta = dbeta;
                        dy = du;
                    }
                    let src = node.inputs[0];
                    let (dw, dx) = ops::depthwise_backward(
                        &self.geom(id),
                        &pass.outputs[src],
                        &p.weight,
                        &dy,
                        need_dx(src),
                        par,
                    );
                    pg.weight = dw;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, src, dx);
                    }
                }
                LayerKind::FullyConnected { .. } => {
                    let src = node.inputs[0];
                    let (dw, db, dx) = ops::linear_backward(&pass.outputs[src], &p.weight, &dy);
                    pg.weight = dw;
                    pg.bias = db;
                    if need_dx(src) {
                        accumulate(&mut grads, src, dx);
                    }
                }
                LayerKind::MaxPool { .. } => {
                    let src = node.inputs[0];
                    let dx =
                        ops::max_pool_backward(pass.outputs[src].shape(), &pass.argmax[id], &dy);
                    accumulate(&mut grads, src, dx);
                }
                LayerKind::GlobalAvgPool => {
                    let src = node.inputs[0];
                    let dx = ops::global_avg_pool_backward(pass.outputs[src].shape(), &dy);
                    accumulate(&mut grads, src, dx);
                }
                LayerKind::Add => {
                    accumulate(&mut grads, node.inputs[0], dy.clone());
                    accumulate(&mut grads, node.inputs[1], dy);
                }
            }
        }
        Gradients {
            params: pgrads,
            masks: mgrads,
        }
    }

    /// Folds the batch statistics of a training pass into the running
    /// statistics. Channels currently masked off keep their old values.
    pub fn update_running_stats(&mut self, pass: &ForwardPass<T>, masks: &Masks, momentum: f64) {
        let m = T::from_f64(momentum);
        for id in 0..self.arch.graph.len() {
            let Some(cache) = pass.bn[id].as_ref().filter(|c| c.batch_stats) else {
                continue;
            };
            let count = (cache.xhat.batch() * cache.xhat.spatial()) as f64;
            let unbias = T::from_f64(if count > 1.0 {
                count / (count - 1.0)
            } else {
                1.0
            });
            let group = self.arch.groups.group_of(id);
            let s = &mut self.stats[id];
            for c in 0..s.mean.len() {
                if group.is_some_and(|g| !masks.group(g)[c]) {
                    continue;
                }
                s.mean[c] = (T::one() - m) * s.mean[c] + m * cache.batch_mean[c];
                s.var[c] = (T::one() - m) * s.var[c] + m * cache.batch_var[c] * unbias;
            }
        }
    }

    /// Multiply-accumulates of one training step on `batch` samples at the
    /// model's current (unmasked) width: forward plus two backward products.
    pub fn training_macs(&self, batch: usize) -> u64 {
        3 * batch as u64 * crate::resources::mac_count(&self.arch, &self.arch.unpruned())
    }
}

fn apply_channel_mask<T: Scalar>(t: &mut Tensor<T>, mask: &[bool]) {
    let hw = t.spatial();
    let c = t.channels();
    assert_eq!(c, mask.len(), "mask width must match channel count");
    for (i, plane) in t.data_mut().chunks_mut(hw).enumerate() {
        if !mask[i % c] {
            plane.fill(T::zero());
        }
    }
}
