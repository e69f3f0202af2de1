//! Resource usage models as functions of the width multipliers.
//!
//! Model size and MAC counts are sums of terms `coeff * c_a * c_b`, where each
//! `c` is the channel count of some node (or 1). Evaluating the terms with
//! floored channel counts gives the exact integer usage; evaluating them with
//! `pi_g * C` gives the real relaxation whose derivative is used as the
//! straight-through gradient.

use std::fmt;
use std::str::FromStr;

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Architecture, LayerKind, NodeId};
use crate::memplan::{
    bottleneck_subgradient, imprecise_pmu, precise_pmu, tensor_sizes, PlannerOptions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Pmu,
    Size,
    Macs,
}

impl Objective {
    /// In tie-breaking priority order.
    pub const ALL: [Objective; 3] = [Objective::Pmu, Objective::Size, Objective::Macs];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Pmu => "pmu",
            Objective::Size => "size",
            Objective::Macs => "macs",
        })
    }
}

/// Which peak-memory calculation drives the PMU objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmuMode {
    #[default]
    Precise,
    Imprecise,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceOptions {
    /// Bytes per activation element (1 for int8 inference).
    pub activation_bytes: u64,
    /// Count batch-norm scale and offset in the model size.
    pub count_batch_norm: bool,
    pub pmu_mode: PmuMode,
    pub planner: PlannerOptions,
}

impl Default for ResourceOptions {
    fn default() -> Self {
        ResourceOptions {
            activation_bytes: 1,
            count_batch_norm: true,
            pmu_mode: PmuMode::Precise,
            planner: PlannerOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceBudget {
    pub pmu_bytes: u64,
    pub size_bytes: u64,
    pub macs: u64,
}

impl ResourceBudget {
    pub fn new(pmu_bytes: u64, size_bytes: u64, macs: u64) -> Result<Self> {
        if pmu_bytes == 0 || size_bytes == 0 || macs == 0 {
            return Err(Error::Config(
                "resource budgets must be strictly positive".into(),
            ));
        }
        Ok(ResourceBudget {
            pmu_bytes,
            size_bytes,
            macs,
        })
    }

    pub fn get(&self, o: Objective) -> u64 {
        match o {
            Objective::Pmu => self.pmu_bytes,
            Objective::Size => self.size_bytes,
            Objective::Macs => self.macs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub pmu_bytes: u64,
    pub size_bytes: u64,
    pub macs: u64,
    /// Buffers forming the peak under the configured PMU calculation.
    pub bottleneck: Vec<NodeId>,
}

impl ResourceUsage {
    pub fn get(&self, o: Objective) -> u64 {
        match o {
            Objective::Pmu => self.pmu_bytes,
            Objective::Size => self.size_bytes,
            Objective::Macs => self.macs,
        }
    }

    pub fn within(&self, budget: &ResourceBudget) -> bool {
        Objective::ALL.iter().all(|&o| self.get(o) <= budget.get(o))
    }

    /// Objectives over budget, as `(objective, usage, budget)`.
    pub fn violations(&self, budget: &ResourceBudget) -> Vec<(Objective, u64, u64)> {
        Objective::ALL
            .iter()
            .filter(|&&o| self.get(o) > budget.get(o))
            .map(|&o| (o, self.get(o), budget.get(o)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Term {
    node: NodeId,
    coeff: u64,
    a: Option<NodeId>,
    b: Option<NodeId>,
}

#[derive(Clone, Debug)]
struct Terms(Vec<Term>);

impl Terms {
    fn exact(&self, arch: &Architecture, pi: &[f64], node: Option<NodeId>) -> u64 {
        let ch = |x: Option<NodeId>| x.map_or(1, |n| arch.effective_channels(n, pi) as u64);
        self.0
            .iter()
            .filter(|t| node.is_none_or(|n| t.node == n))
            .map(|t| t.coeff * ch(t.a) * ch(t.b))
            .sum()
    }

    fn relaxed(&self, arch: &Architecture, pi: &[f64]) -> f64 {
        let ch = |x: Option<NodeId>| x.map_or(1.0, |n| arch.relaxed_channels(n, pi));
        self.0
            .iter()
            .map(|t| t.coeff as f64 * ch(t.a) * ch(t.b))
            .sum()
    }

    fn gradient(&self, arch: &Architecture, pi: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; arch.num_groups()];
        let ch = |x: Option<NodeId>| x.map_or(1.0, |n| arch.relaxed_channels(n, pi));
        // d(pi_g * C)/d(pi_g) = C
        let slope = |x: Option<NodeId>| {
            x.and_then(|n| {
                arch.groups
                    .group_of(n)
                    .map(|g| (g, arch.shapes[n].channels as f64))
            })
        };
        for t in &self.0 {
            let c = t.coeff as f64;
            if let Some((g, s)) = slope(t.a) {
                grad[g] += c * s * ch(t.b);
            }
            if let Some((g, s)) = slope(t.b) {
                grad[g] += c * ch(t.a) * s;
            }
        }
        grad
    }
}

fn cost_terms(arch: &Architecture, count_batch_norm: bool) -> (Terms, Terms) {
    let mut size = Vec::new();
    let mut macs = Vec::new();
    let g = &arch.graph;
    for id in 0..g.len() {
        let node = g.node(id);
        let out = arch.shapes[id];
        let term = |coeff, a, b| Term {
            node: id,
            coeff: coeff as u64,
            a,
            b,
        };
        let bn_params = |bn: bool| if bn && count_batch_norm { 2 } else { 0 };
        match node.kind {
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                batch_norm,
                ..
            } => {
                let p = node.inputs[0];
                let k = kernel_h * kernel_w;
                size.push(term(k, Some(p), Some(id)));
                size.push(term(1 + bn_params(batch_norm), Some(id), None));
                macs.push(term(k * out.spatial(), Some(p), Some(id)));
            }
            LayerKind::DepthwiseConv2d {
                kernel, batch_norm, ..
            } => {
                let k = kernel * kernel;
                size.push(term(k + bn_params(batch_norm), Some(id), None));
                macs.push(term(k * out.spatial(), Some(id), None));
            }
            LayerKind::FullyConnected { .. } => {
                let p = node.inputs[0];
                let features = arch.shapes[p].spatial();
                size.push(term(features, Some(p), Some(id)));
                size.push(term(1, Some(id), None));
                macs.push(term(features, Some(p), Some(id)));
            }
            _ => {}
        }
    }
    (Terms(size), Terms(macs))
}

/// Total parameter count at one byte per parameter.
pub fn model_size(arch: &Architecture, pi: &[f64]) -> u64 {
    cost_terms(arch, true).0.exact(arch, pi, None)
}

/// Multiply-accumulate operations for one inference.
pub fn mac_count(arch: &Architecture, pi: &[f64]) -> u64 {
    cost_terms(arch, true).1.exact(arch, pi, None)
}

/// Resource figures for one layer, used by reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerUsage {
    pub node: NodeId,
    pub name: String,
    pub kind: String,
    pub channels: usize,
    pub base_channels: usize,
    pub params: u64,
    pub macs: u64,
    /// Input plus output activation bytes while the layer executes.
    pub working_set_bytes: u64,
}

/// Resource calculators bound to one architecture.
#[derive(Clone, Debug)]
pub struct ResourceModel {
    arch: Architecture,
    options: ResourceOptions,
    size: Terms,
    macs: Terms,
}

impl ResourceModel {
    pub fn new(arch: Architecture, options: ResourceOptions) -> Self {
        let (size, macs) = cost_terms(&arch, options.count_batch_norm);
        ResourceModel {
            arch,
            options,
            size,
            macs,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn options(&self) -> &ResourceOptions {
        &self.options
    }

    pub fn model_size(&self, pi: &[f64]) -> u64 {
        self.size.exact(&self.arch, pi, None)
    }

    pub fn mac_count(&self, pi: &[f64]) -> u64 {
        self.macs.exact(&self.arch, pi, None)
    }

    pub fn relaxed_model_size(&self, pi: &[f64]) -> f64 {
        self.size.relaxed(&self.arch, pi)
    }

    pub fn relaxed_mac_count(&self, pi: &[f64]) -> f64 {
        self.macs.relaxed(&self.arch, pi)
    }

    pub fn size_gradient(&self, pi: &[f64]) -> Vec<f64> {
        self.size.gradient(&self.arch, pi)
    }

    pub fn mac_gradient(&self, pi: &[f64]) -> Vec<f64> {
        self.macs.gradient(&self.arch, pi)
    }

    pub fn tensor_sizes(&self, pi: &[f64]) -> Vec<u64> {
        tensor_sizes(&self.arch, pi, self.options.activation_bytes)
    }

    /// Peak memory under the configured calculation, with its bottleneck.
    pub fn peak_memory(&self, pi: &[f64]) -> Result<(u64, Vec<NodeId>)> {
        self.peak_memory_with(pi, self.options.pmu_mode)
    }

    pub fn peak_memory_with(&self, pi: &[f64], mode: PmuMode) -> Result<(u64, Vec<NodeId>)> {
        let sizes = self.tensor_sizes(pi);
        let planner = &self.options.planner;
        Ok(match mode {
            PmuMode::Precise => {
                let plan = precise_pmu(&self.arch.graph, &sizes, planner)?;
                (plan.peak_bytes, plan.bottleneck)
            }
            PmuMode::Imprecise => {
                let plan = imprecise_pmu(&self.arch.graph, &sizes, planner);
                (plan.peak_bytes, plan.bottleneck)
            }
        })
    }

    pub fn usage(&self, pi: &[f64]) -> Result<ResourceUsage> {
        let (pmu_bytes, bottleneck) = self.peak_memory(pi)?;
        Ok(ResourceUsage {
            pmu_bytes,
            size_bytes: self.model_size(pi),
            macs: self.mac_count(pi),
            bottleneck,
        })
    }

    /// Straight-through gradient of one objective's usage w.r.t. each group.
    pub fn usage_gradient(
        &self,
        objective: Objective,
        pi: &[f64],
        usage: &ResourceUsage,
    ) -> Vec<f64> {
        match objective {
            Objective::Pmu => {
                bottleneck_subgradient(&self.arch, &usage.bottleneck, self.options.activation_bytes)
            }
            Objective::Size => self.size_gradient(pi),
            Objective::Macs => self.mac_gradient(pi),
        }
    }

    /// Usage of the narrowest network the groups allow (one channel each).
    pub fn minimum_usage(&self) -> Result<ResourceUsage> {
        self.usage(&vec![0.0; self.arch.num_groups()])
    }

    pub fn per_layer(&self, pi: &[f64]) -> Vec<LayerUsage> {
        let sizes = self.tensor_sizes(pi);
        let g = &self.arch.graph;
        (0..g.len())
            .map(|id| {
                let node = g.node(id);
                let mut inputs = node.inputs.clone();
                inputs.sort_unstable();
                inputs.dedup();
                LayerUsage {
                    node: id,
                    name: node.name.clone(),
                    kind: node.kind.name().to_string(),
                    channels: self.arch.effective_channels(id, pi),
                    base_channels: self.arch.shapes[id].channels,
                    params: self.size.exact(&self.arch, pi, Some(id)),
                    macs: self.macs.exact(&self.arch, pi, Some(id)),
                    working_set_bytes: sizes[id] + inputs.iter().map(|&p| sizes[p]).sum::<u64>(),
                }
            })
            .collect()
    }
}

/// Random scalarisation coefficients, one per objective in [`Objective::ALL`]
/// order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scalarization {
    pub lambda: [f64; 3],
}

impl Scalarization {
    pub const UNIT: Scalarization = Scalarization { lambda: [1.0; 3] };

    /// `lambda_i = 1 / u_i` for the given uniforms in (0, 1).
    pub fn from_uniforms(u: [f64; 3]) -> Self {
        Scalarization {
            lambda: u.map(|x| 1.0 / x),
        }
    }

    /// Picks the objective maximising `lambda_i * usage_i / budget_i`. Ties
    /// go to the earlier objective (PMU, then size, then MACs).
    pub fn active_objective(
        &self,
        usage: &ResourceUsage,
        budget: &ResourceBudget,
    ) -> (Objective, f64) {
        let mut best = (Objective::Pmu, f64::NEG_INFINITY);
        for o in Objective::ALL {
            let v = self.lambda[o.index()] * usage.get(o) as f64 / budget.get(o) as f64;
            if v > best.1 {
                best = (o, v);
            }
        }
        best
    }
}

/// Draws `lambda_i ~ 1 / Uniform(0, 1)` independently for each objective.
pub fn sample_scalarization<R: Rng + ?Sized>(rng: &mut R) -> Scalarization {
    let mut u = [0.0; 3];
    for x in &mut u {
        *x = rng.sample(Open01);
    }
    Scalarization::from_uniforms(u)
}

/// Budget-scaled, randomly scalarised resource loss, clipped at zero.
///
/// Returns the loss value and the objective selected inside the max.
pub fn resource_loss(
    usage: &ResourceUsage,
    budget: &ResourceBudget,
    scal: &Scalarization,
) -> (f64, Objective) {
    let (active, worst) = scal.active_objective(usage, budget);
    ((worst - 1.0).max(0.0), active)
}

/// Gradient of [`resource_loss`] w.r.t. the width multipliers.
///
/// The coefficients only select the objective; the gradient is that of the
/// unscaled `usage_active / budget_active`, and zero when the loss is clipped.
pub fn resource_loss_gradient(
    model: &ResourceModel,
    pi: &[f64],
    usage: &ResourceUsage,
    budget: &ResourceBudget,
    scal: &Scalarization,
) -> (f64, Objective, Vec<f64>) {
    let (value, active) = resource_loss(usage, budget, scal);
    let mut grad = vec![0.0; pi.len()];
    if value > 0.0 {
        let b = budget.get(active) as f64;
        for (g, d) in grad.iter_mut().zip(model.usage_gradient(active, pi, usage)) {
            *g = d / b;
        }
    }
    (value, active, grad)
}

/// A resource limit as written in a config file: an absolute amount with an
/// optional unit suffix (`K`/`KB` = 10^3, `KiB` = 2^10, `M`/`MB` = 10^6,
/// `MiB` = 2^20, `G`/`GB` = 10^9) or a percentage of the unpruned usage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BudgetValue {
    Absolute(u64),
    Fraction(f64),
}

impl BudgetValue {
    pub fn resolve(&self, unpruned: u64) -> u64 {
        match *self {
            BudgetValue::Absolute(v) => v,
            BudgetValue::Fraction(f) => (unpruned as f64 * f).floor() as u64,
        }
    }
}

impl FromStr for BudgetValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("cannot parse resource amount `{s}`"));
        if let Some(p) = s.strip_suffix('%') {
            let v: f64 = p.trim().parse().map_err(|_| bad())?;
            if !(v > 0.0) {
                return Err(bad());
            }
            return Ok(BudgetValue::Fraction(v / 100.0));
        }
        let split = s
            .find(|c: char| !(c.is_ascii_digit() || c == '.'))
            .unwrap_or(s.len());
        let (num, unit) = (&s[..split], s[split..].trim());
        let scale: u64 = match unit {
            "" | "B" => 1,
            "K" | "KB" | "kB" => 1_000,
            "KiB" => 1 << 10,
            "M" | "MB" => 1_000_000,
            "MiB" => 1 << 20,
            "G" | "GB" => 1_000_000_000,
            "GiB" => 1 << 30,
            _ => return Err(bad()),
        };
        let value = if num.contains('.') {
            let v: f64 = num.parse().map_err(|_| bad())?;
            (v * scale as f64).round() as u64
        } else {
            num.parse::<u64>()
                .map_err(|_| bad())?
                .checked_mul(scale)
                .ok_or_else(bad)?
        };
        if value == 0 {
            return Err(bad());
        }
        Ok(BudgetValue::Absolute(value))
    }
}
