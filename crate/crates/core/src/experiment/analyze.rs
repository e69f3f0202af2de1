use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::Architecture;
use crate::memplan::{imprecise_pmu, precise_pmu};
use crate::resources::{LayerUsage, ResourceModel, ResourceOptions, ResourceUsage};

/// Static resource report of one architecture at given widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub size_bytes: u64,
    pub macs: u64,
    pub pmu_precise_bytes: u64,
    pub pmu_imprecise_bytes: u64,
    /// Execution order attaining the precise PMU, by node name.
    pub order: Vec<String>,
    pub bottleneck: Vec<String>,
    pub imprecise_node: String,
    pub layers: Vec<LayerUsage>,
}

impl Analysis {
    pub fn usage(&self) -> (u64, u64, u64) {
        (self.pmu_precise_bytes, self.size_bytes, self.macs)
    }

    pub fn matches(&self, usage: &ResourceUsage) -> bool {
        self.usage() == (usage.pmu_bytes, usage.size_bytes, usage.macs)
    }

    /// `metric,value,kb,kib`; KB is decimal (10^3), KiB binary (2^10).
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,value,kb,kib\n");
        for (name, v) in [
            ("size_bytes", self.size_bytes),
            ("macs", self.macs),
            ("pmu_precise_bytes", self.pmu_precise_bytes),
            ("pmu_imprecise_bytes", self.pmu_imprecise_bytes),
        ] {
            writeln!(
                out,
                "{name},{v},{:.3},{:.3}",
                v as f64 / 1e3,
                v as f64 / 1024.0
            )
            .unwrap();
        }
        out
    }

    pub fn layers_csv(&self) -> String {
        let mut out =
            String::from("node,name,kind,channels,base_channels,params,macs,working_set_bytes\n");
        for l in &self.layers {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                l.node,
                l.name,
                l.kind,
                l.channels,
                l.base_channels,
                l.params,
                l.macs,
                l.working_set_bytes
            )
            .unwrap();
        }
        out
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        let kb = |v: u64| format!("{:.1} KB / {:.1} KiB", v as f64 / 1e3, v as f64 / 1024.0);
        writeln!(
            out,
            "model size     {} B ({})",
            self.size_bytes,
            kb(self.size_bytes)
        )
        .unwrap();
        writeln!(out, "MACs           {}", self.macs).unwrap();
        writeln!(
            out,
            "peak memory    {} B ({})",
            self.pmu_precise_bytes,
            kb(self.pmu_precise_bytes)
        )
        .unwrap();
        writeln!(out, "  bottleneck   {}", self.bottleneck.join(", ")).unwrap();
        writeln!(out, "  order        {}", self.order.join(" ")).unwrap();
        writeln!(
            out,
            "per-operator   {} B (at {})",
            self.pmu_imprecise_bytes, self.imprecise_node
        )
        .unwrap();
        out
    }
}

/// Size, MACs, precise and per-operator PMU and a per-layer table.
pub fn cmd_analyze(
    arch: &Architecture,
    pi: Option<&[f64]>,
    options: &ResourceOptions,
) -> Result<Analysis> {
    let unpruned = arch.unpruned();
    let pi = pi.unwrap_or(&unpruned);
    let model = ResourceModel::new(arch.clone(), options.clone());
    let sizes = model.tensor_sizes(pi);
    let plan = precise_pmu(&arch.graph, &sizes, &options.planner)?;
    let imp = imprecise_pmu(&arch.graph, &sizes, &options.planner);
    let name = |n: usize| arch.graph.node(n).name.clone();
    Ok(Analysis {
        size_bytes: model.model_size(pi),
        macs: model.mac_count(pi),
        pmu_precise_bytes: plan.peak_bytes,
        pmu_imprecise_bytes: imp.peak_bytes,
        order: plan.order.iter().map(|&n| name(n)).collect(),
        bottleneck: plan.bottleneck.iter().map(|&n| name(n)).collect(),
        imprecise_node: name(imp.node),
        layers: model.per_layer(pi),
    })
}
