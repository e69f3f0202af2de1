use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::analyze::cmd_analyze;
use super::config::ExperimentConfig;
use crate::checkpoint::Checkpoint;
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::graph::write_model_spec;
use crate::nn::{affine_quantize_weights, materialize_pruned, QuantizedTensor};
use crate::par::Parallelism;
use crate::pruner::{prune_train_loop, telemetry_csv, Alphas, PruneJob, PruneOutcome};
use crate::resources::{ResourceBudget, ResourceModel, ResourceUsage};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PRUNED_SPEC_FILE: &str = "pruned.spec";
pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const LAYERS_FILE: &str = "layers.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Headline results of a train or prune run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub budgets_met: bool,
    pub budget: ResourceBudget,
    pub unpruned: ResourceUsage,
    /// Final usage with the precise PMU.
    pub usage: ResourceUsage,
    /// Final usage under the PMU calculation that drove pruning.
    pub objective_usage: ResourceUsage,
    pub val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub training_macs: u64,
    pub converged_step: Option<usize>,
    pub terminated_step: Option<usize>,
    pub pi: Vec<f64>,
    pub alphas: Option<Alphas>,
}

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs the configured experiment end to end and returns the raw outcome.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    par: Parallelism,
) -> Result<(RunSummary, PruneOutcome)> {
    let arch = cfg.architecture()?;
    let budget = cfg.resolve_budget(&arch)?;
    let splits = cfg.load_data()?;
    let norm = Normalizer::fit(&splits.train);
    let job = PruneJob {
        arch: arch.clone(),
        data: &splits,
        norm: &norm,
        budget,
        train: &cfg.train,
        prune: &cfg.prune,
        resources: cfg.resources.options(),
        seed: cfg.seed,
        parallelism: par,
    };
    let out = prune_train_loop(&job, None)?;
    let unpruned =
        ResourceModel::new(arch.clone(), cfg.resources.options()).usage(&arch.unpruned())?;
    let summary = RunSummary {
        budgets_met: out.budgets_met,
        budget,
        unpruned,
        usage: out.usage.clone(),
        objective_usage: out.objective_usage.clone(),
        val_accuracy: out.val.accuracy,
        test_accuracy: out.test.map(|t| t.accuracy),
        training_macs: out.training_macs,
        converged_step: out.converged_step,
        terminated_step: out.terminated_step,
        pi: out.widths.pi(),
        alphas: out.alphas,
    };
    Ok((summary, out))
}

fn epochs_csv(out: &PruneOutcome) -> String {
    let mut s =
        String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy,training_macs\n");
    for e in &out.epochs {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy, e.training_macs
        )
        .unwrap();
    }
    s
}

/// Per-layer resources before and after pruning.
fn layers_before_after(cfg: &ExperimentConfig, out: &PruneOutcome) -> Result<String> {
    let arch = cfg.architecture()?;
    let opts = cfg.resources.options();
    let before = cmd_analyze(&arch, None, &opts)?.layers;
    let after = cmd_analyze(&arch, Some(&out.widths.pi()), &opts)?.layers;
    let mut s = String::from(
        "node,name,kind,channels_before,channels_after,params_before,params_after,\
         macs_before,macs_after,working_set_before,working_set_after\n",
    );
    for (b, a) in before.iter().zip(&after) {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            b.node,
            b.name,
            b.kind,
            b.channels,
            a.channels,
            b.params,
            a.params,
            b.macs,
            a.macs,
            b.working_set_bytes,
            a.working_set_bytes
        )
        .unwrap();
    }
    Ok(s)
}

/// Trains with pruning and writes the checkpoint, pruned spec, telemetry,
/// per-epoch metrics, per-layer before/after table and summary into `out_dir`.
pub fn cmd_prune(cfg: &ExperimentConfig, out_dir: &Path, par: Parallelism) -> Result<RunSummary> {
    let (summary, out) = run_experiment(cfg, par)?;
    create_dir(out_dir)?;
    let groups = cfg.architecture()?.num_groups();
    Checkpoint::new(&out.model, &out.masks, Some(&out.widths), &out.normalizer)
        .save(&out_dir.join(CHECKPOINT_FILE))?;
    write(
        &out_dir.join(PRUNED_SPEC_FILE),
        &write_model_spec(&out.pruned.arch().graph),
    )?;
    write(
        &out_dir.join(TELEMETRY_FILE),
        &telemetry_csv(groups, &out.telemetry),
    )?;
    write(&out_dir.join(EPOCHS_FILE), &epochs_csv(&out))?;
    write(&out_dir.join(LAYERS_FILE), &layers_before_after(cfg, &out)?)?;
    write(
        &out_dir.join(SUMMARY_FILE),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Plain training: the configured run with pruning disabled.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path, par: Parallelism) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.prune.enabled = false;
    cmd_prune(&cfg, out_dir, par)
}

/// Int8 deployment artefact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportedModel {
    pub model_spec: String,
    /// One entry per parameter tensor, in layer order.
    pub tensors: Vec<QuantizedTensor>,
    pub normalizer: Normalizer,
}

/// Materialises a checkpoint's masks and writes `pruned.spec` and an int8
/// `model.json`. Returns the exported model's resource analysis.
pub fn cmd_export(checkpoint: &Path, out_dir: &Path) -> Result<super::Analysis> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, masks) = ck.restore()?;
    let pruned = materialize_pruned(&model, &masks)?;
    create_dir(out_dir)?;
    let spec = write_model_spec(&pruned.arch().graph);
    write(&out_dir.join(PRUNED_SPEC_FILE), &spec)?;
    let exported = ExportedModel {
        model_spec: spec,
        tensors: affine_quantize_weights(&pruned.params),
        normalizer: ck.normalizer,
    };
    write(
        &out_dir.join("model.json"),
        &serde_json::to_string(&exported)?,
    )?;
    cmd_analyze(pruned.arch(), None, &Default::default())
}

/// One cell of a hyperparameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha_ratio: f64,
    pub lr: f64,
    pub val_accuracy: f64,
    pub budgets_met: bool,
}

impl SweepCell {
    /// `N/A` marks runs that did not meet the budget before training ended.
    pub fn status(&self) -> &'static str {
        if self.budgets_met {
            "ok"
        } else {
            "N/A"
        }
    }
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("alpha_ratio,lr,val_accuracy,budgets_met,status\n");
    for c in cells {
        writeln!(
            s,
            "{},{},{},{},{}",
            c.alpha_ratio,
            c.lr,
            c.val_accuracy,
            c.budgets_met as u8,
            c.status()
        )
        .unwrap();
    }
    s
}

/// Accuracy spread (max - min) over the converged cells.
pub fn sweep_spread(cells: &[SweepCell]) -> Option<f64> {
    let acc: Vec<f64> = cells
        .iter()
        .filter(|c| c.budgets_met)
        .map(|c| c.val_accuracy)
        .collect();
    let max = acc.iter().copied().reduce(f64::max)?;
    let min = acc.iter().copied().reduce(f64::min)?;
    Some(max - min)
}

/// Runs every (alpha ratio, pruning lr) pair of the config's grid with the
/// same seed, so cells differ only in those two settings.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    par: Parallelism,
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &r in &cfg.sweep.alpha_ratios {
        for &lr in &cfg.sweep.lrs {
            let mut c = cfg.clone();
            c.prune.alpha_ratio = r;
            c.prune.lr = lr;
            c.validate()?;
            let (s, _) = run_experiment(&c, par)?;
            log::info!(
                "sweep r={r} lr={lr}: val {:.4}, met {}",
                s.val_accuracy,
                s.budgets_met
            );
            cells.push(SweepCell {
                alpha_ratio: r,
                lr,
                val_accuracy: s.val_accuracy,
                budgets_met: s.budgets_met,
            });
        }
    }
    create_dir(out_dir)?;
    write(&out_dir.join("sweep.csv"), &sweep_csv(&cells))?;
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_table_marks_unconverged_cells() {
        let cells = vec![
            SweepCell {
                alpha_ratio: 0.5,
                lr: 0.1,
                val_accuracy: 0.9,
                budgets_met: true,
            },
            SweepCell {
                alpha_ratio: 0.5,
                lr: 0.01,
                val_accuracy: 0.97,
                budgets_met: false,
            },
            SweepCell {
                alpha_ratio: 1.0,
                lr: 0.1,
                val_accuracy: 0.95,
                budgets_met: true,
            },
        ];
        let csv = sweep_csv(&cells);
        assert!(csv.contains("0.5,0.01,0.97,0,N/A\n"));
        assert!((sweep_spread(&cells).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(sweep_spread(&cells[1..2]), None);
    }
}
