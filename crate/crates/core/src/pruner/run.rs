use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::{compute_mask, task_grad_wrt_pi, ChannelMask};
use super::telemetry::TelemetryRow;
use super::width::{
    init_alphas, width_update, AlphaScale, Alphas, MaskGradSource, PruneConfig, UpdateSignal,
    WidthMultipliers,
};
use crate::data::{epoch_batches, epoch_order, mix, Augment, Dataset, Normalizer, Splits};
use crate::error::{Error, Result};
use crate::graph::Architecture;
use crate::nn::{
    argmax_rows, cross_entropy, group_salience, materialize_pruned, BnMode, Masks, Model, Params,
    Sgd,
};
use crate::par::Parallelism;
use crate::resources::{
    resource_loss, resource_loss_gradient, sample_scalarization, PmuMode, ResourceBudget,
    ResourceModel, ResourceOptions, ResourceUsage, Scalarization,
};
use crate::train::{evaluate, Evaluation, TrainConfig};

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
enum Stream {
    Init = 1,
    Batches = 2,
    Augment = 3,
    Scalarization = 4,
    Probe = 5,
}

fn stream_seed(seed: u64, s: Stream) -> u64 {
    mix(seed, s as u64)
}

/// Everything a pruning run needs.
#[derive(Clone, Debug)]
pub struct PruneJob<'a> {
    pub arch: Architecture,
    pub data: &'a Splits,
    pub norm: &'a Normalizer,
    pub budget: ResourceBudget,
    pub train: &'a TrainConfig,
    pub prune: &'a PruneConfig,
    /// PMU mode here is overridden by `prune.pmu`.
    pub resources: ResourceOptions,
    pub seed: u64,
    pub parallelism: Parallelism,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Cumulative training MACs at the end of the epoch.
    pub training_macs: u64,
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    /// The trained network. Still at base width unless early termination
    /// materialised it.
    pub model: Model<f32>,
    pub masks: Masks,
    /// Physically pruned network.
    pub pruned: Model<f32>,
    pub widths: WidthMultipliers,
    pub alphas: Option<Alphas>,
    pub telemetry: Vec<TelemetryRow>,
    pub epochs: Vec<EpochRecord>,
    /// Usage of the final widths with the precise PMU.
    pub usage: ResourceUsage,
    /// Usage of the final widths under the PMU mode that drove the run.
    pub objective_usage: ResourceUsage,
    pub budgets_met: bool,
    /// Step at which widths froze because the objective budgets were met.
    pub converged_step: Option<usize>,
    /// Step at which the network was materialised (early termination).
    pub terminated_step: Option<usize>,
    pub training_macs: u64,
    pub val: Evaluation,
    pub test: Option<Evaluation>,
    pub normalizer: Normalizer,
}

/// Fails with the binding constraints when even one channel per group
/// exceeds the budget.
pub fn check_reachable(resources: &ResourceModel, budget: &ResourceBudget) -> Result<()> {
    let min = resources.minimum_usage()?;
    let v = min.violations(budget);
    if v.is_empty() {
        return Ok(());
    }
    let detail = v
        .iter()
        .map(|(o, u, b)| format!("{o}: narrowest network needs {u}, budget is {b}"))
        .collect::<Vec<_>>()
        .join("; ");
    Err(Error::BudgetUnreachable(detail))
}

struct Run<'a> {
    job: &'a PruneJob<'a>,
    resources: ResourceModel,
    model: Model<f32>,
    sgd: Sgd<f32>,
    masks: Masks,
    widths: WidthMultipliers,
    alphas: Option<Alphas>,
    scal_rng: ChaCha8Rng,
    probe_order: Vec<usize>,
    probes_taken: usize,
    frozen: bool,
    converged_step: Option<usize>,
    terminated_step: Option<usize>,
    training_macs: u64,
    telemetry: Vec<TelemetryRow>,
}

impl Run<'_> {
    fn probe_set(&self) -> &Dataset {
        match self.job.prune.mask_grad_source {
            MaskGradSource::Validation if !self.job.data.val.is_empty() => &self.job.data.val,
            _ => &self.job.data.train,
        }
    }

    /// Task loss and `dL/dM` averaged over the configured probe batches.
    fn probe(&mut self) -> Result<(f64, Vec<Vec<f64>>)> {
        let job = self.job;
        let bs = job.train.batch_size;
        let batches = job.prune.mask_grad_batches;
        let mut loss = 0.0;
        let mut acc: Vec<Vec<f64>> = self
            .masks
            .groups()
            .iter()
            .map(|m| vec![0.0; m.len()])
            .collect();
        for _ in 0..batches {
            let set = self.probe_set();
            let n = set.len();
            let start = self.probes_taken * bs;
            let idx: Vec<usize> = (0..bs.min(n))
                .map(|j| self.probe_order[(start + j) % n])
                .collect();
            let (x, labels) = set.batch::<f32>(&idx, job.norm, None, 0);
            let pass = self
                .model
                .forward(&x, &self.masks, BnMode::Batch, job.parallelism)?;
            let (l, dlogits) = cross_entropy(pass.logits(), &labels);
            let grads = self
                .model
                .backward(&pass, &dlogits, &self.masks, job.parallelism);
            loss += l;
            for (a, g) in acc.iter_mut().zip(&grads.masks) {
                for (a, g) in a.iter_mut().zip(g) {
                    *a += g;
                }
            }
            self.training_macs += self.model.training_macs(idx.len());
            self.probes_taken += 1;
        }
        let k = batches as f64;
        acc.iter_mut().flatten().for_each(|a| *a /= k);
        Ok((loss / k, acc))
    }

    fn recompute_masks(&mut self, pi: &[f64]) -> Vec<ChannelMask> {
        (0..pi.len())
            .map(|g| {
                let cm = compute_mask(&group_salience(&self.model, g), pi[g]);
                self.masks.set_group(g, cm.keep.clone());
                cm
            })
            .collect()
    }

    /// One Mask + WidthUpdate interval; returns its telemetry.
    fn interval(&mut self, step: usize, epoch: usize) -> Result<TelemetryRow> {
        let job = self.job;
        let before = self.masks.clone();
        let pi = self.widths.pi();
        let usage = self.resources.usage(&pi)?;
        let (mut p_tsk, mut active) = (None, None);

        if !self.frozen && usage.within(&job.budget) {
            self.frozen = true;
            self.converged_step = Some(step);
        }
        if self.frozen {
            self.recompute_masks(&pi);
        } else {
            let cms = self.recompute_masks(&pi);
            let (loss, mask_grads) = self.probe()?;
            let task: Vec<f64> = mask_grads
                .iter()
                .zip(&cms)
                .map(|(g, cm)| task_grad_wrt_pi(g, &cm.dm_dtau))
                .collect();
            let scal = sample_scalarization(&mut self.scal_rng);
            let (value, obj, resource) =
                resource_loss_gradient(&self.resources, &pi, &usage, &job.budget, &scal);
            if self.alphas.is_none() {
                let p_res_init = resource_loss(&usage, &job.budget, &Scalarization::UNIT).0;
                let a = init_alphas(p_res_init, loss, job.prune.alpha_ratio)?
                    .expect("over budget, so the initial resource loss is positive");
                self.alphas = Some(match job.prune.alpha_scale {
                    AlphaScale::Unit => a,
                    AlphaScale::ClipBound => a.scaled_to_clip(&resource, job.prune.grad_clip_hi),
                });
            }
            let alphas = self.alphas.expect("initialised above");
            log::trace!(
                "step {step}: {obj} active, resource grad {resource:?}, task grad {task:?}"
            );
            let signal = UpdateSignal {
                task: &task,
                resource: &resource,
                active: obj,
                resource_loss: value,
            };
            width_update(&mut self.widths, &signal, &alphas, job.prune);
            self.recompute_masks(&self.widths.pi());
            p_tsk = Some(loss);
            active = Some(obj);
        }

        let pi = self.widths.pi();
        let usage = self.resources.usage(&pi)?;
        let row = TelemetryRow {
            step,
            epoch,
            pmu_precise: self.resources.peak_memory_with(&pi, PmuMode::Precise)?.0,
            pmu_imprecise: self.resources.peak_memory_with(&pi, PmuMode::Imprecise)?.0,
            pi,
            pmu_bytes: usage.pmu_bytes,
            size_bytes: usage.size_bytes,
            macs: usage.macs,
            p_res: resource_loss(&usage, &job.budget, &Scalarization::UNIT).0,
            p_tsk,
            active,
            churn_pct: 100.0 * self.masks.churn(&before),
            frozen: self.frozen,
        };

        if self.frozen && job.prune.early_terminate {
            self.terminate(step)?;
        }
        Ok(row)
    }

    /// Swaps in the materialised network; momentum buffers are sliced the same
    /// way so optimisation continues seamlessly.
    fn terminate(&mut self, step: usize) -> Result<()> {
        let arch = self.model.arch().clone();
        let velocity =
            Model::from_parts(arch, self.sgd.velocity.clone(), self.model.stats.clone())?;
        let velocity: Params<f32> = materialize_pruned(&velocity, &self.masks)?.params;
        self.model = materialize_pruned(&self.model, &self.masks)?;
        self.sgd.velocity = velocity;
        self.masks = Masks::ones(self.model.arch());
        self.terminated_step = Some(step);
        Ok(())
    }
}

/// Trains `job.arch` while learning per-group widths that meet the budget.
///
/// Every `update_interval` steps (from `start_epoch` on) the masks are
/// recomputed from the channel saliences and the widths take one clipped
/// gradient step on the combined task and resource losses. Once the usage
/// fits the budget the widths freeze; masks keep following the saliences
/// unless early termination materialises the network.
pub fn prune_train_loop(job: &PruneJob<'_>, init: Option<Model<f32>>) -> Result<PruneOutcome> {
    job.train.validate()?;
    job.prune.validate()?;
    let train = &job.data.train;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut options = job.resources.clone();
    options.pmu_mode = job.prune.pmu;
    let resources = ResourceModel::new(job.arch.clone(), options);
    if job.prune.enabled {
        check_reachable(&resources, &job.budget)?;
    }
    let model = match init {
        Some(m) => m,
        None => Model::init(
            job.arch.clone(),
            &mut ChaCha8Rng::seed_from_u64(stream_seed(job.seed, Stream::Init)),
        ),
    };
    let groups = job.arch.num_groups();
    let mut run = Run {
        job,
        sgd: Sgd::new(&model.params, job.train.momentum, job.train.weight_decay),
        masks: Masks::ones(&job.arch),
        resources,
        model,
        widths: WidthMultipliers::new(groups, job.prune.exp_scale),
        alphas: None,
        scal_rng: ChaCha8Rng::seed_from_u64(stream_seed(job.seed, Stream::Scalarization)),
        probe_order: Vec::new(),
        probes_taken: 0,
        frozen: !job.prune.enabled,
        converged_step: None,
        terminated_step: None,
        training_macs: 0,
        telemetry: Vec::new(),
    };
    run.probe_order = epoch_order(
        run.probe_set().len(),
        stream_seed(job.seed, Stream::Probe),
        0,
    );

    let augment = job.train.augment.then(|| Augment {
        seed: stream_seed(job.seed, Stream::Augment),
        crop: true,
        flip: true,
    });
    let batch_seed = stream_seed(job.seed, Stream::Batches);
    let steps_per_epoch = train.len().div_ceil(job.train.batch_size);
    let total_steps = steps_per_epoch * job.train.epochs;
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(job.train.epochs);

    for epoch in 0..job.train.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in epoch_batches(train.len(), job.train.batch_size, batch_seed, epoch as u64) {
            let (x, labels) = train.batch::<f32>(&idx, job.norm, augment.as_ref(), epoch as u64);
            let pass = run
                .model
                .forward(&x, &run.masks, BnMode::Batch, job.parallelism)?;
            let (loss, dlogits) = cross_entropy(pass.logits(), &labels);
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            loss_sum += loss * idx.len() as f64;
            correct += argmax_rows(pass.logits())
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            let grads = run
                .model
                .backward(&pass, &dlogits, &run.masks, job.parallelism);
            run.model
                .update_running_stats(&pass, &run.masks, job.train.bn_momentum);
            let lr = job.train.lr_at(step, total_steps);
            run.sgd.step(&mut run.model.params, &grads.params, lr);
            run.training_macs += run.model.training_macs(idx.len());
            step += 1;

            let due = step.is_multiple_of(job.prune.update_interval);
            if job.prune.enabled
                && run.terminated_step.is_none()
                && epoch >= job.prune.start_epoch
                && due
            {
                let row = run.interval(step, epoch)?;
                log::debug!("{}", row.to_csv());
                run.telemetry.push(row);
            }
        }
        let val = evaluate(
            &run.model,
            &run.masks,
            &job.data.val,
            job.norm,
            job.train.eval_batch_size,
            job.parallelism,
        )?;
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, val acc {:.4}",
            loss_sum / train.len() as f64,
            correct as f64 / train.len() as f64,
            val.accuracy
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            training_macs: run.training_macs,
        });
    }

    let pi = run.widths.pi();
    let objective_usage = run.resources.usage(&pi)?;
    let usage = if job.prune.pmu == PmuMode::Precise {
        objective_usage.clone()
    } else {
        let (pmu_bytes, bottleneck) = run.resources.peak_memory_with(&pi, PmuMode::Precise)?;
        ResourceUsage {
            pmu_bytes,
            bottleneck,
            ..objective_usage.clone()
        }
    };
    let pruned = if run.terminated_step.is_some() {
        run.model.clone()
    } else {
        materialize_pruned(&run.model, &run.masks)?
    };
    let ones = Masks::ones(pruned.arch());
    let eval = |d: &Dataset| {
        evaluate(
            &pruned,
            &ones,
            d,
            job.norm,
            job.train.eval_batch_size,
            job.parallelism,
        )
    };
    let val = eval(&job.data.val)?;
    let test = if job.data.test.is_empty() {
        None
    } else {
        Some(eval(&job.data.test)?)
    };
    Ok(PruneOutcome {
        budgets_met: usage.within(&job.budget),
        model: run.model,
        masks: run.masks,
        pruned,
        widths: run.widths,
        alphas: run.alphas,
        telemetry: run.telemetry,
        epochs,
        usage,
        objective_usage,
        converged_step: run.converged_step,
        terminated_step: run.terminated_step,
        training_macs: run.training_macs,
        val,
        test,
        normalizer: job.norm.clone(),
    })
}
