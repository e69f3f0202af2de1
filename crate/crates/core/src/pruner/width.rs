use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resources::{Objective, PmuMode};

/// Per-group width multipliers `pi_g = exp(c * v_g)`.
///
/// Only [`WidthMultipliers::descend`] changes `v`, and it never increases it,
/// so every `pi_g` starts at 1 and is non-increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthMultipliers {
    v: Vec<f64>,
    scale: f64,
}

impl WidthMultipliers {
    pub fn new(groups: usize, scale: f64) -> Self {
        assert!(scale > 0.0, "exp scale must be positive");
        WidthMultipliers {
            v: vec![0.0; groups],
            scale,
        }
    }

    /// Restores saved raw variables.
    pub fn from_raw(v: Vec<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || v.iter().any(|&x| !(x <= 0.0)) {
            return Err(Error::Checkpoint(
                "width variables must be <= 0 with a positive scale".into(),
            ));
        }
        Ok(WidthMultipliers { v, scale })
    }

    pub fn raw(&self) -> &[f64] {
        &self.v
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn pi(&self) -> Vec<f64> {
        self.v.iter().map(|&v| (self.scale * v).exp()).collect()
    }

    /// One SGD step on `v` given `dP/dpi` per group. Negative entries are
    /// ignored.
    pub fn descend(&mut self, grad_pi: &[f64], lr: f64) {
        assert_eq!(grad_pi.len(), self.v.len(), "one gradient per group");
        for (v, &g) in self.v.iter_mut().zip(grad_pi) {
            let dpi_dv = self.scale * (self.scale * *v).exp();
            *v -= lr * g.max(0.0) * dpi_dv;
        }
    }
}

/// Which feedback drives the width updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Both,
    ResourceOnly,
    /// Only positive task gradients, which then shrink `pi` on their own.
    TaskOnly,
}

/// How the trade-off weights are scaled at the first update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaScale {
    /// `alpha_res = 1`.
    Unit,
    /// Both weights scaled so the largest first resource gradient sits at the
    /// clip bound.
    #[default]
    ClipBound,
}

/// Where the batches for the task-loss mask gradients come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGradSource {
    #[default]
    Validation,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Set to false for plain training.
    pub enabled: bool,
    /// Pruning learning rate.
    pub lr: f64,
    /// `alpha_tsk = r * P_res_init / P_tsk_init`.
    pub alpha_ratio: f64,
    /// Training steps between width updates.
    pub update_interval: usize,
    /// Upper clip bound for the combined gradient.
    pub grad_clip_hi: f64,
    /// Scale `c` in `pi = exp(c * v)`.
    pub exp_scale: f64,
    pub start_epoch: usize,
    /// Freeze masks and train the materialised network once budgets are met.
    pub early_terminate: bool,
    pub loss: LossMode,
    pub alpha_scale: AlphaScale,
    pub pmu: PmuMode,
    pub mask_grad_source: MaskGradSource,
    /// Batches averaged for each task-gradient estimate.
    pub mask_grad_batches: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            enabled: true,
            lr: 0.1,
            alpha_ratio: 2.0 / 3.0,
            update_interval: 20,
            grad_clip_hi: 0.025,
            exp_scale: 4.0,
            start_epoch: 0,
            early_terminate: false,
            loss: LossMode::Both,
            alpha_scale: AlphaScale::ClipBound,
            pmu: PmuMode::Precise,
            mask_grad_source: MaskGradSource::Validation,
            mask_grad_batches: 1,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("prune: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.alpha_ratio >= 0.0 && self.alpha_ratio.is_finite()) {
            return bad("alpha_ratio must be non-negative");
        }
        if self.update_interval == 0 {
            return bad("update_interval must be at least 1");
        }
        if !(self.grad_clip_hi > 0.0) {
            return bad("grad_clip_hi must be positive");
        }
        if !(self.exp_scale > 0.0 && self.exp_scale.is_finite()) {
            return bad("exp_scale must be positive");
        }
        if self.mask_grad_batches == 0 {
            return bad("mask_grad_batches must be at least 1");
        }
        Ok(())
    }
}

/// Trade-off weights of the two losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alphas {
    pub resource: f64,
    pub task: f64,
}

/// `alpha_res = 1`, `alpha_tsk = r * P_res_init / P_tsk_init`.
///
/// Returns `None` when the resource loss is already zero (nothing to prune).
pub fn init_alphas(p_res_init: f64, p_tsk_init: f64, r: f64) -> Result<Option<Alphas>> {
    if p_res_init <= 0.0 {
        return Ok(None);
    }
    if !(p_tsk_init > 0.0 && p_tsk_init.is_finite()) {
        return Err(Error::Config(format!(
            "initial task loss must be positive and finite, got {p_tsk_init}"
        )));
    }
    Ok(Some(Alphas {
        resource: 1.0,
        task: r * p_res_init / p_tsk_init,
    }))
}

impl Alphas {
    /// Multiplies both weights by `clip / max_g |grad_g|`, keeping their
    /// ratio. Unchanged when the gradient is all zero.
    pub fn scaled_to_clip(self, first_resource_grad: &[f64], clip: f64) -> Alphas {
        let peak = first_resource_grad
            .iter()
            .fold(0.0f64, |m, g| m.max(g.abs()));
        if peak == 0.0 || !peak.is_finite() {
            return self;
        }
        let s = clip / peak;
        Alphas {
            resource: self.resource * s,
            task: self.task * s,
        }
    }
}

/// Inputs to one width update.
#[derive(Clone, Copy, Debug)]
pub struct UpdateSignal<'a> {
    /// `dP_tsk / dpi_g`.
    pub task: &'a [f64],
    /// `dP_res / dpi_g`.
    pub resource: &'a [f64],
    pub active: Objective,
    pub resource_loss: f64,
}

/// Clipped per-group gradient applied to the width multipliers.
pub fn combined_gradient(
    signal: &UpdateSignal<'_>,
    alphas: &Alphas,
    config: &PruneConfig,
) -> Vec<f64> {
    assert_eq!(
        signal.task.len(),
        signal.resource.len(),
        "one gradient per group"
    );
    if signal.resource_loss <= 0.0 {
        return vec![0.0; signal.task.len()];
    }
    signal
        .task
        .iter()
        .zip(signal.resource)
        .map(|(&t, &r)| {
            let g = match config.loss {
                LossMode::Both => alphas.resource * r + alphas.task * t,
                LossMode::ResourceOnly => alphas.resource * r,
                LossMode::TaskOnly => alphas.task * t.max(0.0),
            };
            // Bottleneck objective: only groups on the bottleneck move.
            let focused =
                config.loss != LossMode::TaskOnly && signal.active == Objective::Pmu && r == 0.0;
            if focused {
                0.0
            } else {
                g.clamp(0.0, config.grad_clip_hi)
            }
        })
        .collect()
}

/// Applies one clipped update and returns the gradient used.
pub fn width_update(
    widths: &mut WidthMultipliers,
    signal: &UpdateSignal<'_>,
    alphas: &Alphas,
    config: &PruneConfig,
) -> Vec<f64> {
    let g = combined_gradient(signal, alphas, config);
    widths.descend(&g, config.lr);
    g
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;

    const UNIT: Alphas = Alphas {
        resource: 1.0,
        task: 1.0,
    };

    fn signal<'a>(
        task: &'a [f64],
        resource: &'a [f64],
        active: Objective,
        loss: f64,
    ) -> UpdateSignal<'a> {
        UpdateSignal {
            task,
            resource,
            active,
            resource_loss: loss,
        }
    }

    #[test]
    fn starts_at_full_width() {
        assert_eq!(WidthMultipliers::new(3, 4.0).pi(), vec![1.0; 3]);
    }

    #[test]
    fn single_step_at_the_clip_bound() {
        let cfg = PruneConfig {
            lr: 0.5,
            ..Default::default()
        };
        let mut w = WidthMultipliers::new(2, cfg.exp_scale);
        let g = width_update(
            &mut w,
            &signal(&[0.0; 2], &[3.0, 1.0], Objective::Size, 0.2),
            &UNIT,
            &cfg,
        );
        assert_eq!(g, vec![0.025, 0.025]);
        // dpi/dv = c at v = 0, so v = -0.5 * 0.025 * 4 = -0.05 and pi = exp(-0.2).
        for (&v, &p) in w.raw().iter().zip(&w.pi()) {
            assert_relative_eq!(v, -0.05, max_relative = 1e-15);
            assert_relative_eq!(p, (-0.2f64).exp(), max_relative = 1e-15);
        }
    }

    #[test]
    fn satisfied_budgets_freeze_widths() {
        let cfg = PruneConfig::default();
        let mut w = WidthMultipliers::new(2, 4.0);
        width_update(
            &mut w,
            &signal(&[1.0; 2], &[1.0; 2], Objective::Macs, 0.0),
            &UNIT,
            &cfg,
        );
        assert_eq!(w.pi(), vec![1.0; 2]);
    }

    #[test]
    fn focus_regime_only_moves_bottleneck_groups() {
        let cfg = PruneConfig::default();
        let g = combined_gradient(
            &signal(&[0.01, 0.01], &[0.0, 0.02], Objective::Pmu, 1.0),
            &UNIT,
            &cfg,
        );
        assert_eq!(g, vec![0.0, 0.025]);
        let g = combined_gradient(
            &signal(&[0.01, 0.01], &[0.0, 0.02], Objective::Macs, 1.0),
            &UNIT,
            &cfg,
        );
        assert_eq!(g, vec![0.01, 0.025]);
    }

    #[test]
    fn loss_modes_select_terms() {
        let task = [-0.5, 0.01];
        let res = [0.02, 0.0];
        let go = |loss| {
            let cfg = PruneConfig {
                loss,
                ..Default::default()
            };
            combined_gradient(&signal(&task, &res, Objective::Size, 1.0), &UNIT, &cfg)
        };
        assert_eq!(go(LossMode::Both), vec![0.0, 0.01]);
        assert_eq!(go(LossMode::ResourceOnly), vec![0.02, 0.0]);
        assert_eq!(go(LossMode::TaskOnly), vec![0.0, 0.01]);
    }

    #[test]
    fn alpha_initialisation() {
        let a = init_alphas(3.0, 2.0, 2.0 / 3.0).unwrap().unwrap();
        assert_relative_eq!(a.task, 1.0, max_relative = 1e-15);
        assert_eq!(a.resource, 1.0);
        assert_eq!(init_alphas(3.0, 2.0, 0.0).unwrap().unwrap().task, 0.0);
        assert_eq!(init_alphas(0.0, 2.0, 0.5).unwrap(), None);
        assert!(init_alphas(1.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn clip_scaling_keeps_the_ratio() {
        let a = Alphas {
            resource: 1.0,
            task: 0.5,
        }
        .scaled_to_clip(&[0.1, -0.4, 0.0], 0.02);
        assert_relative_eq!(a.resource, 0.05, max_relative = 1e-15);
        assert_relative_eq!(a.task, 0.025, max_relative = 1e-15);
        assert_eq!(UNIT.scaled_to_clip(&[0.0], 0.02), UNIT);
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::default().validate().is_ok());
        for bad in [
            PruneConfig {
                lr: 0.0,
                ..Default::default()
            },
            PruneConfig {
                update_interval: 0,
                ..Default::default()
            },
            PruneConfig {
                alpha_ratio: -1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn widths_never_grow(
            steps in prop::collection::vec(
                (prop::collection::vec(-1.0f64..1.0, 3), prop::collection::vec(0.0f64..2.0, 3), 0.0f64..1.0),
                1..40,
            ),
            lr in 0.01f64..5.0,
        ) {
            let cfg = PruneConfig { lr, ..Default::default() };
            let mut w = WidthMultipliers::new(3, cfg.exp_scale);
            let mut prev = w.pi();
            for (t, r, loss) in &steps {
                width_update(&mut w, &signal(t, r, Objective::Size, *loss), &UNIT, &cfg);
                let pi = w.pi();
                for (a, b) in pi.iter().zip(&prev) {
                    prop_assert!(*a <= *b && *a > 0.0);
                }
                prev = pi;
            }
        }
    }
}
