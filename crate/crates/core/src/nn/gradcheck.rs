//! Central finite-difference checks of the engine's analytic gradients.

use super::{cross_entropy, BnMode, Masks, Model, Tensor};
use crate::par::Parallelism;

/// Largest relative error between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(tensor index, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn loss(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], masks: &Masks) -> f64 {
    let pass = model
        .forward(x, masks, BnMode::Batch, Parallelism::Sequential)
        .expect("valid batch");
    cross_entropy(pass.logits(), labels).0
}

/// Compares every parameter gradient of the batch-statistics cross-entropy
/// loss against central differences with step `eps`. Magnitudes below
/// `floor` are compared absolutely.
pub fn check_parameter_gradients(
    model: &Model<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    masks: &Masks,
    eps: f64,
    floor: f64,
) -> GradCheck {
    let pass = model
        .forward(x, masks, BnMode::Batch, Parallelism::Sequential)
        .expect("valid batch");
    let (_, dlogits) = cross_entropy(pass.logits(), labels);
    let grads = model.backward(&pass, &dlogits, masks, Parallelism::Sequential);
    let analytic: Vec<Vec<f64>> = grads.params.tensors().into_iter().cloned().collect();

    let mut probe = model.clone();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (t, a) in analytic.iter().enumerate() {
        for (i, &ai) in a.iter().enumerate() {
            let orig = probe.params.tensors_mut()[t].0[i];
            probe.params.tensors_mut()[t].0[i] = orig + eps;
            let up = loss(&probe, x, labels, masks);
            probe.params.tensors_mut()[t].0[i] = orig - eps;
            let down = loss(&probe, x, labels, masks);
            probe.params.tensors_mut()[t].0[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let e = rel_err(ai, numeric, floor);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((t, i, ai, numeric));
            }
        }
    }
    report
}
