use serde::{Deserialize, Serialize};

use super::{Params, Scalar};

/// SGD with heavy-ball momentum and L2 weight decay on weight tensors:
/// `v = mu * v + (g + wd * w); w -= lr * v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Params<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &Params<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        sgd_step(
            params,
            grads,
            &mut self.velocity,
            lr,
            self.momentum,
            self.weight_decay,
        );
    }
}

/// One in-place SGD update; `velocity` has the same layout as `params`.
pub fn sgd_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &Params<T>,
    velocity: &mut Params<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (
        T::from_f64(lr),
        T::from_f64(momentum),
        T::from_f64(weight_decay),
    );
    let grads = grads.tensors();
    for (((w, decays), g), (v, _)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(velocity.tensors_mut())
    {
        let decay = if decays { wd } else { T::zero() };
        for ((w, &g), v) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *v = mu * *v + g + decay * *w;
            *w -= lr * *v;
        }
    }
}
