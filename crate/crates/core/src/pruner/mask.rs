use crate::graph::keep_count;

/// Saliences are floored at this value before any division.
pub const SALIENCE_FLOOR: f64 = 1e-12;

/// Hard mask of one group together with the smooth-mask quantities at its
/// threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMask {
    pub keep: Vec<bool>,
    /// Threshold: the largest salience among the pruned channels, or half the
    /// smallest salience when every channel is kept.
    pub tau: f64,
    /// `dM_i / dtau` of the smooth mask at `tau`.
    pub dm_dtau: Vec<f64>,
}

impl ChannelMask {
    pub fn popcount(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Smooth mask `1 / (1 + tau / s)`.
pub fn smooth_mask(s: f64, tau: f64) -> f64 {
    let s = s.max(SALIENCE_FLOOR);
    1.0 / (1.0 + tau / s)
}

/// Derivative of [`smooth_mask`] with respect to the threshold.
pub fn smooth_mask_dtau(s: f64, tau: f64) -> f64 {
    let s = s.max(SALIENCE_FLOOR);
    -s / ((s + tau) * (s + tau))
}

/// Channel indices ordered by decreasing salience, ties to the lower index.
pub fn salience_ranking(s: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (s[a].max(SALIENCE_FLOOR), s[b].max(SALIENCE_FLOOR));
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    idx
}

/// Keeps the `max(1, floor(pi * C))` most salient channels.
///
/// # Panics
///
/// If `s` is empty or contains a negative or NaN salience.
pub fn compute_mask(s: &[f64], pi: f64) -> ChannelMask {
    assert!(!s.is_empty(), "a group has at least one channel");
    assert!(
        s.iter().all(|&x| x >= 0.0),
        "saliences must be non-negative"
    );
    let c = s.len();
    let k = keep_count(pi, c);
    let rank = salience_ranking(s);
    let mut keep = vec![false; c];
    for &i in &rank[..k] {
        keep[i] = true;
    }
    let tau = if k < c {
        s[rank[k]].max(SALIENCE_FLOOR)
    } else {
        s[rank[c - 1]].max(SALIENCE_FLOOR) / 2.0
    };
    let dm_dtau = s.iter().map(|&x| smooth_mask_dtau(x, tau)).collect();
    ChannelMask { keep, tau, dm_dtau }
}

/// Weights `w_j = dM_j / sum_k dM_k` that spread a width change over the
/// channels. `None` when the denominator vanishes.
pub fn patch_weights(dm_dtau: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = dm_dtau.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return None;
    }
    Some(dm_dtau.iter().map(|d| d / total).collect())
}

/// Task-loss gradient with respect to a group's width multiplier from the
/// per-channel mask gradients: `C * sum_j g_j * w_j`.
pub fn task_grad_wrt_pi(mask_grads: &[f64], dm_dtau: &[f64]) -> f64 {
    assert_eq!(
        mask_grads.len(),
        dm_dtau.len(),
        "one mask gradient per channel"
    );
    match patch_weights(dm_dtau) {
        Some(w) => {
            let c = mask_grads.len() as f64;
            c * mask_grads.iter().zip(&w).map(|(g, w)| g * w).sum::<f64>()
        }
        None => {
            log::warn!("smooth-mask derivatives vanish at the threshold; task gradient set to 0");
            0.0
        }
    }
}
