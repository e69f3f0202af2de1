use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mix;
use crate::nn::Scalar;

/// Zero padding on each side before the random crop.
pub const CROP_PAD: usize = 4;

/// Random crop and horizontal flip, drawn per `(seed, epoch, sample)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub seed: u64,
    pub crop: bool,
    pub flip: bool,
}

/// One sample's transform: crop offsets into the padded image, in
/// `[0, 2 * CROP_PAD]`, and whether to mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        dy: CROP_PAD,
        dx: CROP_PAD,
        flip: false,
    };
}

impl Augment {
    pub fn params(&self, epoch: u64, sample: u64) -> AugmentParams {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.seed, epoch), sample));
        let mut p = AugmentParams::IDENTITY;
        if self.crop {
            p.dy = rng.gen_range(0..=2 * CROP_PAD);
            p.dx = rng.gen_range(0..=2 * CROP_PAD);
        }
        if self.flip {
            p.flip = rng.gen_bool(0.5);
        }
        p
    }
}

/// Applies `p` to a `C x H x W` image. Pixels cropped in from the padding are
/// zero (the mean after normalisation).
pub fn augment_sample<T: Scalar>(
    src: &[f32],
    (c, h, w): (usize, usize, usize),
    p: AugmentParams,
    out: &mut [T],
) {
    assert_eq!(src.len(), c * h * w);
    assert_eq!(out.len(), src.len());
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + p.dy) as isize - CROP_PAD as isize;
            for x in 0..w {
                let xx = if p.flip { w - 1 - x } else { x };
                let sx = (xx + p.dx) as isize - CROP_PAD as isize;
                let v = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    0.0
                };
                out[(ch * h + y) * w + x] = T::from_f64(v as f64);
            }
        }
    }
}
