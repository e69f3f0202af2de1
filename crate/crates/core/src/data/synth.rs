use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{mix, Dataset};

/// Number of distinct shapes the generator can draw.
pub const SYNTH_MAX_CLASSES: usize = 8;

/// Procedural colored-shape images: one shape per image, class = shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            samples: 1000,
            channels: 3,
            height: 16,
            width: 16,
            noise: 72.0,
            seed: 0,
        }
    }
}

fn inside(class: usize, dy: i32, dx: i32, r: i32) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    match class {
        // filled square
        0 => ay <= r && ax <= r,
        // disk
        1 => dy * dy + dx * dx <= r * r,
        // horizontal bar
        2 => ay <= 1 && ax <= r + 1,
        // plus
        3 => (ay <= 1 && ax <= r) || (ax <= 1 && ay <= r),
        // vertical bar
        4 => ax <= 1 && ay <= r + 1,
        // hollow square
        5 => ay <= r && ax <= r && (ay >= r - 1 || ax >= r - 1),
        // diagonal
        6 => (dy - dx).abs() <= 1 && ay <= r,
        // ring
        _ => {
            let d = dy * dy + dx * dx;
            d <= r * r && d >= (r - 2) * (r - 2)
        }
    }
}

/// Generates `spec.samples` images with labels `i % classes`, so classes are
/// balanced to within one sample. Sample `i` depends only on `(seed, i)`.
///
/// # Panics
///
/// If the spec asks for more than [`SYNTH_MAX_CLASSES`] classes or images
/// smaller than 8x8.
pub fn synth_dataset(spec: &SynthSpec) -> Dataset {
    assert!(
        (1..=SYNTH_MAX_CLASSES).contains(&spec.classes),
        "synthetic data supports 1..={SYNTH_MAX_CLASSES} classes"
    );
    assert!(
        spec.height >= 8 && spec.width >= 8,
        "synthetic images must be at least 8x8"
    );
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise level");
    let mut images = Vec::with_capacity(spec.samples * c * h * w);
    let mut labels = Vec::with_capacity(spec.samples);
    let max_r = (h.min(w) as i32 / 2 - 2).max(3);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, i as u64));
        let r = rng.gen_range(3..=max_r);
        let cy = rng.gen_range(r + 1..h as i32 - r - 1);
        let cx = rng.gen_range(r + 1..w as i32 - r - 1);
        let bg: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..90.0)).collect();
        let fg: Vec<f64> = (0..c).map(|_| rng.gen_range(140.0..255.0)).collect();
        for ch in 0..c {
            for y in 0..h as i32 {
                for x in 0..w as i32 {
                    let base = if inside(class, y - cy, x - cx, r) {
                        fg[ch]
                    } else {
                        bg[ch]
                    };
                    let v = base + noise.sample(&mut rng);
                    images.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(class as u8);
    }
    Dataset::new(images, labels, (c, h, w), spec.classes).expect("generator output is consistent")
}
