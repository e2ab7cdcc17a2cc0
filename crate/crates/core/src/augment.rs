//! Input perturbations for the consistency term: a RandAugment-style policy
//! over a fixed operation list for images, Gaussian noise for feature
//! vectors, and weak flip/translate augmentation for labeled images.
//!
//! Images are flat `[c, h, w]` slices with values in `[0, 1]`. Geometric ops
//! move whole pixels (nearest neighbor) and fill uncovered pixels with gray.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Fill value for cutout and for pixels uncovered by geometric ops.
pub const FILL: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugOp {
    TranslateX,
    TranslateY,
    HorizontalFlip,
    CropPad,
    Brightness,
    Contrast,
    Cutout,
    GaussianNoise,
}

pub const OP_LIST: [AugOp; 8] = [
    AugOp::TranslateX,
    AugOp::TranslateY,
    AugOp::HorizontalFlip,
    AugOp::CropPad,
    AugOp::Brightness,
    AugOp::Contrast,
    AugOp::Cutout,
    AugOp::GaussianNoise,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    n_ops: usize,
    magnitude: u8,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy { n_ops: 2, magnitude: 9 }
    }
}

impl AugmentPolicy {
    pub fn new(n_ops: usize, magnitude: u8) -> Result<Self> {
        if n_ops == 0 {
            return Err(Error::Spec("augment.n_ops must be at least 1".into()));
        }
        if !(1..=10).contains(&magnitude) {
            return Err(Error::Spec(format!(
                "augment.magnitude must be in [1, 10], got {magnitude}"
            )));
        }
        Ok(AugmentPolicy { n_ops, magnitude })
    }

    pub fn n_ops(&self) -> usize {
        self.n_ops
    }

    pub fn magnitude(&self) -> u8 {
        self.magnitude
    }

    pub fn op_list(&self) -> &'static [AugOp] {
        &OP_LIST
    }

    fn intensity(&self) -> f32 {
        self.magnitude as f32 / 10.0
    }
}

fn random_sign(rng: &mut Rng) -> f32 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Pixels shifted by `(dy, dx)`: `out[y][x] = img[y - dy][x - dx]`, gray
/// where the source falls outside the image.
fn shift(img: &[f32], s: ImageShape, dy: isize, dx: isize) -> Vec<f32> {
    let mut out = vec![FILL; img.len()];
    for c in 0..s.channels {
        for y in 0..s.height {
            let sy = y as isize - dy;
            if sy < 0 || sy >= s.height as isize {
                continue;
            }
            for x in 0..s.width {
                let sx = x as isize - dx;
                if sx < 0 || sx >= s.width as isize {
                    continue;
                }
                out[s.idx(c, y, x)] = img[s.idx(c, sy as usize, sx as usize)];
            }
        }
    }
    out
}

pub fn horizontal_flip(img: &[f32], s: ImageShape) -> Vec<f32> {
    let mut out = img.to_vec();
    for row in out.chunks_mut(s.width) {
        row.reverse();
    }
    out
}

/// Pixel offset for an op whose full-strength displacement is `frac` of `extent`.
fn pixels(intensity: f32, frac: f32, extent: usize) -> isize {
    ((intensity * frac * extent as f32).round() as isize).max(1)
}

/// Applies a single operation at `intensity` in `(0, 1]`.
pub fn apply_op(op: AugOp, img: &[f32], s: ImageShape, intensity: f32, rng: &mut Rng) -> Vec<f32> {
    let mut out = match op {
        AugOp::TranslateX => {
            let d = pixels(intensity, 0.3, s.width) * random_sign(rng) as isize;
            shift(img, s, 0, d)
        }
        AugOp::TranslateY => {
            let d = pixels(intensity, 0.3, s.height) * random_sign(rng) as isize;
            shift(img, s, d, 0)
        }
        AugOp::HorizontalFlip => horizontal_flip(img, s),
        AugOp::CropPad => {
            // Pad by `p` on every side then crop back at a random offset.
            let p = pixels(intensity, 0.125, s.height.max(s.width));
            let dy = rng.random_range(-p as i64..=p as i64) as isize;
            let dx = rng.random_range(-p as i64..=p as i64) as isize;
            shift(img, s, dy, dx)
        }
        AugOp::Brightness => {
            let delta = 0.5 * intensity * random_sign(rng);
            img.iter().map(|v| v + delta).collect()
        }
        AugOp::Contrast => {
            let factor = 1.0 + 0.9 * intensity * random_sign(rng);
            let mean = img.iter().sum::<f32>() / img.len().max(1) as f32;
            img.iter().map(|v| mean + (v - mean) * factor).collect()
        }
        AugOp::Cutout => {
            let side = pixels(intensity, 0.5, s.height.min(s.width)) as usize;
            let cy = rng.random_range(0..s.height);
            let cx = rng.random_range(0..s.width);
            let (y0, x0) = (cy.saturating_sub(side / 2), cx.saturating_sub(side / 2));
            let mut out = img.to_vec();
            for c in 0..s.channels {
                for y in y0..(y0 + side).min(s.height) {
                    for x in x0..(x0 + side).min(s.width) {
                        out[s.idx(c, y, x)] = FILL;
                    }
                }
            }
            out
        }
        AugOp::GaussianNoise => {
            let normal = Normal::new(0.0f32, 0.2 * intensity).expect("positive std");
            img.iter().map(|v| v + normal.sample(rng)).collect()
        }
    };
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Draws `n_ops` operations uniformly with replacement and applies them in
/// draw order at the policy's magnitude.
pub fn perturb(img: &[f32], s: ImageShape, policy: &AugmentPolicy, rng: &mut Rng) -> Vec<f32> {
    let mut out: Vec<f32> = img.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    for _ in 0..policy.n_ops {
        let op = OP_LIST[rng.random_range(0..OP_LIST.len())];
        out = apply_op(op, &out, s, policy.intensity(), rng);
    }
    out
}

/// `x + N(0, sigma²)` elementwise.
pub fn perturb_vector(x: &[f32], sigma: f32, rng: &mut Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    let normal = Normal::new(0.0f32, sigma).expect("sigma is finite and nonnegative");
    x.iter().map(|v| v + normal.sample(rng)).collect()
}

/// Random horizontal flip plus a translation of up to two pixels.
pub fn weak_augment(img: &[f32], s: ImageShape, rng: &mut Rng) -> Vec<f32> {
    let flipped = if rng.random_bool(0.5) {
        horizontal_flip(img, s)
    } else {
        img.to_vec()
    };
    let dy = rng.random_range(-2i64..=2) as isize;
    let dx = rng.random_range(-2i64..=2) as isize;
    shift(&flipped, s, dy, dx)
}

/// How unlabeled inputs are perturbed for the consistency term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    Identity,
    Gaussian { sigma: f32 },
    RandAugment { policy: AugmentPolicy, shape: ImageShape },
}

impl Perturbation {
    pub fn apply(&self, x: &[f32], rng: &mut Rng) -> Vec<f32> {
        match self {
            Perturbation::Identity => x.to_vec(),
            Perturbation::Gaussian { sigma } => perturb_vector(x, *sigma, rng),
            Perturbation::RandAugment { policy, shape } => perturb(x, *shape, policy, rng),
        }
    }
}
