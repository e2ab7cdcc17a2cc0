use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Example};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Class centers with every adjacent pair `separation` apart.
///
/// With `dim >= num_classes` the centers are `separation/√2 · e_c`, so all
/// pairs are equidistant. Otherwise they sit on a regular polygon in the
/// first two coordinates (or on a line when `dim == 1`).
fn centers(num_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut v = vec![0.0; dim];
            if dim >= num_classes {
                v[c] = separation / 2f64.sqrt();
            } else if dim == 1 {
                v[0] = separation * c as f64;
            } else {
                let radius = separation / (2.0 * (PI / num_classes as f64).sin());
                let angle = 2.0 * PI * c as f64 / num_classes as f64;
                v[0] = radius * angle.cos();
                v[1] = radius * angle.sin();
            }
            v
        })
        .collect()
}

/// `n` samples from `num_classes` unit-variance isotropic Gaussians.
/// Sample `i` belongs to class `i mod num_classes`, so classes are balanced.
pub fn make_synthetic_blobs(n: usize, num_classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 || n < num_classes {
        return Err(Error::Spec(format!(
            "blobs need n >= classes >= 1 and dim >= 1 (n={n}, classes={num_classes}, dim={dim})"
        )));
    }
    let centers = centers(num_classes, dim, separation);
    let mut rng = rng_for(seed, &[crate::seed::stream::DATA]);
    let examples = (0..n)
        .map(|i| {
            let c = i % num_classes;
            let features = centers[c]
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (m + z) as f32
                })
                .collect();
            Example {
                id: i as u64,
                features,
                label: Some(c),
            }
        })
        .collect();
    Ok(Dataset {
        sample_shape: vec![dim],
        num_classes,
        examples,
    })
}
