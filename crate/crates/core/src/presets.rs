//! Built-in test distributions, sampled deterministically from a seed.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{low_discrepancy, DiscreteMeasure};
use crate::parallel::trajectory_rng;

/// A mixture of isotropic Gaussians in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub variance: f64,
}

impl GaussianMixture {
    /// `n` equally weighted samples. Component counts follow the weights
    /// by largest remainder, so the empirical mixture weights are exact up
    /// to rounding.
    pub fn sample(&self, n: usize, seed: u64) -> Result<DiscreteMeasure> {
        if n == 0 || self.weights.len() != self.means.len() || self.weights.is_empty() {
            return Err(Error::invalid("mixture needs components and a positive sample count"));
        }
        let counts = apportion(&self.weights, n);
        let mut rng = trajectory_rng(seed, 0);
        let sd = self.variance.sqrt();
        let mut rows = Vec::with_capacity(n);
        for (c, mean) in counts.iter().zip(&self.means) {
            for _ in 0..*c {
                let x: f64 = rng.sample(StandardNormal);
                let y: f64 = rng.sample(StandardNormal);
                rows.push(vec![mean[0] + sd * x, mean[1] + sd * y]);
            }
        }
        DiscreteMeasure::uniform(&rows)
    }
}

fn apportion(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let missing = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(missing) {
        counts[k] += 1;
    }
    counts
}

/// Quasi-uniform grid on `[-1, 1]²` from the Halton sequence.
pub fn uniform_square(n: usize) -> Result<DiscreteMeasure> {
    DiscreteMeasure::uniform(&low_discrepancy(n, 2))
}

/// Three components with weights ½, 3/10, 1/5 centred at `(0,0)`, `(1,0)`,
/// `(0,1)`, covariance `0.1 I`.
pub fn three_component_mixture() -> GaussianMixture {
    GaussianMixture {
        weights: vec![0.5, 0.3, 0.2],
        means: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        variance: 0.1,
    }
}

fn rotate(p: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Four equal components at `R^i (4, 0)` for `i = 1..4`, `R` a rotation by
/// 45°, covariance `0.1 I`.
pub fn rotated_mixture_source() -> GaussianMixture {
    GaussianMixture {
        weights: vec![0.25; 4],
        means: (1..=4).map(|i| rotate([4.0, 0.0], i as f64 * PI / 4.0)).collect(),
        variance: 0.1,
    }
}

/// Components at `R^i (2√2, 2√2)`, the source means turned by a further 45°.
pub fn rotated_mixture_target() -> GaussianMixture {
    let r = 2.0 * 2f64.sqrt();
    GaussianMixture {
        weights: vec![0.25; 4],
        means: (1..=4).map(|i| rotate([r, r], i as f64 * PI / 4.0)).collect(),
        variance: 0.1,
    }
}

fn annulus_point<R: Rng>(rng: &mut R, center: [f64; 2], r_in: f64, r_out: f64) -> Vec<f64> {
    // Area-uniform radius.
    let u: f64 = rng.random();
    let r = (r_in * r_in + u * (r_out * r_out - r_in * r_in)).sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    vec![center[0] + r * phi.cos(), center[1] + r * phi.sin()]
}

/// Uniform on `1.5 ≤ ‖x‖ ≤ 2`.
pub fn annulus_source(n: usize, seed: u64) -> Result<DiscreteMeasure> {
    let mut rng = trajectory_rng(seed, 0);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| annulus_point(&mut rng, [0.0, 0.0], 1.5, 2.0)).collect();
    DiscreteMeasure::uniform(&rows)
}

/// Half the mass uniform on `0.5 ≤ ‖x‖ ≤ 1`, half on
/// `0.2 ≤ ‖x + (0, 4)‖ ≤ 0.4`.
pub fn annulus_target(n: usize, seed: u64) -> Result<DiscreteMeasure> {
    let mut rng = trajectory_rng(seed, 0);
    let first = n - n / 2;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            if i < first {
                annulus_point(&mut rng, [0.0, 0.0], 0.5, 1.0)
            } else {
                annulus_point(&mut rng, [0.0, -4.0], 0.2, 0.4)
            }
        })
        .collect();
    DiscreteMeasure::uniform(&rows)
}

/// `(e^{x/2 + y}, -e^{x - y/2}, x + 2y²)`.
pub fn manifold_map(z: &[f64]) -> Vec<f64> {
    let (x, y) = (z[0], z[1]);
    vec![(0.5 * x + y).exp(), -(x - 0.5 * y).exp(), x + 2.0 * y * y]
}

/// Image of `n` uniform draws from `[-1, 1]²` under [`manifold_map`].
pub fn manifold_data(n: usize, seed: u64) -> Result<DiscreteMeasure> {
    let mut rng = trajectory_rng(seed, 0);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| manifold_map(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
        .collect();
    DiscreteMeasure::uniform(&rows)
}

/// `n` i.i.d. uniform latent points in `[-1, 1]^k`.
pub fn uniform_latent(n: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = trajectory_rng(seed, 0);
    (0..n).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// `n` i.i.d. draws from `N(0, σ² I_k)`.
pub fn normal_rows(n: usize, k: usize, sigma: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = trajectory_rng(seed, 0);
    (0..n)
        .map(|_| {
            (0..k)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sigma * z
                })
                .collect()
        })
        .collect()
}
