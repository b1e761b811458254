//! Measure representations and the moment computations the engines rely on.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{default_clip_tol, spectral_decompose, Matrix, SymMatrix};

/// `ln Σ exp(xᵢ)`, stable for large magnitudes.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// A probability measure with finite support. Points are stored row-major;
/// weights are stored as normalized log-weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    points: Vec<f64>,
    log_weights: Vec<f64>,
}

fn point_key(p: &[f64]) -> Vec<u64> {
    // + 0.0 folds -0.0 into +0.0
    p.iter().map(|x| (x + 0.0).to_bits()).collect()
}

impl DiscreteMeasure {
    /// Uniform measure over `rows`. Duplicate rows are merged.
    pub fn uniform(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        Self::from_weighted_rows(rows, &vec![1.0; n])
    }

    /// Measure with linear (unnormalized) weights. Duplicate rows are merged
    /// by summing their weights.
    pub fn from_weighted_rows(rows: &[Vec<f64>], weights: &[f64]) -> Result<Self> {
        Self::from_weighted_rows_with_origin(rows, weights).map(|(m, _)| m)
    }

    /// Like [`from_weighted_rows`](Self::from_weighted_rows), also returning
    /// for each input row the index of the support point it was merged into.
    pub fn from_weighted_rows_with_origin(
        rows: &[Vec<f64>],
        weights: &[f64],
    ) -> Result<(Self, Vec<usize>)> {
        if rows.is_empty() {
            return Err(Error::invalid("measure needs at least one support point"));
        }
        if rows.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} points but {} weights",
                rows.len(),
                weights.len()
            )));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::invalid("points must have dimension >= 1"));
        }
        let mut points = Vec::with_capacity(rows.len() * dim);
        let mut lin = Vec::with_capacity(rows.len());
        let mut index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(rows.len());
        let mut origin = Vec::with_capacity(rows.len());
        for (row, &w) in rows.iter().zip(weights) {
            if row.len() != dim {
                return Err(Error::invalid("points have inconsistent dimensions"));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("point coordinates must be finite"));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::invalid(format!("weights must be finite and >= 0, got {w}")));
            }
            let key = point_key(row);
            let k = *index.entry(key).or_insert_with(|| {
                points.extend(row.iter().map(|x| x + 0.0));
                lin.push(0.0);
                lin.len() - 1
            });
            lin[k] += w;
            origin.push(k);
        }
        let total: f64 = lin.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("weights must have positive sum"));
        }
        let log_weights = lin.iter().map(|w| (w / total).ln()).collect();
        Ok((
            DiscreteMeasure {
                dim,
                points,
                log_weights,
            },
            origin,
        ))
    }

    /// From row-major points and arbitrary log-weights (normalized here).
    /// Points must already be distinct.
    pub fn from_log_weights(dim: usize, points: Vec<f64>, log_weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() != dim * log_weights.len() || log_weights.is_empty() {
            return Err(Error::invalid("points and log-weights have inconsistent sizes"));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("point coordinates must be finite"));
        }
        let lse = logsumexp(&log_weights);
        if !lse.is_finite() {
            return Err(Error::invalid("log-weights must have a finite log-sum-exp"));
        }
        let log_weights = log_weights.iter().map(|l| l - lse).collect();
        Ok(DiscreteMeasure {
            dim,
            points,
            log_weights,
        })
    }

    pub fn point_mass(x: &[f64]) -> Result<Self> {
        Self::uniform(&[x.to_vec()])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.points.chunks(self.dim).map(|c| c.to_vec()).collect()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub(crate) fn points_and_log_weights_mut(&mut self) -> (&[f64], &mut [f64]) {
        (&self.points, &mut self.log_weights)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    /// True when every weight equals `1/N` up to rounding.
    pub fn is_uniform(&self) -> bool {
        let target = -(self.len() as f64).ln();
        self.log_weights.iter().all(|l| (l - target).abs() < 1e-9)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.log_weights.iter().enumerate() {
            if l > self.log_weights[best] {
                best = i;
            }
        }
        best
    }

    /// Image under `x ↦ A x + c`. Coinciding images are merged.
    pub fn affine_image(&self, a: &Matrix, c: &[f64]) -> Result<Self> {
        if a.ncols() != self.dim || a.nrows() != c.len() {
            return Err(Error::invalid("affine map has incompatible shape"));
        }
        let rows: Vec<Vec<f64>> = (0..self.len())
            .map(|i| {
                let x = DVector::from_column_slice(self.point(i));
                let y = a * x;
                y.iter().zip(c).map(|(yi, ci)| yi + ci).collect()
            })
            .collect();
        Self::from_weighted_rows(&rows, &self.weights())
    }

    /// CSV with header `x_1,..,x_d,weight`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x_{i}")).collect();
        header.push("weight".into());
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.point(i).iter().map(|x| format!("{x:e}")).collect();
            rec.push(format!("{:e}", self.log_weights[i].exp()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the CSV layout written by [`write_csv`](Self::write_csv);
    /// weights are renormalized.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let ncol = header.len();
        if ncol < 2 || &header[ncol - 1] != "weight" {
            return Err(Error::invalid("measure CSV must have columns x_1..x_d,weight"));
        }
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::invalid(format!("bad number {s:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != ncol {
                return Err(Error::invalid("ragged measure CSV"));
            }
            weights.push(vals[ncol - 1]);
            rows.push(vals[..ncol - 1].to_vec());
        }
        Self::from_weighted_rows(&rows, &weights)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Gaussian measure `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct GaussianMeasure {
    mean: Vec<f64>,
    cov: SymMatrix,
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl TryFrom<GaussianRepr> for GaussianMeasure {
    type Error = Error;
    fn try_from(r: GaussianRepr) -> Result<Self> {
        GaussianMeasure::new(r.mean, SymMatrix::from_rows(&r.cov)?)
    }
}

impl From<GaussianMeasure> for GaussianRepr {
    fn from(g: GaussianMeasure) -> Self {
        GaussianRepr {
            cov: g.cov.to_rows(),
            mean: g.mean,
        }
    }
}

impl GaussianMeasure {
    pub fn new(mean: Vec<f64>, cov: SymMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::invalid("mean and covariance dimensions differ"));
        }
        if mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("mean must be finite"));
        }
        let eig = spectral_decompose(&cov)?;
        if eig.min_eigenvalue() < -1e-10 * eig.max_eigenvalue().abs().max(1.0) {
            return Err(Error::NotPsd {
                min_eigenvalue: eig.min_eigenvalue(),
            });
        }
        Ok(GaussianMeasure { mean, cov })
    }

    pub fn standard(d: usize) -> Self {
        GaussianMeasure {
            mean: vec![0.0; d],
            cov: SymMatrix::identity(d),
        }
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, SymMatrix::scaled_identity(d, variance))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &SymMatrix {
        &self.cov
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean, covariance and its trace.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
    pub trace_cov: f64,
}

impl MomentSummary {
    pub fn new(mean: Vec<f64>, cov: SymMatrix) -> Self {
        let trace_cov = cov.trace();
        MomentSummary {
            mean,
            cov,
            trace_cov,
        }
    }
}

/// Anything with a mean and covariance.
pub trait HasMoments {
    fn moments(&self) -> MomentSummary;
}

impl HasMoments for DiscreteMeasure {
    fn moments(&self) -> MomentSummary {
        mean_cov(self)
    }
}

impl HasMoments for GaussianMeasure {
    fn moments(&self) -> MomentSummary {
        MomentSummary::new(self.mean.clone(), self.cov.clone())
    }
}

/// Weighted mean and covariance (two-pass).
pub fn mean_cov(m: &DiscreteMeasure) -> MomentSummary {
    let d = m.dim();
    let w = m.weights();
    let mut mean = vec![0.0; d];
    for (i, wi) in w.iter().enumerate() {
        for (acc, x) in mean.iter_mut().zip(m.point(i)) {
            *acc += wi * x;
        }
    }
    let mut cov = Matrix::zeros(d, d);
    let mut u = vec![0.0; d];
    for (i, wi) in w.iter().enumerate() {
        for (k, x) in m.point(i).iter().enumerate() {
            u[k] = x - mean[k];
        }
        for r in 0..d {
            let wr = wi * u[r];
            for c in r..d {
                cov[(r, c)] += wr * u[c];
            }
        }
    }
    for r in 0..d {
        for c in 0..r {
            cov[(r, c)] = cov[(c, r)];
        }
    }
    MomentSummary::new(mean, SymMatrix::symmetrized(cov))
}

/// Centered third moment tensor, row-major `d×d×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThirdMoment {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ThirdMoment {
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dim + j) * self.dim + k]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

pub fn third_moment(m: &DiscreteMeasure) -> ThirdMoment {
    let d = m.dim();
    let mean = mean_cov(m).mean;
    let mut data = vec![0.0; d * d * d];
    let mut u = vec![0.0; d];
    for (i, wi) in m.weights().into_iter().enumerate() {
        for (k, x) in m.point(i).iter().enumerate() {
            u[k] = x - mean[k];
        }
        for a in 0..d {
            for b in 0..d {
                let wab = wi * u[a] * u[b];
                for c in 0..d {
                    data[(a * d + b) * d + c] += wab * u[c];
                }
            }
        }
    }
    ThirdMoment { dim: d, data }
}

/// `n` i.i.d. draws from `g`, equal weights. Coinciding draws (only possible
/// for degenerate covariances) are merged.
pub fn discretize_gaussian(g: &GaussianMeasure, n: usize, seed: u64) -> Result<DiscreteMeasure> {
    if n == 0 {
        return Err(Error::invalid("need n >= 1 samples"));
    }
    let factor = gaussian_factor(g.cov())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = g.dim();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let x = &factor * z;
            x.iter().zip(g.mean()).map(|(xi, mi)| xi + mi).collect()
        })
        .collect();
    DiscreteMeasure::uniform(&rows)
}

/// A square root `L` with `L Lᵀ = cov`, from the eigendecomposition so that
/// singular covariances work.
pub(crate) fn gaussian_factor(cov: &SymMatrix) -> Result<Matrix> {
    let eig = spectral_decompose(cov)?;
    let tol = default_clip_tol(eig.max_eigenvalue());
    if eig.min_eigenvalue() < -1e-10 * eig.max_eigenvalue().abs().max(1.0) {
        return Err(Error::NotPsd {
            min_eigenvalue: eig.min_eigenvalue(),
        });
    }
    let mut f = eig.eigenvectors.clone();
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        let s = if l <= tol { 0.0 } else { l.sqrt() };
        f.column_mut(k).scale_mut(s);
    }
    Ok(f)
}

fn first_primes(k: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(k);
    let mut c = 2u64;
    while primes.len() < k {
        if primes.iter().take_while(|&&p| p * p <= c).all(|&p| c % p != 0) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// First `n` points of the Halton sequence in `k` dimensions (prime bases,
/// indices starting at 1, no scrambling), rescaled from `[0,1]^k` to `[-1,1]^k`.
pub fn low_discrepancy(n: usize, k: usize) -> Vec<Vec<f64>> {
    let bases = first_primes(k);
    (1..=n as u64)
        .map(|i| bases.iter().map(|&b| 2.0 * radical_inverse(i, b) - 1.0).collect())
        .collect()
}

/// `E‖X − Y‖²` for independent `X ~ μ`, `Y ~ ν`.
pub fn independence_cost<A: HasMoments, B: HasMoments>(mu: &A, nu: &B) -> Result<f64> {
    let a = mu.moments();
    let b = nu.moments();
    if a.mean.len() != b.mean.len() {
        return Err(Error::invalid("measures have different dimensions"));
    }
    let shift: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(shift + a.trace_cov + b.trace_cov)
}

/// Principal components of a discrete measure.
#[derive(Debug, Clone)]
pub struct Pca {
    /// `d×k`, orthonormal columns in descending variance order.
    pub components: Matrix,
    pub mean: Vec<f64>,
    pub explained_variance: Vec<f64>,
}

pub fn pca(m: &DiscreteMeasure, k: usize) -> Result<Pca> {
    let d = m.dim();
    if k == 0 || k > d {
        return Err(Error::invalid(format!("need 1 <= k <= {d}, got {k}")));
    }
    let mc = mean_cov(m);
    let eig = spectral_decompose(&mc.cov)?;
    Ok(Pca {
        components: eig.eigenvectors.columns(0, k).into_owned(),
        mean: mc.mean,
        explained_variance: eig.eigenvalues[..k].to_vec(),
    })
}
