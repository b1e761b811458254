//! Pushforward models `f(z; θ) = θᵀ φ(z)` over tensor Legendre features,
//! fitted by minimizing the empirical SL coupling cost to a data measure.

use std::io::Write;

use nalgebra::{Cholesky, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::SimConfig;
use crate::error::{Error, Result};
use crate::joint::{run_joint, JointPolicy};
use crate::linalg::{spectral_norm, Matrix};
use crate::measures::{pca, DiscreteMeasure};
use crate::parallel::{map_indexed, trajectory_rng};

/// Tensor product of L²-normalized Legendre polynomials on `[-1, 1]^k`.
///
/// Features are ordered lexicographically by multi-index with the first
/// latent coordinate varying slowest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegendreBasis {
    degrees: Vec<usize>,
}

impl LegendreBasis {
    pub fn new(degrees: Vec<usize>) -> Result<Self> {
        if degrees.is_empty() {
            return Err(Error::invalid("basis needs at least one latent dimension"));
        }
        Ok(LegendreBasis { degrees })
    }

    /// Same maximal degree in each of `k` latent dimensions.
    pub fn uniform(k: usize, degree: usize) -> Result<Self> {
        Self::new(vec![degree; k])
    }

    pub fn latent_dim(&self) -> usize {
        self.degrees.len()
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn len(&self) -> usize {
        self.degrees.iter().map(|d| d + 1).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Multi-index of feature `j`.
    pub fn multi_index(&self, mut j: usize) -> Vec<usize> {
        let mut idx = vec![0; self.degrees.len()];
        for (slot, deg) in idx.iter_mut().zip(&self.degrees).rev() {
            *slot = j % (deg + 1);
            j /= deg + 1;
        }
        idx
    }

    /// Position of a multi-index in the feature vector.
    pub fn feature_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.degrees).fold(0, |acc, (n, deg)| acc * (deg + 1) + n)
    }

    pub fn features(&self, z: &[f64]) -> Vec<f64> {
        legendre_features(self, z)
    }
}

/// `P̃_n(x) = √((2n+1)/2) P_n(x)` for `n = 0..=degree`.
pub fn normalized_legendre(x: f64, degree: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(degree + 1);
    p.push(1.0);
    if degree >= 1 {
        p.push(x);
    }
    for n in 1..degree {
        let next = ((2 * n + 1) as f64 * x * p[n] - n as f64 * p[n - 1]) / (n + 1) as f64;
        p.push(next);
    }
    p.iter()
        .enumerate()
        .map(|(n, v)| v * ((2 * n + 1) as f64 / 2.0).sqrt())
        .collect()
}

/// Feature vector `φ(z)`; coordinates outside `[-1, 1]` are clamped.
pub fn legendre_features(basis: &LegendreBasis, z: &[f64]) -> Vec<f64> {
    assert_eq!(z.len(), basis.latent_dim(), "latent point has the wrong dimension");
    let per_dim: Vec<Vec<f64>> = z
        .iter()
        .zip(&basis.degrees)
        .map(|(&x, &deg)| {
            let c = x.clamp(-1.0, 1.0);
            if c != x {
                log::warn!("latent coordinate {x} clamped to [-1, 1]");
            }
            normalized_legendre(c, deg)
        })
        .collect();
    let mut out = vec![1.0];
    for vals in &per_dim {
        out = out.iter().flat_map(|a| vals.iter().map(move |b| a * b)).collect();
    }
    out
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 1..n {
                let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pm = if n <= 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// `f(z; θ) = θᵀ φ(z)` with `θ` of shape `J×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricMap {
    pub basis: LegendreBasis,
    pub theta: Matrix,
}

impl ParametricMap {
    pub fn new(basis: LegendreBasis, theta: Matrix) -> Result<Self> {
        if theta.nrows() != basis.len() {
            return Err(Error::invalid(format!(
                "theta has {} rows but the basis has {} features",
                theta.nrows(),
                basis.len()
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("theta has non-finite entries"));
        }
        Ok(ParametricMap { basis, theta })
    }

    pub fn zeros(basis: LegendreBasis, d: usize) -> Self {
        let j = basis.len();
        ParametricMap { basis, theta: Matrix::zeros(j, d) }
    }

    pub fn output_dim(&self) -> usize {
        self.theta.ncols()
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        let phi = legendre_features(&self.basis, z);
        (0..self.output_dim())
            .map(|c| phi.iter().enumerate().map(|(p, f)| f * self.theta[(p, c)]).sum())
            .collect()
    }

    /// Row-major flattening `θ[p, c] ↦ p·d + c`.
    pub fn flat(&self) -> Vec<f64> {
        self.theta.transpose().iter().copied().collect()
    }

    pub fn from_flat(basis: LegendreBasis, d: usize, flat: &[f64]) -> Result<Self> {
        let j = basis.len();
        if flat.len() != j * d {
            return Err(Error::invalid("flat parameter has the wrong length"));
        }
        Self::new(basis, Matrix::from_row_slice(j, d, flat))
    }
}

/// Uniform measure on `f(zᵢ; θ)`.
pub fn model_pushforward(map: &ParametricMap, z: &[Vec<f64>]) -> Result<DiscreteMeasure> {
    Ok(model_pushforward_with_origin(map, z)?.0)
}

/// As [`model_pushforward`], also returning the atom each latent point
/// landed on after duplicate merging.
pub fn model_pushforward_with_origin(
    map: &ParametricMap,
    z: &[Vec<f64>],
) -> Result<(DiscreteMeasure, Vec<usize>)> {
    if z.is_empty() {
        return Err(Error::invalid("need at least one latent point"));
    }
    if z.iter().any(|p| p.len() != map.basis.latent_dim()) {
        return Err(Error::invalid("latent points have the wrong dimension"));
    }
    let rows: Vec<Vec<f64>> = z.iter().map(|p| map.eval(p)).collect();
    DiscreteMeasure::from_weighted_rows_with_origin(&rows, &vec![1.0; rows.len()])
}

/// How trajectory noise is drawn across optimizer iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// The same trajectories for every evaluation.
    Frozen,
    /// Fresh trajectories each outer iteration, fixed within it.
    #[default]
    PerIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub m: usize,
    pub sim: SimConfig,
    pub alpha: f64,
    pub delta: f64,
    pub max_iter: usize,
    pub lambda0: f64,
    pub noise: NoiseMode,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            m: 2000,
            sim: SimConfig::new(0.05, 10.0, 0),
            alpha: 0.5,
            delta: 1e-3,
            max_iter: 15,
            lambda0: 1e-3,
            noise: NoiseMode::PerIteration,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("M must be at least 1"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if !(self.lambda0 > 0.0) || !self.lambda0.is_finite() {
            return Err(Error::invalid("lambda0 must be positive"));
        }
        self.sim.validate()?;
        self.policy().validate()
    }

    pub fn policy(&self) -> JointPolicy {
        JointPolicy::JointAlpha {
            alpha: self.alpha,
            delta: self.delta,
        }
    }

    fn iteration_seed(&self, iteration: usize) -> u64 {
        match self.noise {
            NoiseMode::Frozen => self.sim.seed,
            NoiseMode::PerIteration => self
                .sim
                .seed
                .wrapping_add((iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }
}

/// Loss, gradient and Gauss–Newton Hessian at one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    /// `J×d`, same layout as `θ`.
    pub grad: Matrix,
    /// `(J·d)×(J·d)` in the row-major flattening of `θ`.
    pub hess: Matrix,
    /// Terminal model atom of each trajectory.
    pub profile: Vec<usize>,
}

impl LossEval {
    pub fn flat_grad(&self) -> Vec<f64> {
        self.grad.transpose().iter().copied().collect()
    }
}

/// Empirical loss `(1/M) Σⱼ ‖x_{k_j} - f(z_{i_j}; θ)‖²` between the terminal
/// atoms of the data and the model, with its derivatives for a fixed
/// localization profile. Trajectory `j` uses stream `(seed, j)`.
pub fn loss_grad_hess(
    data: &DiscreteMeasure,
    map: &ParametricMap,
    z: &[Vec<f64>],
    cfg: &FitConfig,
    seed: u64,
) -> Result<LossEval> {
    cfg.validate()?;
    if data.dim() != map.output_dim() {
        return Err(Error::invalid("data and model have different dimensions"));
    }
    let (model, origin) = model_pushforward_with_origin(map, z)?;
    let j_count = map.basis.len();
    let d = map.output_dim();

    // Mean feature vector of the latent points behind each atom.
    let mut atom_phi = vec![vec![0.0; j_count]; model.len()];
    let mut atom_count = vec![0usize; model.len()];
    for (zi, &atom) in z.iter().zip(&origin) {
        for (acc, f) in atom_phi[atom].iter_mut().zip(legendre_features(&map.basis, zi)) {
            *acc += f;
        }
        atom_count[atom] += 1;
    }
    for (phi, c) in atom_phi.iter_mut().zip(&atom_count) {
        phi.iter_mut().for_each(|v| *v /= *c as f64);
    }

    let pair = [data.clone(), model.clone()];
    let policy = cfg.policy();
    let mut sim = cfg.sim;
    sim.seed = seed;
    let ends = map_indexed(cfg.m, |j| {
        let s = run_joint(&pair, &policy, &sim, &mut trajectory_rng(seed, j), |_, _| {})?;
        Ok((s.indices[0], s.indices[1]))
    })?;

    let m = cfg.m as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(j_count, d);
    // Gauss–Newton term is block diagonal: 2 E[φφᵀ] ⊗ I_d.
    let mut gram = Matrix::zeros(j_count, j_count);
    let mut profile = Vec::with_capacity(ends.len());
    for &(k, i) in &ends {
        let x = data.point(k);
        let b = model.point(i);
        let phi = &atom_phi[i];
        for c in 0..d {
            let r = b[c] - x[c];
            loss += r * r / m;
            for p in 0..j_count {
                grad[(p, c)] += 2.0 * phi[p] * r / m;
            }
        }
        for p in 0..j_count {
            for q in 0..j_count {
                gram[(p, q)] += 2.0 * phi[p] * phi[q] / m;
            }
        }
        profile.push(i);
    }
    let mut hess = Matrix::zeros(j_count * d, j_count * d);
    for p in 0..j_count {
        for q in 0..j_count {
            for c in 0..d {
                hess[(p * d + c, q * d + c)] = gram[(p, q)];
            }
        }
    }
    Ok(LossEval { loss, grad, hess, profile })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub loss_history: Vec<f64>,
    /// Rows of the final `θ`.
    pub theta: Vec<Vec<f64>>,
    pub basis: LegendreBasis,
    pub iterations: usize,
    pub converged: bool,
    pub config: FitConfig,
    pub seed: u64,
}

impl FitReport {
    pub fn map(&self) -> Result<ParametricMap> {
        let d = self.theta.first().map(|r| r.len()).unwrap_or(0);
        let flat: Vec<f64> = self.theta.iter().flatten().copied().collect();
        ParametricMap::from_flat(self.basis.clone(), d, &flat)
    }

    /// CSV `iteration,loss`.
    pub fn write_loss_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["iteration", "loss"])?;
        for (i, l) in self.loss_history.iter().enumerate() {
            wtr.write_record([i.to_string(), format!("{l:e}")])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

const MAX_TRIALS: usize = 12;

fn solve_damped(hess: &Matrix, grad: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let n = grad.len();
    let shifted = hess + Matrix::identity(n, n) * lambda;
    let chol = Cholesky::new(shifted)?;
    let step = chol.solve(&-DVector::from_column_slice(grad));
    step.iter().all(|x| x.is_finite()).then(|| step.iter().copied().collect())
}

/// Damped Newton on the SL loss: solve `(H + λI)Δ = -g`, keep the step if
/// the loss under the same noise decreases (`λ ← λ/2`), otherwise retry
/// with `λ ← 3λ`. A failed solve falls back to a backtracking gradient step.
pub fn fit(
    data: &DiscreteMeasure,
    init: &ParametricMap,
    z: &[Vec<f64>],
    cfg: &FitConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    let basis = init.basis.clone();
    let d = init.output_dim();
    let mut map = init.clone();
    let mut lambda = cfg.lambda0;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..cfg.max_iter {
        let seed = cfg.iteration_seed(it);
        let eval = loss_grad_hess(data, &map, z, cfg, seed)?;
        if it == 0 {
            history.push(eval.loss);
        }
        let g = eval.flat_grad();
        let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if eval.loss == 0.0 || gnorm <= 1e-12 * (1.0 + eval.loss) {
            converged = true;
            break;
        }
        let theta = map.flat();
        let try_step = |step: &[f64]| -> Result<(ParametricMap, f64)> {
            let next: Vec<f64> = theta.iter().zip(step).map(|(t, s)| t + s).collect();
            let cand = ParametricMap::from_flat(basis.clone(), d, &next)?;
            let loss = loss_grad_hess(data, &cand, z, cfg, seed)?.loss;
            Ok((cand, loss))
        };

        let mut accepted = None;
        for _ in 0..MAX_TRIALS {
            let Some(step) = solve_damped(&eval.hess, &g, lambda) else {
                break;
            };
            let (cand, loss) = try_step(&step)?;
            if loss < eval.loss {
                lambda = (lambda * 0.5).max(1e-12);
                accepted = Some((cand, loss));
                break;
            }
            lambda *= 3.0;
        }
        if accepted.is_none() {
            let mut eta = 1.0 / (spectral_norm(&eval.hess) + lambda);
            for _ in 0..MAX_TRIALS {
                let step: Vec<f64> = g.iter().map(|x| -eta * x).collect();
                let (cand, loss) = try_step(&step)?;
                if loss < eval.loss {
                    accepted = Some((cand, loss));
                    break;
                }
                eta *= 0.5;
            }
        }
        iterations = it + 1;
        match accepted {
            Some((cand, loss)) => {
                map = cand;
                history.push(loss);
            }
            None => {
                // No descent direction found under this noise.
                history.push(eval.loss);
                converged = true;
                break;
            }
        }
    }

    Ok(FitReport {
        loss_history: history,
        theta: (0..map.theta.nrows())
            .map(|p| map.theta.row(p).iter().copied().collect())
            .collect(),
        basis,
        iterations,
        converged,
        config: *cfg,
        seed: cfg.sim.seed,
    })
}

/// Map sending the latent sample onto the top principal directions of the
/// data, centred at the data mean and scaled to the explained variances.
pub fn informed_init(
    data: &DiscreteMeasure,
    z: &[Vec<f64>],
    basis: &LegendreBasis,
) -> Result<ParametricMap> {
    let k = basis.latent_dim();
    if basis.degrees().iter().any(|&deg| deg < 1) {
        return Err(Error::invalid("informed init needs degree at least 1 in every latent dimension"));
    }
    if z.len() < 2 || z.iter().any(|p| p.len() != k) {
        return Err(Error::invalid("need at least two latent points of the basis dimension"));
    }
    let d = data.dim();
    let pc = pca(data, k)?;
    let n = z.len() as f64;
    let z_mean: Vec<f64> = (0..k).map(|c| z.iter().map(|p| p[c]).sum::<f64>() / n).collect();
    let z_sd: Vec<f64> = (0..k)
        .map(|c| (z.iter().map(|p| (p[c] - z_mean[c]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    if z_sd.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("latent points are degenerate"));
    }
    // f(z) = m + Σ_c v_c s_c (z_c - z̄_c), written in the Legendre basis.
    let p0 = normalized_legendre(0.0, 0)[0];
    let p1_scale = normalized_legendre(1.0, 1)[1];
    let linear_scale = p1_scale * p0.powi(k as i32 - 1);
    let mut theta = Matrix::zeros(basis.len(), d);
    let mut offset = pc.mean.clone();
    for c in 0..k {
        let s = pc.explained_variance[c].max(0.0).sqrt() / z_sd[c];
        let mut idx = vec![0; k];
        idx[c] = 1;
        let row = basis.feature_index(&idx);
        for i in 0..d {
            let coef = pc.components[(i, c)] * s;
            theta[(row, i)] = coef / linear_scale;
            offset[i] -= coef * z_mean[c];
        }
    }
    for i in 0..d {
        theta[(0, i)] = offset[i] / p0.powi(k as i32);
    }
    ParametricMap::new(basis.clone(), theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::mean_cov;
    use crate::presets::uniform_latent;
    use approx::assert_abs_diff_eq;

    #[test]
    fn feature_values() {
        let b0 = LegendreBasis::uniform(1, 0).unwrap();
        assert_abs_diff_eq!(legendre_features(&b0, &[0.3])[0], 0.5f64.sqrt(), epsilon = 1e-15);
        let b1 = LegendreBasis::uniform(1, 1).unwrap();
        assert_abs_diff_eq!(legendre_features(&b1, &[1.0])[1], 1.5f64.sqrt(), epsilon = 1e-15);
        let b = LegendreBasis::uniform(2, 2).unwrap();
        assert_eq!(b.len(), 9);
        assert_eq!(b.multi_index(5), vec![1, 2]);
        assert_eq!(b.feature_index(&[1, 2]), 5);
        // Clamped outside the cube.
        assert_eq!(legendre_features(&b, &[2.0, 0.0]), legendre_features(&b, &[1.0, 0.0]));
    }

    #[test]
    fn gram_matrix_is_identity() {
        let (x, w) = gauss_legendre(64);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-13);
        let basis = LegendreBasis::new(vec![3, 2]).unwrap();
        let j = basis.len();
        let mut gram = Matrix::zeros(j, j);
        for (xa, wa) in x.iter().zip(&w) {
            for (xb, wb) in x.iter().zip(&w) {
                let phi = legendre_features(&basis, &[*xa, *xb]);
                for p in 0..j {
                    for q in 0..j {
                        gram[(p, q)] += wa * wb * phi[p] * phi[q];
                    }
                }
            }
        }
        assert!((gram - Matrix::identity(j, j)).abs().max() < 1e-6);
    }

    fn affine_map(basis: &LegendreBasis, a: &Matrix, c: &[f64]) -> ParametricMap {
        // f(z) = A z + c on a degree-1 basis in two latent dimensions.
        let p0 = 0.5f64.sqrt();
        let lin = 1.5f64.sqrt() * p0;
        let d = c.len();
        let mut theta = Matrix::zeros(basis.len(), d);
        for i in 0..d {
            theta[(0, i)] = c[i] / (p0 * p0);
            theta[(basis.feature_index(&[1, 0]), i)] = a[(i, 0)] / lin;
            theta[(basis.feature_index(&[0, 1]), i)] = a[(i, 1)] / lin;
        }
        ParametricMap::new(basis.clone(), theta).unwrap()
    }

    #[test]
    fn pushforward_cases() {
        let basis = LegendreBasis::uniform(2, 1).unwrap();
        let z = uniform_latent(20, 2, 1);
        let zero = model_pushforward(&ParametricMap::zeros(basis.clone(), 3), &z).unwrap();
        assert_eq!(zero.len(), 1);
        assert_eq!(zero.point(0), &[0.0, 0.0, 0.0]);

        let a = Matrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 0.0]);
        let c = [0.5, -1.0, 2.0];
        let map = affine_map(&basis, &a, &c);
        let m = model_pushforward(&map, &z).unwrap();
        for (i, zi) in z.iter().enumerate() {
            for r in 0..3 {
                let expect = a[(r, 0)] * zi[0] + a[(r, 1)] * zi[1] + c[r];
                assert_abs_diff_eq!(m.point(i)[r], expect, epsilon = 1e-10);
            }
        }
        let single = model_pushforward(&map, &z[..1]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.point(0), map.eval(&z[0]).as_slice());
    }

    #[test]
    fn pushforward_is_linear_in_theta() {
        let basis = LegendreBasis::uniform(2, 2).unwrap();
        let z = uniform_latent(10, 2, 2);
        let t1 = Matrix::from_fn(9, 3, |i, j| (i as f64 - j as f64 * 0.7).sin());
        let t2 = Matrix::from_fn(9, 3, |i, j| (i as f64 * 1.3 + j as f64).cos());
        let m1 = ParametricMap::new(basis.clone(), t1.clone()).unwrap();
        let m2 = ParametricMap::new(basis.clone(), t2.clone()).unwrap();
        let m12 = ParametricMap::new(basis, t1 + t2).unwrap();
        for zi in &z {
            let (a, b, s) = (m1.eval(zi), m2.eval(zi), m12.eval(zi));
            for k in 0..3 {
                assert_abs_diff_eq!(s[k], a[k] + b[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_trajectory_gradient_by_hand() {
        let basis = LegendreBasis::uniform(1, 1).unwrap();
        let z = vec![vec![0.5]];
        let map = ParametricMap::new(basis.clone(), Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0])).unwrap();
        let data = DiscreteMeasure::point_mass(&[0.3, -0.2]).unwrap();
        let cfg = FitConfig {
            m: 1,
            sim: SimConfig::new(0.05, 1.0, 0),
            ..FitConfig::default()
        };
        let eval = loss_grad_hess(&data, &map, &z, &cfg, 3).unwrap();
        let phi = legendre_features(&basis, &z[0]);
        let b = map.eval(&z[0]);
        let r = [b[0] - 0.3, b[1] + 0.2];
        assert_abs_diff_eq!(eval.loss, r[0] * r[0] + r[1] * r[1], epsilon = 1e-14);
        for p in 0..2 {
            for c in 0..2 {
                assert_abs_diff_eq!(eval.grad[(p, c)], 2.0 * phi[p] * r[c], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn realizable_target_has_zero_loss() {
        let basis = LegendreBasis::uniform(2, 1).unwrap();
        let z = uniform_latent(30, 2, 3);
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 0.8]);
        let target = affine_map(&basis, &a, &[0.1, 0.2]);
        let data = model_pushforward(&target, &z).unwrap();
        let cfg = FitConfig {
            m: 20,
            sim: SimConfig::new(0.05, 5.0, 0),
            ..FitConfig::default()
        };
        let eval = loss_grad_hess(&data, &target, &z, &cfg, 1).unwrap();
        assert!(eval.loss <= 10.0 * cfg.sim.loc_tol_for(1.0));
        let report = fit(&data, &target, &z, &cfg).unwrap();
        assert!(report.converged);
        assert_eq!(report.loss_history, vec![eval.loss]);
        assert_eq!(report.map().unwrap(), target);
    }

    #[test]
    fn hessian_is_symmetric_psd() {
        let basis = LegendreBasis::uniform(2, 2).unwrap();
        let z = uniform_latent(25, 2, 4);
        let data = DiscreteMeasure::uniform(&uniform_latent(30, 2, 5)).unwrap();
        let map = ParametricMap::new(basis, Matrix::from_fn(9, 2, |i, j| 0.1 * (i + 2 * j) as f64)).unwrap();
        let cfg = FitConfig {
            m: 30,
            sim: SimConfig::new(0.05, 5.0, 0),
            ..FitConfig::default()
        };
        let eval = loss_grad_hess(&data, &map, &z, &cfg, 2).unwrap();
        assert_eq!(eval.hess, eval.hess.transpose());
        let eig = nalgebra::SymmetricEigen::new(eval.hess.clone());
        assert!(eig.eigenvalues.min() > -1e-12);
    }

    #[test]
    fn affine_fit_converges() {
        let basis = LegendreBasis::uniform(2, 1).unwrap();
        let z = uniform_latent(40, 2, 6);
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.4, -0.2, 0.7]);
        let data = model_pushforward(&affine_map(&basis, &a, &[0.5, -0.5]), &z).unwrap();
        let init = affine_map(&basis, &Matrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 0.6]), &[0.0, 0.0]);
        let cfg = FitConfig {
            m: 100,
            sim: SimConfig::new(0.05, 8.0, 3),
            noise: NoiseMode::Frozen,
            max_iter: 10,
            ..FitConfig::default()
        };
        let report = fit(&data, &init, &z, &cfg).unwrap();
        assert_eq!(report.loss_history.len(), report.iterations + 1);
        for w in report.loss_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let first = report.loss_history[0];
        let last = *report.loss_history.last().unwrap();
        assert!(last <= 1e-3 * first, "{:?}", report.loss_history);
    }

    #[test]
    fn informed_init_cases() {
        let rows = uniform_latent(200, 3, 7);
        let data = DiscreteMeasure::uniform(&rows).unwrap();
        let basis = LegendreBasis::uniform(2, 1).unwrap();
        let z = uniform_latent(50, 2, 8);
        let map = informed_init(&data, &z, &basis).unwrap();
        let model = model_pushforward(&map, &z).unwrap();
        let (dm, mm) = (mean_cov(&data), mean_cov(&model));
        for k in 0..3 {
            assert_abs_diff_eq!(dm.mean[k], mm.mean[k], epsilon = 1e-10);
        }
        // Points lie in the plane through the mean spanned by two
        // principal directions.
        let pc = pca(&data, 2).unwrap();
        let normal = {
            let (u, v) = (pc.components.column(0), pc.components.column(1));
            u.cross(&v)
        };
        for i in 0..model.len() {
            let off: f64 = (0..3).map(|k| (model.point(i)[k] - dm.mean[k]) * normal[k]).sum();
            assert!(off.abs() < 1e-10);
        }
        // Degree-1 coefficients reproduce the direct construction.
        let n = z.len() as f64;
        for (i, zi) in z.iter().enumerate() {
            let mut expect = pc.mean.clone();
            for c in 0..2 {
                let zbar = z.iter().map(|p| p[c]).sum::<f64>() / n;
                let sd = (z.iter().map(|p| (p[c] - zbar).powi(2)).sum::<f64>() / n).sqrt();
                let s = pc.explained_variance[c].sqrt() / sd;
                for k in 0..3 {
                    expect[k] += pc.components[(k, c)] * s * (zi[c] - zbar);
                }
            }
            let got = map.eval(zi);
            for k in 0..3 {
                assert_abs_diff_eq!(got[k], expect[k], epsilon = 1e-10);
            }
            let _ = i;
        }
        assert!(informed_init(&data, &z, &LegendreBasis::uniform(2, 0).unwrap()).is_err());
    }

    #[test]
    fn report_loss_csv() {
        let report = FitReport {
            loss_history: vec![2.0, 0.5],
            theta: vec![vec![1.0]],
            basis: LegendreBasis::uniform(1, 0).unwrap(),
            iterations: 1,
            converged: false,
            config: FitConfig::default(),
            seed: 0,
        };
        let mut buf = Vec::new();
        report.write_loss_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,loss\n0,2e0\n1,5e-1\n");
        let json = serde_json::to_string(&report).unwrap();
        let back: FitReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
