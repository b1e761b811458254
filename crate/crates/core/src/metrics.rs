//! Transport-cost estimators built on joint localization, the KL
//! representation for Gaussian measures, and exact W2 baselines.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{brownian_increment, GaussianAnalyticState, SimConfig};
use crate::error::{Error, Result};
use crate::joint::{run_joint, sample_coupling, transport_cost_estimate, Endpoint, JointPolicy};
use crate::linalg::{psd_power_auto, spectral_decompose, SymMatrix};
use crate::measures::{independence_cost, DiscreteMeasure, GaussianMeasure};
use crate::parallel::{map_indexed, trajectory_rng};

/// Monte Carlo estimate of a mean squared cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub mean_sq: f64,
    /// Standard error of `mean_sq`; infinite for a single sample.
    pub std_err: f64,
    pub ci95: (f64, f64),
    pub m: usize,
    pub distance: f64,
}

impl DistanceEstimate {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let m = values.len();
        if m == 0 {
            return Err(Error::invalid("need at least one sample"));
        }
        let mean = values.iter().sum::<f64>() / m as f64;
        let std_err = if m < 2 {
            f64::INFINITY
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            (var / m as f64).sqrt()
        };
        Ok(DistanceEstimate {
            mean_sq: mean,
            std_err,
            ci95: (mean - 1.96 * std_err, mean + 1.96 * std_err),
            m,
            distance: mean.max(0.0).sqrt(),
        })
    }
}

/// Discrete weight measure over time used by the weighted distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMeasure {
    nodes: Vec<f64>,
    masses: Vec<f64>,
}

impl WeightMeasure {
    pub fn new(nodes: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() || nodes.len() != masses.len() {
            return Err(Error::invalid("weight measure needs matching, nonempty nodes and masses"));
        }
        if nodes.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::invalid("weight nodes must be positive"));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("weight nodes must be strictly increasing"));
        }
        if masses.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::invalid("weight masses must be nonnegative"));
        }
        if !(masses.iter().sum::<f64>() > 0.0) {
            return Err(Error::invalid("weight measure has zero total mass"));
        }
        Ok(WeightMeasure { nodes, masses })
    }

    pub fn single(t: f64) -> Result<Self> {
        Self::new(vec![t], vec![1.0])
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }
}

/// `E‖a_∞ - b_∞‖²` under the coupling induced by `policy`.
pub fn sl_distance(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    policy: &JointPolicy,
    cfg: &SimConfig,
    m: usize,
    endpoint: Endpoint,
) -> Result<DistanceEstimate> {
    let samples = sample_coupling(mu, nu, policy, cfg, m)?;
    transport_cost_estimate(&samples, endpoint)
}

/// Per-trajectory `‖a_t - b_t‖²` at each requested time, snapped to the
/// step grid. Row `j` holds trajectory `j`.
pub fn mean_gap_profile(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    policy: &JointPolicy,
    cfg: &SimConfig,
    m: usize,
    times: &[f64],
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if m == 0 {
        return Err(Error::invalid("need at least one trajectory"));
    }
    if let Some(t) = times.iter().find(|t| **t > cfg.horizon * (1.0 + 1e-12) || !(**t >= 0.0)) {
        return Err(Error::invalid(format!(
            "node time {t} lies outside [0, {}]",
            cfg.horizon
        )));
    }
    let steps: Vec<usize> = times.iter().map(|t| cfg.step_index(*t)).collect();
    let pair = [mu.clone(), nu.clone()];
    map_indexed(m, |j| {
        let mut gaps = vec![f64::NAN; steps.len()];
        let mut last = 0.0;
        run_joint(&pair, policy, cfg, &mut trajectory_rng(cfg.seed, j), |k, state| {
            last = state.mean_gap_sq();
            for (g, s) in gaps.iter_mut().zip(&steps) {
                if *s == k {
                    *g = last;
                }
            }
        })?;
        // Nodes after an early stop see the frozen terminal state.
        for g in gaps.iter_mut().filter(|g| g.is_nan()) {
            *g = last;
        }
        Ok(gaps)
    })
}

/// `Σᵢ wᵢ E‖a_{tᵢ} - b_{tᵢ}‖²`.
pub fn weighted_sl_distance(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    policy: &JointPolicy,
    w: &WeightMeasure,
    cfg: &SimConfig,
    m: usize,
) -> Result<DistanceEstimate> {
    let profile = mean_gap_profile(mu, nu, policy, cfg, m, w.nodes())?;
    let totals: Vec<f64> = profile
        .iter()
        .map(|row| row.iter().zip(w.masses()).map(|(g, c)| g * c).sum())
        .collect();
    DistanceEstimate::from_values(&totals)
}

/// Result of the KL representation against the standard Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub estimate: f64,
    pub std_err: f64,
    /// Weight mass beyond the truncation horizon, `1/(1+T_max)`.
    pub tail_mass: f64,
    pub m: usize,
    pub dt: f64,
    pub t_max: f64,
}

/// `KL(μ ‖ N(0, I))` in closed form.
pub fn gaussian_kl_standard(mu: &GaussianMeasure) -> Result<f64> {
    let eig = spectral_decompose(mu.cov())?;
    if eig.min_eigenvalue() <= 0.0 {
        return Err(Error::NotPsd {
            min_eigenvalue: eig.min_eigenvalue(),
        });
    }
    let d = mu.dim() as f64;
    let log_det: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
    let m2: f64 = mu.mean().iter().map(|x| x * x).sum();
    Ok(0.5 * (m2 + mu.cov().trace() - d - log_det))
}

/// Monte Carlo KL divergence from `μ` to the standard Gaussian through the
/// identity-control joint scheme:
/// `½ ∫₀^{T_max} E‖(1+t)(a_t - b_t) - ∫₀ᵗ(a_s - b_s)ds‖² dt/(1+t)²`.
/// The integral beyond `T_max` is dropped; its weight mass is reported.
pub fn kl_via_sl(mu: &GaussianMeasure, m: usize, dt: f64, t_max: f64, seed: u64) -> Result<KlEstimate> {
    if !(t_max >= 10.0) || !t_max.is_finite() {
        return Err(Error::invalid(format!("T_max must be at least 10, got {t_max}")));
    }
    if m == 0 {
        return Err(Error::invalid("need at least one trajectory"));
    }
    let cfg = SimConfig::new(dt, t_max, seed);
    cfg.validate()?;
    let reference = GaussianMeasure::standard(mu.dim());
    let start_a = GaussianAnalyticState::new(mu)?;
    let start_b = GaussianAnalyticState::new(&reference)?;
    let n = cfg.n_steps();
    let d = mu.dim();
    let integrand = |a: &GaussianAnalyticState, b: &GaussianAnalyticState| -> f64 {
        let t = a.t;
        let sq: f64 = (0..d)
            .map(|k| {
                let gap = a.mean()[k] - b.mean()[k];
                let int = a.running_int_a[k] - b.running_int_a[k];
                ((1.0 + t) * gap - int).powi(2)
            })
            .sum();
        0.5 * sq / (1.0 + t).powi(2)
    };
    let values = map_indexed(m, |j| {
        let mut rng = trajectory_rng(seed, j);
        let (mut a, mut b) = (start_a.clone(), start_b.clone());
        let mut prev = integrand(&a, &b);
        let mut total = 0.0;
        for _ in 0..n {
            let step = dt.min(t_max - a.t).max(0.0);
            if step <= 0.0 {
                break;
            }
            let dw = brownian_increment(&mut rng, d, step);
            a.advance(&dw, step);
            b.advance(&dw, step);
            let next = integrand(&a, &b);
            total += 0.5 * (prev + next) * step;
            prev = next;
        }
        Ok(total)
    })?;
    let est = DistanceEstimate::from_values(&values)?;
    Ok(KlEstimate {
        estimate: est.mean_sq,
        std_err: est.std_err,
        tail_mass: 1.0 / (1.0 + t_max),
        m,
        dt,
        t_max,
    })
}

/// Minimum-cost perfect matching on a square cost matrix (row-major).
/// Returns `assignment[row] = column`.
pub fn solve_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::invalid("cost matrix must be square"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("cost matrix has non-finite entries"));
    }
    // Shortest augmenting paths with row/column potentials, 1-indexed with
    // a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    Ok(assignment)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Squared W2 between two uniform measures with the same number of atoms.
pub fn exact_w2_discrete(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::invalid("measures have different dimensions"));
    }
    if !mu.is_uniform() || !nu.is_uniform() {
        return Err(Error::Unsupported("exact W2 needs uniform weights".into()));
    }
    if mu.len() != nu.len() {
        return Err(Error::Unsupported(format!(
            "exact W2 needs equal support sizes, got {} and {}",
            mu.len(),
            nu.len()
        )));
    }
    let n = mu.len();
    let mut cost = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            cost.push(sq_dist(mu.point(i), nu.point(j)));
        }
    }
    let assignment = solve_assignment(&cost, n)?;
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(total / n as f64)
}

/// Squared W2 between Gaussians:
/// `‖Δm‖² + tr(Σ + Λ - 2(Σ^{1/2} Λ Σ^{1/2})^{1/2})`.
pub fn gaussian_w2(mu: &GaussianMeasure, nu: &GaussianMeasure) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::invalid("measures have different dimensions"));
    }
    let root = psd_power_auto(mu.cov(), 0.5)?;
    let cross = psd_power_auto(&nu.cov().congruence(root.as_matrix()), 0.5)?;
    let shift = sq_dist(mu.mean(), nu.mean());
    Ok((shift + mu.cov().trace() + nu.cov().trace() - 2.0 * cross.trace()).max(0.0))
}

/// Upper bound on the extrapolation coupling cost when `μ` is
/// `κ`-strongly log-concave:
/// `‖a₀ - b₀‖² + tr(Σ₀ + Λ₀) - 2√(κ λ_min(Λ₀)) tr(Σ₀)`.
pub fn bound_002(a0: &[f64], b0: &[f64], sigma0: &SymMatrix, lambda0: &SymMatrix, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::invalid("kappa must be positive"));
    }
    if a0.len() != b0.len() || sigma0.dim() != a0.len() || lambda0.dim() != a0.len() {
        return Err(Error::invalid("bound inputs have inconsistent dimensions"));
    }
    let lmin = spectral_decompose(lambda0)?.min_eigenvalue().max(0.0);
    Ok(sq_dist(a0, b0) + sigma0.trace() + lambda0.trace() - 2.0 * (kappa * lmin).sqrt() * sigma0.trace())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub coupling: String,
    /// Squared-cost estimate; `None` for the exact rows.
    pub estimate: Option<DistanceEstimate>,
    pub mean_sq: f64,
    /// Some trajectory ended before its posterior collapsed.
    pub partially_localized: bool,
}

impl TableRow {
    pub fn bound_w2(&self) -> f64 {
        self.mean_sq.max(0.0).sqrt()
    }
}

/// W2 bounds from several couplings, with the optimal and independence
/// costs as references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W2Table {
    pub rows: Vec<TableRow>,
}

impl W2Table {
    pub fn row(&self, coupling: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.coupling == coupling)
    }

    /// CSV `coupling,bound_w2,ci_lo,ci_hi,M`, distances on the W2 scale.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["coupling", "bound_w2", "ci_lo", "ci_hi", "M"])?;
        for r in &self.rows {
            let name = if r.partially_localized {
                format!("{} (partially localized)", r.coupling)
            } else {
                r.coupling.clone()
            };
            let (lo, hi, m) = match &r.estimate {
                Some(e) => (
                    format!("{:.6}", e.ci95.0.max(0.0).sqrt()),
                    format!("{:.6}", e.ci95.1.max(0.0).sqrt()),
                    e.m.to_string(),
                ),
                None => ("NA".into(), "NA".into(), "NA".into()),
            };
            wtr.write_record([name, format!("{:.6}", r.bound_w2()), lo, hi, m])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn w2_bound_table(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    policies: &[JointPolicy],
    cfg: &SimConfig,
    m: usize,
) -> Result<W2Table> {
    let exact = exact_w2_discrete(mu, nu)?;
    let mut rows = vec![TableRow {
        coupling: "optimal".into(),
        estimate: None,
        mean_sq: exact,
        partially_localized: false,
    }];
    for policy in policies {
        let samples = sample_coupling(mu, nu, policy, cfg, m)?;
        let est = transport_cost_estimate(&samples, Endpoint::Argmax)?;
        rows.push(TableRow {
            coupling: policy.label(),
            estimate: Some(est),
            mean_sq: est.mean_sq,
            partially_localized: samples.iter().any(|s| !(s.localized.0 && s.localized.1)),
        });
    }
    rows.push(TableRow {
        coupling: "independence".into(),
        estimate: None,
        mean_sq: independence_cost(mu, nu)?,
        partially_localized: false,
    });
    Ok(W2Table { rows })
}
