//! Single-measure stochastic localization.
//!
//! The discrete engine runs Euler-Maruyama on the log-weights of a
//! finite-support measure,
//!
//! ```text
//! d log p_t(x) = <x - a_t, C_t dW_t> - ½ ‖C_tᵀ (x - a_t)‖² dt,
//! ```
//!
//! renormalizing after every step and recomputing the mean `a_t` and
//! covariance `Σ_t` from the weights. The control `C_t` is frozen over a step.
//!
//! For Gaussian priors with `C_t = I` the posterior is available in closed
//! form, `Σ_t = (Σ₀⁻¹ + tI)⁻¹` and `a_t = Σ_t (Σ₀⁻¹ m + θ_t)`, driven by the
//! observation process `dθ_t = a_t dt + dW_t`; see [`GaussianAnalyticState`].

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    default_clip_tol, regularized_control, spectral_decompose, spectral_norm, Matrix, SymMatrix,
};
use crate::measures::{mean_cov, DiscreteMeasure, GaussianMeasure, MomentSummary};
use crate::parallel::{map_indexed, trajectory_rng};

/// Largest admissible expected log-weight increment `tr(Cᵀ Σ C) dt` per step.
pub const BLOWUP_THRESHOLD: f64 = 50.0;

/// Choice of control matrix for a single SL run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlPolicy {
    /// Regularized Eldan α-scheme, `C = (Σ + δ^{1/α} I)^{-α}`.
    Alpha { alpha: f64, delta: f64 },
    Identity,
}

impl ControlPolicy {
    pub fn alpha(alpha: f64, delta: f64) -> Result<Self> {
        let p = ControlPolicy::Alpha { alpha, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ControlPolicy::Alpha { alpha, delta } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
                }
                if !(delta > 0.0) || !delta.is_finite() {
                    return Err(Error::invalid(format!("delta must be positive, got {delta}")));
                }
                Ok(())
            }
            ControlPolicy::Identity => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ControlPolicy::Alpha { alpha, .. } => format!("alpha={alpha}"),
            ControlPolicy::Identity => "identity".into(),
        }
    }
}

/// Time stepping, horizon, localization threshold and master seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Threshold on `tr Σ_t`; `None` means `1e-8 · max(1, tr Σ₀)`.
    #[serde(default)]
    pub loc_tol: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.05,
            horizon: 10.0,
            loc_tol: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, seed: u64) -> Self {
        SimConfig {
            dt,
            horizon,
            loc_tol: None,
            seed,
        }
    }

    pub fn with_loc_tol(mut self, tol: f64) -> Self {
        self.loc_tol = Some(tol);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= self.dt) || !self.horizon.is_finite() {
            return Err(Error::invalid(format!(
                "horizon T = {} must be finite and at least dt = {}",
                self.horizon, self.dt
            )));
        }
        if let Some(tol) = self.loc_tol {
            if !(tol > 0.0) {
                return Err(Error::invalid(format!("loc_tol must be positive, got {tol}")));
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt - 1e-9).ceil() as usize
    }

    pub fn loc_tol_for(&self, initial_trace: f64) -> f64 {
        self.loc_tol.unwrap_or(1e-8 * initial_trace.max(1.0))
    }

    /// Step index closest to time `t`.
    pub fn step_index(&self, t: f64) -> usize {
        (t / self.dt).round() as usize
    }
}

/// Current posterior `μ_t` with its cached moments.
#[derive(Debug, Clone, PartialEq)]
pub struct SLState {
    t: f64,
    measure: DiscreteMeasure,
    moments: MomentSummary,
}

impl SLState {
    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn measure(&self) -> &DiscreteMeasure {
        &self.measure
    }

    pub fn moments(&self) -> &MomentSummary {
        &self.moments
    }

    pub fn mean(&self) -> &[f64] {
        &self.moments.mean
    }

    pub fn cov(&self) -> &SymMatrix {
        &self.moments.cov
    }

    pub fn trace(&self) -> f64 {
        self.moments.trace_cov
    }

    pub fn dim(&self) -> usize {
        self.measure.dim()
    }

    pub fn argmax_index(&self) -> usize {
        self.measure.argmax()
    }

    pub fn argmax_point(&self) -> &[f64] {
        self.measure.point(self.measure.argmax())
    }

    pub fn max_weight(&self) -> f64 {
        self.measure.log_weights()[self.measure.argmax()].exp()
    }

    /// One Euler-Maruyama step with a frozen control `C` (any `d×d` matrix)
    /// and Brownian increment `dw`.
    pub fn step_in_place(&mut self, control: &Matrix, dw: &[f64], dt: f64) -> Result<()> {
        let d = self.measure.dim();
        if control.nrows() != d || control.ncols() != d {
            return Err(Error::invalid(format!(
                "control is {}x{}, expected {d}x{d}",
                control.nrows(),
                control.ncols()
            )));
        }
        if dw.len() != d {
            return Err(Error::invalid(format!("increment has length {}, expected {d}", dw.len())));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        let blowup = |t: f64| Error::NumericalBlowup {
            t,
            control_norm: spectral_norm(control),
            measure: None,
            trajectory: None,
        };
        if dw.iter().any(|w| !w.is_finite()) || control.iter().any(|c| !c.is_finite()) {
            return Err(blowup(self.t));
        }
        // mean log-weight increment: tr(Cᵀ Σ C) dt
        let spread = (control.transpose() * self.moments.cov.as_matrix() * control).trace() * dt;
        if spread > BLOWUP_THRESHOLD {
            return Err(blowup(self.t));
        }

        let a = self.moments.mean.clone();
        let mut v = vec![0.0; d];
        let mut ct = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                v[r] += control[(r, c)] * dw[c];
                ct[r * d + c] = control[(c, r)];
            }
        }
        let half_dt = 0.5 * dt;
        let (pts, lw) = self.measure.points_and_log_weights_mut();
        let n = lw.len();
        let mut u = vec![0.0; d];

        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            let x = &pts[i * d..(i + 1) * d];
            let mut lin = 0.0;
            for k in 0..d {
                u[k] = x[k] - a[k];
                lin += u[k] * v[k];
            }
            let mut quad = 0.0;
            for r in 0..d {
                let row = &ct[r * d..(r + 1) * d];
                let s: f64 = row.iter().zip(&u).map(|(c, uk)| c * uk).sum();
                quad += s * s;
            }
            let l = lw[i] + lin - half_dt * quad;
            if l.is_nan() {
                return Err(blowup(self.t));
            }
            lw[i] = l;
            if l > max {
                max = l;
            }
        }
        if !max.is_finite() {
            return Err(blowup(self.t));
        }

        // moments accumulated around the previous mean
        let mut total = 0.0;
        let mut m1 = vec![0.0; d];
        let mut m2 = vec![0.0; d * d];
        for i in 0..n {
            let e = (lw[i] - max).exp();
            if e == 0.0 {
                continue;
            }
            total += e;
            let x = &pts[i * d..(i + 1) * d];
            for k in 0..d {
                u[k] = x[k] - a[k];
                m1[k] += e * u[k];
            }
            for r in 0..d {
                let eu = e * u[r];
                for c in r..d {
                    m2[r * d + c] += eu * u[c];
                }
            }
        }
        let shift = max + total.ln();
        for l in lw.iter_mut() {
            *l -= shift;
        }
        let inv = 1.0 / total;
        let offset: Vec<f64> = m1.iter().map(|m| m * inv).collect();
        let mut cov = Matrix::zeros(d, d);
        for r in 0..d {
            for c in r..d {
                let v = m2[r * d + c] * inv - offset[r] * offset[c];
                cov[(r, c)] = v;
                cov[(c, r)] = v;
            }
            if cov[(r, r)] < 0.0 {
                cov[(r, r)] = 0.0;
            }
        }
        let mean: Vec<f64> = a.iter().zip(&offset).map(|(ak, ok)| ak + ok).collect();
        if mean.iter().any(|m| !m.is_finite()) || cov.iter().any(|c| !c.is_finite()) {
            return Err(blowup(self.t));
        }
        self.moments = MomentSummary::new(mean, SymMatrix::symmetrized(cov));
        self.t += dt;
        Ok(())
    }
}

pub fn sl_init(mu: &DiscreteMeasure) -> SLState {
    SLState {
        t: 0.0,
        moments: mean_cov(mu),
        measure: mu.clone(),
    }
}

pub fn sl_step(s: &SLState, control: &Matrix, dw: &[f64], dt: f64) -> Result<SLState> {
    let mut next = s.clone();
    next.step_in_place(control, dw, dt)?;
    Ok(next)
}

pub fn control_of(s: &SLState, policy: &ControlPolicy) -> Result<SymMatrix> {
    match *policy {
        ControlPolicy::Identity => Ok(SymMatrix::identity(s.dim())),
        ControlPolicy::Alpha { alpha, delta } => regularized_control(s.cov(), alpha, delta),
    }
}

/// `N(0, dt I)` increment.
pub fn brownian_increment<R: Rng + ?Sized>(rng: &mut R, d: usize, dt: f64) -> Vec<f64> {
    let sd = dt.sqrt();
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

/// Outcome of one localization run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Posterior mean at the stopping time.
    pub a_final: Vec<f64>,
    /// Support point carrying the most weight at the stopping time.
    pub argmax_point: Vec<f64>,
    pub argmax_index: usize,
    pub max_weight: f64,
    pub localized: bool,
    pub t_final: f64,
    /// Recorded at `t = 0` and after every step.
    pub times: Vec<f64>,
    pub traces: Vec<f64>,
    /// Posterior means, row-major `len(times) × d`.
    pub means: Vec<f64>,
}

/// Simulate until `t ≥ T` or `tr Σ_t < loc_tol`.
pub fn run_localization<R: Rng + ?Sized>(
    mu: &DiscreteMeasure,
    policy: &ControlPolicy,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    cfg.validate()?;
    policy.validate()?;
    let d = mu.dim();
    let mut s = sl_init(mu);
    let tol = cfg.loc_tol_for(s.trace());
    let steps = cfg.n_steps();
    let mut times = Vec::with_capacity(steps + 1);
    let mut traces = Vec::with_capacity(steps + 1);
    let mut means = Vec::with_capacity((steps + 1) * d);
    times.push(0.0);
    traces.push(s.trace());
    means.extend_from_slice(s.mean());
    for k in 0..steps {
        if s.trace() < tol {
            break;
        }
        let c = control_of(&s, policy)?;
        let dw = brownian_increment(rng, d, cfg.dt);
        s.step_in_place(c.as_matrix(), &dw, cfg.dt)?;
        times.push((k + 1) as f64 * cfg.dt);
        traces.push(s.trace());
        means.extend_from_slice(s.mean());
    }
    Ok(Trajectory {
        a_final: s.mean().to_vec(),
        argmax_point: s.argmax_point().to_vec(),
        argmax_index: s.argmax_index(),
        max_weight: s.max_weight(),
        localized: s.trace() < tol,
        t_final: s.t(),
        times,
        traces,
        means,
    })
}

/// Monte Carlo average of `tr Σ_t` on the step grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCurve {
    pub label: String,
    pub times: Vec<f64>,
    pub mean_trace: Vec<f64>,
    pub std_err: Vec<f64>,
}

impl RateCurve {
    /// Value at the grid point closest to `t`.
    pub fn at(&self, t: f64) -> (f64, f64) {
        let k = self
            .times
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (*a - t).abs().total_cmp(&(*b - t).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        (self.mean_trace[k], self.std_err[k])
    }

    /// Least-squares slope of `ln(mean_trace)` against `t` over `[t0, t1]`.
    pub fn log_slope(&self, t0: f64, t1: f64) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .times
            .iter()
            .zip(&self.mean_trace)
            .filter(|(t, m)| **t >= t0 - 1e-9 && **t <= t1 + 1e-9 && **m > 0.0)
            .map(|(t, m)| (*t, m.ln()))
            .collect();
        let n = pts.len() as f64;
        let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
        sxy / sxx
    }
}

/// Trace curve padded to the full grid (stopped runs hold their last value).
fn padded_traces(traj: &Trajectory, len: usize) -> Vec<f64> {
    let mut v = traj.traces.clone();
    let last = *v.last().expect("at least the initial trace");
    v.resize(len, last);
    v
}

/// `E[tr Σ_t]` for each policy over `m` trajectories. Trajectory `j` uses the
/// same random stream under every policy.
pub fn localization_rate_curve(
    mu: &DiscreteMeasure,
    policies: &[ControlPolicy],
    cfg: &SimConfig,
    m: usize,
) -> Result<Vec<RateCurve>> {
    if m < 2 {
        return Err(Error::invalid("need at least 2 trajectories"));
    }
    cfg.validate()?;
    let len = cfg.n_steps() + 1;
    let per_traj: Vec<Vec<Vec<f64>>> = map_indexed(m, |j| {
        policies
            .iter()
            .map(|p| {
                let mut rng = trajectory_rng(cfg.seed, j);
                run_localization(mu, p, cfg, &mut rng).map(|t| padded_traces(&t, len))
            })
            .collect()
    })?;
    let times: Vec<f64> = (0..len).map(|k| k as f64 * cfg.dt).collect();
    let mf = m as f64;
    Ok(policies
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let mut mean = vec![0.0; len];
            let mut sq = vec![0.0; len];
            for traj in &per_traj {
                for (k, v) in traj[pi].iter().enumerate() {
                    mean[k] += v;
                    sq[k] += v * v;
                }
            }
            let mut se = vec![0.0; len];
            for k in 0..len {
                mean[k] /= mf;
                let var = ((sq[k] / mf - mean[k] * mean[k]) * mf / (mf - 1.0)).max(0.0);
                se[k] = (var / mf).sqrt();
            }
            RateCurve {
                label: p.label(),
                times: times.clone(),
                mean_trace: mean,
                std_err: se,
            }
        })
        .collect())
}

/// CSV rows `trajectory_id,t,tr_sigma,a_1..a_d`.
pub fn write_trajectories_csv<W: Write>(w: W, trajectories: &[Trajectory]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let d = trajectories
        .first()
        .map(|t| t.a_final.len())
        .unwrap_or(0);
    let mut header = vec!["trajectory_id".to_string(), "t".into(), "tr_sigma".into()];
    header.extend((1..=d).map(|i| format!("a_{i}")));
    wtr.write_record(&header)?;
    for (id, traj) in trajectories.iter().enumerate() {
        for (k, (t, tr)) in traj.times.iter().zip(&traj.traces).enumerate() {
            let mut rec = vec![id.to_string(), format!("{t}"), format!("{tr:e}")];
            rec.extend(traj.means[k * d..(k + 1) * d].iter().map(|a| format!("{a:e}")));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Eigenbasis of a nonsingular Gaussian prior, cached for posterior updates.
#[derive(Debug, Clone, PartialEq)]
struct PriorBasis {
    vectors: Matrix,
    values: Vec<f64>,
    /// `Vᵀ Σ₀⁻¹ m`.
    precision_mean: Vec<f64>,
}

impl PriorBasis {
    fn new(prior: &GaussianMeasure) -> Result<Self> {
        let eig = spectral_decompose(prior.cov())?;
        let tol = default_clip_tol(eig.max_eigenvalue());
        if eig.min_eigenvalue() <= tol {
            return Err(Error::NotPsd {
                min_eigenvalue: eig.min_eigenvalue(),
            });
        }
        let d = prior.dim();
        let precision_mean = (0..d)
            .map(|k| {
                let proj: f64 = (0..d).map(|i| eig.eigenvectors[(i, k)] * prior.mean()[i]).sum();
                proj / eig.eigenvalues[k]
            })
            .collect();
        Ok(PriorBasis {
            vectors: eig.eigenvectors,
            values: eig.eigenvalues,
            precision_mean,
        })
    }

    /// Posterior mean for observation `theta` at time `t`.
    fn mean(&self, theta: &[f64], t: f64, out: &mut [f64]) {
        let d = self.values.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..d {
            let proj: f64 = (0..d).map(|i| self.vectors[(i, k)] * theta[i]).sum();
            let s = self.values[k];
            let z = (proj + self.precision_mean[k]) * s / (1.0 + t * s);
            for i in 0..d {
                out[i] += self.vectors[(i, k)] * z;
            }
        }
    }

    fn cov(&self, t: f64) -> SymMatrix {
        let d = self.values.len();
        let mut scaled = self.vectors.clone();
        for k in 0..d {
            let s = self.values[k];
            scaled.column_mut(k).scale_mut(s / (1.0 + t * s));
        }
        SymMatrix::symmetrized(&scaled * self.vectors.transpose())
    }
}

/// Posterior of a Gaussian prior after observing `θ` at time `t` under the
/// identity control: `Σ_t = (Σ₀⁻¹ + tI)⁻¹`, `a_t = Σ_t (Σ₀⁻¹ m + θ)`.
pub fn gaussian_posterior(prior: &GaussianMeasure, theta: &[f64], t: f64) -> Result<MomentSummary> {
    if theta.len() != prior.dim() {
        return Err(Error::invalid("observation has the wrong dimension"));
    }
    if !(t >= 0.0) {
        return Err(Error::invalid("time must be nonnegative"));
    }
    let basis = PriorBasis::new(prior)?;
    let mut mean = vec![0.0; prior.dim()];
    basis.mean(theta, t, &mut mean);
    Ok(MomentSummary::new(mean, basis.cov(t)))
}

/// Observation process of the identity-control scheme for a Gaussian prior.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianAnalyticState {
    pub t: f64,
    pub theta: Vec<f64>,
    /// Trapezoid approximation of `∫₀ᵗ a_s ds`.
    pub running_int_a: Vec<f64>,
    prior: GaussianMeasure,
    basis: PriorBasis,
    mean: Vec<f64>,
}

impl GaussianAnalyticState {
    pub fn new(prior: &GaussianMeasure) -> Result<Self> {
        let basis = PriorBasis::new(prior)?;
        let d = prior.dim();
        Ok(GaussianAnalyticState {
            t: 0.0,
            theta: vec![0.0; d],
            running_int_a: vec![0.0; d],
            mean: prior.mean().to_vec(),
            prior: prior.clone(),
            basis,
        })
    }

    pub fn prior(&self) -> &GaussianMeasure {
        &self.prior
    }

    /// Current posterior mean `a_t`.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn posterior(&self) -> MomentSummary {
        MomentSummary::new(self.mean.clone(), self.basis.cov(self.t))
    }

    /// `θ ← θ + a_t dt + ΔW`, then refresh `a` and the trapezoid integral.
    pub fn advance(&mut self, dw: &[f64], dt: f64) {
        let d = self.theta.len();
        let old = std::mem::take(&mut self.mean);
        for k in 0..d {
            self.theta[k] += old[k] * dt + dw[k];
        }
        self.t += dt;
        let mut new = vec![0.0; d];
        self.basis.mean(&self.theta, self.t, &mut new);
        for k in 0..d {
            self.running_int_a[k] += 0.5 * (old[k] + new[k]) * dt;
        }
        self.mean = new;
    }
}

pub fn gaussian_observation_step(
    s: &GaussianAnalyticState,
    dw: &[f64],
    dt: f64,
) -> Result<GaussianAnalyticState> {
    if dw.len() != s.theta.len() {
        return Err(Error::invalid("increment has the wrong dimension"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    let mut next = s.clone();
    next.advance(dw, dt);
    Ok(next)
}
