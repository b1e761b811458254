//! Joint stochastic localization: several measures driven by one Brownian
//! motion. Their terminal point masses form a coupling of the initial
//! measures.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{brownian_increment, sl_init, ControlPolicy, SLState, SimConfig};
use crate::error::{Error, Result};
use crate::linalg::{extrapolation_control, regularized_control, Matrix, PinvMode};
use crate::measures::DiscreteMeasure;
use crate::metrics::DistanceEstimate;
use crate::parallel::{map_indexed, trajectory_rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JointPolicy {
    /// Every measure uses its own regularized α-control.
    JointAlpha { alpha: f64, delta: f64 },
    /// `C = (Σ†)^{1/2}` for the first measure and
    /// `D = Σ^{1/2} [(Σ^{1/2} Λ Σ^{1/2})†]^{1/2}` for the second, with
    /// `δ²` added inside both pseudoinverse powers.
    Extrapolation { delta: f64 },
}

impl JointPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            JointPolicy::JointAlpha { alpha, delta } => {
                ControlPolicy::Alpha { alpha, delta }.validate()
            }
            JointPolicy::Extrapolation { delta } => {
                if !(delta > 0.0) || !delta.is_finite() {
                    return Err(Error::invalid(format!("delta must be positive, got {delta}")));
                }
                Ok(())
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            JointPolicy::JointAlpha { alpha, .. } => format!("joint_eldan_{alpha}"),
            JointPolicy::Extrapolation { .. } => "extrapolation".into(),
        }
    }
}

/// Which point of a terminal posterior represents the coupling endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// Posterior mean `a_T`.
    Mean,
    /// Support point of maximal weight at time `T`.
    #[default]
    Argmax,
}

/// `k ≥ 2` posteriors advanced in lockstep.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSLState {
    states: Vec<SLState>,
}

impl JointSLState {
    pub fn new(measures: &[DiscreteMeasure]) -> Result<Self> {
        if measures.len() < 2 {
            return Err(Error::invalid("joint localization needs at least two measures"));
        }
        let d = measures[0].dim();
        if measures.iter().any(|m| m.dim() != d) {
            return Err(Error::invalid("measures have different dimensions"));
        }
        Ok(JointSLState {
            states: measures.iter().map(sl_init).collect(),
        })
    }

    pub fn t(&self) -> f64 {
        self.states[0].t()
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    pub fn states(&self) -> &[SLState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `‖a_t - b_t‖²` between the first two posterior means.
    pub fn mean_gap_sq(&self) -> f64 {
        sq_dist(self.states[0].mean(), self.states[1].mean())
    }

    pub fn controls(&self, policy: &JointPolicy) -> Result<Vec<Matrix>> {
        match *policy {
            JointPolicy::JointAlpha { alpha, delta } => self
                .states
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    regularized_control(s.cov(), alpha, delta)
                        .map(|c| c.into_matrix())
                        .map_err(|e| e.with_measure(i))
                })
                .collect(),
            JointPolicy::Extrapolation { delta } => {
                if self.states.len() != 2 {
                    return Err(Error::invalid("the extrapolation scheme couples exactly two measures"));
                }
                let (c, d) = extrapolation_control(
                    self.states[0].cov(),
                    self.states[1].cov(),
                    PinvMode::Additive { delta },
                )?;
                Ok(vec![c.into_matrix(), d])
            }
        }
    }

    /// Advance every measure with its control and the same increment.
    pub fn step_in_place(&mut self, policy: &JointPolicy, dw: &[f64], dt: f64) -> Result<()> {
        let controls = self.controls(policy)?;
        for (i, (s, c)) in self.states.iter_mut().zip(&controls).enumerate() {
            s.step_in_place(c, dw, dt).map_err(|e| e.with_measure(i))?;
        }
        Ok(())
    }
}

pub fn joint_step(
    j: &JointSLState,
    policy: &JointPolicy,
    dw: &[f64],
    dt: f64,
) -> Result<JointSLState> {
    let mut next = j.clone();
    next.step_in_place(policy, dw, dt)?;
    Ok(next)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Terminal state of one joint trajectory over `k` measures.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub means: Vec<Vec<f64>>,
    pub points: Vec<Vec<f64>>,
    pub indices: Vec<usize>,
    pub localized: Vec<bool>,
    pub t_final: f64,
}

impl JointSample {
    pub fn endpoint(&self, i: usize, which: Endpoint) -> &[f64] {
        match which {
            Endpoint::Mean => &self.means[i],
            Endpoint::Argmax => &self.points[i],
        }
    }

    pub fn cost(&self, i: usize, j: usize, which: Endpoint) -> f64 {
        sq_dist(self.endpoint(i, which), self.endpoint(j, which))
    }
}

/// One Monte Carlo draw of a two-measure coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSample {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub a_point: Vec<f64>,
    pub b_point: Vec<f64>,
    pub a_index: usize,
    pub b_index: usize,
    pub localized: (bool, bool),
}

impl CouplingSample {
    pub fn cost(&self, which: Endpoint) -> f64 {
        match which {
            Endpoint::Mean => sq_dist(&self.a, &self.b),
            Endpoint::Argmax => sq_dist(&self.a_point, &self.b_point),
        }
    }
}

impl From<JointSample> for CouplingSample {
    fn from(s: JointSample) -> Self {
        let mut means = s.means.into_iter();
        let mut points = s.points.into_iter();
        CouplingSample {
            a: means.next().expect("two measures"),
            b: means.next().expect("two measures"),
            a_point: points.next().expect("two measures"),
            b_point: points.next().expect("two measures"),
            a_index: s.indices[0],
            b_index: s.indices[1],
            localized: (s.localized[0], s.localized[1]),
        }
    }
}

/// Run one joint trajectory until `t ≥ T` or every measure has localized.
/// `observe(k, state)` is called for the initial state (`k = 0`) and after
/// each step `k`.
pub fn run_joint<R, F>(
    measures: &[DiscreteMeasure],
    policy: &JointPolicy,
    cfg: &SimConfig,
    rng: &mut R,
    mut observe: F,
) -> Result<JointSample>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &JointSLState),
{
    cfg.validate()?;
    policy.validate()?;
    let mut j = JointSLState::new(measures)?;
    let tols: Vec<f64> = j.states.iter().map(|s| cfg.loc_tol_for(s.trace())).collect();
    let all_localized =
        |j: &JointSLState| j.states.iter().zip(&tols).all(|(s, tol)| s.trace() < *tol);
    let d = j.dim();
    observe(0, &j);
    for k in 0..cfg.n_steps() {
        if all_localized(&j) {
            break;
        }
        let dw = brownian_increment(rng, d, cfg.dt);
        j.step_in_place(policy, &dw, cfg.dt)?;
        observe(k + 1, &j);
    }
    Ok(JointSample {
        means: j.states.iter().map(|s| s.mean().to_vec()).collect(),
        points: j.states.iter().map(|s| s.argmax_point().to_vec()).collect(),
        indices: j.states.iter().map(|s| s.argmax_index()).collect(),
        localized: j.states.iter().zip(&tols).map(|(s, tol)| s.trace() < *tol).collect(),
        t_final: j.t(),
    })
}

/// `m` joint trajectories; trajectory `j` uses stream `(cfg.seed, j)`.
pub fn sample_joint(
    measures: &[DiscreteMeasure],
    policy: &JointPolicy,
    cfg: &SimConfig,
    m: usize,
) -> Result<Vec<JointSample>> {
    if m == 0 {
        return Err(Error::invalid("need at least one trajectory"));
    }
    map_indexed(m, |j| {
        run_joint(measures, policy, cfg, &mut trajectory_rng(cfg.seed, j), |_, _| {})
    })
}

pub fn sample_coupling(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    policy: &JointPolicy,
    cfg: &SimConfig,
    m: usize,
) -> Result<Vec<CouplingSample>> {
    let pair = [mu.clone(), nu.clone()];
    Ok(sample_joint(&pair, policy, cfg, m)?
        .into_iter()
        .map(CouplingSample::from)
        .collect())
}

/// Monte Carlo mean of `‖a - b‖²` with its normal-approximation 95% CI.
pub fn transport_cost_estimate(
    samples: &[CouplingSample],
    which: Endpoint,
) -> Result<DistanceEstimate> {
    let costs: Vec<f64> = samples.iter().map(|s| s.cost(which)).collect();
    DistanceEstimate::from_values(&costs)
}

/// CSV rows `trajectory_id,a_1..a_d,b_1..b_d,a_localized,b_localized`.
pub fn write_couplings_csv<W: Write>(
    w: W,
    samples: &[CouplingSample],
    which: Endpoint,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let d = samples.first().map(|s| s.a.len()).unwrap_or(0);
    let mut header = vec!["trajectory_id".to_string()];
    header.extend((1..=d).map(|i| format!("a_{i}")));
    header.extend((1..=d).map(|i| format!("b_{i}")));
    header.push("a_localized".into());
    header.push("b_localized".into());
    wtr.write_record(&header)?;
    for (id, s) in samples.iter().enumerate() {
        let (a, b) = match which {
            Endpoint::Mean => (&s.a, &s.b),
            Endpoint::Argmax => (&s.a_point, &s.b_point),
        };
        let mut rec = vec![id.to_string()];
        rec.extend(a.iter().map(|x| format!("{x:e}")));
        rec.extend(b.iter().map(|x| format!("{x:e}")));
        rec.push(s.localized.0.to_string());
        rec.push(s.localized.1.to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
