use std::fs;
use std::path::Path;

use serde::Serialize;

use stoloc::engine::{localization_rate_curve, ControlPolicy, SimConfig};
use stoloc::fit::{fit as run_fit, informed_init, FitConfig, FitReport, LegendreBasis, ParametricMap};
use stoloc::joint::JointPolicy;
use stoloc::linalg::Matrix;
use stoloc::measures::DiscreteMeasure;
use stoloc::metrics::{
    gaussian_kl_standard, gaussian_w2, kl_via_sl, sl_distance, w2_bound_table, weighted_sl_distance,
    DistanceEstimate, TableRow, WeightMeasure,
};
use stoloc::parallel::with_workers;
use stoloc::presets;

use crate::config::{
    load, CommonArgs, CoupleConfig, DistanceConfig, FitData, FitRunConfig, InitKind, KlCheckConfig,
    LocalizeConfig, Scheme,
};
use crate::CliError;

fn sim_config(dt: f64, horizon: f64, loc_tol: Option<f64>, seed: u64) -> Result<SimConfig, CliError> {
    let mut sim = SimConfig::new(dt, horizon, seed);
    if let Some(tol) = loc_tol {
        sim = sim.with_loc_tol(tol);
    }
    sim.validate().map_err(CliError::from_config)?;
    Ok(sim)
}

fn run_with<T: Send>(
    workers: usize,
    f: impl FnOnce() -> stoloc::Result<T> + Send,
) -> Result<T, CliError> {
    with_workers(workers, f)
        .map_err(CliError::from_config)?
        .map_err(CliError::from_run)
}

fn out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<fs::File, CliError> {
    fs::File::create(path).map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize)]
struct CurveSummary {
    alpha: f64,
    final_mean_trace: f64,
    final_std_err: f64,
}

#[derive(Serialize)]
struct LocalizeSummary<'a> {
    command: &'static str,
    seed: u64,
    config: &'a LocalizeConfig,
    curves: Vec<CurveSummary>,
}

pub fn localize(a: &CommonArgs) -> Result<(), CliError> {
    let mut cfg: LocalizeConfig = load(a.config.as_deref())?;
    cfg.apply(a);
    cfg.validate()?;
    let mu = cfg.measure.build()?;
    let sim = sim_config(cfg.dt, cfg.horizon, cfg.loc_tol, cfg.seed)?;
    let policies: Vec<ControlPolicy> = cfg
        .alphas
        .iter()
        .map(|&alpha| ControlPolicy::Alpha { alpha, delta: cfg.delta })
        .collect();
    let curves = run_with(cfg.workers, || localization_rate_curve(&mu, &policies, &sim, cfg.m))?;

    out_dir(&cfg.out)?;
    let mut wtr = csv::Writer::from_writer(create(&cfg.out.join("rate_curve.csv"))?);
    let csv_err = |e: csv::Error| CliError::Output(e.to_string());
    wtr.write_record(["alpha", "t", "mean_trace", "std_err"]).map_err(csv_err)?;
    for (alpha, c) in cfg.alphas.iter().zip(&curves) {
        for k in 0..c.times.len() {
            wtr.write_record([
                alpha.to_string(),
                c.times[k].to_string(),
                c.mean_trace[k].to_string(),
                c.std_err[k].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    wtr.flush().map_err(|e| CliError::Output(e.to_string()))?;

    let summary = LocalizeSummary {
        command: "localize",
        seed: cfg.seed,
        config: &cfg,
        curves: cfg
            .alphas
            .iter()
            .zip(&curves)
            .map(|(&alpha, c)| CurveSummary {
                alpha,
                final_mean_trace: *c.mean_trace.last().expect("nonempty curve"),
                final_std_err: *c.std_err.last().expect("nonempty curve"),
            })
            .collect(),
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    for c in &summary.curves {
        println!("alpha {}: E[tr Σ_T] = {:.4e} ± {:.1e}", c.alpha, c.final_mean_trace, c.final_std_err);
    }
    Ok(())
}

#[derive(Serialize)]
struct CoupleOutput<'a> {
    command: &'static str,
    seed: u64,
    config: &'a CoupleConfig,
    rows: &'a [TableRow],
}

pub fn couple(a: &CommonArgs) -> Result<(), CliError> {
    let mut cfg: CoupleConfig = load(a.config.as_deref())?;
    cfg.apply(a);
    cfg.validate()?;
    let mu = cfg.mu.build()?;
    let nu = cfg.nu.build()?;
    let sim = sim_config(cfg.dt, cfg.horizon, cfg.loc_tol, cfg.seed)?;
    let mut policies: Vec<JointPolicy> = cfg
        .alphas
        .iter()
        .map(|&alpha| JointPolicy::JointAlpha { alpha, delta: cfg.delta })
        .collect();
    if cfg.extrapolation {
        policies.push(JointPolicy::Extrapolation { delta: cfg.delta });
    }
    let table = run_with(cfg.workers, || w2_bound_table(&mu, &nu, &policies, &sim, cfg.m))?;

    out_dir(&cfg.out)?;
    table
        .write_csv(create(&cfg.out.join("w2_table.csv"))?)
        .map_err(CliError::from_run)?;
    write_json(
        &cfg.out.join("w2_table.json"),
        &CoupleOutput {
            command: "couple",
            seed: cfg.seed,
            config: &cfg,
            rows: &table.rows,
        },
    )?;
    for r in &table.rows {
        println!("{:<24} W2 bound {:.4}", r.coupling, r.bound_w2());
    }
    Ok(())
}

#[derive(Serialize)]
struct DistanceOutput<'a> {
    command: &'static str,
    mean_sq: f64,
    distance: f64,
    std_err: f64,
    ci95: (f64, f64),
    m: usize,
    weighted: bool,
    /// Closed-form squared W2 between the generating Gaussians, when both
    /// inputs are Gaussian discretizations.
    gaussian_w2_reference: Option<f64>,
    seed: u64,
    params: &'a DistanceConfig,
}

fn read_weights(path: &Path) -> Result<WeightMeasure, CliError> {
    let bad = |e: String| CliError::Config(format!("bad weights file {}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let (mut nodes, mut masses) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 2 {
            return Err(bad("expected columns t,mass".into()));
        }
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(e.to_string()));
        nodes.push(parse(&rec[0])?);
        masses.push(parse(&rec[1])?);
    }
    WeightMeasure::new(nodes, masses).map_err(CliError::from_config)
}

pub fn distance(a: &CommonArgs) -> Result<(), CliError> {
    let mut cfg: DistanceConfig = load(a.config.as_deref())?;
    cfg.apply(a);
    cfg.validate()?;
    let mu = cfg.mu.build()?;
    let nu = cfg.nu.build()?;
    let sim = sim_config(cfg.dt, cfg.horizon, cfg.loc_tol, cfg.seed)?;
    let policy = match cfg.scheme {
        Scheme::JointAlpha => JointPolicy::JointAlpha { alpha: cfg.alpha, delta: cfg.delta },
        Scheme::Extrapolation => JointPolicy::Extrapolation { delta: cfg.delta },
    };
    let weights = cfg.weights_file.as_deref().map(read_weights).transpose()?;
    let est: DistanceEstimate = run_with(cfg.workers, || match &weights {
        Some(w) => weighted_sl_distance(&mu, &nu, &policy, w, &sim, cfg.m),
        None => sl_distance(&mu, &nu, &policy, &sim, cfg.m, cfg.endpoint),
    })?;
    let reference = match (cfg.mu.gaussian(), cfg.nu.gaussian()) {
        (Some(g), Some(h)) => Some(gaussian_w2(&g?, &h?).map_err(CliError::from_config)?),
        _ => None,
    };

    let out = DistanceOutput {
        command: "distance",
        mean_sq: est.mean_sq,
        distance: est.distance,
        std_err: est.std_err,
        ci95: est.ci95,
        m: est.m,
        weighted: weights.is_some(),
        gaussian_w2_reference: reference,
        seed: cfg.seed,
        params: &cfg,
    };
    out_dir(&cfg.out)?;
    write_json(&cfg.out.join("distance.json"), &out)?;
    println!("mean_sq {:.6} ± {:.2e}, distance {:.6}", est.mean_sq, est.std_err, est.distance);
    Ok(())
}

#[derive(Serialize)]
struct KlOutput<'a> {
    command: &'static str,
    estimate: f64,
    std_err: f64,
    closed_form: f64,
    /// `None` when the closed form vanishes.
    rel_err: Option<f64>,
    abs_err: f64,
    tail_mass: f64,
    seed: u64,
    config: &'a KlCheckConfig,
}

pub fn klcheck(a: &CommonArgs) -> Result<(), CliError> {
    let mut cfg: KlCheckConfig = load(a.config.as_deref())?;
    cfg.apply(a)?;
    cfg.validate()?;
    let closed_form = gaussian_kl_standard(&cfg.gaussian).map_err(CliError::from_config)?;
    let est = run_with(cfg.workers, || kl_via_sl(&cfg.gaussian, cfg.m, cfg.dt, cfg.t_max, cfg.seed))?;
    let abs_err = (est.estimate - closed_form).abs();
    let out = KlOutput {
        command: "klcheck",
        estimate: est.estimate,
        std_err: est.std_err,
        closed_form,
        rel_err: (closed_form > 0.0).then(|| abs_err / closed_form),
        abs_err,
        tail_mass: est.tail_mass,
        seed: cfg.seed,
        config: &cfg,
    };
    out_dir(&cfg.out)?;
    write_json(&cfg.out.join("klcheck.json"), &out)?;
    println!(
        "KL estimate {:.5} ± {:.1e}, closed form {:.5}, truncated weight {:.4}",
        est.estimate, est.std_err, closed_form, est.tail_mass
    );
    Ok(())
}

#[derive(Serialize)]
struct FitOutput<'a> {
    command: &'static str,
    #[serde(flatten)]
    report: &'a FitReport,
    run_config: &'a FitRunConfig,
}

pub fn fit(a: &CommonArgs, init: Option<InitKind>) -> Result<(), CliError> {
    let mut cfg: FitRunConfig = load(a.config.as_deref())?;
    cfg.apply(a);
    if let Some(i) = init {
        cfg.init = i;
    }
    cfg.validate()?;
    let z = presets::uniform_latent(cfg.latent_n, cfg.latent_dim, cfg.latent_seed);
    let basis = LegendreBasis::uniform(cfg.latent_dim, cfg.degree).map_err(CliError::from_config)?;
    let data = match &cfg.data {
        FitData::Manifold { n, seed } => presets::manifold_data(*n, *seed).map_err(CliError::from_config)?,
        FitData::Affine { a, c } => {
            let rows: Vec<Vec<f64>> = z
                .iter()
                .map(|zi| a.iter().zip(c).map(|(row, ci)| ci + row.iter().zip(zi).map(|(x, y)| x * y).sum::<f64>()).collect())
                .collect();
            DiscreteMeasure::uniform(&rows).map_err(CliError::from_config)?
        }
        FitData::Measure { measure } => measure.build()?,
    };
    let d = data.dim();
    let start = match cfg.init {
        InitKind::Informed => informed_init(&data, &z, &basis),
        InitKind::Random => {
            let rows = presets::normal_rows(basis.len(), d, cfg.init_variance.sqrt(), cfg.seed);
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            ParametricMap::new(basis.clone(), Matrix::from_row_slice(basis.len(), d, &flat))
        }
    }
    .map_err(CliError::from_config)?;
    let fit_cfg = FitConfig {
        m: cfg.m,
        sim: sim_config(cfg.dt, cfg.horizon, None, cfg.seed)?,
        alpha: cfg.alpha,
        delta: cfg.delta,
        max_iter: cfg.max_iter,
        lambda0: cfg.lambda0,
        noise: cfg.noise,
    };
    let report = run_with(cfg.workers, || run_fit(&data, &start, &z, &fit_cfg))?;

    out_dir(&cfg.out)?;
    write_json(
        &cfg.out.join("fit_report.json"),
        &FitOutput {
            command: "fit",
            report: &report,
            run_config: &cfg,
        },
    )?;
    report
        .write_loss_csv(create(&cfg.out.join("loss.csv"))?)
        .map_err(CliError::from_run)?;
    let first = report.loss_history[0];
    let last = *report.loss_history.last().expect("nonempty history");
    println!("loss {first:.4e} -> {last:.4e} after {} iterations", report.iterations);
    Ok(())
}
