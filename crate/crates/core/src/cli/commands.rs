use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use crate::acoustics::{
    add_noise, build_geometry, load_measurements, save_measurements, Geometry, KirchhoffOperator, MeasurementSet,
    Provenance, TimeConfig,
};
use crate::baselines::{reconstruct_tv, tv_sweep, TvConfig};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::solver::{
    bracket_search, inner_loop, reconstruct_adaptive, write_trace_csv, FlowPrior, Problem, Regularizer,
};
use crate::training::{build_dataset, load_checkpoint, save_checkpoint, train, Checkpoint};
use crate::volume::{generate_phantom, load_volume, save_volume, Volume};

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub angles: String,
    pub noise: f64,
    pub method: String,
    pub lambda: f64,
    #[serde(rename = "RRA")]
    pub rra: f64,
    #[serde(rename = "PSNR")]
    pub psnr: f64,
    #[serde(rename = "SSIM")]
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReconstructMode {
    Fixed(f64),
    Adaptive,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.to_path_buf(), msg: e.to_string() }
}

fn prepare_out(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let snap = out.join(format!("{command}.config.toml"));
    fs::write(&snap, cfg.to_toml()?).map_err(|e| Error::io(&snap, e))?;
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends rows to `<out>/metrics.csv`, writing the header for a new file.
fn append_metrics(out: &Path, rows: &[MetricsRow]) -> Result<()> {
    let path = out.join("metrics.csv");
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn metrics_row(
    cfg: &ExperimentConfig,
    m: &MeasurementSet,
    noise: f64,
    method: &str,
    lambda: f64,
    x: &Volume,
    truth: &Volume,
) -> Result<MetricsRow> {
    let r = evaluate(x, truth)?;
    log::info!("{method}: RRA {:.4}, PSNR {:.2} dB, SSIM {:.4}", r.rra, r.psnr, r.ssim);
    Ok(MetricsRow {
        run_id: cfg.run_id.clone(),
        angles: format!("{}x{}", m.geometry.spec.n_azimuth, m.geometry.spec.n_polar),
        noise,
        method: method.into(),
        lambda,
        rra: r.rra,
        psnr: r.psnr,
        ssim: r.ssim,
    })
}

#[derive(Serialize)]
struct ManifestRow {
    index: usize,
    seed: u64,
    file: String,
}

/// Writes `volume.count` phantoms to `<out>/phantoms/` with `manifest.csv`.
pub fn cmd_phantom(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let out = prepare_out(cfg, "phantom")?;
    let dir = out.join("phantoms");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::with_capacity(cfg.volume.count);
    let mut manifest = Vec::with_capacity(cfg.volume.count);
    for i in 0..cfg.volume.count {
        let seed = cfg.volume.seed.wrapping_add(i as u64);
        let v =
            generate_phantom(cfg.volume.dims, &cfg.volume.phantom.with_seed(seed))?.with_spacing(cfg.volume.spacing);
        let name = format!("phantom_{i:04}.vol");
        let path = dir.join(&name);
        save_volume(&v, &path)?;
        manifest.push(ManifestRow { index: i, seed, file: name });
        files.push(path);
    }
    write_csv(&dir.join("manifest.csv"), &manifest)?;
    log::info!("wrote {} phantoms to {}", files.len(), dir.display());
    Ok(files)
}

/// Geometry and time sampling for a volume, from the acoustics section.
pub(crate) fn acquisition(cfg: &ExperimentConfig, v: &Volume) -> Result<(Geometry, TimeConfig)> {
    let a = &cfg.acoustics;
    let geometry = match a.radius {
        Some(r) => build_geometry(a.n_azimuth, a.n_polar, r, v.dims().map(|n| (n - 1) as f64 * v.spacing() / 2.0))?,
        None => Geometry::default_for(v.dims(), v.spacing(), a.n_azimuth, a.n_polar)?,
    };
    crate::acoustics::check_encloses(&geometry, v)?;
    let mut time = TimeConfig::default_for(v.dims(), v.spacing(), &geometry);
    time.n_dirs = a.n_dirs;
    if let Some(dt) = a.dt {
        time.dt = dt;
    }
    if let Some(n_t) = a.n_t {
        time.n_t = n_t;
    }
    time.validate()?;
    Ok((geometry, time))
}

/// Simulates `paths.truth` (on the 2x upsampled grid unless disabled), adds
/// noise and writes `<out>/measurements.mes` with its sidecar.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let truth_path = cfg.input("truth")?;
    let truth = load_volume(truth_path)?;
    let out = prepare_out(cfg, "simulate")?;
    let (geometry, time) = acquisition(cfg, &truth)?;
    let src = if cfg.acoustics.upsample { truth.upsample2() } else { truth };
    let clean = KirchhoffOperator::new(geometry, time, src.dims(), src.spacing())?.forward(&src)?;
    let noisy = add_noise(&clean, cfg.acoustics.sigma, cfg.acoustics.noise_seed)?;
    let path = out.join("measurements.mes");
    let prov = Provenance {
        source: truth_path.display().to_string(),
        sigma: cfg.acoustics.sigma,
        noise_seed: cfg.acoustics.noise_seed,
        upsampled: cfg.acoustics.upsample,
    };
    save_measurements(&noisy, &path, Some(prov))?;
    log::info!("wrote {} traces of {} samples to {}", noisy.n_transducers(), noisy.time.n_t, path.display());
    Ok(path)
}

#[derive(Serialize)]
struct CurveRow {
    epoch: usize,
    nats: f64,
    nats_per_dim: f64,
}

/// Trains on a fresh phantom dataset and writes `<out>/model.nfck` and
/// `<out>/training_curve.csv`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let out = prepare_out(cfg, "train")?;
    let data = build_dataset(cfg.flow.dims, &cfg.training)?;
    let ck = train(&data, cfg.flow, &cfg.training)?;
    save_checkpoint(&ck, out.join("model.nfck"))?;
    let rows: Vec<CurveRow> = ck
        .curve
        .iter()
        .enumerate()
        .map(|(i, e)| CurveRow { epoch: i + 1, nats: e.nats, nats_per_dim: e.nats_per_dim })
        .collect();
    write_csv(&out.join("training_curve.csv"), &rows)?;
    log::info!("reference constant C = {:.6} ({:.6} nats/dim)", ck.c, ck.c / cfg.flow.input_len() as f64);
    Ok(ck)
}

struct Loaded {
    m: MeasurementSet,
    noise: f64,
    op: KirchhoffOperator,
    truth: Option<Volume>,
}

fn load_problem_inputs(cfg: &ExperimentConfig) -> Result<Loaded> {
    let (m, prov) = load_measurements(cfg.input("measurements")?)?;
    let noise = prov.map_or(cfg.acoustics.sigma, |p| p.sigma);
    let op = KirchhoffOperator::new(m.geometry.clone(), m.time, cfg.volume.dims, cfg.volume.spacing)?;
    let truth = match &cfg.paths.truth {
        Some(_) => Some(load_volume(cfg.input("truth")?)?),
        None => None,
    };
    Ok(Loaded { m, noise, op, truth })
}

/// Flow-prior reconstruction, fixed-weight or adaptive. Writes
/// `<out>/reconstruction.vol`, `<out>/trace.csv` in adaptive mode, and a metrics
/// row when `paths.truth` is set.
pub fn cmd_reconstruct(cfg: &ExperimentConfig, mode: ReconstructMode) -> Result<(Volume, f64)> {
    let ck = load_checkpoint(cfg.input("checkpoint")?)?;
    let inp = load_problem_inputs(cfg)?;
    let out = prepare_out(cfg, "reconstruct")?;
    let problem = Problem::new(&inp.op, &inp.m.data, cfg.volume.dims, cfg.volume.spacing)?;
    let x0 = problem.initial_guess(cfg.solver.initial_guess)?;
    let mut prior = FlowPrior::new(&ck.flow, cfg.patch)?;
    let steps = problem.step_sizes(&cfg.solver, &mut prior, &x0)?;
    let (x, lambda, method) = match mode {
        ReconstructMode::Fixed(lambda) => {
            let x = inner_loop(&problem, &mut prior, &x0, lambda, steps, cfg.solver.inner_steps, false)?.x;
            (x, lambda, "nfr-fixed")
        }
        ReconstructMode::Adaptive => {
            let bracket = bracket_search(&problem, &mut prior, &x0, ck.c, &cfg.solver, steps)?;
            let res = reconstruct_adaptive(&problem, &mut prior, &x0, ck.c, &bracket, &cfg.solver, steps)?;
            let path = out.join("trace.csv");
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_trace_csv(&res.trace, file)?;
            (res.x, res.lambda, "nfr-adaptive")
        }
    };
    save_volume(&x, out.join("reconstruction.vol"))?;
    if let Some(truth) = &inp.truth {
        append_metrics(&out, &[metrics_row(cfg, &inp.m, inp.noise, method, lambda, &x, truth)?])?;
    }
    Ok((x, lambda))
}

#[derive(Serialize)]
struct TvSweepRow {
    lambda: f64,
    #[serde(rename = "RRA")]
    rra: f64,
}

/// TV baseline. Writes `<out>/tv.vol`, `<out>/tv_sweep.csv` when sweeping, and
/// a metrics row when `paths.truth` is set.
pub fn cmd_tv(cfg: &ExperimentConfig, lambda: Option<f64>) -> Result<(Volume, f64)> {
    let inp = load_problem_inputs(cfg)?;
    let out = prepare_out(cfg, "tv")?;
    let problem = Problem::new(&inp.op, &inp.m.data, cfg.volume.dims, cfg.volume.spacing)?;
    let steps = problem.undamped_steps(&cfg.solver)?;
    let x0 = problem.initial_guess(cfg.solver.initial_guess)?;
    let (x, lam) = match (lambda, &inp.truth) {
        (Some(l), _) => (reconstruct_tv(&problem, &x0, &TvConfig { lambda: l, ..cfg.baselines.clone() }, steps)?, l),
        (None, Some(truth)) => {
            let (points, best) = tv_sweep(&problem, &x0, truth, &cfg.baselines, steps)?;
            let rows: Vec<TvSweepRow> = points.iter().map(|p| TvSweepRow { lambda: p.lambda, rra: p.rra }).collect();
            write_csv(&out.join("tv_sweep.csv"), &rows)?;
            let p = points.into_iter().nth(best).unwrap();
            (p.x, p.lambda)
        }
        (None, None) => (reconstruct_tv(&problem, &x0, &cfg.baselines, steps)?, cfg.baselines.lambda),
    };
    save_volume(&x, out.join("tv.vol"))?;
    if let Some(truth) = &inp.truth {
        append_metrics(&out, &[metrics_row(cfg, &inp.m, inp.noise, "tv", lam, &x, truth)?])?;
    }
    Ok((x, lam))
}

/// One row of `sweep_lambda.csv`. `RRA` is empty without a ground truth.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    #[serde(rename = "RRA")]
    pub rra: Option<f64>,
    #[serde(rename = "R")]
    pub r: f64,
    pub misfit: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

/// Fixed-weight reconstructions over the grid, each from the initial guess,
/// written to `<out>/sweep_lambda.csv`.
pub fn cmd_sweep_lambda(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    if cfg.sweep.lambda_grid.is_empty() {
        return Err(Error::Config("sweep.lambda_grid is empty".into()));
    }
    let ck = load_checkpoint(cfg.input("checkpoint")?)?;
    let inp = load_problem_inputs(cfg)?;
    let out = prepare_out(cfg, "sweep-lambda")?;
    let problem = Problem::new(&inp.op, &inp.m.data, cfg.volume.dims, cfg.volume.spacing)?;
    let x0 = problem.initial_guess(cfg.solver.initial_guess)?;
    let mut prior = FlowPrior::new(&ck.flow, cfg.patch)?;
    let steps = problem.step_sizes(&cfg.solver, &mut prior, &x0)?;
    let mut rows = Vec::with_capacity(cfg.sweep.lambda_grid.len());
    for &lambda in &cfg.sweep.lambda_grid {
        let x = inner_loop(&problem, &mut prior, &x0, lambda, steps, cfg.sweep.steps, false)?.x;
        let r = prior.value(&x)?;
        let misfit = problem.misfit(&x)?;
        let rra = match &inp.truth {
            Some(t) => Some(evaluate(&x, t)?.rra),
            None => None,
        };
        log::info!("lambda {lambda:.1e}: R {r:.4}, misfit {misfit:.4e}, RRA {rra:?}");
        rows.push(SweepRow { lambda, rra, r, misfit, c: ck.c });
    }
    write_csv(&out.join("sweep_lambda.csv"), &rows)?;
    Ok(rows)
}

/// Scores `paths.reconstruction` against `paths.truth`.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<MetricsRow> {
    let x = load_volume(cfg.input("reconstruction")?)?;
    let truth = load_volume(cfg.input("truth")?)?;
    let out = prepare_out(cfg, "evaluate")?;
    let r = evaluate(&x, &truth)?;
    let row = MetricsRow {
        run_id: cfg.run_id.clone(),
        angles: format!("{}x{}", cfg.acoustics.n_azimuth, cfg.acoustics.n_polar),
        noise: cfg.acoustics.sigma,
        method: "evaluate".into(),
        lambda: f64::NAN,
        rra: r.rra,
        psnr: r.psnr,
        ssim: r.ssim,
    };
    append_metrics(&out, std::slice::from_ref(&row))?;
    println!("RRA {:.6}  PSNR {:.4} dB  SSIM {:.6}", r.rra, r.psnr, r.ssim);
    Ok(row)
}
