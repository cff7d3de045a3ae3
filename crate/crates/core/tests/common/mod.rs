//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use nfr::baselines::tv_value_and_grad;
use nfr::flow::{Flow, FlowArch, FlowStep, LatentState, Tensor};
use nfr::Volume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_arch() -> FlowArch {
    FlowArch { levels: 2, steps_per_level: 2, hidden_channels: 4, channels: 1, dims: [4, 4, 4] }
}

pub fn random_volume(dims: [usize; 3], rng: &mut impl Rng) -> Volume {
    let n = dims.iter().product();
    Volume::new(dims, 1.0, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn flatten(z: &LatentState) -> Vec<f64> {
    let mut out = z.latent.data.clone();
    for s in &z.splits {
        out.extend_from_slice(&s.data);
    }
    out
}

fn log_abs_det(m: nalgebra::DMatrix<f64>) -> f64 {
    let lu = m.lu();
    lu.u().diagonal().iter().map(|d| d.abs().ln()).sum()
}

/// `|layer-sum logdet − log|det J||` with `J` assembled by central differences.
pub fn flow_logdet_error(flow: &Flow, x: &Volume) -> f64 {
    let d = x.len();
    let (_, logdet) = flow.normalize(x).unwrap();
    let mut jac = nalgebra::DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = x.clone();
        xp.data_mut()[j] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[j] -= FD_STEP;
        let zp = flatten(&flow.normalize(&xp).unwrap().0);
        let zm = flatten(&flow.normalize(&xm).unwrap().0);
        for i in 0..d {
            jac[(i, j)] = (zp[i] - zm[i]) / (2.0 * FD_STEP);
        }
    }
    (logdet - log_abs_det(jac)).abs()
}

/// Same check for a single coupling step on a raw tensor.
pub fn step_logdet_error(step: &FlowStep, x: &Tensor) -> f64 {
    let d = x.len();
    let (_, logdet) = step.forward(x);
    let mut jac = nalgebra::DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = x.clone();
        xp.data[j] += FD_STEP;
        let mut xm = x.clone();
        xm.data[j] -= FD_STEP;
        let (yp, _) = step.forward(&xp);
        let (ym, _) = step.forward(&xm);
        for i in 0..d {
            jac[(i, j)] = (yp.data[i] - ym.data[i]) / (2.0 * FD_STEP);
        }
    }
    (logdet - log_abs_det(jac)).abs()
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3)
}

/// Largest relative error of `∇_x R` against central differences over
/// `probes` random coordinates.
pub fn grad_input_error(flow: &Flow, x: &Volume, probes: usize, seed: u64) -> f64 {
    let g = flow.grad_input(x).unwrap();
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let i = r.random_range(0..x.len());
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let fd = (flow.neg_log_density(&xp).unwrap() - flow.neg_log_density(&xm).unwrap()) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(g.data()[i], fd));
    }
    worst
}

/// Largest relative error of the batch-mean parameter gradient against central
/// differences over `probes` parameters that influence `R`.
pub fn grad_params_error(flow: &Flow, batch: &[Volume], probes: usize, seed: u64) -> f64 {
    let (_, grads) = flow.grad_params(batch).unwrap();
    let g = grads.params_flat();
    let theta = flow.params_flat();
    let mean_r = |p: &[f64]| {
        let mut f = flow.clone();
        f.set_params_flat(p).unwrap();
        batch.iter().map(|x| f.neg_log_density(x).unwrap()).sum::<f64>() / batch.len() as f64
    };
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut tries = 0;
    while done < probes {
        tries += 1;
        assert!(tries < 100 * probes, "too few active parameters");
        let i = r.random_range(0..theta.len());
        let mut tp = theta.clone();
        tp[i] += FD_STEP;
        let mut tm = theta.clone();
        tm[i] -= FD_STEP;
        let fd = (mean_r(&tp) - mean_r(&tm)) / (2.0 * FD_STEP);
        if g[i] == 0.0 && fd.abs() < 1e-8 {
            // unused entry of a dense triangular store
            continue;
        }
        worst = worst.max(rel_err(g[i], fd));
        done += 1;
    }
    worst
}

/// Largest relative error of the smoothed TV gradient against central
/// differences over `probes` random coordinates.
pub fn tv_grad_error(x: &Volume, eps: f64, probes: usize, seed: u64) -> f64 {
    let (_, g) = tv_value_and_grad(x, eps);
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let i = r.random_range(0..x.len());
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let fd = (tv_value_and_grad(&xp, eps).0 - tv_value_and_grad(&xm, eps).0) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(g.data()[i], fd));
    }
    worst
}

/// Max abs error of `G(N(x))` against `x`.
pub fn round_trip_error(flow: &Flow, x: &Volume) -> f64 {
    let (z, _) = flow.normalize(x).unwrap();
    let back = flow.generate(&z).unwrap();
    back.data().iter().zip(x.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
}

/// A flow step on two channels at a single voxel with every parameter drawn
/// from `U(-scale, scale)`.
pub fn random_toy_step(seed: u64, hidden: usize, scale: f64) -> FlowStep {
    let mut step = FlowStep::identity(2, hidden);
    let mut r = rng(seed);
    let mut fill = |v: &mut Vec<f64>| v.iter_mut().for_each(|p| *p = r.random_range(-scale..scale));
    fill(&mut step.actnorm.log_scale);
    fill(&mut step.actnorm.bias);
    fill(&mut step.invconv.lower);
    fill(&mut step.invconv.upper);
    fill(&mut step.invconv.log_diag);
    for conv in [&mut step.coupling.conv1, &mut step.coupling.conv2, &mut step.coupling.conv3] {
        fill(&mut conv.weight);
        fill(&mut conv.bias);
    }
    step
}

/// Trapezoid quadrature of `π(x) = φ(f(x)) |det ∂f/∂x|` over `[-8, 8]²` with
/// `n` nodes per axis, `φ` the standard normal density on `R²`.
pub fn toy_density_mass(step: &FlowStep, n: usize) -> f64 {
    let h = 16.0 / (n - 1) as f64;
    let node = |i: usize| -8.0 + i as f64 * h;
    let weight = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = Tensor::new(2, [1, 1, 1], vec![node(i), node(j)]).unwrap();
            let (y, logdet) = step.forward(&x);
            let log_p = -0.5 * y.norm_sq() - (2.0 * std::f64::consts::PI).ln() + logdet;
            total += weight(i) * weight(j) * log_p.exp();
        }
    }
    total * h * h
}

/// A small end-to-end configuration: 8³ volumes, a 2-level 8³ flow, a handful
/// of training phantoms.
pub const PIPELINE_CONFIG: &str = r#"
run_id = "pipeline"
out_dir = "out"

[volume]
dims = [8, 8, 8]
count = 2
seed = 500

[acoustics]
n_azimuth = 8
n_polar = 2
n_dirs = 64
sigma = 0.05
noise_seed = 3

[flow]
levels = 2
steps_per_level = 1
hidden_channels = 4
dims = [8, 8, 8]

[training]
epochs = 2
batch_size = 4
dataset_size = 8
seed = 11

[solver]
inner_steps = 6
outer_max = 4

[sweep]
lambda_grid = [1e-4, 1e-2]
steps = 5

[baselines]
steps = 5
lambda_grid = [1e-3, 1e-1]

[paths]
truth = "out/phantoms/phantom_0000.vol"
measurements = "out/measurements.mes"
checkpoint = "out/model.nfck"
reconstruction = "out/reconstruction.vol"
"#;

pub struct CommandOutcome {
    pub success: bool,
    pub stderr: String,
}

pub fn run_cli(config: &std::path::Path, args: &[&str]) -> CommandOutcome {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_nfr"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--deterministic")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    CommandOutcome { success: out.status.success(), stderr: String::from_utf8_lossy(&out.stderr).into_owned() }
}

/// Runs every subcommand in pipeline order inside `dir`. The adaptive
/// reconstruction may legitimately fail to bracket on such a tiny problem; its
/// outcome is returned rather than asserted.
pub fn run_pipeline(dir: &std::path::Path) -> CommandOutcome {
    let config = dir.join("experiment.toml");
    std::fs::write(&config, PIPELINE_CONFIG).unwrap();
    for args in [
        &["phantom"][..],
        &["simulate"],
        &["train"],
        &["reconstruct", "--lambda", "0.001"],
        &["tv"],
        &["sweep-lambda"],
        &["evaluate"],
    ] {
        let o = run_cli(&config, args);
        assert!(o.success, "{args:?} failed: {}", o.stderr);
    }
    run_cli(&config, &["reconstruct", "--adaptive"])
}

/// Every file below `root` with its bytes, sorted by relative path.
pub fn snapshot(root: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(std::path::PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Trains (or loads the cached copy of) a checkpoint. Fixtures are cached in
/// the cargo target tmpdir under `name`; a fresh target directory retrains.
pub fn fixture_checkpoint(name: &str, arch: FlowArch, cfg: &nfr::training::TrainConfig) -> nfr::training::Checkpoint {
    use nfr::training::{build_dataset, load_checkpoint, save_checkpoint, train};
    static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR"));
    let path = dir.join(format!("{name}.nfck"));
    if let Ok(ck) = load_checkpoint(&path) {
        if ck.flow.arch == arch && ck.seed == cfg.seed && ck.dataset_size == cfg.dataset_size {
            return ck;
        }
    }
    let data = build_dataset(arch.dims, cfg).unwrap();
    let ck = train(&data, arch, cfg).unwrap();
    let tmp = dir.join(format!("{name}.nfck.{}", std::process::id()));
    save_checkpoint(&ck, &tmp).unwrap();
    std::fs::rename(&tmp, &path).unwrap();
    ck
}

/// The default recipe: 200 jittered 16³ phantoms, default arch, 30 epochs.
pub fn default_fixture() -> nfr::training::Checkpoint {
    fixture_checkpoint("default16", FlowArch::default(), &nfr::training::TrainConfig::default())
}
