mod common;

use common::*;
use nfr::acoustics::{Geometry, KirchhoffOperator, TimeConfig};
use nfr::baselines::*;
use nfr::metrics::evaluate;
use nfr::solver::{inner_loop, Problem, SolveConfig};
use nfr::Volume;

fn blob_at(dims: [usize; 3], start: [usize; 3]) -> Volume {
    let mut v = Volume::zeros(dims);
    let pattern = [[1.0, 0.5, 0.0], [0.25, 1.0, 0.75], [0.0, 0.5, 1.0]];
    for z in 0..3 {
        for y in 0..3 {
            for x in 0..3 {
                v.set(start[0] + x, start[1] + y, start[2] + z, pattern[y][x] * (1.0 + z as f64));
            }
        }
    }
    v
}

#[test]
fn gradient_matches_finite_differences() {
    let x = random_volume([5, 4, 6], &mut rng(1));
    let err = tv_grad_error(&x, 1e-3, 20, 2);
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn translation_invariant_for_interior_blobs() {
    let dims = [10, 10, 10];
    let a = tv_value_and_grad(&blob_at(dims, [2, 2, 2]), 1e-6).0;
    let b = tv_value_and_grad(&blob_at(dims, [5, 3, 4]), 1e-6).0;
    assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
}

#[test]
fn zero_weight_is_plain_gradient_descent() {
    let dims = [8, 8, 8];
    let g = Geometry::default_for(dims, 1.0, 8, 2).unwrap();
    let t = TimeConfig::default_for(dims, 1.0, &g);
    let op = KirchhoffOperator::new(g, t, dims, 1.0).unwrap();
    let truth = blob_at(dims, [2, 3, 2]);
    let y = op.forward(&truth).unwrap().data;
    let p = Problem::new(&op, &y, dims, 1.0).unwrap();
    let steps = p.undamped_steps(&SolveConfig::default()).unwrap();
    let cfg = TvConfig { lambda: 0.0, steps: 20, ..TvConfig::default() };
    let tv = reconstruct_tv(&p, &p.zeros(), &cfg, steps).unwrap();
    let mut tvreg = TotalVariation { eps: 1.0 };
    let gd = inner_loop(&p, &mut tvreg, &p.zeros(), 0.0, steps, 20, false).unwrap().x;
    assert_eq!(tv, gd);
}

#[test]
fn tv_helps_on_noiseless_piecewise_constant_data() {
    let dims = [12, 12, 12];
    let mut truth = Volume::zeros(dims);
    for z in 3..9 {
        for y in 4..9 {
            for x in 3..8 {
                truth.set(x, y, z, 1.0);
            }
        }
    }
    let g = Geometry::default_for(dims, 1.0, 16, 4).unwrap();
    let t = TimeConfig::default_for(dims, 1.0, &g);
    let op = KirchhoffOperator::new(g, t, dims, 1.0).unwrap();
    let y = op.forward(&truth).unwrap().data;
    let p = Problem::new(&op, &y, dims, 1.0).unwrap();
    let steps = p.undamped_steps(&SolveConfig::default()).unwrap();
    let base = TvConfig { steps: 100, lambda_grid: vec![0.0, 1e-3, 1e-2, 1e-1], ..TvConfig::default() };
    let (points, best) = tv_sweep(&p, &p.zeros(), &truth, &base, steps).unwrap();
    let plain = evaluate(&points[0].x, &truth).unwrap().rra;
    assert!((points[0].rra - plain).abs() < 1e-12);
    assert_ne!(best, 0, "sweep RRAs: {:?}", points.iter().map(|p| p.rra).collect::<Vec<_>>());
    assert!(points[best].rra < plain);
}

#[test]
fn empty_grid_is_rejected() {
    let dims = [4, 4, 4];
    let g = Geometry::default_for(dims, 1.0, 4, 1).unwrap();
    let t = TimeConfig::default_for(dims, 1.0, &g);
    let op = KirchhoffOperator::new(g, t, dims, 1.0).unwrap();
    let y = vec![0.0; nfr::linalg::LinearOperator::range_len(&op)];
    let p = Problem::new(&op, &y, dims, 1.0).unwrap();
    let steps = p.undamped_steps(&SolveConfig::default()).unwrap();
    let cfg = TvConfig { lambda_grid: vec![], ..TvConfig::default() };
    assert!(tv_sweep(&p, &p.zeros(), &Volume::zeros(dims), &cfg, steps).is_err());
}
