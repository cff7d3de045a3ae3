use nfr::acoustics::*;
use nfr::linalg::{dot, norm, LinearOperator};
use nfr::Volume;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn setup(dims: [usize; 3], n_az: usize, n_pol: usize) -> KirchhoffOperator {
    setup_dirs(dims, n_az, n_pol, None)
}

/// Dense sphere sampling for tests sensitive to quadrature error.
fn setup_dirs(dims: [usize; 3], n_az: usize, n_pol: usize, n_dirs: Option<usize>) -> KirchhoffOperator {
    let g = Geometry::default_for(dims, 1.0, n_az, n_pol).unwrap();
    let mut t = TimeConfig::default_for(dims, 1.0, &g);
    if let Some(n) = n_dirs {
        t.n_dirs = n;
    }
    KirchhoffOperator::new(g, t, dims, 1.0).unwrap()
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn gaussian_blob(dims: [usize; 3], c: [f64; 3], s: f64) -> Volume {
    let mut v = Volume::zeros(dims);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                v.set(x, y, z, (-d2 / (2.0 * s * s)).exp());
            }
        }
    }
    v
}

#[test]
fn spherical_mean_of_constant_and_outside() {
    let ones = Volume::new([12, 12, 12], 1.0, vec![1.0; 1728]).unwrap();
    assert!((spherical_mean(&ones, [5.5, 5.5, 5.5], 4.0, 200) - 1.0).abs() < 1e-12);
    assert_eq!(spherical_mean(&ones, [50.0, 50.0, 50.0], 3.0, 200), 0.0);
    assert_eq!(spherical_mean(&ones, [5.0, 5.0, 5.0], 0.0, 200), 1.0);
}

#[test]
fn spherical_mean_matches_monte_carlo() {
    let v = gaussian_blob([24, 24, 24], [14.0, 11.0, 12.5], 2.5);
    let center = [8.0, 10.0, 11.0];
    let r = 6.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1_000_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let d: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let l = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        sum += v.trilinear_sample(std::array::from_fn(|a| center[a] + r * d[a] / l));
    }
    let mc = sum / n as f64;
    let fib = spherical_mean(&v, center, r, 200);
    assert!(mc > 0.01, "sphere misses the blob: {mc}");
    assert!((fib - mc).abs() <= 1e-2 * mc, "fibonacci {fib} vs monte carlo {mc}");
}

#[test]
fn forward_of_zero_is_zero() {
    let op = setup([8, 8, 8], 8, 2);
    let m = op.forward(&Volume::zeros([8, 8, 8])).unwrap();
    assert!(m.data.iter().all(|&v| v == 0.0));
    let back = op.adjoint(&vec![0.0; op.range_len()]);
    assert!(back.iter().all(|&v| v == 0.0));
}

#[test]
fn dot_product_test() {
    let op = setup([8, 8, 8], 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        let x = random_vec(op.domain_len(), &mut rng);
        let y = random_vec(op.range_len(), &mut rng);
        let fx = op.apply(&x);
        let fty = op.adjoint(&y);
        let err = (dot(&fx, &y) - dot(&x, &fty)).abs();
        assert!(err <= 1e-10 * norm(&fx) * norm(&y), "adjoint mismatch {err}");
    }
}

#[test]
fn point_source_arrival() {
    let dims = [16, 16, 16];
    let op = setup_dirs(dims, 4, 1, Some(4000));
    let src = [9usize, 6, 8];
    let v = gaussian_blob(dims, src.map(|c| c as f64), 0.7);
    let m = op.forward(&v).unwrap();
    let t = op.time();
    for (i, pos) in op.geometry().positions.iter().enumerate() {
        let d = (0..3).map(|a| (pos[a] - src[a] as f64).powi(2)).sum::<f64>().sqrt();
        // traces carry a time derivative; the running sum recovers the arrival bump
        let bump: Vec<f64> = m
            .trace(i)
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect();
        let k = (0..bump.len()).max_by(|&a, &b| bump[a].total_cmp(&bump[b])).unwrap();
        assert!((t.time(k) - d / t.c0).abs() <= t.dt + 1e-12, "transducer {i}: peak at {} vs {}", t.time(k), d);
    }
}

#[test]
fn causality() {
    let dims = [16, 16, 16];
    let op = setup(dims, 8, 3);
    let v = gaussian_blob(dims, [7.5, 7.5, 7.5], 0.6);
    let mut compact = v.clone();
    // keep only the blob's core so its support is known
    compact.data_mut().iter_mut().for_each(|x| {
        if *x < 1e-3 {
            *x = 0.0
        }
    });
    let support: Vec<[f64; 3]> = (0..16 * 16 * 16)
        .filter(|&i| compact.data()[i] != 0.0)
        .map(|i| [(i % 16) as f64, ((i / 16) % 16) as f64, (i / 256) as f64])
        .collect();
    let m = op.forward(&compact).unwrap();
    let peak = m.data.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    assert!(peak > 0.0);
    let t = op.time();
    for (i, pos) in op.geometry().positions.iter().enumerate() {
        let d = support
            .iter()
            .map(|p| (0..3).map(|a| (pos[a] - p[a]).powi(2)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        for (k, &val) in m.trace(i).iter().enumerate() {
            if t.time(k) < (d - 2.0) / t.c0 {
                assert!(val.abs() <= 1e-9 * peak, "transducer {i} sample {k} fires early");
            }
        }
    }
}

#[test]
fn single_entry_adjoint_is_shell_supported() {
    let dims = [10, 10, 10];
    let op = setup(dims, 4, 2);
    let n_t = op.time().n_t;
    let transducer = 5;
    let k = n_t / 2;
    let mut y = vec![0.0; op.range_len()];
    y[transducer * n_t + k] = 1.0;
    let v = Volume::new(dims, 1.0, op.adjoint(&y)).unwrap();
    let pos = op.geometry().positions[transducer];
    let t = op.time();
    // the difference stencil couples samples k-1..k+1; trilinear stencils reach sqrt(3) voxels
    let (lo, hi) = (t.c0 * t.time(k - 1) - 3f64.sqrt(), t.c0 * t.time(k + 1) + 3f64.sqrt());
    let mut touched = 0;
    for z in 0..10 {
        for yy in 0..10 {
            for x in 0..10 {
                let d =
                    ((x as f64 - pos[0]).powi(2) + (yy as f64 - pos[1]).powi(2) + (z as f64 - pos[2]).powi(2)).sqrt();
                if v.get(x, yy, z) != 0.0 {
                    touched += 1;
                    assert!(d >= lo && d <= hi, "voxel at distance {d} outside shell [{lo}, {hi}]");
                }
            }
        }
    }
    assert!(touched > 0);
}

#[test]
fn dense_columns_and_products() {
    let g = Geometry::default_for([2, 2, 2], 1.0, 4, 2).unwrap();
    let t = TimeConfig::default_for([2, 2, 2], 1.0, &g);
    let dense = materialize_dense(&g, &t, [2, 2, 2]).unwrap();
    assert_eq!(dense.cols, 8);
    let op = KirchhoffOperator::new(g.clone(), t, [2, 2, 2], 1.0).unwrap();
    for j in 0..8 {
        let mut e = vec![0.0; 8];
        e[j] = 1.0;
        assert_eq!(dense.column(j), op.apply(&e));
    }
    let dims = [4, 4, 4];
    let g = Geometry::default_for(dims, 1.0, 8, 4).unwrap();
    let t = TimeConfig::default_for(dims, 1.0, &g);
    let dense = materialize_dense(&g, &t, dims).unwrap();
    let op = KirchhoffOperator::new(g.clone(), t, dims, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_vec(64, &mut rng);
    let diff = dense.apply(&x).iter().zip(op.apply(&x)).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
    assert!(diff <= 1e-12, "dense product differs by {diff}");
    let svd = dense.to_nalgebra().svd(false, false);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
    assert!(rank <= dense.rows.min(dense.cols));
    assert!(materialize_dense(&g, &t, [11, 11, 11]).is_err());
}

#[test]
fn power_iteration_agrees_with_svd() {
    let dims = [4, 4, 4];
    let g = Geometry::default_for(dims, 1.0, 8, 4).unwrap();
    let t = TimeConfig::default_for(dims, 1.0, &g);
    let dense = materialize_dense(&g, &t, dims).unwrap();
    let smax = dense.to_nalgebra().svd(false, false).singular_values.max();
    let est = operator_norm_sq(&g, &t, dims, 50, 1).unwrap();
    assert!((est - smax * smax).abs() <= 0.02 * smax * smax, "{est} vs {}", smax * smax);
    let op = KirchhoffOperator::new(g, t, dims, 1.0).unwrap();
    let hist = nfr::linalg::power_iteration_history(&op, 30, 2);
    assert!(hist.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12)));
}

#[test]
fn operator_out_of_reach_is_zero() {
    let dims = [4, 4, 4];
    let g = build_geometry(4, 2, 100.0, [1.5, 1.5, 1.5]).unwrap();
    let t = TimeConfig { c0: 1.0, dt: 0.5, n_t: 3, n_dirs: 50 };
    assert_eq!(operator_norm_sq(&g, &t, dims, 5, 0).unwrap(), 0.0);
}

#[test]
fn quarter_turn_symmetry() {
    let dims = [12, 12, 12];
    let n_az = 8;
    let op = setup_dirs(dims, n_az, 2, Some(4000));
    let v = gaussian_blob(dims, [7.0, 4.0, 6.0], 1.5);
    // rotate by +90 degrees about the z axis through the grid center
    let mut rot = Volume::zeros(dims);
    for z in 0..12 {
        for y in 0..12 {
            for x in 0..12 {
                rot.set(11 - y, x, z, v.get(x, y, z));
            }
        }
    }
    let a = op.forward(&v).unwrap();
    let b = op.forward(&rot).unwrap();
    let peak = a.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let shift = n_az / 4;
    for ring in 0..2 {
        for i in 0..n_az {
            let src = a.trace(ring * n_az + i);
            let dst = b.trace(ring * n_az + (i + shift) % n_az);
            let err = src.iter().zip(dst).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(err <= 2e-2 * peak, "ring {ring} azimuth {i}: {err} vs peak {peak}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let op = setup([6, 6, 6], 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_vec(216, &mut rng);
        let w = random_vec(216, &mut rng);
        let mix: Vec<f64> = u.iter().zip(&w).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = op.apply(&mix);
        let (fu, fw) = (op.apply(&u), op.apply(&w));
        let scale = norm(&fu) * alpha.abs() + norm(&fw) * beta.abs() + 1.0;
        for k in 0..lhs.len() {
            prop_assert!((lhs[k] - alpha * fu[k] - beta * fw[k]).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn adjoint_consistency(seed in 0u64..1000) {
        let op = setup([5, 6, 7], 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_vec(op.domain_len(), &mut rng);
        let y = random_vec(op.range_len(), &mut rng);
        let fx = op.apply(&x);
        let err = (dot(&fx, &y) - dot(&x, &op.adjoint(&y))).abs();
        prop_assert!(err <= 1e-10 * norm(&fx) * norm(&y));
    }
}

#[test]
fn sparse_setting_has_512_transducers() {
    let g = Geometry::default_for([32, 32, 32], 1.0, 64, 8).unwrap();
    assert_eq!(g.len(), 512);
    for p in &g.positions {
        let d: Vec<f64> = (0..3).map(|a| p[a] - g.spec.center[a]).collect();
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        assert!((r - g.spec.radius).abs() <= 1e-12 && d[2] >= -1e-12);
    }
}
