//! Sparse normal-equation solves against a dense least-squares oracle.

use msam_core::sparse::{solve_least_squares, CsrMatrix, Ordering};
use msam_core::solver::{assemble, solve_normal_equations, SparseSystem};
use msam_core::simgen::{generate, ScenarioConfig};
use msam_core::merge::{build_local_graph, local_initial_estimate};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-8;

/// Random sparse system with full column rank: a dense-ish pattern plus one
/// guaranteed entry per column on distinct rows.
fn random_system(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f64>, usize) {
    let n = rng.random_range(1..=20);
    let m = rng.random_range(n..=30);
    let mut rows = vec![vec![0.0; n]; m];
    for (r, row) in rows.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            if r == c {
                *v = rng.random_range(1.0..3.0);
            } else if rng.random_bool(0.3) {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
    let b = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
    (rows, b, n)
}

fn dense_oracle(rows: &[Vec<f64>], b: &[f64], n: usize) -> DVector<f64> {
    let a = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
    let svd = a.svd(true, true);
    svd.solve(&DVector::from_column_slice(b), 1e-14).unwrap()
}

fn assert_close(got: &[f64], want: &DVector<f64>) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want.iter()) {
        assert!((g - w).abs() <= TOL * w.abs().max(1.0), "{g} vs {w}");
    }
}

#[test]
fn random_systems_match_dense_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (rows, b, n) = random_system(&mut rng);
        let a = CsrMatrix::from_dense(&rows, n);
        let want = dense_oracle(&rows, &b, n);
        for ordering in [Ordering::Natural, Ordering::MinimumDegree] {
            let got = solve_least_squares(&a, &b, 0.0, ordering).unwrap();
            assert_close(&got, &want);
        }
        let got = solve_normal_equations(&SparseSystem { a, b: b.clone() }).unwrap();
        assert_close(&got, &want);
    }
}

#[test]
fn residual_is_orthogonal_to_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (rows, b, n) = random_system(&mut rng);
        let a = CsrMatrix::from_dense(&rows, n);
        let x = solve_least_squares(&a, &b, 0.0, Ordering::MinimumDegree).unwrap();
        let r: Vec<f64> = a.mul_vec(&x).iter().zip(&b).map(|(ax, b)| b - ax).collect();
        for g in a.transpose_mul_vec(&r) {
            assert!(g.abs() < 1e-8, "{g}");
        }
    }
}

#[test]
fn simulated_slam_system_matches_dense_least_squares() {
    let cfg = ScenarioConfig {
        n_landmarks: 8,
        paths: vec![vec![[0.0, 0.0], [6.0, 0.0], [6.0, 4.0]]],
        step_length: 0.5,
        odom_per_measurement: 2,
        ..ScenarioConfig::default()
    };
    let sim = generate(&cfg).unwrap();
    let d = &sim.synchronized()[0];
    let g = build_local_graph(d, &cfg.noise).unwrap();
    let x0 = local_initial_estimate(d, g.layout()).unwrap();
    let sys = assemble(&g, &x0).unwrap();
    let n = sys.a.ncols();
    assert!(n <= 60, "system too large for the dense oracle: {n}");
    let want = dense_oracle(&sys.a.to_dense(), &sys.b, n);
    assert_close(&solve_normal_equations(&sys).unwrap(), &want);
}
