use loadrec::prox::{
    nuclear_norm, project_box, prox_l1, prox_nuclear, shrink_singular_values, soft_threshold,
    SvdMode,
};
use loadrec::Matrix;
use nalgebra::{DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn low_rank(seed: u64, rows: usize, cols: usize, rank: usize) -> Matrix {
    random(seed, rows, rank) * random(seed + 77, rank, cols)
}

// trace((M^T M)^{1/2}) through a symmetric eigensolver.
fn nuclear_by_eigen(m: &Matrix) -> f64 {
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum()
}

fn spectral_by_eigen(m: &Matrix) -> f64 {
    SymmetricEigen::new(m.transpose() * m)
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, &l| a.max(l))
        .sqrt()
}

fn nuclear_objective(z: &Matrix, m: &Matrix, tau: f64) -> f64 {
    tau * nuclear_by_eigen(z) + 0.5 * (z - m).norm_squared()
}

#[test]
fn soft_threshold_examples() {
    assert_eq!(soft_threshold(3.0, 1.0), 2.0);
    assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
    assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    assert_eq!(soft_threshold(-1.0, 1.0), 0.0);
    assert_eq!(soft_threshold(2.0, 0.0), 2.0);
    let m = Matrix::from_row_slice(1, 4, &[-2.5, -0.2, 0.75, 4.0]);
    assert_eq!(prox_l1(&m, 0.5), Matrix::from_row_slice(1, 4, &[-2.0, 0.0, 0.25, 3.5]));
}

#[test]
fn soft_threshold_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let v: f64 = rng.random_range(-5.0..5.0);
        let tau: f64 = rng.random_range(0.0..3.0);
        let f = |x: f64| tau * x.abs() + 0.5 * (x - v).powi(2);
        let mut best = (f64::INFINITY, 0.0);
        for k in -60_000..=60_000 {
            let x = k as f64 * 1e-4;
            let fx = f(x);
            if fx < best.0 {
                best = (fx, x);
            }
        }
        let s = soft_threshold(v, tau);
        assert!((s - best.1).abs() <= 1e-4, "v={v} tau={tau}: {s} vs {}", best.1);
        assert!(f(s) <= best.0 + 1e-12);
    }
}

#[test]
fn nuclear_prox_diagonal_examples() {
    let diag = |v: &[f64]| Matrix::from_diagonal(&DVector::from_row_slice(v));
    let out = prox_nuclear(&diag(&[5.0, 3.0, 0.5]), 1.0).unwrap();
    assert!((out - diag(&[4.0, 2.0, 0.0])).amax() < 1e-13);
    let out = prox_nuclear(&diag(&[2.0, 1.0]), 10.0).unwrap();
    assert!(out.amax() < 1e-15);
    assert!(prox_nuclear(&diag(&[1.0]), 0.0).is_err());
    assert!(prox_nuclear(&diag(&[1.0]), -1.0).is_err());
}

#[test]
fn nuclear_prox_satisfies_optimality_certificate() {
    for seed in 0..20 {
        let m = random(seed, 6, 40);
        let tau = 0.4 + 0.1 * seed as f64;
        let z = prox_nuclear(&m, tau).unwrap();
        // (M - Z) / tau must be a subgradient of the nuclear norm at Z.
        let g = (&m - &z) / tau;
        assert!(spectral_by_eigen(&g) <= 1.0 + 1e-9, "seed {seed}");
        let pairing = g.component_mul(&z).sum();
        assert!((pairing - nuclear_by_eigen(&z)).abs() <= 1e-8 * (1.0 + pairing.abs()));
    }
}

#[test]
fn nuclear_prox_beats_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = low_rank(4, 5, 30, 2) + random(5, 5, 30) * 0.05;
    let tau = 0.3;
    let z = prox_nuclear(&m, tau).unwrap();
    let f0 = nuclear_objective(&z, &m, tau);
    for trial in 0..100 {
        let scale = 10f64.powf(rng.random_range(-4.0..0.0));
        let dz = random(1000 + trial, 5, 30) * scale;
        assert!(nuclear_objective(&(&z + dz), &m, tau) >= f0 - 1e-12);
    }
}

#[test]
fn shrinkage_reports_rank_and_norm() {
    let m = low_rank(7, 8, 50, 3) * 5.0;
    let s = shrink_singular_values(&m, 1e-3, SvdMode::Full).unwrap();
    assert_eq!(s.rank, 3);
    assert!((s.nuclear_norm - nuclear_by_eigen(&s.value)).abs() <= 1e-6 * s.nuclear_norm);
    let empty = shrink_singular_values(&Matrix::zeros(0, 4), 1.0, SvdMode::Full).unwrap();
    assert_eq!(empty.rank, 0);
    let mut bad = Matrix::zeros(2, 2);
    bad[(0, 0)] = f64::NAN;
    assert!(shrink_singular_values(&bad, 1.0, SvdMode::Full).is_err());
}

#[test]
fn randomized_shrinkage_agrees_with_full() {
    let m = low_rank(9, 12, 420, 2) * 3.0 + random(10, 12, 420) * 1e-3;
    let tau = 0.5;
    let full = shrink_singular_values(&m, tau, SvdMode::Full).unwrap();
    let mode = SvdMode::Randomized {
        rank: 1,
        oversample: 2,
        power_iters: 2,
    };
    let fast = shrink_singular_values(&m, tau, mode).unwrap();
    assert_eq!(full.rank, fast.rank);
    assert!((full.value - fast.value).amax() <= 1e-8);
}

#[test]
fn nuclear_norm_two_routes() {
    for seed in 0..10 {
        let m = random(seed, 4 + seed as usize % 3, 25);
        assert!((nuclear_norm(&m) - nuclear_by_eigen(&m)).abs() <= 1e-9 * nuclear_norm(&m));
    }
    assert_eq!(nuclear_norm(&Matrix::zeros(0, 0)), 0.0);
}

#[test]
fn box_projection_examples() {
    let m = Matrix::from_row_slice(1, 3, &[5.0, -5.0, 0.3]);
    let c = Matrix::zeros(1, 3);
    let r = Matrix::from_element(1, 3, 1.0);
    assert_eq!(project_box(&m, &c, &r).unwrap(), Matrix::from_row_slice(1, 3, &[1.0, -1.0, 0.3]));
    let zero = Matrix::zeros(1, 3);
    assert_eq!(project_box(&m, &c, &zero).unwrap(), c);
    assert!(project_box(&m, &c, &Matrix::from_element(1, 3, -1.0)).is_err());
    assert!(project_box(&m, &Matrix::zeros(1, 2), &r).is_err());
}

#[test]
fn box_projection_matches_nearest_grid_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let v: f64 = rng.random_range(-3.0..3.0);
        let c: f64 = rng.random_range(-1.0..1.0);
        let r: f64 = rng.random_range(0.0..1.5);
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=10_000 {
            let x = c - r + 2.0 * r * k as f64 / 10_000.0;
            if (x - v).abs() < best.0 {
                best = ((x - v).abs(), x);
            }
        }
        let p = project_box(
            &Matrix::from_element(1, 1, v),
            &Matrix::from_element(1, 1, c),
            &Matrix::from_element(1, 1, r),
        )
        .unwrap()[(0, 0)];
        assert!((p - best.1).abs() <= 2.0 * r / 10_000.0 + 1e-12);
    }
}

proptest! {
    #[test]
    fn l1_prox_is_nonexpansive(a in prop::collection::vec(-10f64..10.0, 12), b in prop::collection::vec(-10f64..10.0, 12), tau in 0f64..5.0) {
        let ma = Matrix::from_row_slice(3, 4, &a);
        let mb = Matrix::from_row_slice(3, 4, &b);
        let d = (prox_l1(&ma, tau) - prox_l1(&mb, tau)).norm();
        prop_assert!(d <= (ma - mb).norm() + 1e-12);
    }

    #[test]
    fn nuclear_prox_is_nonexpansive(seed in any::<u64>(), tau in 0.01f64..3.0) {
        let a = random(seed, 4, 9);
        let b = random(seed.wrapping_add(1), 4, 9);
        let d = (prox_nuclear(&a, tau).unwrap() - prox_nuclear(&b, tau).unwrap()).norm();
        prop_assert!(d <= (a - b).norm() + 1e-10);
    }

    #[test]
    fn box_projection_lands_inside(seed in any::<u64>()) {
        let m = random(seed, 3, 5) * 4.0;
        let c = random(seed ^ 1, 3, 5);
        let r = random(seed ^ 2, 3, 5).map(f64::abs);
        let p = project_box(&m, &c, &r).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                prop_assert!((p[(i, j)] - c[(i, j)]).abs() <= r[(i, j)] + 1e-15);
                if (m[(i, j)] - c[(i, j)]).abs() <= r[(i, j)] {
                    prop_assert_eq!(p[(i, j)], m[(i, j)]);
                }
            }
        }
    }
}
