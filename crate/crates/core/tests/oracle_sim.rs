//! Simulation-harness checks: support-size law, overlap caps, the additive
//! noise decomposition, determinism, and principal-component removal against
//! an independent Jacobi SVD oracle.

mod common;

use bicfa::sim::{
    gen_sparse_vector, noise_matrix, remove_pcs, simulate, Centering, SimConfig, SimError,
};
use bicfa::types::{support, DataMatrix};
use common::jacobi_rank_r_reconstruction;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn desk_config(seed: u64) -> SimConfig {
    SimConfig {
        p: 120,
        n: 80,
        k_sparse: 5,
        k_dense: 0,
        m_range: (5, 15),
        value_sd: 2.0_f64.sqrt(),
        max_shared: 4,
        noise_var: 1.0,
        shuffle_pairing: true,
        seed,
    }
}

#[test]
fn sparse_vector_support_size_in_range() {
    let mut rng = ChaCha20Rng::seed_from_u64(60);
    for _ in 0..200 {
        let v = gen_sparse_vector(500, (5, 20), 2.0_f64.sqrt(), &[], 4, &mut rng).unwrap();
        let s = support(&v, 0.0);
        assert!(s.len() >= 5 && s.len() <= 20, "support size {}", s.len());
        assert_eq!(v.len(), 500);
    }
}

#[test]
fn sparse_vector_respects_overlap_cap() {
    let mut rng = ChaCha20Rng::seed_from_u64(61);
    let existing: Vec<Vec<usize>> = vec![(0..20).collect()];
    for _ in 0..200 {
        let v = gen_sparse_vector(60, (6, 10), 1.0, &existing, 5, &mut rng).unwrap();
        let s = support(&v, 0.0);
        let shared = s.iter().filter(|i| **i < 20).count();
        assert!(shared <= 5, "shared {shared}");
    }
}

#[test]
fn sparse_vector_infeasible_cap_errors() {
    let mut rng = ChaCha20Rng::seed_from_u64(62);
    // support must take 30 of 32 indices but may share none with an existing
    // support of 25: impossible
    let existing: Vec<Vec<usize>> = vec![(0..25).collect()];
    let err = gen_sparse_vector(32, (30, 30), 1.0, &existing, 0, &mut rng).unwrap_err();
    assert!(matches!(err, SimError::Infeasible { .. }));
}

#[test]
fn sparse_vector_deterministic() {
    let mut a = ChaCha20Rng::seed_from_u64(63);
    let mut b = ChaCha20Rng::seed_from_u64(63);
    let va = gen_sparse_vector(100, (5, 15), 1.0, &[], 4, &mut a).unwrap();
    let vb = gen_sparse_vector(100, (5, 15), 1.0, &[], 4, &mut b).unwrap();
    assert_eq!(va, vb);
}

#[test]
fn support_size_uniform_chi_square() {
    let mut rng = ChaCha20Rng::seed_from_u64(64);
    let (lo, hi) = (5usize, 15usize);
    let bins = hi - lo + 1;
    let mut counts = vec![0usize; bins];
    let draws = 1000;
    for _ in 0..draws {
        let v = gen_sparse_vector(200, (lo, hi), 1.0, &[], 4, &mut rng).unwrap();
        counts[support(&v, 0.0).len() - lo] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let crit = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(stat < crit, "chi-square stat {stat} exceeds critical value {crit}");
}

#[test]
fn simulate_dimensions_and_truth_invariants() {
    let config = SimConfig { k_dense: 2, ..desk_config(65) };
    let (data, truth) = simulate(&config).unwrap();
    let k = config.k_sparse + config.k_dense;
    assert_eq!(data.values.shape(), (config.p, config.n));
    assert_eq!(data.gene_ids.len(), config.p);
    assert_eq!(truth.lambda_true.shape(), (config.p, k));
    assert_eq!(truth.x_true.shape(), (k, config.n));
    assert_eq!(truth.loading_sparse.iter().filter(|f| **f).count(), config.k_sparse);
    assert_eq!(truth.factor_sparse.iter().filter(|f| **f).count(), config.k_sparse);

    // support sizes and pairwise overlap cap on both sides
    let mut loading_supports = Vec::new();
    for kk in 0..k {
        let col: Vec<f64> = truth.lambda_true.column(kk).iter().copied().collect();
        let s = support(&col, 0.0);
        if truth.loading_sparse[kk] {
            assert!(s.len() >= config.m_range.0 && s.len() <= config.m_range.1);
            loading_supports.push(s);
        } else {
            assert_eq!(s.len(), config.p, "dense loading must have full support");
        }
    }
    for a in 0..loading_supports.len() {
        for b in (a + 1)..loading_supports.len() {
            let shared = loading_supports[a]
                .iter()
                .filter(|i| loading_supports[b].contains(i))
                .count();
            assert!(shared <= config.max_shared, "overlap {shared}");
        }
    }
    let mut factor_supports = Vec::new();
    for kk in 0..k {
        let row: Vec<f64> = truth.x_true.row(kk).iter().copied().collect();
        let s = support(&row, 0.0);
        if truth.factor_sparse[kk] {
            assert!(s.len() >= config.m_range.0 && s.len() <= config.m_range.1);
            factor_supports.push(s);
        }
    }
    for a in 0..factor_supports.len() {
        for b in (a + 1)..factor_supports.len() {
            let shared =
                factor_supports[a].iter().filter(|i| factor_supports[b].contains(i)).count();
            assert!(shared <= config.max_shared);
        }
    }

    // biclusters are exactly the doubly sparse components
    for bc in &truth.biclusters {
        let kk = bc.component_id as usize;
        assert!(truth.loading_sparse[kk] && truth.factor_sparse[kk]);
        let col: Vec<f64> = truth.lambda_true.column(kk).iter().copied().collect();
        assert_eq!(bc.genes, support(&col, 0.0));
    }
}

#[test]
fn simulate_pure_noise_case() {
    let config = SimConfig { k_sparse: 0, k_dense: 0, noise_var: 2.0, ..desk_config(66) };
    let (data, truth) = simulate(&config).unwrap();
    assert_eq!(truth.lambda_true.ncols(), 0);
    assert!(truth.biclusters.is_empty());
    let m = data.values.mean();
    let var = data.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        / (config.p * config.n - 1) as f64;
    // variance of the mean is 2/(p n); allow 4 standard errors
    assert!(m.abs() < 4.0 * (2.0 / (config.p * config.n) as f64).sqrt(), "mean {m}");
    assert!((var - 2.0).abs() < 0.2, "variance {var}");
}

#[test]
fn simulate_deterministic() {
    let config = SimConfig { k_dense: 1, ..desk_config(67) };
    let (d1, t1) = simulate(&config).unwrap();
    let (d2, t2) = simulate(&config).unwrap();
    assert_eq!(d1, d2);
    assert_eq!(t1, t2);
}

#[test]
fn noise_mean_converges_to_product() {
    // fixed truth, repeatedly regenerated noise: the running mean of Y must
    // approach Lambda * X entrywise
    let config = SimConfig { p: 20, n: 10, k_sparse: 3, m_range: (5, 8), ..desk_config(68) };
    let (_, truth) = simulate(&config).unwrap();
    let product = &truth.lambda_true * &truth.x_true;
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let reps = 200;
    let mut mean = DMatrix::zeros(config.p, config.n);
    for _ in 0..reps {
        mean += &product + noise_matrix(config.p, config.n, config.noise_var, &mut rng);
    }
    mean /= reps as f64;
    let se = (config.noise_var / reps as f64).sqrt();
    let worst = (&mean - &product).amax();
    assert!(worst <= 3.0 * se, "worst deviation {worst}, 3 SE = {}", 3.0 * se);
}

#[test]
fn remove_pcs_zero_components_only_centers() {
    let values = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 6.0, 8.0]);
    let data = DataMatrix::new(
        values,
        vec!["g1".into(), "g2".into()],
        vec!["s1".into(), "s2".into(), "s3".into()],
    )
    .unwrap();
    let out = remove_pcs(&data, 0, Centering::Genes).unwrap();
    assert_eq!(out.gene_ids, data.gene_ids);
    for i in 0..2 {
        assert!(out.values.row(i).mean().abs() < 1e-14);
    }
    assert!((out.values[(0, 0)] - (1.0 - 2.0)).abs() < 1e-14);
}

#[test]
fn remove_pcs_exactly_removes_rank_one() {
    let u = DVector::from_fn(12, |i, _| 1.0 + (i as f64).sin());
    let v = DVector::from_fn(7, |j, _| 2.0 - (j as f64).cos());
    let values = &u * v.transpose();
    let data = DataMatrix::from_values(values).unwrap();
    let out = remove_pcs(&data, 1, Centering::Genes).unwrap();
    assert!(out.values.norm() <= 1e-8, "residual {}", out.values.norm());
}

#[test]
fn remove_pcs_matches_jacobi_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(70);
    let values = DMatrix::from_fn(20, 10, |_, _| {
        rand::Rng::random_range(&mut rng, -2.0..2.0)
    });
    let data = DataMatrix::from_values(values.clone()).unwrap();
    let out = remove_pcs(&data, 3, Centering::Genes).unwrap();

    // center rows independently, reconstruct top 3 with the Jacobi oracle
    let mut centered = vec![vec![0.0; 10]; 20];
    for i in 0..20 {
        let mean: f64 = (0..10).map(|j| values[(i, j)]).sum::<f64>() / 10.0;
        for j in 0..10 {
            centered[i][j] = values[(i, j)] - mean;
        }
    }
    let recon = jacobi_rank_r_reconstruction(&centered, 3);
    for i in 0..20 {
        for j in 0..10 {
            let want = centered[i][j] - recon[i][j];
            assert!(
                (out.values[(i, j)] - want).abs() < 1e-8,
                "({i},{j}): got {}, want {want}",
                out.values[(i, j)]
            );
        }
    }
}

#[test]
fn remove_pcs_rejects_excessive_rank() {
    let data = DataMatrix::from_values(DMatrix::zeros(4, 3)).unwrap();
    assert!(matches!(remove_pcs(&data, 3, Centering::Genes), Err(SimError::InvalidConfig(_))));
}

#[test]
fn preset_configs_validate() {
    SimConfig::sparse_only(1.0, 1).validate().unwrap();
    SimConfig::mixed(2.0, 1).validate().unwrap();
    let bad = SimConfig { max_shared: 5, ..desk_config(0) };
    assert!(bad.validate().is_err());
}
