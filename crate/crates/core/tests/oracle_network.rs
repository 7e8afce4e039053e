//! Network pipeline checked against hand-worked covariances, a dense
//! inverse, and Monte Carlo calibration of the edge mixture.

mod common;

use bicfa::network::{
    build_covariance, edge_probabilities, ensemble_edges, partial_correlations, run_edges,
    run_edges_from_parts, select_components, stability_filter, CovariateLabels, EdgeFitModel,
    EdgeRecord, NetType, NetworkError, NetworkSpec, RunParts, StabilityRule, StabilityWindow,
};
use bicfa::types::{FactorSide, LoadingSide, ModelState, NoiseModel};
use bicfa::vem::IterationTrace;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::Beta;

fn build_state(lambda: DMatrix<f64>, x_mean: DMatrix<f64>) -> ModelState {
    let (p, k) = lambda.shape();
    let n = x_mean.ncols();
    ModelState {
        loading: LoadingSide {
            lambda,
            theta: DMatrix::from_element(p, k, 1.0),
            delta: DMatrix::from_element(p, k, 1.0),
            phi: DVector::from_element(k, 1.0),
            tau: DVector::from_element(k, 1.0),
            eta: 1.0,
            gamma: 1.0,
            z: DVector::from_element(k, 0.5),
        },
        factor: FactorSide {
            x_mean,
            x_cov: vec![DMatrix::zeros(k, k); n],
            sigma: DMatrix::from_element(k, n, 1.0),
            rho: DMatrix::from_element(k, n, 1.0),
            omega: DVector::from_element(k, 1.0),
            kappa: DVector::from_element(k, 1.0),
            chi: 1.0,
            varphi: 1.0,
            o: DVector::from_element(k, 0.5),
        },
        noise: NoiseModel { psi: DVector::from_element(p, 1.0) },
        component_ids: (0..k as u32).collect(),
    }
}

fn trace_entry(
    iteration: usize,
    ids: Vec<u32>,
    gene_counts: Vec<usize>,
    sample_counts: Vec<usize>,
) -> IterationTrace {
    IterationTrace {
        iteration,
        active_components: ids.len(),
        residual_norm: 1.0,
        component_ids: ids,
        gene_counts,
        sample_counts,
    }
}

/// Draws from the null shape (1 - rho^2)^((kappa-3)/2): rho = 2B - 1 with
/// B ~ Beta((kappa-1)/2, (kappa-1)/2).
fn sample_null(kappa: f64, n: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let beta = Beta::new((kappa - 1.0) / 2.0, (kappa - 1.0) / 2.0).unwrap();
    (0..n).map(|_| 2.0 * rng.sample::<f64, _>(beta) - 1.0).collect()
}

// -------- stability filter --------

#[test]
fn stable_counts_are_retained() {
    let trace = vec![
        trace_entry(10, vec![0, 1], vec![30, 40], vec![20, 25]),
        trace_entry(20, vec![0, 1], vec![30, 45], vec![20, 25]),
    ];
    let window = StabilityWindow::new(10, 20, 50);
    assert_eq!(stability_filter(&trace, &window).unwrap(), vec![0, 1]);
}

#[test]
fn large_gene_change_is_discarded() {
    let trace = vec![
        trace_entry(10, vec![0], vec![30], vec![20]),
        trace_entry(20, vec![0], vec![90], vec![20]),
    ];
    let window = StabilityWindow::new(10, 20, 50);
    assert!(stability_filter(&trace, &window).unwrap().is_empty());
}

#[test]
fn rule_controls_mixed_changes() {
    // gene change 10, sample change 60
    let trace = vec![
        trace_entry(10, vec![7], vec![30], vec![20]),
        trace_entry(20, vec![7], vec![40], vec![80]),
    ];
    let mut window = StabilityWindow::new(10, 20, 50);
    assert!(stability_filter(&trace, &window).unwrap().is_empty());
    window.rule = StabilityRule::BothExceed;
    assert_eq!(stability_filter(&trace, &window).unwrap(), vec![7]);
}

#[test]
fn pruned_components_and_missing_checkpoints() {
    let trace = vec![
        trace_entry(10, vec![0, 1], vec![30, 40], vec![20, 25]),
        trace_entry(20, vec![1], vec![40], vec![25]),
    ];
    let window = StabilityWindow::new(10, 20, 50);
    assert_eq!(stability_filter(&trace, &window).unwrap(), vec![1]);
    let missing = StabilityWindow::new(10, 30, 50);
    assert!(matches!(
        stability_filter(&trace, &missing),
        Err(NetworkError::MissingCheckpoint { iteration: 30 })
    ));
}

// -------- component selection --------

fn labels(spec: &[(&str, usize)]) -> CovariateLabels {
    let mut v = Vec::new();
    for &(name, count) in spec {
        v.extend(std::iter::repeat_n(name.to_string(), count));
    }
    CovariateLabels::new(v)
}

#[test]
fn class_confined_support_is_specific() {
    // one component active on the first three samples only
    let x = DMatrix::from_row_slice(2, 6, &[
        1.0, 2.0, 1.5, 0.0, 0.0, 0.0, //
        1.0, 1.0, 1.0, 1.0, 1.0, 1.0,
    ]);
    let state = build_state(DMatrix::from_element(4, 2, 1.0), x);
    let labs = labels(&[("c", 3), ("d", 3)]);
    let spec = NetworkSpec {
        net_type: NetType::SubsetSpecific,
        target_class: Some("c".into()),
        ..Default::default()
    };
    let sel = select_components(&state, Some(&labs), &spec).unwrap();
    assert_eq!(sel.indices, vec![0]);

    let ubiq = NetworkSpec { net_type: NetType::Ubiquitous, ..Default::default() };
    let sel = select_components(&state, None, &ubiq).unwrap();
    assert_eq!(sel.indices, vec![1]);
}

#[test]
fn differential_selection_uses_exact_rank_test() {
    // class c values {1,2,3,4}, class d values {10,11,12,13}: p = 2/70
    let x = DMatrix::from_row_slice(1, 8, &[1.0, 2.0, 3.0, 4.0, 10.0, 11.0, 12.0, 13.0]);
    let state = build_state(DMatrix::from_element(2, 1, 1.0), x);
    let labs = labels(&[("c", 4), ("d", 4)]);
    let mut spec = NetworkSpec {
        net_type: NetType::SubsetDifferential,
        class_pair: Some(("c".into(), "d".into())),
        wilcoxon_p_threshold: 0.03,
        ..Default::default()
    };
    let sel = select_components(&state, Some(&labs), &spec).unwrap();
    assert_eq!(sel.indices, vec![0]);
    // threshold just below 2/70 rejects the same component
    spec.wilcoxon_p_threshold = 0.028;
    let sel = select_components(&state, Some(&labs), &spec).unwrap();
    assert!(sel.indices.is_empty());
}

#[test]
fn identical_distributions_are_not_differential() {
    let vals: Vec<f64> = (0..20).map(|j| 1.0 + (j % 10) as f64).collect();
    let x = DMatrix::from_row_slice(1, 20, &vals);
    let state = build_state(DMatrix::from_element(2, 1, 1.0), x);
    let labs = labels(&[("c", 10), ("d", 10)]);
    let spec = NetworkSpec {
        net_type: NetType::SubsetDifferential,
        class_pair: Some(("c".into(), "d".into())),
        ..Default::default()
    };
    let sel = select_components(&state, Some(&labs), &spec).unwrap();
    assert!(sel.indices.is_empty());
    assert!(sel.warnings.is_empty());
}

#[test]
fn sparse_class_skips_with_warning() {
    // class d has a single nonzero factor value
    let x = DMatrix::from_row_slice(1, 6, &[1.0, 2.0, 3.0, 9.0, 0.0, 0.0]);
    let state = build_state(DMatrix::from_element(2, 1, 1.0), x);
    let labs = labels(&[("c", 3), ("d", 3)]);
    let spec = NetworkSpec {
        net_type: NetType::SubsetDifferential,
        class_pair: Some(("c".into(), "d".into())),
        wilcoxon_p_threshold: 1.0,
        ..Default::default()
    };
    let sel = select_components(&state, Some(&labs), &spec).unwrap();
    assert!(sel.indices.is_empty());
    assert_eq!(sel.warnings.len(), 1);
    assert!(sel.warnings[0].contains("skipped"), "{}", sel.warnings[0]);
}

#[test]
fn differential_selection_is_rank_based() {
    // monotone transform of the factor values leaves the decision unchanged
    let vals = [0.5, 1.0, 1.5, 2.0, 5.0, 6.0, 7.0, 8.0];
    let x1 = DMatrix::from_row_slice(1, 8, &vals);
    let transformed: Vec<f64> = vals.iter().map(|&v: &f64| v.powi(3)).collect();
    let x2 = DMatrix::from_row_slice(1, 8, &transformed);
    let labs = labels(&[("c", 4), ("d", 4)]);
    let spec = NetworkSpec {
        net_type: NetType::SubsetDifferential,
        class_pair: Some(("c".into(), "d".into())),
        wilcoxon_p_threshold: 0.03,
        ..Default::default()
    };
    let s1 = select_components(&build_state(DMatrix::from_element(2, 1, 1.0), x1), Some(&labs), &spec)
        .unwrap();
    let s2 = select_components(&build_state(DMatrix::from_element(2, 1, 1.0), x2), Some(&labs), &spec)
        .unwrap();
    assert_eq!(s1.indices, s2.indices);
}

#[test]
fn missing_labels_are_rejected() {
    let state = build_state(DMatrix::from_element(2, 1, 1.0), DMatrix::from_element(1, 4, 1.0));
    let spec = NetworkSpec {
        net_type: NetType::SubsetSpecific,
        target_class: Some("c".into()),
        ..Default::default()
    };
    assert!(matches!(
        select_components(&state, None, &spec),
        Err(NetworkError::InvalidSpec(_))
    ));
    let short = labels(&[("c", 2)]);
    assert!(matches!(
        select_components(&state, Some(&short), &spec),
        Err(NetworkError::LabelCount { expected: 4, got: 2 })
    ));
}

// -------- covariance and partial correlations --------

#[test]
fn zero_loadings_leave_diagonal_noise() {
    let lambda = DMatrix::zeros(3, 2);
    let sigma = DMatrix::identity(2, 2);
    let psi = DVector::from_row_slice(&[0.5, 1.5, 2.5]);
    let omega = build_covariance(&lambda, &sigma, &psi, &[0, 1, 2]).unwrap();
    assert_eq!(omega, DMatrix::from_diagonal(&psi));
}

#[test]
fn single_component_outer_product() {
    let lambda = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
    let sigma = DMatrix::from_element(1, 1, 1.0);
    let psi = DVector::from_element(2, 1.0);
    let omega = build_covariance(&lambda, &sigma, &psi, &[0, 1]).unwrap();
    assert_eq!(omega, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
}

#[test]
fn covariance_matches_dense_oracle_on_random_instances() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for _ in 0..100 {
        let p = rng.random_range(2..8);
        let m = rng.random_range(1..4);
        let lambda = DMatrix::from_fn(p, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        // random PSD sigma = B B^T
        let b = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let sigma = &b * b.transpose();
        let psi = DVector::from_fn(p, |_, _| 0.5 + rng.random::<f64>());
        let subset: Vec<usize> = (0..p).filter(|_| rng.random::<bool>()).collect();
        if subset.is_empty() {
            continue;
        }
        let omega = build_covariance(&lambda, &sigma, &psi, &subset).unwrap();
        for (i, &gi) in subset.iter().enumerate() {
            for (j, &gj) in subset.iter().enumerate() {
                let mut want = if i == j { psi[gi] } else { 0.0 };
                for a in 0..m {
                    for c in 0..m {
                        want += lambda[(gi, a)] * sigma[(a, c)] * lambda[(gj, c)];
                    }
                }
                assert!((omega[(i, j)] - want).abs() < 1e-12);
                assert_eq!(omega[(i, j)], omega[(j, i)]);
            }
        }
        // positive-definite by construction
        assert!(omega.clone().cholesky().is_some());
    }
}

#[test]
fn empty_subset_and_bad_dimensions_error() {
    let lambda = DMatrix::zeros(3, 2);
    let sigma = DMatrix::identity(2, 2);
    let psi = DVector::from_element(3, 1.0);
    assert!(matches!(
        build_covariance(&lambda, &sigma, &psi, &[]),
        Err(NetworkError::EmptyGeneSubset)
    ));
    assert!(matches!(
        build_covariance(&lambda, &sigma, &psi, &[5]),
        Err(NetworkError::DimensionMismatch(_))
    ));
    let bad_sigma = DMatrix::identity(3, 3);
    assert!(matches!(
        build_covariance(&lambda, &bad_sigma, &psi, &[0]),
        Err(NetworkError::DimensionMismatch(_))
    ));
}

#[test]
fn diagonal_covariance_has_no_partial_correlations() {
    let omega = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 4.0, 0.25]));
    let rho = partial_correlations(&omega).unwrap();
    assert_eq!(rho, DMatrix::identity(3, 3));
}

#[test]
fn two_by_two_partial_correlation_is_half() {
    let omega = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let rho = partial_correlations(&omega).unwrap();
    assert!((rho[(0, 1)] - 0.5).abs() < 1e-12, "rho = {}", rho[(0, 1)]);
    assert_eq!(rho[(0, 0)], 1.0);
}

#[test]
fn partial_correlations_match_dense_inverse() {
    let mut rng = ChaCha20Rng::seed_from_u64(23);
    for _ in 0..50 {
        let g = 5;
        let b = DMatrix::from_fn(g, g, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let omega = &b * b.transpose() + DMatrix::identity(g, g);
        let rho = partial_correlations(&omega).unwrap();

        let rows: Vec<Vec<f64>> =
            (0..g).map(|i| (0..g).map(|j| omega[(i, j)]).collect()).collect();
        let inv = common::gauss_jordan_inverse(&rows);
        for i in 0..g {
            for j in 0..g {
                let want = if i == j {
                    1.0
                } else {
                    -inv[i][j] / (inv[i][i] * inv[j][j]).sqrt()
                };
                assert!(
                    (rho[(i, j)] - want).abs() < 1e-10,
                    "({i},{j}): {} vs {want}",
                    rho[(i, j)]
                );
                assert!(rho[(i, j)].abs() < 1.0 || i == j);
            }
        }
    }
}

#[test]
fn indefinite_matrix_fails_factorization() {
    let omega = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(matches!(
        partial_correlations(&omega),
        Err(NetworkError::Factorization { .. })
    ));
}

// -------- edge probabilities --------

#[test]
fn few_edges_use_threshold_fallback() {
    let pcors = [0.05, -0.3, 0.19, 0.2, -0.21, 0.0];
    let fit = edge_probabilities(&pcors, 0.2).unwrap();
    assert_eq!(fit.model, EdgeFitModel::Threshold { abs_threshold: 0.2 });
    assert_eq!(fit.probabilities, vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn out_of_range_pcors_error() {
    let mut pcors = vec![0.0; 60];
    pcors[10] = 1.0;
    assert!(matches!(
        edge_probabilities(&pcors, 0.2),
        Err(NetworkError::PcorOutOfRange { index: 10, .. })
    ));
}

#[test]
fn null_draws_rarely_pass_the_probability_bar() {
    let mut rng = ChaCha20Rng::seed_from_u64(314);
    let pcors = sample_null(100.0, 10_000, &mut rng);
    let fit = edge_probabilities(&pcors, 0.2).unwrap();
    let EdgeFitModel::Mixture { kappa, eta0 } = fit.model else {
        panic!("expected mixture fit")
    };
    assert!((60.0..=170.0).contains(&kappa), "kappa = {kappa}");
    assert!(eta0 > 0.8, "eta0 = {eta0}");
    let high = fit.probabilities.iter().filter(|&&p| p > 0.8).count();
    assert!(
        high <= pcors.len() / 100,
        "{high} of {} null edges above 0.8",
        pcors.len()
    );
}

#[test]
fn planted_signal_is_recovered() {
    // 95% null, 5% signal at |pcor| = 0.6
    let mut rng = ChaCha20Rng::seed_from_u64(2718);
    let mut pcors = sample_null(100.0, 9_500, &mut rng);
    let n_signal = 500;
    for i in 0..n_signal {
        pcors.push(if i % 2 == 0 { 0.6 } else { -0.6 });
    }
    let fit = edge_probabilities(&pcors, 0.2).unwrap();
    let recovered = fit.probabilities[9_500..].iter().filter(|&&p| p > 0.8).count();
    assert!(
        recovered as f64 >= 0.8 * n_signal as f64,
        "only {recovered} of {n_signal} signal edges above 0.8"
    );
}

#[test]
fn zero_pcor_has_the_smallest_probability() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut pcors = sample_null(50.0, 500, &mut rng);
    pcors.push(0.0);
    let fit = edge_probabilities(&pcors, 0.2).unwrap();
    let zero_prob = *fit.probabilities.last().unwrap();
    assert!(fit.probabilities.iter().all(|&p| p >= zero_prob));
}

#[test]
fn probabilities_are_monotone_in_absolute_pcor() {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let pcors: Vec<f64> = sample_null(30.0, 400, &mut rng);
    let fit = edge_probabilities(&pcors, 0.2).unwrap();
    let mut order: Vec<usize> = (0..pcors.len()).collect();
    order.sort_by(|&a, &b| pcors[a].abs().partial_cmp(&pcors[b].abs()).unwrap());
    for w in order.windows(2) {
        assert!(
            fit.probabilities[w[0]] <= fit.probabilities[w[1]] + 1e-15,
            "monotonicity violated at |rho| = {}",
            pcors[w[1]].abs()
        );
    }
}

#[test]
fn edge_probabilities_are_permutation_invariant() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let pcors = sample_null(80.0, 300, &mut rng);
    let fit = edge_probabilities(&pcors, 0.2).unwrap();
    let mut perm: Vec<usize> = (0..pcors.len()).collect();
    perm.shuffle(&mut rng);
    let shuffled: Vec<f64> = perm.iter().map(|&i| pcors[i]).collect();
    let fit2 = edge_probabilities(&shuffled, 0.2).unwrap();
    for (pos, &orig) in perm.iter().enumerate() {
        assert_eq!(fit.probabilities[orig], fit2.probabilities[pos]);
    }
    assert_eq!(fit.model, fit2.model);
}

// -------- ensemble aggregation --------

fn edge(a: &str, b: &str, pcor: f64, prob: f64) -> EdgeRecord {
    EdgeRecord {
        gene_a: a.into(),
        gene_b: b.into(),
        partial_correlation: pcor,
        probability: prob,
        replication: 1,
    }
}

#[test]
fn replication_counting_and_thresholds() {
    let runs = vec![
        vec![edge("g1", "g2", 0.5, 0.9), edge("g1", "g3", 0.4, 0.79)],
        vec![edge("g2", "g1", 0.6, 0.85)], // reversed order, same edge
        vec![edge("g1", "g2", 0.5, 0.95), edge("g1", "g3", 0.4, 0.9)],
    ];
    let spec = NetworkSpec { replication_threshold: 2, ..Default::default() };
    let edges = ensemble_edges(&runs, &spec);
    assert_eq!(edges.len(), 1);
    assert_eq!(edges[0].gene_a, "g1");
    assert_eq!(edges[0].gene_b, "g2");
    assert_eq!(edges[0].replication, 3);
    assert_eq!(edges[0].probability, 0.95);
    assert_eq!(edges[0].partial_correlation, 0.5);
    // the 0.79 sighting of g1-g3 never counted: replication stayed at 1
}

#[test]
fn single_sighting_is_dropped() {
    let runs = vec![vec![edge("g1", "g2", 0.5, 0.9)], vec![]];
    let spec = NetworkSpec { replication_threshold: 2, ..Default::default() };
    assert!(ensemble_edges(&runs, &spec).is_empty());
    let lenient = NetworkSpec { replication_threshold: 1, ..Default::default() };
    assert_eq!(ensemble_edges(&runs, &lenient).len(), 1);
}

#[test]
fn duplicates_within_a_run_count_once() {
    let runs = vec![vec![
        edge("g1", "g2", 0.5, 0.9),
        edge("g1", "g2", 0.7, 0.92),
    ]];
    let spec = NetworkSpec { replication_threshold: 1, ..Default::default() };
    let edges = ensemble_edges(&runs, &spec);
    assert_eq!(edges.len(), 1);
    assert_eq!(edges[0].replication, 1);
    assert_eq!(edges[0].probability, 0.92);
}

#[test]
fn ensemble_is_invariant_to_run_order() {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let genes = ["g1", "g2", "g3", "g4", "g5"];
    let mut runs: Vec<Vec<EdgeRecord>> = (0..6)
        .map(|_| {
            let mut run = Vec::new();
            for i in 0..genes.len() {
                for j in (i + 1)..genes.len() {
                    if rng.random::<f64>() < 0.7 {
                        run.push(edge(
                            genes[i],
                            genes[j],
                            rng.random::<f64>() - 0.5,
                            rng.random::<f64>(),
                        ));
                    }
                }
            }
            run
        })
        .collect();
    let spec = NetworkSpec {
        replication_threshold: 2,
        edge_prob_threshold: 0.5,
        ..Default::default()
    };
    let forward = ensemble_edges(&runs, &spec);
    runs.reverse();
    assert_eq!(forward, ensemble_edges(&runs, &spec));
}

// -------- full single-run pipeline --------

#[test]
fn run_pipeline_produces_canonical_edges() {
    // two components over 6 genes, dense factors so ubiquitous selection fires
    let mut lambda = DMatrix::zeros(6, 2);
    for i in 0..3 {
        lambda[(i, 0)] = 1.0;
        lambda[(i + 3, 1)] = 1.5;
    }
    let x = DMatrix::from_fn(2, 8, |k, j| 1.0 + 0.1 * (k as f64) + 0.05 * (j as f64));
    let mut state = build_state(lambda, x);
    for cov in &mut state.factor.x_cov {
        *cov = DMatrix::identity(2, 2) * 0.125;
    }
    let gene_ids: Vec<String> = (1..=6).map(|i| format!("g{i}")).collect();
    let spec = NetworkSpec { net_type: NetType::Ubiquitous, ..Default::default() };
    let net = run_edges(&state, &[], None, &spec, &gene_ids).unwrap();
    assert_eq!(net.components, vec![0, 1]);
    assert_eq!(net.genes, (0..6).collect::<Vec<_>>());
    assert_eq!(net.edges.len(), 15);
    assert!(net.edges.iter().all(|e| e.gene_a < e.gene_b && e.replication == 1));
    assert!(net.edges.windows(2).all(|w| (&w[0].gene_a, &w[0].gene_b)
        <= (&w[1].gene_a, &w[1].gene_b)));
    assert_eq!(net.model, Some(EdgeFitModel::Threshold { abs_threshold: 0.2 }));
    // sum of per-sample posterior covariances couples genes within a block:
    // sigma_AA = 8 * 0.125 * I, so within-block pcor clears the fallback bar
    let within: Vec<&EdgeRecord> = net
        .edges
        .iter()
        .filter(|e| {
            let ia: usize = e.gene_a[1..].parse().unwrap();
            let ib: usize = e.gene_b[1..].parse().unwrap();
            (ia <= 3) == (ib <= 3)
        })
        .collect();
    assert_eq!(within.len(), 6);
    assert!(within.iter().all(|e| e.probability == 1.0), "{within:?}");
}

// the file-driven entry point (loadings, factors, summed covariance, noise)
// must reproduce the in-memory pipeline exactly
#[test]
fn parts_pipeline_matches_state_pipeline() {
    let mut rng = StdRng::seed_from_u64(6021);
    let lambda = DMatrix::from_fn(8, 3, |_, _| {
        if rng.random::<f64>() < 0.5 { rng.random_range(-2.0..2.0) } else { 0.0 }
    });
    let x = DMatrix::from_fn(3, 10, |_, _| rng.random_range(0.5..2.0));
    let mut state = build_state(lambda, x);
    for cov in &mut state.factor.x_cov {
        *cov = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.3 } else { 0.01 });
    }
    let gene_ids: Vec<String> = (0..8).map(|i| format!("g{i}")).collect();
    let spec = NetworkSpec { net_type: NetType::Ubiquitous, ..Default::default() };

    let from_state = run_edges(&state, &[], None, &spec, &gene_ids).unwrap();
    let parts = RunParts::from_state(&state);
    let from_parts = run_edges_from_parts(&parts, &[], None, &spec, &gene_ids).unwrap();
    assert_eq!(from_state, from_parts);
    assert!(!from_state.edges.is_empty());

    // shape validation names the inconsistency
    let mut bad = parts.clone();
    bad.psi = DVector::from_element(7, 1.0);
    assert!(matches!(
        run_edges_from_parts(&bad, &[], None, &spec, &gene_ids),
        Err(NetworkError::DimensionMismatch(_))
    ));
}

#[test]
fn unstable_components_are_excluded_from_the_run() {
    let lambda = DMatrix::from_element(3, 1, 1.0);
    let x = DMatrix::from_element(1, 4, 1.0);
    let state = build_state(lambda, x);
    let gene_ids = vec!["g1".into(), "g2".into(), "g3".into()];
    let trace = vec![
        trace_entry(1, vec![0], vec![3], vec![4]),
        trace_entry(2, vec![0], vec![3], vec![100]),
    ];
    let spec = NetworkSpec {
        net_type: NetType::Ubiquitous,
        stability_window: Some(StabilityWindow::new(1, 2, 50)),
        ..Default::default()
    };
    let net = run_edges(&state, &trace, None, &spec, &gene_ids).unwrap();
    assert!(net.edges.is_empty());
    assert!(net.components.is_empty());
}
