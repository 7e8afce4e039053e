//! Gene co-expression networks from fitted components.
//!
//! A fitted model yields networks in four steps: drop components whose
//! support is still drifting late in the run (stability filter), pick the
//! components tied to a covariate pattern (specific / differential /
//! ubiquitous), assemble a low-rank-plus-diagonal gene covariance from the
//! selected columns and invert it for partial correlations, then score each
//! gene pair with a null/signal mixture and aggregate edges across
//! independent runs by replication count.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::types::{support, ModelState};
use crate::vem::{diag_condition_estimate, IterationTrace};
use crate::wilcoxon::{wilcoxon_rank_sum, WilcoxonError};

pub const DEFAULT_WILCOXON_P: f64 = 1e-10;
pub const DEFAULT_EDGE_PROB_THRESHOLD: f64 = 0.8;
pub const DEFAULT_REPLICATION: usize = 10;
pub const DEFAULT_MAX_CHANGE: usize = 50;
pub const DEFAULT_SUPPORT_EPS: f64 = 1e-5;
/// Below this many gene pairs the mixture fit is unreliable; a hard
/// threshold on |pcor| is used instead.
pub const FALLBACK_MIN_EDGES: usize = 50;
pub const DEFAULT_FALLBACK_ABS: f64 = 0.2;

/// Fraction of edges (by |pcor| quantile) treated as pure null when fitting
/// the null shape.
const CENTRAL_MASS: f64 = 0.5;
/// Search range for the null effective degrees of freedom.
const KAPPA_RANGE: (f64, f64) = (1.5, 1e7);

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("trace has no entry for iteration {iteration}")]
    MissingCheckpoint { iteration: usize },
    #[error("expected {expected} covariate labels, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("selected components load on no genes")]
    EmptyGeneSubset,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("covariance factorization failed (diagonal condition estimate {condition_estimate:.3e})")]
    Factorization { condition_estimate: f64 },
    #[error("partial correlation {value} at index {index} is not inside (-1, 1)")]
    PcorOutOfRange { index: usize, value: f64 },
    #[error(transparent)]
    Wilcoxon(#[from] WilcoxonError),
}

/// Per-sample class labels aligned to the sample order of the data matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateLabels {
    pub labels: Vec<String>,
}

impl CovariateLabels {
    pub fn new(labels: Vec<String>) -> Self {
        Self { labels }
    }

    fn check_len(&self, n: usize) -> Result<(), NetworkError> {
        if self.labels.len() == n {
            Ok(())
        } else {
            Err(NetworkError::LabelCount { expected: n, got: self.labels.len() })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetType {
    /// Factor support lies entirely inside one covariate class.
    SubsetSpecific,
    /// Factor values differ in rank between two classes.
    SubsetDifferential,
    /// Factor support covers every sample.
    Ubiquitous,
}

/// Which late-run support change discards a component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StabilityRule {
    /// Discard when the gene count or the sample count moved too much
    /// (stricter reading; default).
    #[default]
    EitherExceeds,
    /// Discard only when both counts moved too much.
    BothExceed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StabilityWindow {
    pub checkpoint_a: usize,
    pub checkpoint_b: usize,
    pub max_change: usize,
    pub rule: StabilityRule,
}

impl StabilityWindow {
    pub fn new(checkpoint_a: usize, checkpoint_b: usize, max_change: usize) -> Self {
        Self { checkpoint_a, checkpoint_b, max_change, rule: StabilityRule::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub net_type: NetType,
    /// Required for [`NetType::SubsetSpecific`].
    pub target_class: Option<String>,
    /// Required for [`NetType::SubsetDifferential`].
    pub class_pair: Option<(String, String)>,
    pub wilcoxon_p_threshold: f64,
    /// Rank test on all factor values instead of only those above
    /// `support_eps` (each class still needs two usable values).
    pub use_all_factor_values: bool,
    /// Per-run edges below this probability are dropped before counting.
    pub edge_prob_threshold: f64,
    /// Edges kept in at least this many runs survive the ensemble.
    pub replication_threshold: usize,
    pub stability_window: Option<StabilityWindow>,
    /// Magnitude above which a loading or factor entry counts as support.
    pub support_eps: f64,
    /// |pcor| cutoff used when there are too few edges for the mixture fit.
    pub fallback_abs_threshold: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            net_type: NetType::Ubiquitous,
            target_class: None,
            class_pair: None,
            wilcoxon_p_threshold: DEFAULT_WILCOXON_P,
            use_all_factor_values: false,
            edge_prob_threshold: DEFAULT_EDGE_PROB_THRESHOLD,
            replication_threshold: DEFAULT_REPLICATION,
            stability_window: None,
            support_eps: DEFAULT_SUPPORT_EPS,
            fallback_abs_threshold: DEFAULT_FALLBACK_ABS,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |msg: &str| Err(NetworkError::InvalidSpec(msg.into()));
        if !(self.wilcoxon_p_threshold > 0.0 && self.wilcoxon_p_threshold <= 1.0) {
            return bad("wilcoxon_p_threshold must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.edge_prob_threshold) {
            return bad("edge_prob_threshold must be in [0, 1]");
        }
        if self.replication_threshold == 0 {
            return bad("replication_threshold must be at least 1");
        }
        if !(self.support_eps.is_finite() && self.support_eps >= 0.0) {
            return bad("support_eps must be finite and nonnegative");
        }
        if !(self.fallback_abs_threshold > 0.0 && self.fallback_abs_threshold < 1.0) {
            return bad("fallback_abs_threshold must be in (0, 1)");
        }
        match self.net_type {
            NetType::SubsetSpecific if self.target_class.is_none() => {
                bad("subset-specific networks need a target class")
            }
            NetType::SubsetDifferential => match &self.class_pair {
                None => bad("differential networks need a class pair"),
                Some((a, b)) if a == b => bad("class pair must name two distinct classes"),
                Some(_) => Ok(()),
            },
            _ => Ok(()),
        }?;
        if let Some(w) = &self.stability_window {
            if w.checkpoint_a >= w.checkpoint_b {
                return bad("stability checkpoints must satisfy a < b");
            }
        }
        Ok(())
    }
}

/// One gene pair with its evidence. `gene_a < gene_b` canonically; per-run
/// lists carry `replication = 1` until the ensemble counts them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub gene_a: String,
    pub gene_b: String,
    pub partial_correlation: f64,
    pub probability: f64,
    pub replication: usize,
}

/// Components whose gene and sample support counts settled between two
/// checkpoints. Ids absent from either checkpoint are dropped.
pub fn stability_filter(
    trace: &[IterationTrace],
    window: &StabilityWindow,
) -> Result<Vec<u32>, NetworkError> {
    if window.checkpoint_a >= window.checkpoint_b {
        return Err(NetworkError::InvalidSpec(
            "stability checkpoints must satisfy a < b".into(),
        ));
    }
    let lookup = |iteration: usize| {
        trace
            .iter()
            .find(|t| t.iteration == iteration)
            .ok_or(NetworkError::MissingCheckpoint { iteration })
    };
    let at_a = lookup(window.checkpoint_a)?;
    let at_b = lookup(window.checkpoint_b)?;
    let early: HashMap<u32, (usize, usize)> = at_a
        .component_ids
        .iter()
        .enumerate()
        .map(|(k, &id)| (id, (at_a.gene_counts[k], at_a.sample_counts[k])))
        .collect();
    let mut retained = Vec::new();
    for (k, &id) in at_b.component_ids.iter().enumerate() {
        let Some(&(g_early, s_early)) = early.get(&id) else { continue };
        let g_change = at_b.gene_counts[k].abs_diff(g_early);
        let s_change = at_b.sample_counts[k].abs_diff(s_early);
        let discard = match window.rule {
            StabilityRule::EitherExceeds => {
                g_change > window.max_change || s_change > window.max_change
            }
            StabilityRule::BothExceed => {
                g_change > window.max_change && s_change > window.max_change
            }
        };
        if !discard {
            retained.push(id);
        }
    }
    Ok(retained)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Column indices of the selected components.
    pub indices: Vec<usize>,
    /// Components skipped because a class had too few usable values.
    pub warnings: Vec<String>,
}

/// Components matching the covariate pattern asked for by `spec`.
pub fn select_components(
    state: &ModelState,
    labels: Option<&CovariateLabels>,
    spec: &NetworkSpec,
) -> Result<Selection, NetworkError> {
    select_from_parts(&state.factor.x_mean, &state.component_ids, labels, spec)
}

fn select_from_parts(
    x_mean: &DMatrix<f64>,
    component_ids: &[u32],
    labels: Option<&CovariateLabels>,
    spec: &NetworkSpec,
) -> Result<Selection, NetworkError> {
    spec.validate()?;
    let n = x_mean.ncols();
    let k = x_mean.nrows();
    let need_labels = !matches!(spec.net_type, NetType::Ubiquitous);
    let labels = match (need_labels, labels) {
        (true, None) => {
            return Err(NetworkError::InvalidSpec(
                "this network type needs covariate labels".into(),
            ))
        }
        (true, Some(l)) => {
            l.check_len(n)?;
            Some(&l.labels)
        }
        (false, l) => {
            if let Some(l) = l {
                l.check_len(n)?;
            }
            None
        }
    };

    let mut indices = Vec::new();
    let mut warnings = Vec::new();
    for comp in 0..k {
        let values: Vec<f64> = x_mean.row(comp).iter().copied().collect();
        let sup = support(&values, spec.support_eps);
        let selected = match spec.net_type {
            NetType::Ubiquitous => sup.len() == n && n > 0,
            NetType::SubsetSpecific => {
                let target = spec.target_class.as_deref().expect("validated");
                let labels = labels.expect("validated");
                !sup.is_empty() && sup.iter().all(|&j| labels[j] == target)
            }
            NetType::SubsetDifferential => {
                let (ca, cb) = spec.class_pair.as_ref().expect("validated");
                let labels = labels.expect("validated");
                let class_values = |class: &str| -> Vec<f64> {
                    values
                        .iter()
                        .zip(labels)
                        .filter(|(v, l)| {
                            l.as_str() == class
                                && (spec.use_all_factor_values || v.abs() > spec.support_eps)
                        })
                        .map(|(v, _)| *v)
                        .collect()
                };
                let x = class_values(ca);
                let y = class_values(cb);
                if x.len() < 2 || y.len() < 2 {
                    warnings.push(format!(
                        "component {} skipped: classes have {} and {} usable factor values",
                        component_ids[comp],
                        x.len(),
                        y.len()
                    ));
                    false
                } else {
                    wilcoxon_rank_sum(&x, &y)? <= spec.wilcoxon_p_threshold
                }
            }
        };
        if selected {
            indices.push(comp);
        }
    }
    Ok(Selection { indices, warnings })
}

/// Covariance over `gene_subset`: Lambda_A Sigma_AA Lambda_A' + diag(psi),
/// all restricted to the subset rows. Symmetric positive-definite whenever
/// `sigma_aa` is positive semidefinite and `psi` is positive.
pub fn build_covariance(
    lambda_a: &DMatrix<f64>,
    sigma_aa: &DMatrix<f64>,
    psi: &DVector<f64>,
    gene_subset: &[usize],
) -> Result<DMatrix<f64>, NetworkError> {
    if gene_subset.is_empty() {
        return Err(NetworkError::EmptyGeneSubset);
    }
    let p = lambda_a.nrows();
    let m = lambda_a.ncols();
    if sigma_aa.nrows() != m || sigma_aa.ncols() != m {
        return Err(NetworkError::DimensionMismatch(format!(
            "factor covariance is {}x{}, expected {m}x{m}",
            sigma_aa.nrows(),
            sigma_aa.ncols()
        )));
    }
    if psi.len() != p {
        return Err(NetworkError::DimensionMismatch(format!(
            "noise vector has length {}, expected {p}",
            psi.len()
        )));
    }
    if let Some(&bad) = gene_subset.iter().find(|&&g| g >= p) {
        return Err(NetworkError::DimensionMismatch(format!(
            "gene index {bad} out of range for {p} genes"
        )));
    }
    let g = gene_subset.len();
    let mut lam = DMatrix::zeros(g, m);
    for (row, &gene) in gene_subset.iter().enumerate() {
        lam.row_mut(row).copy_from(&lambda_a.row(gene));
    }
    let mut omega = &lam * sigma_aa * lam.transpose();
    // exact symmetry despite rounding in the triple product
    for i in 0..g {
        omega[(i, i)] += psi[gene_subset[i]];
        for j in 0..i {
            let avg = 0.5 * (omega[(i, j)] + omega[(j, i)]);
            omega[(i, j)] = avg;
            omega[(j, i)] = avg;
        }
    }
    Ok(omega)
}

/// Partial correlations from a positive-definite covariance: invert, then
/// rho_ij = -prec_ij / sqrt(prec_ii prec_jj), with unit diagonal.
pub fn partial_correlations(omega: &DMatrix<f64>) -> Result<DMatrix<f64>, NetworkError> {
    let chol = omega.clone().cholesky().ok_or_else(|| NetworkError::Factorization {
        condition_estimate: diag_condition_estimate(omega),
    })?;
    let prec = chol.inverse();
    let g = prec.nrows();
    let mut rho = DMatrix::identity(g, g);
    for i in 0..g {
        for j in 0..i {
            let denom = (prec[(i, i)] * prec[(j, j)]).sqrt();
            // clamp guards the open interval against roundoff at
            // near-perfect correlation
            let r = (-prec[(i, j)] / denom).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
            rho[(i, j)] = r;
            rho[(j, i)] = r;
        }
    }
    Ok(rho)
}

/// How the edge probabilities were produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EdgeFitModel {
    /// Null/signal mixture: null shape `(1 - rho^2)^((kappa-3)/2)` with
    /// weight `eta0`, total density from a kernel estimate.
    Mixture { kappa: f64, eta0: f64 },
    /// Too few edges for the mixture; probability is 1 iff |pcor| reaches
    /// the threshold.
    Threshold { abs_threshold: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFit {
    /// Probability of being a real edge, aligned to the input order.
    pub probabilities: Vec<f64>,
    pub model: EdgeFitModel,
}

/// Log of the normalizing constant of the null shape over (-1, 1):
/// Beta(1/2, (kappa-1)/2).
fn ln_null_norm(kappa: f64) -> f64 {
    0.5 * std::f64::consts::PI.ln() + ln_gamma((kappa - 1.0) / 2.0) - ln_gamma(kappa / 2.0)
}

/// Simpson integral of the unnormalized null shape over [-t, t].
fn null_mass_unnorm(kappa: f64, t: f64) -> f64 {
    let c = (kappa - 3.0) / 2.0;
    let f = |u: f64| (c * (-u * u).ln_1p()).exp();
    let panels = 4096;
    let h = t / panels as f64;
    let mut acc = f(0.0) + f(t);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(i as f64 * h);
    }
    // even integrand: integral over [-t, t] is twice [0, t]
    2.0 * acc * h / 3.0
}

/// Truncated maximum likelihood for the null degrees of freedom on the
/// central values: maximizes sum c*ln(1-rho^2) - m*ln(mass) over kappa.
/// Concave in kappa (log-linear family), so golden section suffices.
fn fit_kappa(central_sq_sum: f64, m: usize, t: f64) -> f64 {
    let objective = |ln_k: f64| {
        let kappa = ln_k.exp();
        (kappa - 3.0) / 2.0 * central_sq_sum - m as f64 * null_mass_unnorm(kappa, t).ln()
    };
    let (mut lo, mut hi) = (KAPPA_RANGE.0.ln(), KAPPA_RANGE.1.ln());
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = objective(x1);
    let mut f2 = objective(x2);
    for _ in 0..120 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = objective(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = objective(x1);
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Pool-adjacent-violators pass making `values` nondecreasing along `order`;
/// entries with identical keys are pooled first so the result does not
/// depend on input order.
fn isotonic_by_key(keys: &[f64], values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).expect("finite keys"));
    // (key, weight, mean, member indices)
    let mut blocks: Vec<(f64, f64, f64, Vec<usize>)> = Vec::new();
    for &idx in &order {
        match blocks.last_mut() {
            Some(b) if b.0 == keys[idx] => {
                b.2 = (b.2 * b.1 + values[idx]) / (b.1 + 1.0);
                b.1 += 1.0;
                b.3.push(idx);
            }
            _ => blocks.push((keys[idx], 1.0, values[idx], vec![idx])),
        }
    }
    let mut stack: Vec<(f64, f64, Vec<usize>)> = Vec::new();
    for (_, w, mean, members) in blocks {
        let mut block = (w, mean, members);
        while let Some(prev) = stack.last() {
            if prev.1 <= block.1 {
                break;
            }
            let prev = stack.pop().expect("nonempty");
            let w = prev.0 + block.0;
            let mean = (prev.0 * prev.1 + block.0 * block.1) / w;
            let mut members = prev.2;
            members.extend(block.2);
            block = (w, mean, members);
        }
        stack.push(block);
    }
    let mut out = vec![0.0; keys.len()];
    for (_, mean, members) in stack {
        for idx in members {
            out[idx] = mean;
        }
    }
    out
}

/// Edge probabilities for a list of partial correlations.
///
/// With enough edges, fits the two-component mixture: null shape
/// `(1 - rho^2)^((kappa-3)/2)` estimated on the central half of the |pcor|
/// distribution (truncated likelihood), null weight `eta0` matched to the
/// central mass and capped at 1, total density by a Gaussian kernel estimate
/// with Silverman bandwidth. Probability is `1 - eta0 f0 / fhat`, clamped to
/// [0, 1] and made nondecreasing in |pcor| by an isotonic pass. Fewer than
/// [`FALLBACK_MIN_EDGES`] values fall back to thresholding |pcor|.
/// Output depends only on the multiset of inputs, not their order.
pub fn edge_probabilities(
    pcors: &[f64],
    fallback_abs_threshold: f64,
) -> Result<EdgeFit, NetworkError> {
    for (index, &value) in pcors.iter().enumerate() {
        if !(value.is_finite() && value.abs() < 1.0) {
            return Err(NetworkError::PcorOutOfRange { index, value });
        }
    }
    let n = pcors.len();
    let mut sorted_abs: Vec<f64> = pcors.iter().map(|v| v.abs()).collect();
    sorted_abs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let threshold_fit = |t: f64| EdgeFit {
        probabilities: pcors.iter().map(|v| f64::from(v.abs() >= t)).collect(),
        model: EdgeFitModel::Threshold { abs_threshold: t },
    };
    if n < FALLBACK_MIN_EDGES {
        return Ok(threshold_fit(fallback_abs_threshold));
    }
    let central_target = ((CENTRAL_MASS * n as f64).ceil() as usize).clamp(1, n);
    let t = sorted_abs[central_target - 1];
    if t < 1e-6 {
        // half the edges sit numerically at zero: no usable null shape
        return Ok(threshold_fit(fallback_abs_threshold));
    }
    let m = sorted_abs.partition_point(|&v| v <= t);
    let central_sq_sum: f64 = sorted_abs[..m].iter().map(|v| (-v * v).ln_1p()).sum();
    let kappa = fit_kappa(central_sq_sum, m, t);
    let ln_norm = ln_null_norm(kappa);
    let central_prob = (null_mass_unnorm(kappa, t).ln() - ln_norm).exp();
    let eta0 = (m as f64 / n as f64 / central_prob).min(1.0);

    // Silverman bandwidth from the raw pcors
    let mut sorted: Vec<f64> = pcors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let sd = (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let iqr = sorted[3 * n / 4] - sorted[n / 4];
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = (0.9 * spread * (n as f64).powf(-0.2)).max(1e-9);

    let c = (kappa - 3.0) / 2.0;
    let raw: Vec<f64> = pcors
        .iter()
        .map(|&v| {
            // summation over the sorted copy keeps the kernel sum, and with
            // it the whole fit, permutation invariant
            let density = sorted
                .iter()
                .map(|&d| (-0.5 * ((v - d) / h).powi(2)).exp())
                .sum::<f64>()
                / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
            let null = (c * (-v * v).ln_1p() - ln_norm).exp();
            (1.0 - eta0 * null / density).clamp(0.0, 1.0)
        })
        .collect();
    let keys: Vec<f64> = pcors.iter().map(|v| v.abs()).collect();
    Ok(EdgeFit {
        probabilities: isotonic_by_key(&keys, &raw),
        model: EdgeFitModel::Mixture { kappa, eta0 },
    })
}

/// Everything one run contributes to the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct RunNetwork {
    /// One record per gene pair among the covered genes, `replication = 1`.
    pub edges: Vec<EdgeRecord>,
    /// Ids of the components the network was built from.
    pub components: Vec<u32>,
    /// Row indices of the genes covered by those components.
    pub genes: Vec<usize>,
    pub warnings: Vec<String>,
    pub model: Option<EdgeFitModel>,
}

impl RunNetwork {
    fn empty(warnings: Vec<String>) -> Self {
        Self { edges: Vec::new(), components: Vec::new(), genes: Vec::new(), warnings, model: None }
    }
}

/// The pieces of a fitted run the network pipeline needs. Fit directories
/// persist the summed factor covariance rather than the per-sample
/// covariances, so this is the unit the file-driven path reconstructs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunParts {
    pub lambda: DMatrix<f64>,
    pub x_mean: DMatrix<f64>,
    /// sum over samples of the per-column factor posterior covariances
    pub x_cov_sum: DMatrix<f64>,
    pub psi: DVector<f64>,
    pub component_ids: Vec<u32>,
}

impl RunParts {
    pub fn from_state(state: &ModelState) -> Self {
        let k = state.n_components();
        let mut x_cov_sum = DMatrix::zeros(k, k);
        for cov in &state.factor.x_cov {
            x_cov_sum += cov;
        }
        Self {
            lambda: state.loading.lambda.clone(),
            x_mean: state.factor.x_mean.clone(),
            x_cov_sum,
            psi: state.noise.psi.clone(),
            component_ids: state.component_ids.clone(),
        }
    }

    fn validate(&self) -> Result<(), NetworkError> {
        let (p, k) = self.lambda.shape();
        if self.x_mean.nrows() != k
            || self.x_cov_sum.shape() != (k, k)
            || self.psi.len() != p
            || self.component_ids.len() != k
        {
            return Err(NetworkError::DimensionMismatch(format!(
                "loadings {p}x{k}, factors {}x{}, covariance sum {}x{}, {} noise terms, {} ids",
                self.x_mean.nrows(),
                self.x_mean.ncols(),
                self.x_cov_sum.nrows(),
                self.x_cov_sum.ncols(),
                self.psi.len(),
                self.component_ids.len()
            )));
        }
        Ok(())
    }
}

/// Full single-run pipeline: stability filter, component selection,
/// covariance assembly over the union of loading supports, partial
/// correlations, and edge probabilities. Selecting no component, or
/// components that load on fewer than two genes, yields an empty network
/// rather than an error.
pub fn run_edges(
    state: &ModelState,
    trace: &[IterationTrace],
    labels: Option<&CovariateLabels>,
    spec: &NetworkSpec,
    gene_ids: &[String],
) -> Result<RunNetwork, NetworkError> {
    run_edges_from_parts(&RunParts::from_state(state), trace, labels, spec, gene_ids)
}

/// [`run_edges`] on pre-extracted run pieces, for callers reading fit
/// directories back from disk.
pub fn run_edges_from_parts(
    parts: &RunParts,
    trace: &[IterationTrace],
    labels: Option<&CovariateLabels>,
    spec: &NetworkSpec,
    gene_ids: &[String],
) -> Result<RunNetwork, NetworkError> {
    spec.validate()?;
    parts.validate()?;
    let p = parts.lambda.nrows();
    if gene_ids.len() != p {
        return Err(NetworkError::DimensionMismatch(format!(
            "{} gene ids for {p} rows",
            gene_ids.len()
        )));
    }
    let selection = select_from_parts(&parts.x_mean, &parts.component_ids, labels, spec)?;
    let mut selected = selection.indices;
    if let Some(window) = &spec.stability_window {
        let stable = stability_filter(trace, window)?;
        selected.retain(|&k| stable.contains(&parts.component_ids[k]));
    }
    if selected.is_empty() {
        return Ok(RunNetwork::empty(selection.warnings));
    }

    let mut gene_subset: Vec<usize> = Vec::new();
    for &k in &selected {
        let column: Vec<f64> = parts.lambda.column(k).iter().copied().collect();
        gene_subset.extend(support(&column, spec.support_eps));
    }
    gene_subset.sort_unstable();
    gene_subset.dedup();
    if gene_subset.len() < 2 {
        return Ok(RunNetwork::empty(selection.warnings));
    }

    let lambda_a = parts.lambda.select_columns(selected.iter());
    let sigma_aa = parts
        .x_cov_sum
        .select_rows(selected.iter())
        .select_columns(selected.iter());

    let omega = build_covariance(&lambda_a, &sigma_aa, &parts.psi, &gene_subset)?;
    let rho = partial_correlations(&omega)?;

    let g = gene_subset.len();
    let mut pcors = Vec::with_capacity(g * (g - 1) / 2);
    for i in 0..g {
        for j in (i + 1)..g {
            pcors.push(rho[(i, j)]);
        }
    }
    let fit = edge_probabilities(&pcors, spec.fallback_abs_threshold)?;

    let mut edges = Vec::with_capacity(pcors.len());
    let mut idx = 0;
    for i in 0..g {
        for j in (i + 1)..g {
            let mut gene_a = gene_ids[gene_subset[i]].clone();
            let mut gene_b = gene_ids[gene_subset[j]].clone();
            if gene_a > gene_b {
                std::mem::swap(&mut gene_a, &mut gene_b);
            }
            edges.push(EdgeRecord {
                gene_a,
                gene_b,
                partial_correlation: pcors[idx],
                probability: fit.probabilities[idx],
                replication: 1,
            });
            idx += 1;
        }
    }
    edges.sort_by(|a, b| (&a.gene_a, &a.gene_b).cmp(&(&b.gene_a, &b.gene_b)));
    Ok(RunNetwork {
        edges,
        components: selected.iter().map(|&k| parts.component_ids[k]).collect(),
        genes: gene_subset,
        warnings: selection.warnings,
        model: Some(fit.model),
    })
}

/// Aggregate per-run edge lists: keep edges at or above the probability
/// threshold, count in how many runs each pair survives, and return pairs
/// reaching the replication threshold with their best probability. Results
/// do not depend on run order; within a run duplicate pairs count once.
pub fn ensemble_edges(per_run: &[Vec<EdgeRecord>], spec: &NetworkSpec) -> Vec<EdgeRecord> {
    let mut tally: HashMap<(String, String), (usize, f64, f64)> = HashMap::new();
    for run in per_run {
        let mut seen: HashMap<(String, String), (f64, f64)> = HashMap::new();
        for edge in run {
            if edge.probability < spec.edge_prob_threshold || edge.gene_a == edge.gene_b {
                continue;
            }
            let key = if edge.gene_a <= edge.gene_b {
                (edge.gene_a.clone(), edge.gene_b.clone())
            } else {
                (edge.gene_b.clone(), edge.gene_a.clone())
            };
            let cand = (edge.probability, edge.partial_correlation);
            seen.entry(key)
                .and_modify(|best| *best = if cand > *best { cand } else { *best })
                .or_insert(cand);
        }
        for (key, (prob, pcor)) in seen {
            tally
                .entry(key)
                .and_modify(|(count, best_prob, best_pcor)| {
                    *count += 1;
                    if (prob, pcor) > (*best_prob, *best_pcor) {
                        *best_prob = prob;
                        *best_pcor = pcor;
                    }
                })
                .or_insert((1, prob, pcor));
        }
    }
    let mut edges: Vec<EdgeRecord> = tally
        .into_iter()
        .filter(|(_, (count, _, _))| *count >= spec.replication_threshold)
        .map(|((gene_a, gene_b), (count, prob, pcor))| EdgeRecord {
            gene_a,
            gene_b,
            partial_correlation: pcor,
            probability: prob,
            replication: count,
        })
        .collect();
    edges.sort_by(|a, b| (&a.gene_a, &a.gene_b).cmp(&(&b.gene_a, &b.gene_b)));
    edges
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isotonic_pools_violations() {
        let keys = [1.0, 2.0, 3.0, 4.0];
        let vals = [0.1, 0.5, 0.3, 0.9];
        let out = isotonic_by_key(&keys, &vals);
        assert_eq!(out, vec![0.1, 0.4, 0.4, 0.9]);
    }

    #[test]
    fn isotonic_averages_tied_keys() {
        let keys = [2.0, 1.0, 2.0];
        let vals = [0.8, 0.1, 0.2];
        let out = isotonic_by_key(&keys, &vals);
        assert_eq!(out, vec![0.5, 0.1, 0.5]);
    }

    #[test]
    fn null_norm_matches_arcsine_case() {
        // kappa = 3: flat shape on (-1, 1), norm = 2
        assert!((ln_null_norm(3.0) - 2.0_f64.ln()).abs() < 1e-12);
        assert!((null_mass_unnorm(3.0, 0.5) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn spec_validation_catches_misuse() {
        let mut spec = NetworkSpec { net_type: NetType::SubsetSpecific, ..Default::default() };
        assert!(spec.validate().is_err());
        spec.target_class = Some("tumor".into());
        assert!(spec.validate().is_ok());
        spec.class_pair = Some(("a".into(), "a".into()));
        spec.net_type = NetType::SubsetDifferential;
        assert!(spec.validate().is_err());
    }
}
