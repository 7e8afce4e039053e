//! Variational EM fitter.
//!
//! Each iteration runs the loading block (row solves, entry scales, column
//! scales, loading indicators, shared chain tops, mixture expectation), the
//! mirrored factor block, and the noise update, in that order, then prunes
//! components whose loading column or factor row has collapsed to zero.
//! All updates are MAP or closed-form expectations: given the warm-started
//! state the fit is fully deterministic.
//!
//! Loading rows are mutually independent given the factor side, as are
//! factor columns given the loading side, so those two inner loops run on a
//! thread pool. Every shared reduction (sums over delta, tau, covariance
//! accumulation) is computed sequentially in index order, which keeps the
//! output bit-identical across thread counts.

use crate::dens::{indicator_log_odds, sigmoid};
use crate::mcmc::{self, McmcError};
use crate::types::{
    classify_component, support, Bicluster, ComponentClass, FactorSide, Hyperparameters,
    ModelError, ModelState, SideClass, FLOOR,
};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use statrs::function::gamma::digamma;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VemError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    WarmStart(#[from] McmcError),
    #[error("invalid fit config: {0}")]
    InvalidConfig(String),
    #[error(
        "singular system for {what} {index} at iteration {iteration} \
         (diagonal condition estimate {condition:.3e})"
    )]
    Singular { what: &'static str, index: usize, iteration: usize, condition: f64 },
    #[error("variance decomposition undefined: model has no nonzero component")]
    AllZeroModel,
}

/// Linear-solve failure carrying a cheap conditioning diagnostic
/// (ratio of extreme diagonal entries of the precision matrix).
#[derive(Debug, Clone, Copy)]
pub struct SingularSystem {
    pub condition_estimate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitConfig {
    pub k_init: usize,
    pub max_iterations: usize,
    pub warm_start_sweeps: usize,
    pub prune_eps: f64,
    pub classification_threshold: f64,
    /// relative residual-norm change below which the fit is reported
    /// converged; iteration always continues to max_iterations
    pub convergence_tol: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k_init: 50,
            max_iterations: 5000,
            warm_start_sweeps: 100,
            prune_eps: 1e-5,
            classification_threshold: 0.9,
            convergence_tol: 1e-6,
            seed: 0,
            threads: 1,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), VemError> {
        if self.k_init == 0 {
            return Err(VemError::InvalidConfig("k_init must be at least 1".into()));
        }
        if !(self.prune_eps >= 0.0 && self.prune_eps.is_finite()) {
            return Err(VemError::InvalidConfig("prune_eps must be finite and >= 0".into()));
        }
        if !(self.classification_threshold > 0.5 && self.classification_threshold <= 1.0) {
            return Err(VemError::InvalidConfig(
                "classification_threshold must lie in (0.5, 1]".into(),
            ));
        }
        if self.threads == 0 {
            return Err(VemError::InvalidConfig("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-iteration snapshot recorded after pruning.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub active_components: usize,
    pub residual_norm: f64,
    /// stable component ids, parallel to the two count vectors
    pub component_ids: Vec<u32>,
    pub gene_counts: Vec<usize>,
    pub sample_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub state: ModelState,
    pub trace: Vec<IterationTrace>,
    pub classes: Vec<ComponentClass>,
    /// per-component share of explained variance; empty when no component
    /// survived pruning
    pub pve: Vec<f64>,
    /// first iteration whose relative residual-norm change fell below
    /// convergence_tol
    pub converged_at: Option<usize>,
    /// number of hyperparameter ratio updates floored on a negative
    /// numerator (possible for chain shapes < 1/2)
    pub negative_numerator_floors: u64,
}

impl FitResult {
    /// Biclusters implied by the fit: components classified sparse on both
    /// sides, with gene and sample supports read at `eps`. Components whose
    /// support is empty at this threshold are omitted.
    pub fn biclusters(&self, eps: f64) -> Vec<Bicluster> {
        (0..self.state.n_components())
            .filter(|&k| {
                self.classes[k].loading == SideClass::Sparse
                    && self.classes[k].factor == SideClass::Sparse
            })
            .map(|k| {
                let genes: Vec<f64> = self.state.loading.lambda.column(k).iter().copied().collect();
                let samples: Vec<f64> = self.state.factor.x_mean.row(k).iter().copied().collect();
                Bicluster {
                    component_id: self.state.component_ids[k],
                    genes: support(&genes, eps),
                    samples: support(&samples, eps),
                }
            })
            .filter(|b| !b.genes.is_empty() && !b.samples.is_empty())
            .collect()
    }
}

// ---- scalar updates --------------------------------------------------------

/// Mode of the entry-scale conditional GIG(shape - 1/2, 2·rate, m2),
/// where m2 is the squared loading (or the factor second moment).
/// For rate below 1e-8 and shape < 3/2 the closed form cancels badly, so the
/// exact small-rate limit m2/(3 - 2·shape) is used instead.
pub fn update_entry_scale(m2: f64, rate: f64, shape: f64) -> f64 {
    let value = if rate < 1e-8 && shape < 1.5 {
        m2 / (3.0 - 2.0 * shape)
    } else {
        let s = 2.0 * shape - 3.0;
        let root = (s * s + 8.0 * m2 * rate).sqrt();
        if s <= 0.0 {
            // rationalized form of (s + root)/(4 rate): the direct difference
            // cancels catastrophically when 8 m2 rate << s^2, and the noise
            // would break monotonicity in the rate
            2.0 * m2 / (root - s)
        } else {
            (s + root) / (4.0 * rate)
        }
    };
    value.max(FLOOR)
}

/// Local loading variance: mode of its GIG conditional.
pub fn update_theta(lambda: f64, delta: f64, a: f64) -> f64 {
    update_entry_scale(lambda * lambda, delta, a)
}

/// Rate below theta: gamma-mode ratio, floored.
pub fn update_delta(theta: f64, phi: f64, a: f64, b: f64) -> f64 {
    ((a + b - 1.0) / (theta + phi)).max(FLOOR)
}

/// Shared root of the column-scale stationarity condition, covering both
/// mixture branches: H = count·b·z + c - 1 - (count/2)(1 - z),
/// M = 2(z·sum_rates + top_rate), T = second-moment sum; the update is
/// (H + sqrt(H² + M·T)) / M, floored.
pub fn column_scale_mode(
    z: f64,
    count: usize,
    b: f64,
    c: f64,
    sum_rates: f64,
    top_rate: f64,
    second_moment_sum: f64,
) -> f64 {
    let m = count as f64;
    let h = m * b * z + c - 1.0 - 0.5 * m * (1.0 - z);
    let big_m = 2.0 * (z * sum_rates + top_rate);
    let t = second_moment_sum;
    ((h + (h * h + big_m * t).sqrt()) / big_m).max(FLOOR)
}

/// Column scale of the loading mixture for component k.
pub fn update_phi(column: &[f64], deltas: &[f64], tau: f64, z: f64, b: f64, c: f64) -> f64 {
    let sum_delta: f64 = deltas.iter().sum();
    let t: f64 = column.iter().map(|l| l * l).sum();
    column_scale_mode(z, column.len(), b, c, sum_delta, tau, t)
}

/// Gamma-mode ratio update; `floored_negative` marks a negative numerator
/// (legal input for shapes below 1/2, pinned to the scale floor).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioUpdate {
    pub value: f64,
    pub floored_negative: bool,
}

pub fn map_ratio(numerator: f64, denominator: f64) -> RatioUpdate {
    RatioUpdate {
        value: (numerator / denominator).max(FLOOR),
        floored_negative: numerator < 0.0,
    }
}

/// Updates the chain above the column scales in place: each tau_k (or
/// kappa_k), then the shared eta (chi), then gamma (varphi). Returns the
/// number of ratio updates floored on a negative numerator.
#[allow(clippy::too_many_arguments)]
pub fn update_column_hypers(
    phi_or_omega: &DVector<f64>,
    tau_or_kappa: &mut DVector<f64>,
    eta_or_chi: &mut f64,
    gamma_or_varphi: &mut f64,
    c: f64,
    d: f64,
    e: f64,
    f: f64,
    top_rate: f64,
) -> u64 {
    let mut floors = 0;
    let k = phi_or_omega.len();
    for kk in 0..k {
        let r = map_ratio(c + d - 1.0, phi_or_omega[kk] + *eta_or_chi);
        tau_or_kappa[kk] = r.value;
        floors += r.floored_negative as u64;
    }
    let r = map_ratio(k as f64 * d + e - 1.0, *gamma_or_varphi + tau_or_kappa.sum());
    *eta_or_chi = r.value;
    floors += r.floored_negative as u64;
    let r = map_ratio(e + f - 1.0, *eta_or_chi + top_rate);
    *gamma_or_varphi = r.value;
    floors += r.floored_negative as u64;
    floors
}

/// Probability that the loading column is sparse given current scales.
#[allow(clippy::too_many_arguments)]
pub fn expect_z(
    lambda_col: &[f64],
    theta_col: &[f64],
    delta_col: &[f64],
    phi: f64,
    a: f64,
    b: f64,
    ln_pi: f64,
    ln_one_minus_pi: f64,
) -> Result<f64, ModelError> {
    let odds = indicator_log_odds(
        lambda_col,
        theta_col,
        delta_col,
        phi,
        a,
        b,
        ln_pi,
        ln_one_minus_pi,
    )?;
    Ok(sigmoid(odds))
}

/// Mirror of expect_z for a factor row.
#[allow(clippy::too_many_arguments)]
pub fn expect_o(
    x_row: &[f64],
    sigma_row: &[f64],
    rho_row: &[f64],
    omega: f64,
    a_x: f64,
    b_x: f64,
    ln_pi: f64,
    ln_one_minus_pi: f64,
) -> Result<f64, ModelError> {
    expect_z(x_row, sigma_row, rho_row, omega, a_x, b_x, ln_pi, ln_one_minus_pi)
}

/// Geometric-mean expectations of the mixture weight under its beta
/// posterior with the indicator expectations plugged in as counts.
pub fn expect_ln_pi(z_sum: f64, k: usize, alpha: f64, beta: f64) -> (f64, f64) {
    let total = digamma(k as f64 + alpha + beta);
    (
        digamma(z_sum + alpha) - total,
        digamma(k as f64 - z_sum + beta) - total,
    )
}

pub(crate) fn diag_condition_estimate(precision: &DMatrix<f64>) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0_f64;
    for i in 0..precision.nrows() {
        let v = precision[(i, i)];
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves the ridge system for one loading row. `sum_xxt` is
/// ⟨X⟩⟨X⟩ᵀ + Σ_j x_cov_j; the per-component prior precision blends the
/// sparse and dense scales by the indicator expectation.
#[allow(clippy::too_many_arguments)]
pub fn update_loading_row(
    y_row: &[f64],
    x_mean: &DMatrix<f64>,
    sum_xxt: &DMatrix<f64>,
    psi_i: f64,
    theta_row: &[f64],
    phi: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<DVector<f64>, SingularSystem> {
    let k = x_mean.nrows();
    let mut precision = sum_xxt / psi_i;
    for kk in 0..k {
        precision[(kk, kk)] += z[kk] / theta_row[kk] + (1.0 - z[kk]) / phi[kk];
    }
    let y = DVector::from_column_slice(y_row);
    let rhs = (x_mean * y) / psi_i;
    let cond = diag_condition_estimate(&precision);
    let chol = Cholesky::new(precision)
        .ok_or(SingularSystem { condition_estimate: cond })?;
    Ok(chol.solve(&rhs))
}

/// Posterior mean and covariance of one factor column. The caller supplies
/// ΛᵀΨ⁻¹Λ and the column of ΛᵀΨ⁻¹Y, which are constant across columns
/// within a sweep.
pub fn update_factor_column(
    lt_psi_l: &DMatrix<f64>,
    lt_psi_y_col: &DVector<f64>,
    sigma_col: &[f64],
    omega: &DVector<f64>,
    o: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), SingularSystem> {
    let k = lt_psi_l.nrows();
    let mut precision = lt_psi_l.clone();
    for kk in 0..k {
        precision[(kk, kk)] += o[kk] / sigma_col[kk] + (1.0 - o[kk]) / omega[kk];
    }
    let cond = diag_condition_estimate(&precision);
    let chol = Cholesky::new(precision)
        .ok_or(SingularSystem { condition_estimate: cond })?;
    let mean = chol.solve(lt_psi_y_col);
    let cov = chol.inverse();
    Ok((mean, cov))
}

/// Updates sigma and rho for every entry (using second moments with the
/// fresh column covariances), then each omega_k, in place. Returns the
/// count of negative-numerator floors from the rho updates.
pub fn update_sigma_rho_omega(factor: &mut FactorSide, hyper: &Hyperparameters) -> u64 {
    let (k, n) = factor.sigma.shape();
    let mut floors = 0;
    for j in 0..n {
        for kk in 0..k {
            let m2 = factor.x_mean[(kk, j)].powi(2) + factor.x_cov[j][(kk, kk)];
            let s = update_entry_scale(m2, factor.rho[(kk, j)], hyper.a_x);
            factor.sigma[(kk, j)] = s;
            let r = map_ratio(hyper.a_x + hyper.b_x - 1.0, s + factor.omega[kk]);
            factor.rho[(kk, j)] = r.value;
            floors += r.floored_negative as u64;
        }
    }
    for kk in 0..k {
        let sum_rho = factor.rho.row(kk).sum();
        let t: f64 = (0..n)
            .map(|j| factor.x_mean[(kk, j)].powi(2) + factor.x_cov[j][(kk, kk)])
            .sum();
        factor.omega[kk] =
            column_scale_mode(factor.o[kk], n, hyper.b_x, hyper.c_x, sum_rho, factor.kappa[kk], t);
    }
    floors
}

/// Noise variances from the expected residual quadratic form:
/// psi_i = (|y_i|² - 2 y_i·(Λ_i⟨X⟩) + Λ_i(⟨X⟩⟨X⟩ᵀ + Σcov)Λ_iᵀ + 2)/(n + 2).
pub fn update_psi(
    y: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    x_mean: &DMatrix<f64>,
    sum_xxt: &DMatrix<f64>,
) -> DVector<f64> {
    let n = y.ncols() as f64;
    let fitted = lambda * x_mean;
    DVector::from_fn(y.nrows(), |i, _| {
        let yy = y.row(i).norm_squared();
        let cross: f64 = y.row(i).dot(&fitted.row(i));
        let lam = lambda.row(i);
        let quad = (lam * sum_xxt).dot(&lam);
        ((yy - 2.0 * cross + quad + 2.0) / (n + 2.0)).max(FLOOR)
    })
}

/// Removes components whose loading column or factor row is entirely within
/// `prune_eps` of zero, shrinking every component-indexed field. Returns the
/// removed stable ids.
pub fn prune_components(state: &mut ModelState, prune_eps: f64) -> Vec<u32> {
    let k = state.n_components();
    let mut removed = Vec::new();
    for kk in (0..k).rev() {
        let max_loading = state.loading.lambda.column(kk).amax();
        let max_factor = state.factor.x_mean.row(kk).amax();
        if max_loading <= prune_eps || max_factor <= prune_eps {
            removed.push(state.component_ids[kk]);
            remove_component(state, kk);
        }
    }
    removed
}

fn remove_component(state: &mut ModelState, kk: usize) {
    let loading = &mut state.loading;
    loading.lambda = loading.lambda.clone().remove_column(kk);
    loading.theta = loading.theta.clone().remove_column(kk);
    loading.delta = loading.delta.clone().remove_column(kk);
    loading.phi = loading.phi.clone().remove_row(kk);
    loading.tau = loading.tau.clone().remove_row(kk);
    loading.z = loading.z.clone().remove_row(kk);
    let factor = &mut state.factor;
    factor.x_mean = factor.x_mean.clone().remove_row(kk);
    factor.sigma = factor.sigma.clone().remove_row(kk);
    factor.rho = factor.rho.clone().remove_row(kk);
    factor.omega = factor.omega.clone().remove_row(kk);
    factor.kappa = factor.kappa.clone().remove_row(kk);
    factor.o = factor.o.clone().remove_row(kk);
    for cov in &mut factor.x_cov {
        *cov = cov.clone().remove_row(kk).remove_column(kk);
    }
    state.component_ids.remove(kk);
}

/// Per-component share of explained variance:
/// |Λ_k|² Σ_j⟨x_kj²⟩ normalized over components.
pub fn pve(state: &ModelState) -> Result<Vec<f64>, VemError> {
    let k = state.n_components();
    let sum_xxt = sum_x_second_moment(&state.factor);
    let mut numerators = Vec::with_capacity(k);
    for kk in 0..k {
        let l2 = state.loading.lambda.column(kk).norm_squared();
        numerators.push(l2 * sum_xxt[(kk, kk)]);
    }
    let total: f64 = numerators.iter().sum();
    if !(total > 0.0) {
        return Err(VemError::AllZeroModel);
    }
    Ok(numerators.into_iter().map(|v| v / total).collect())
}

/// ⟨X⟩⟨X⟩ᵀ + Σ_j x_cov_j, accumulated in column order.
pub fn sum_x_second_moment(factor: &FactorSide) -> DMatrix<f64> {
    let k = factor.x_mean.nrows();
    let mut sum = &factor.x_mean * factor.x_mean.transpose();
    for cov in &factor.x_cov {
        sum += cov;
    }
    debug_assert_eq!(sum.nrows(), k);
    sum
}

fn floor_scales(state: &mut ModelState) {
    for v in state
        .loading
        .theta
        .iter_mut()
        .chain(state.loading.delta.iter_mut())
        .chain(state.loading.phi.iter_mut())
        .chain(state.loading.tau.iter_mut())
        .chain(state.factor.sigma.iter_mut())
        .chain(state.factor.rho.iter_mut())
        .chain(state.factor.omega.iter_mut())
        .chain(state.factor.kappa.iter_mut())
        .chain(state.noise.psi.iter_mut())
    {
        *v = v.max(FLOOR);
    }
    state.loading.eta = state.loading.eta.max(FLOOR);
    state.loading.gamma = state.loading.gamma.max(FLOOR);
    state.factor.chi = state.factor.chi.max(FLOOR);
    state.factor.varphi = state.factor.varphi.max(FLOOR);
}

fn count_above(it: impl Iterator<Item = f64>, eps: f64) -> usize {
    it.filter(|v| v.abs() > eps).count()
}

fn check_finite(y: &DMatrix<f64>) -> Result<(), VemError> {
    for (idx, v) in y.iter().enumerate() {
        if !v.is_finite() {
            return Err(VemError::Model(ModelError::NonFinite {
                what: "data matrix".into(),
                index: idx,
            }));
        }
    }
    Ok(())
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool, VemError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| VemError::InvalidConfig(format!("thread pool: {e}")))
}

/// Everything a paused fit needs beyond its inputs (data, hyperparameters,
/// config); cloning these fields between sweeps and resuming later replays
/// the remaining sweeps bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FitterSnapshot {
    /// completed sweeps
    pub iteration: usize,
    pub state: ModelState,
    pub trace: Vec<IterationTrace>,
    /// carried mixture-weight expectations (ln pi, ln(1 - pi)), loading side
    pub ln_pi: (f64, f64),
    pub ln_pi_x: (f64, f64),
    pub negative_numerator_floors: u64,
    pub converged_at: Option<usize>,
    pub prev_residual: Option<f64>,
    /// warm-start RNG stream position; sweeps draw nothing, so this is
    /// recorded for faithfulness rather than replay
    pub rng_word_pos: u128,
}

/// Incremental model fitter. [`Fitter::new`] validates inputs and runs the
/// Gibbs warm start, each [`Fitter::step`] performs one variational sweep
/// (loading block, factor block, noise update, pruning), and
/// [`Fitter::finish`] classifies the surviving components. Sweeps are
/// deterministic, so a fit may be snapshotted between sweeps and resumed
/// elsewhere with identical results.
pub struct Fitter<'a> {
    y: &'a DMatrix<f64>,
    hyper: &'a Hyperparameters,
    config: FitConfig,
    pool: rayon::ThreadPool,
    state: ModelState,
    ln_pi: (f64, f64),
    ln_pi_x: (f64, f64),
    sum_xxt: DMatrix<f64>,
    trace: Vec<IterationTrace>,
    negative_numerator_floors: u64,
    converged_at: Option<usize>,
    prev_residual: Option<f64>,
    iteration: usize,
    rng_word_pos: u128,
}

impl<'a> Fitter<'a> {
    pub fn new(
        y: &'a DMatrix<f64>,
        hyper: &'a Hyperparameters,
        config: &FitConfig,
    ) -> Result<Self, VemError> {
        config.validate()?;
        hyper.validate()?;
        check_finite(y)?;
        let pool = build_pool(config.threads)?;
        let (p, n) = y.shape();
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut chain = mcmc::init_state(p, n, config.k_init, hyper, &mut rng);
        for _ in 0..config.warm_start_sweeps {
            mcmc::sweep(y, &mut chain, hyper, &mut rng)?;
        }
        let mut state = chain.model;
        floor_scales(&mut state);
        let sum_xxt = sum_x_second_moment(&state.factor);
        Ok(Self {
            y,
            hyper,
            config: *config,
            pool,
            state,
            // mixture-weight expectations start from the sampled weights
            ln_pi: (chain.pi.ln(), (-chain.pi).ln_1p()),
            ln_pi_x: (chain.pi_x.ln(), (-chain.pi_x).ln_1p()),
            sum_xxt,
            trace: Vec::with_capacity(config.max_iterations),
            negative_numerator_floors: 0,
            converged_at: None,
            prev_residual: None,
            iteration: 0,
            rng_word_pos: rng.get_word_pos(),
        })
    }

    /// Rebuilds a fitter from a snapshot taken against the same data,
    /// hyperparameters, and config. Only shape consistency can be checked
    /// here; supplying different inputs yields a well-formed but different
    /// fit.
    pub fn resume(
        y: &'a DMatrix<f64>,
        hyper: &'a Hyperparameters,
        config: &FitConfig,
        snapshot: FitterSnapshot,
    ) -> Result<Self, VemError> {
        config.validate()?;
        hyper.validate()?;
        check_finite(y)?;
        snapshot.state.validate()?;
        let (p, n) = y.shape();
        if snapshot.state.loading.lambda.nrows() != p
            || snapshot.state.factor.x_mean.ncols() != n
        {
            return Err(VemError::InvalidConfig(format!(
                "snapshot is for a {}x{} matrix, data is {p}x{n}",
                snapshot.state.loading.lambda.nrows(),
                snapshot.state.factor.x_mean.ncols()
            )));
        }
        if snapshot.iteration > config.max_iterations {
            return Err(VemError::InvalidConfig(format!(
                "snapshot already ran {} of {} iterations",
                snapshot.iteration, config.max_iterations
            )));
        }
        let pool = build_pool(config.threads)?;
        let sum_xxt = sum_x_second_moment(&snapshot.state.factor);
        Ok(Self {
            y,
            hyper,
            config: *config,
            pool,
            state: snapshot.state,
            ln_pi: snapshot.ln_pi,
            ln_pi_x: snapshot.ln_pi_x,
            sum_xxt,
            trace: snapshot.trace,
            negative_numerator_floors: snapshot.negative_numerator_floors,
            converged_at: snapshot.converged_at,
            prev_residual: snapshot.prev_residual,
            iteration: snapshot.iteration,
            rng_word_pos: snapshot.rng_word_pos,
        })
    }

    pub fn snapshot(&self) -> FitterSnapshot {
        FitterSnapshot {
            iteration: self.iteration,
            state: self.state.clone(),
            trace: self.trace.clone(),
            ln_pi: self.ln_pi,
            ln_pi_x: self.ln_pi_x,
            negative_numerator_floors: self.negative_numerator_floors,
            converged_at: self.converged_at,
            prev_residual: self.prev_residual,
            rng_word_pos: self.rng_word_pos,
        }
    }

    /// Completed sweeps.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn trace(&self) -> &[IterationTrace] {
        &self.trace
    }

    /// Runs all remaining sweeps.
    pub fn run(&mut self) -> Result<(), VemError> {
        while self.step()? {}
        Ok(())
    }

    /// One variational sweep; returns false once max_iterations is reached.
    pub fn step(&mut self) -> Result<bool, VemError> {
        if self.iteration >= self.config.max_iterations {
            return Ok(false);
        }
        let iteration = self.iteration + 1;
        let y = self.y;
        let hyper = self.hyper;
        let config = self.config;
        let pool = &self.pool;
        let state = &mut self.state;
        let sum_xxt = &mut self.sum_xxt;
        let (p, n) = y.shape();
        let mut floors = 0_u64;
        let mut ln_pi = self.ln_pi;
        let mut ln_pi_x = self.ln_pi_x;

        let k = state.n_components();
        if k > 0 {
            // loading block: independent row solves with their entry scales
            let rows: Vec<(DVector<f64>, Vec<f64>, Vec<f64>)> = pool.install(|| {
                (0..p)
                    .into_par_iter()
                    .map(|i| {
                        let y_row: Vec<f64> = y.row(i).iter().copied().collect();
                        let theta_row: Vec<f64> =
                            state.loading.theta.row(i).iter().copied().collect();
                        let delta_row: Vec<f64> =
                            state.loading.delta.row(i).iter().copied().collect();
                        let lam = update_loading_row(
                            &y_row,
                            &state.factor.x_mean,
                            &sum_xxt,
                            state.noise.psi[i],
                            &theta_row,
                            &state.loading.phi,
                            &state.loading.z,
                        )
                        .map_err(|s| (i, s.condition_estimate))?;
                        let mut theta_new = vec![0.0; k];
                        let mut delta_new = vec![0.0; k];
                        for kk in 0..k {
                            theta_new[kk] = update_theta(lam[kk], delta_row[kk], hyper.a);
                            delta_new[kk] = update_delta(
                                theta_new[kk],
                                state.loading.phi[kk],
                                hyper.a,
                                hyper.b,
                            );
                        }
                        Ok((lam, theta_new, delta_new))
                    })
                    .collect::<Result<_, (usize, f64)>>()
            })
            .map_err(|(index, condition)| VemError::Singular {
                what: "loading row",
                index,
                iteration,
                condition,
            })?;
            for (i, (lam, theta_new, delta_new)) in rows.into_iter().enumerate() {
                state.loading.lambda.row_mut(i).copy_from(&lam.transpose());
                for kk in 0..k {
                    state.loading.theta[(i, kk)] = theta_new[kk];
                    state.loading.delta[(i, kk)] = delta_new[kk];
                }
            }
            for kk in 0..k {
                let col: Vec<f64> = state.loading.lambda.column(kk).iter().copied().collect();
                let deltas: Vec<f64> = state.loading.delta.column(kk).iter().copied().collect();
                state.loading.phi[kk] = update_phi(
                    &col,
                    &deltas,
                    state.loading.tau[kk],
                    state.loading.z[kk],
                    hyper.b,
                    hyper.c,
                );
                let r = map_ratio(
                    hyper.c + hyper.d - 1.0,
                    state.loading.phi[kk] + state.loading.eta,
                );
                state.loading.tau[kk] = r.value;
                floors += r.floored_negative as u64;
                let theta_col: Vec<f64> =
                    state.loading.theta.column(kk).iter().copied().collect();
                state.loading.z[kk] = expect_z(
                    &col,
                    &theta_col,
                    &deltas,
                    state.loading.phi[kk],
                    hyper.a,
                    hyper.b,
                    ln_pi.0,
                    ln_pi.1,
                )?;
            }
            let r = map_ratio(
                k as f64 * hyper.d + hyper.e - 1.0,
                state.loading.gamma + state.loading.tau.sum(),
            );
            state.loading.eta = r.value;
            floors += r.floored_negative as u64;
            let r = map_ratio(hyper.e + hyper.f - 1.0, state.loading.eta + hyper.nu);
            state.loading.gamma = r.value;
            floors += r.floored_negative as u64;
            ln_pi = expect_ln_pi(state.loading.z.sum(), k, hyper.alpha, hyper.beta);

            // factor block: independent column posteriors with entry scales
            let mut scaled = state.loading.lambda.clone();
            for i in 0..p {
                let w = 1.0 / state.noise.psi[i];
                scaled.row_mut(i).scale_mut(w);
            }
            let lt_psi_l = state.loading.lambda.transpose() * &scaled;
            let lt_psi_y = scaled.transpose() * y;
            type ColUpdate = (DVector<f64>, DMatrix<f64>, Vec<f64>, Vec<f64>, u64);
            let cols: Vec<ColUpdate> = pool.install(|| {
                (0..n)
                    .into_par_iter()
                    .map(|j| {
                        let sigma_col: Vec<f64> =
                            state.factor.sigma.column(j).iter().copied().collect();
                        let rho_col: Vec<f64> =
                            state.factor.rho.column(j).iter().copied().collect();
                        let rhs = lt_psi_y.column(j).into_owned();
                        let (mean, cov) = update_factor_column(
                            &lt_psi_l,
                            &rhs,
                            &sigma_col,
                            &state.factor.omega,
                            &state.factor.o,
                        )
                        .map_err(|s| (j, s.condition_estimate))?;
                        let mut sigma_new = vec![0.0; k];
                        let mut rho_new = vec![0.0; k];
                        let mut col_floors = 0_u64;
                        for kk in 0..k {
                            let m2 = mean[kk] * mean[kk] + cov[(kk, kk)];
                            sigma_new[kk] =
                                update_entry_scale(m2, rho_col[kk], hyper.a_x);
                            let r = map_ratio(
                                hyper.a_x + hyper.b_x - 1.0,
                                sigma_new[kk] + state.factor.omega[kk],
                            );
                            rho_new[kk] = r.value;
                            col_floors += r.floored_negative as u64;
                        }
                        Ok((mean, cov, sigma_new, rho_new, col_floors))
                    })
                    .collect::<Result<Vec<_>, (usize, f64)>>()
            })
            .map_err(|(index, condition)| VemError::Singular {
                what: "factor column",
                index,
                iteration,
                condition,
            })?;
            for (j, (mean, cov, sigma_new, rho_new, col_floors)) in cols.into_iter().enumerate() {
                floors += col_floors;
                state.factor.x_mean.set_column(j, &mean);
                state.factor.x_cov[j] = cov;
                for kk in 0..k {
                    state.factor.sigma[(kk, j)] = sigma_new[kk];
                    state.factor.rho[(kk, j)] = rho_new[kk];
                }
            }
            for kk in 0..k {
                let sum_rho = state.factor.rho.row(kk).sum();
                let t: f64 = (0..n)
                    .map(|j| {
                        state.factor.x_mean[(kk, j)].powi(2) + state.factor.x_cov[j][(kk, kk)]
                    })
                    .sum();
                state.factor.omega[kk] = column_scale_mode(
                    state.factor.o[kk],
                    n,
                    hyper.b_x,
                    hyper.c_x,
                    sum_rho,
                    state.factor.kappa[kk],
                    t,
                );
                let r = map_ratio(
                    hyper.c_x + hyper.d_x - 1.0,
                    state.factor.omega[kk] + state.factor.chi,
                );
                state.factor.kappa[kk] = r.value;
                floors += r.floored_negative as u64;
                let x_row: Vec<f64> = state.factor.x_mean.row(kk).iter().copied().collect();
                let sigma_row: Vec<f64> = state.factor.sigma.row(kk).iter().copied().collect();
                let rho_row: Vec<f64> = state.factor.rho.row(kk).iter().copied().collect();
                state.factor.o[kk] = expect_o(
                    &x_row,
                    &sigma_row,
                    &rho_row,
                    state.factor.omega[kk],
                    hyper.a_x,
                    hyper.b_x,
                    ln_pi_x.0,
                    ln_pi_x.1,
                )?;
            }
            let r = map_ratio(
                k as f64 * hyper.d_x + hyper.e_x - 1.0,
                state.factor.varphi + state.factor.kappa.sum(),
            );
            state.factor.chi = r.value;
            floors += r.floored_negative as u64;
            let r = map_ratio(hyper.e_x + hyper.f_x - 1.0, state.factor.chi + hyper.xi);
            state.factor.varphi = r.value;
            floors += r.floored_negative as u64;
            ln_pi_x = expect_ln_pi(state.factor.o.sum(), k, hyper.alpha_x, hyper.beta_x);
        }

        // noise
        *sum_xxt = sum_x_second_moment(&state.factor);
        state.noise.psi = update_psi(y, &state.loading.lambda, &state.factor.x_mean, sum_xxt);

        let removed = prune_components(state, config.prune_eps);
        if !removed.is_empty() {
            *sum_xxt = sum_x_second_moment(&state.factor);
        }

        let residual = (y - &state.loading.lambda * &state.factor.x_mean).norm();
        if let Some(prev) = self.prev_residual {
            let change = if prev > 0.0 {
                (residual - prev).abs() / prev
            } else {
                (residual - prev).abs()
            };
            if self.converged_at.is_none() && change < config.convergence_tol {
                self.converged_at = Some(iteration);
            }
        }
        self.prev_residual = Some(residual);

        let k_now = state.n_components();
        self.trace.push(IterationTrace {
            iteration,
            active_components: k_now,
            residual_norm: residual,
            component_ids: state.component_ids.clone(),
            gene_counts: (0..k_now)
                .map(|kk| {
                    count_above(state.loading.lambda.column(kk).iter().copied(), config.prune_eps)
                })
                .collect(),
            sample_counts: (0..k_now)
                .map(|kk| {
                    count_above(state.factor.x_mean.row(kk).iter().copied(), config.prune_eps)
                })
                .collect(),
        });

        self.ln_pi = ln_pi;
        self.ln_pi_x = ln_pi_x;
        self.negative_numerator_floors += floors;
        self.iteration = iteration;
        Ok(true)
    }

    /// Consumes the fitter, classifying surviving components.
    pub fn finish(self) -> Result<FitResult, VemError> {
        let Self {
            state,
            trace,
            config,
            converged_at,
            negative_numerator_floors,
            ..
        } = self;
        let classes = (0..state.n_components())
            .map(|kk| {
                classify_component(
                    state.loading.z[kk],
                    state.factor.o[kk],
                    config.classification_threshold,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pve_values = if state.n_components() > 0 { pve(&state)? } else { Vec::new() };
        Ok(FitResult {
            state,
            trace,
            classes,
            pve: pve_values,
            converged_at,
            negative_numerator_floors,
        })
    }
}

/// Fits the model: Gibbs warm start followed by max_iterations variational
/// sweeps with pruning. Deterministic given (data, hyper, config).
pub fn fit(
    y: &DMatrix<f64>,
    hyper: &Hyperparameters,
    config: &FitConfig,
) -> Result<FitResult, VemError> {
    let mut fitter = Fitter::new(y, hyper, config)?;
    fitter.run()?;
    fitter.finish()
}
