//! Gibbs sampler over the full model, used to warm-start the variational
//! fitter and to validate the shrinkage hierarchy by simulation.
//!
//! One sweep resamples, in order: loading rows, their entry scales, the
//! per-column scales and indicators with the mixture weight, the factor
//! columns and their mirrored chain, and the noise variances. Entry scales
//! (theta, delta / sigma, rho) touch only their own row or column, so
//! drawing them grouped after the Gaussian block realizes exactly the same
//! Markov kernel as interleaving them per row.

use crate::dens::{indicator_log_odds, sigmoid};
use crate::gig::{sample_gig, GigError, GigParams};
use crate::types::{
    FactorSide, Hyperparameters, LoadingSide, ModelError, ModelState, NoiseModel, FLOOR,
};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum McmcError {
    #[error(transparent)]
    Gig(#[from] GigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("posterior precision for {what} {index} is not positive definite")]
    SingularPrecision { what: &'static str, index: usize },
    #[error("invalid chain config: {0}")]
    InvalidConfig(String),
}

/// Shape/rate parameterization: density ∝ x^(shape-1) exp(-rate·x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Inverse gamma with density ∝ x^(-shape-1) exp(-rate/x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGammaParams {
    pub shape: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainConfig {
    pub k_init: usize,
    pub sweeps: usize,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), McmcError> {
        if self.k_init == 0 {
            return Err(McmcError::InvalidConfig("k_init must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sampler state: the shared model plus the two mixture weights, which the
/// variational fitter never stores (it uses digamma expectations instead).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub model: ModelState,
    pub pi: f64,
    pub pi_x: f64,
}

// ---- scalar conditionals -------------------------------------------------
// The factor side reuses these with its own hyperparameters: sigma plays
// theta's role, rho delta's, omega phi's, kappa tau's, chi eta's, and
// varphi gamma's, with n in place of p.

/// Entry scale of a sparse column given its loading: GIG(a - 1/2, 2·delta, lambda²).
pub fn theta_conditional(a: f64, delta: f64, lambda: f64) -> Result<GigParams, GigError> {
    GigParams::new(a - 0.5, 2.0 * delta, lambda * lambda)
}

/// Rate below theta: Ga(a + b, theta + phi).
pub fn delta_conditional(a: f64, b: f64, theta: f64, phi: f64) -> GammaParams {
    GammaParams { shape: a + b, rate: theta + phi }
}

/// Column scale when the column is sparse: Ga(p·b + c, sum(delta) + tau).
pub fn phi_sparse_conditional(p: usize, b: f64, c: f64, sum_delta: f64, tau: f64) -> GammaParams {
    GammaParams { shape: p as f64 * b + c, rate: sum_delta + tau }
}

/// Column scale when the column is dense: GIG(c - p/2, 2·tau, sum(lambda²)).
pub fn phi_dense_conditional(
    p: usize,
    c: f64,
    tau: f64,
    sum_lambda_sq: f64,
) -> Result<GigParams, GigError> {
    GigParams::new(c - p as f64 / 2.0, 2.0 * tau, sum_lambda_sq)
}

/// Rate below phi: Ga(c + d, phi + eta).
pub fn tau_conditional(c: f64, d: f64, phi: f64, eta: f64) -> GammaParams {
    GammaParams { shape: c + d, rate: phi + eta }
}

/// Shared rate below all tau: Ga(K·d + e, gamma + sum(tau)).
pub fn eta_conditional(k: usize, d: f64, e: f64, gamma: f64, sum_tau: f64) -> GammaParams {
    GammaParams { shape: k as f64 * d + e, rate: gamma + sum_tau }
}

/// Top of the chain: Ga(e + f, eta + nu).
pub fn gamma_conditional(e: f64, f: f64, eta: f64, nu: f64) -> GammaParams {
    GammaParams { shape: e + f, rate: eta + nu }
}

/// Conjugate mixture weight: Beta(alpha + #sparse, beta + #dense).
pub fn pi_conditional(alpha: f64, beta: f64, n_sparse: usize, k: usize) -> BetaParams {
    BetaParams {
        alpha: alpha + n_sparse as f64,
        beta: beta + (k - n_sparse) as f64,
    }
}

/// Per-gene noise variance: InvGamma(n/2 + 1, sum of squared residuals / 2 + 1).
pub fn psi_conditional(n: usize, sum_sq_resid: f64) -> InvGammaParams {
    InvGammaParams { shape: n as f64 / 2.0 + 1.0, rate: sum_sq_resid / 2.0 + 1.0 }
}

// ---- draws ----------------------------------------------------------------

/// Gamma draw under the shape/rate convention used throughout the chain.
pub fn draw_gamma<R: Rng + ?Sized>(params: GammaParams, rng: &mut R) -> f64 {
    let g = Gamma::new(params.shape, 1.0 / params.rate)
        .expect("gamma conditional shapes/rates are positive by construction");
    g.sample(rng).max(f64::MIN_POSITIVE)
}

pub fn draw_beta<R: Rng + ?Sized>(params: BetaParams, rng: &mut R) -> f64 {
    let b = Beta::new(params.alpha, params.beta)
        .expect("beta conditional parameters are positive by construction");
    b.sample(rng)
}

pub fn draw_inv_gamma<R: Rng + ?Sized>(params: InvGammaParams, rng: &mut R) -> f64 {
    let g = Gamma::new(params.shape, 1.0 / params.rate)
        .expect("inverse gamma conditional parameters are positive by construction");
    (1.0 / g.sample(rng)).max(f64::MIN_POSITIVE)
}

/// Entry scale draw handling the improper boundary: with a zero loading and
/// chain shape <= 1/2 the conditional has no normalizable spike, so the
/// draw is pinned at the scale floor.
pub fn draw_entry_scale<R: Rng + ?Sized>(
    shape: f64,
    rate_param: f64,
    value: f64,
    rng: &mut R,
) -> Result<f64, GigError> {
    if value == 0.0 && shape <= 0.5 {
        return Ok(FLOOR);
    }
    let params = theta_conditional(shape, rate_param, value)?;
    Ok(sample_gig(params, rng)?.max(f64::MIN_POSITIVE))
}

/// Draws from N(mean, P^-1) where P·mean = rhs, via the Cholesky factor of P.
pub fn sample_gaussian_precision<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    rhs: &DVector<f64>,
    rng: &mut R,
) -> Option<DVector<f64>> {
    let chol = Cholesky::new(precision.clone())?;
    let mean = chol.solve(rhs);
    let z = DVector::from_fn(rhs.len(), |_, _| rng.sample(StandardNormal));
    // P = L L^T, so L^-T z has covariance P^-1
    let dev = chol.l().transpose().solve_upper_triangular(&z)?;
    Some(mean + dev)
}

/// Draws one loading row. `xxt` is X·X^T for the current factor matrix;
/// `prior_var[k]` is theta_ik for sparse columns and phi_k for dense ones.
pub fn sample_loading_row<R: Rng + ?Sized>(
    xxt: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y_row: &[f64],
    psi_i: f64,
    prior_var: &DVector<f64>,
    rng: &mut R,
) -> Option<DVector<f64>> {
    let k = x.nrows();
    let mut precision = xxt / psi_i;
    for kk in 0..k {
        precision[(kk, kk)] += 1.0 / prior_var[kk];
    }
    let y = DVector::from_column_slice(y_row);
    let rhs = (x * y) / psi_i;
    sample_gaussian_precision(&precision, &rhs, rng)
}

/// Draws theta/delta for sparse columns, then phi (sparse or dense branch),
/// tau, eta, and gamma, in sweep order.
pub fn sample_loading_hypers<R: Rng + ?Sized>(
    loading: &mut LoadingSide,
    hyper: &Hyperparameters,
    rng: &mut R,
) -> Result<(), McmcError> {
    let (p, k) = loading.lambda.shape();
    for kk in 0..k {
        if loading.z[kk] >= 0.5 {
            for i in 0..p {
                let th = draw_entry_scale(
                    hyper.a,
                    loading.delta[(i, kk)],
                    loading.lambda[(i, kk)],
                    rng,
                )?;
                loading.theta[(i, kk)] = th;
                loading.delta[(i, kk)] = draw_gamma(
                    GammaParams {
                        shape: hyper.a + hyper.b,
                        rate: th + loading.phi[kk],
                    },
                    rng,
                );
            }
        }
    }
    for kk in 0..k {
        loading.phi[kk] = if loading.z[kk] >= 0.5 {
            let sum_delta = loading.delta.column(kk).sum();
            draw_gamma(phi_sparse_conditional(p, hyper.b, hyper.c, sum_delta, loading.tau[kk]), rng)
        } else {
            let sum_sq = loading.lambda.column(kk).norm_squared();
            if sum_sq == 0.0 && hyper.c <= p as f64 / 2.0 {
                FLOOR
            } else {
                sample_gig(phi_dense_conditional(p, hyper.c, loading.tau[kk], sum_sq)?, rng)?
                    .max(f64::MIN_POSITIVE)
            }
        };
        loading.tau[kk] =
            draw_gamma(tau_conditional(hyper.c, hyper.d, loading.phi[kk], loading.eta), rng);
    }
    let sum_tau = loading.tau.sum();
    loading.eta =
        draw_gamma(eta_conditional(k, hyper.d, hyper.e, loading.gamma, sum_tau), rng);
    loading.gamma = draw_gamma(gamma_conditional(hyper.e, hyper.f, loading.eta, hyper.nu), rng);
    Ok(())
}

/// Resamples the hard sparse/dense indicators on both sides and then their
/// conjugate mixture weights.
pub fn sample_indicators<R: Rng + ?Sized>(
    state: &mut ChainState,
    hyper: &Hyperparameters,
    rng: &mut R,
) -> Result<(), McmcError> {
    sample_loading_indicators(state, hyper, rng)?;
    sample_factor_indicators(state, hyper, rng)
}

fn clamp_weight(pi: f64) -> f64 {
    pi.clamp(1e-300, 1.0 - 1e-16)
}

fn sample_loading_indicators<R: Rng + ?Sized>(
    state: &mut ChainState,
    hyper: &Hyperparameters,
    rng: &mut R,
) -> Result<(), McmcError> {
    let loading = &mut state.model.loading;
    let k = loading.lambda.ncols();
    let ln_pi = state.pi.ln();
    let ln_one_minus = (-state.pi).ln_1p();
    let mut n_sparse = 0;
    for kk in 0..k {
        let odds = indicator_log_odds(
            loading.lambda.column(kk).as_slice(),
            loading.theta.column(kk).as_slice(),
            loading.delta.column(kk).as_slice(),
            loading.phi[kk],
            hyper.a,
            hyper.b,
            ln_pi,
            ln_one_minus,
        )?;
        let z = f64::from(rng.random::<f64>() < sigmoid(odds));
        loading.z[kk] = z;
        n_sparse += z as usize;
    }
    state.pi = clamp_weight(draw_beta(
        pi_conditional(hyper.alpha, hyper.beta, n_sparse, k),
        rng,
    ));
    Ok(())
}

fn sample_factor_indicators<R: Rng + ?Sized>(
    state: &mut ChainState,
    hyper: &Hyperparameters,
    rng: &mut R,
) -> Result<(), McmcError> {
    let factor = &mut state.model.factor;
    let k = factor.x_mean.nrows();
    let ln_pi = state.pi_x.ln();
    let ln_one_minus = (-state.pi_x).ln_1p();
    let mut n_sparse = 0;
    for kk in 0..k {
        let x_row: Vec<f64> = factor.x_mean.row(kk).iter().copied().collect();
        let sigma_row: Vec<f64> = factor.sigma.row(kk).iter().copied().collect();
        let rho_row: Vec<f64> = factor.rho.row(kk).iter().copied().collect();
        let odds = indicator_log_odds(
            &x_row,
            &sigma_row,
            &rho_row,
            factor.omega[kk],
            hyper.a_x,
            hyper.b_x,
            ln_pi,
            ln_one_minus,
        )?;
        let o = f64::from(rng.random::<f64>() < sigmoid(odds));
        factor.o[kk] = o;
        n_sparse += o as usize;
    }
    state.pi_x = clamp_weight(draw_beta(
        pi_conditional(hyper.alpha_x, hyper.beta_x, n_sparse, k),
        rng,
    ));
    Ok(())
}

/// Draws every factor column from its Gaussian conditional, then the
/// mirrored scale chain (sigma, rho, omega, kappa, chi, varphi).
pub fn sample_factor_block<R: Rng + ?Sized>(
    y: &DMatrix<f64>,
    state: &mut ChainState,
    hyper: &Hyperparameters,
    rng: &mut R,
) -> Result<(), McmcError> {
    let model = &mut state.model;
    let (p, k) = model.loading.lambda.shape();
    let n = model.factor.x_mean.ncols();
    // Lambda^T Psi^-1 Lambda and Lambda^T Psi^-1 y, fixed within the block
    let mut scaled = model.loading.lambda.clone();
    for i in 0..p {
        let w = 1.0 / model.noise.psi[i];
        scaled.row_mut(i).scale_mut(w);
    }
    let lt_psi_l = model.loading.lambda.transpose() * &scaled;
    let lt_psi_y = scaled.transpose() * y;
    for j in 0..n {
        let mut precision = lt_psi_l.clone();
        for kk in 0..k {
            let w = if model.factor.o[kk] >= 0.5 {
                model.factor.sigma[(kk, j)]
            } else {
                model.factor.omega[kk]
            };
            precision[(kk, kk)] += 1.0 / w;
        }
        let rhs = lt_psi_y.column(j).into_owned();
        let draw = sample_gaussian_precision(&precision, &rhs, rng)
            .ok_or(McmcError::SingularPrecision { what: "factor column", index: j })?;
        model.factor.x_mean.set_column(j, &draw);
    }
    for kk in 0..k {
        if model.factor.o[kk] >= 0.5 {
            for j in 0..n {
                let s = draw_entry_scale(
                    hyper.a_x,
                    model.factor.rho[(kk, j)],
                    model.factor.x_mean[(kk, j)],
                    rng,
                )?;
                model.factor.sigma[(kk, j)] = s;
                model.factor.rho[(kk, j)] = draw_gamma(
                    GammaParams {
                        shape: hyper.a_x + hyper.b_x,
                        rate: s + model.factor.omega[kk],
                    },
                    rng,
                );
            }
        }
    }
    for kk in 0..k {
        model.factor.omega[kk] = if model.factor.o[kk] >= 0.5 {
            let sum_rho = model.factor.rho.row(kk).sum();
            draw_gamma(
                phi_sparse_conditional(n, hyper.b_x, hyper.c_x, sum_rho, model.factor.kappa[kk]),
                rng,
            )
        } else {
            let sum_sq = model.factor.x_mean.row(kk).norm_squared();
            if sum_sq == 0.0 && hyper.c_x <= n as f64 / 2.0 {
                FLOOR
            } else {
                sample_gig(
                    phi_dense_conditional(n, hyper.c_x, model.factor.kappa[kk], sum_sq)?,
                    rng,
                )?
                .max(f64::MIN_POSITIVE)
            }
        };
        model.factor.kappa[kk] = draw_gamma(
            tau_conditional(hyper.c_x, hyper.d_x, model.factor.omega[kk], model.factor.chi),
            rng,
        );
    }
    let sum_kappa = model.factor.kappa.sum();
    model.factor.chi = draw_gamma(
        eta_conditional(k, hyper.d_x, hyper.e_x, model.factor.varphi, sum_kappa),
        rng,
    );
    model.factor.varphi =
        draw_gamma(gamma_conditional(hyper.e_x, hyper.f_x, model.factor.chi, hyper.xi), rng);
    Ok(())
}

/// Draws each noise variance from its inverse-gamma conditional.
pub fn sample_psi<R: Rng + ?Sized>(
    y: &DMatrix<f64>,
    state: &mut ChainState,
    rng: &mut R,
) {
    let model = &mut state.model;
    let resid = y - &model.loading.lambda * &model.factor.x_mean;
    let n = y.ncols();
    for i in 0..y.nrows() {
        let ss = resid.row(i).norm_squared();
        model.noise.psi[i] = draw_inv_gamma(psi_conditional(n, ss), rng);
    }
}

/// Draws an initial state from the priors (unit-rate gammas for every
/// scale, standard normals for loadings and factors, Bernoulli indicators
/// from freshly drawn mixture weights).
pub fn init_state<R: Rng + ?Sized>(
    p: usize,
    n: usize,
    k: usize,
    hyper: &Hyperparameters,
    rng: &mut R,
) -> ChainState {
    let ga = Gamma::new(1.0, 1.0).unwrap();
    let ga1 = |rng: &mut R| -> f64 { Distribution::<f64>::sample(&ga, rng).max(FLOOR) };
    let eta = ga1(rng);
    let gamma = ga1(rng);
    let chi = ga1(rng);
    let varphi = ga1(rng);
    let pi = clamp_weight(draw_beta(BetaParams { alpha: hyper.alpha, beta: hyper.beta }, rng));
    let pi_x = clamp_weight(draw_beta(
        BetaParams { alpha: hyper.alpha_x, beta: hyper.beta_x },
        rng,
    ));
    let psi = DVector::from_fn(p, |_, _| ga1(rng));
    let z = DVector::from_fn(k, |_, _| f64::from(rng.random::<f64>() < pi));
    let o = DVector::from_fn(k, |_, _| f64::from(rng.random::<f64>() < pi_x));
    let phi = DVector::from_fn(k, |_, _| ga1(rng));
    let tau = DVector::from_fn(k, |_, _| ga1(rng));
    let omega = DVector::from_fn(k, |_, _| ga1(rng));
    let kappa = DVector::from_fn(k, |_, _| ga1(rng));
    let lambda = DMatrix::from_fn(p, k, |_, _| rng.sample(StandardNormal));
    let theta = DMatrix::from_fn(p, k, |_, _| ga1(rng));
    let delta = DMatrix::from_fn(p, k, |_, _| ga1(rng));
    let x_mean = DMatrix::from_fn(k, n, |_, _| rng.sample(StandardNormal));
    let sigma = DMatrix::from_fn(k, n, |_, _| ga1(rng));
    let rho = DMatrix::from_fn(k, n, |_, _| ga1(rng));
    let x_cov = vec![DMatrix::zeros(k, k); n];
    ChainState {
        model: ModelState {
            loading: LoadingSide { lambda, theta, delta, phi, tau, eta, gamma, z },
            factor: FactorSide { x_mean, x_cov, sigma, rho, omega, kappa, chi, varphi, o },
            noise: NoiseModel { psi },
            component_ids: (0..k as u32).collect(),
        },
        pi,
        pi_x,
    }
}

/// One full Gibbs sweep over the state.
pub fn sweep<R: Rng + ?Sized>(
    y: &DMatrix<f64>,
    state: &mut ChainState,
    hyper: &Hyperparameters,
    rng: &mut R,
) -> Result<(), McmcError> {
    let (p, k) = state.model.loading.lambda.shape();
    let xxt = &state.model.factor.x_mean * state.model.factor.x_mean.transpose();
    for i in 0..p {
        let prior_var = DVector::from_fn(k, |kk, _| {
            if state.model.loading.z[kk] >= 0.5 {
                state.model.loading.theta[(i, kk)]
            } else {
                state.model.loading.phi[kk]
            }
        });
        let y_row: Vec<f64> = y.row(i).iter().copied().collect();
        let draw = sample_loading_row(
            &xxt,
            &state.model.factor.x_mean,
            &y_row,
            state.model.noise.psi[i],
            &prior_var,
            rng,
        )
        .ok_or(McmcError::SingularPrecision { what: "loading row", index: i })?;
        state.model.loading.lambda.row_mut(i).copy_from(&draw.transpose());
    }
    sample_loading_hypers(&mut state.model.loading, hyper, rng)?;
    sample_loading_indicators(state, hyper, rng)?;
    sample_factor_block(y, state, hyper, rng)?;
    sample_factor_indicators(state, hyper, rng)?;
    sample_psi(y, state, rng);
    Ok(())
}

/// Runs `config.sweeps` Gibbs sweeps from a fresh prior draw.
pub fn run_chain<R: Rng + ?Sized>(
    y: &DMatrix<f64>,
    hyper: &Hyperparameters,
    config: &ChainConfig,
    rng: &mut R,
) -> Result<ChainState, McmcError> {
    config.validate()?;
    hyper.validate()?;
    let mut state = init_state(y.nrows(), y.ncols(), config.k_init, hyper, rng);
    for _ in 0..config.sweeps {
        sweep(y, &mut state, hyper, rng)?;
    }
    Ok(state)
}
