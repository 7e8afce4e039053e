//! Log-density helpers shared by the Gibbs sampler and the variational
//! updates, including the sparse-vs-dense evidence ratio for one component.

use crate::types::ModelError;
use statrs::function::gamma::ln_gamma;

pub(crate) fn ln_normal_var(x: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - x * x / (2.0 * var)
}

pub(crate) fn ln_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Log odds that one component column is sparse rather than dense:
/// sum over entries of the local-scale evidence (Gaussian at its own theta
/// plus the gamma chain terms) against the shared dense scale, plus the
/// mixture-weight terms supplied by the caller (log pi for the sampler,
/// digamma expectations for the variational fitter).
#[allow(clippy::too_many_arguments)]
pub(crate) fn indicator_log_odds(
    lambda_col: &[f64],
    theta_col: &[f64],
    delta_col: &[f64],
    phi: f64,
    a: f64,
    b: f64,
    ln_pi: f64,
    ln_one_minus_pi: f64,
) -> Result<f64, ModelError> {
    let mut l1 = ln_pi;
    let mut l0 = ln_one_minus_pi;
    for (i, ((&lam, &th), &de)) in
        lambda_col.iter().zip(theta_col).zip(delta_col).enumerate()
    {
        l1 += ln_normal_var(lam, th) + ln_gamma_pdf(th, a, de) + ln_gamma_pdf(de, b, phi);
        l0 += ln_normal_var(lam, phi);
        if l1.is_nan() || l0.is_nan() {
            return Err(ModelError::NonFinite {
                what: "sparse/dense log odds".into(),
                index: i,
            });
        }
    }
    Ok(l1 - l0)
}
