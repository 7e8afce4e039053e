//! Generalized inverse Gaussian sampling.
//!
//! Density: f(x) ∝ x^(order-1) · exp(-(a·x + b/x)/2) on x > 0.
//!
//! The conditionals of the local shrinkage scales are GIG with order a - 1/2
//! (per entry) and c - p/2 or c_x - n/2 (per dense column/row), so the
//! sampler has to cover strongly negative orders and extreme a/b ratios.
//! Negative orders are handled through the reciprocal identity
//! 1/GIG(order, a, b) = GIG(-order, b, a); the remaining nonnegative-order
//! cases are split, following Hormann & Leydold, into ratio-of-uniforms with
//! and without mode shift and a three-piece envelope for the spiked regime
//! (order < 1 with sqrt(a·b) <= 1). Every envelope bounds the density by
//! construction, so acceptance is exact.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

/// Parameters of f(x) ∝ x^(order-1) · exp(-(a·x + b/x)/2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GigParams {
    pub order: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Error)]
pub enum GigError {
    #[error("invalid GIG parameters order={order}, a={a}, b={b}: {reason}")]
    InvalidParams { order: f64, a: f64, b: f64, reason: &'static str },
}

impl GigParams {
    pub fn new(order: f64, a: f64, b: f64) -> Result<Self, GigError> {
        let invalid = |reason| GigError::InvalidParams { order, a, b, reason };
        if !(order.is_finite() && a.is_finite() && b.is_finite()) {
            return Err(invalid("non-finite parameter"));
        }
        if a <= 0.0 {
            return Err(invalid("a must be positive"));
        }
        if b < 0.0 {
            return Err(invalid("b must be nonnegative"));
        }
        if b == 0.0 && order <= 0.0 {
            return Err(invalid("b = 0 requires order > 0 (gamma limit)"));
        }
        Ok(Self { order, a, b })
    }

    /// Mode of the density (unnormalized argmax).
    pub fn mode(&self) -> f64 {
        if self.b == 0.0 {
            // gamma limit: mode at (order-1)/(a/2) for order >= 1, else 0
            return if self.order >= 1.0 { 2.0 * (self.order - 1.0) / self.a } else { 0.0 };
        }
        let om = self.order - 1.0;
        if om >= 0.0 {
            (om + (om * om + self.a * self.b).sqrt()) / self.a
        } else {
            // rationalized form avoids cancellation when a*b is tiny
            self.b / ((om * om + self.a * self.b).sqrt() - om)
        }
    }
}

/// Draws one variate from the distribution described by `params`.
pub fn sample_gig<R: Rng + ?Sized>(params: GigParams, rng: &mut R) -> Result<f64, GigError> {
    let GigParams { order, a, b } = GigParams::new(params.order, params.a, params.b)?;
    if b == 0.0 {
        let g = Gamma::new(order, 2.0 / a).map_err(|_| GigError::InvalidParams {
            order,
            a,
            b,
            reason: "gamma limit rejected parameters",
        })?;
        return Ok(g.sample(rng));
    }
    if order < 0.0 {
        // reciprocal identity; the swapped parameters are valid since b > 0
        return Ok(1.0 / sample_gig(GigParams { order: -order, a: b, b: a }, rng)?);
    }
    // rescale to the two-parameter form: X = alpha * Z with
    // Z ~ f(z) ∝ z^(order-1) exp(-omega (z + 1/z) / 2)
    let alpha = (b / a).sqrt();
    let omega = (0.5 * (a.ln() + b.ln())).exp();
    if !(alpha.is_finite() && omega.is_finite() && omega > 0.0) {
        return Err(GigError::InvalidParams {
            order,
            a,
            b,
            reason: "a*b overflows or underflows beyond f64 range",
        });
    }
    let z = if order > 2.0 || omega > 3.0 {
        two_param_rou_shift(order, omega, rng)
    } else if order >= 1.0 || omega > 1.0 {
        two_param_rou_noshift(order, omega, rng)
    } else {
        two_param_three_piece(order, omega, rng)
    };
    Ok(alpha * z)
}

/// log of the two-parameter quasi-density z^(lam-1) exp(-om (z + 1/z) / 2).
fn log_g(z: f64, lam: f64, om: f64) -> f64 {
    (lam - 1.0) * z.ln() - 0.5 * om * (z + 1.0 / z)
}

fn two_param_mode(lam: f64, om: f64) -> f64 {
    let lm = lam - 1.0;
    if lm >= 0.0 {
        (lm + (lm * lm + om * om).sqrt()) / om
    } else {
        om / ((lm * lm + om * om).sqrt() - lm)
    }
}

/// Ratio of uniforms over the minimal rectangle, origin at zero.
/// Efficient for moderate order (<= 2) with omega in (1, 3], and for
/// 1 <= order <= 2 at any omega <= 3.
fn two_param_rou_noshift<R: Rng + ?Sized>(lam: f64, om: f64, rng: &mut R) -> f64 {
    let xm = two_param_mode(lam, om);
    let nc = 0.5 * log_g(xm, lam, om);
    // argmax of z^2 g(z), i.e. the mode at order lam + 2
    let ym = two_param_mode(lam + 2.0, om);
    let log_um = 0.5 * (lam + 1.0) * ym.ln() - 0.25 * om * (ym + 1.0 / ym) - nc;
    let um = log_um.exp();
    loop {
        let u = um * rng.random::<f64>();
        let v = 1.0 - rng.random::<f64>(); // (0, 1]
        let z = u / v;
        if z > 0.0 && 2.0 * v.ln() <= log_g(z, lam, om) - 2.0 * nc {
            return z;
        }
    }
}

/// Ratio of uniforms with the rectangle shifted to the mode; the u-range
/// endpoints are the two stationary points of (z - xm) * sqrt(g(z)), found
/// as roots of a depressed cubic. Used for order > 2 or omega > 3, where
/// the density is well concentrated.
fn two_param_rou_shift<R: Rng + ?Sized>(lam: f64, om: f64, rng: &mut R) -> f64 {
    let xm = two_param_mode(lam, om);
    let nc = 0.5 * log_g(xm, lam, om);
    let ac = -(2.0 * (lam + 1.0) / om + xm);
    let bc = 2.0 * (lam - 1.0) * xm / om - 1.0;
    let p = bc - ac * ac / 3.0;
    let q = 2.0 * ac * ac * ac / 27.0 - ac * bc / 3.0 + xm;
    // three real roots; the largest and the middle bracket the mode
    let disc = -(p * p * p) / 27.0;
    let fi = (-q / (2.0 * disc.sqrt())).clamp(-1.0, 1.0).acos();
    let fak = 2.0 * (-p / 3.0).sqrt();
    let y1 = fak * (fi / 3.0).cos() - ac / 3.0;
    let y2 = fak * (fi / 3.0 + 4.0 * std::f64::consts::PI / 3.0).cos() - ac / 3.0;
    let uplus = (y1 - xm) * (0.5 * log_g(y1, lam, om) - nc).exp();
    let uminus = (y2 - xm) * (0.5 * log_g(y2, lam, om) - nc).exp();
    debug_assert!(uminus < 0.0 && uplus > 0.0);
    loop {
        let u = uminus + rng.random::<f64>() * (uplus - uminus);
        let v = 1.0 - rng.random::<f64>();
        let z = u / v + xm;
        if z > 0.0 && 2.0 * v.ln() <= log_g(z, lam, om) - 2.0 * nc {
            return z;
        }
    }
}

/// Rejection from a three-piece hat for 0 <= order < 1 and omega <= 1,
/// where the density has a spike near zero and a slow power-law shoulder.
/// Pieces: a constant k0 = g(mode) on (0, x0], the bound
/// k1 z^(order-1) with k1 = exp(-omega) on (x0, 2/omega] (since
/// z + 1/z >= 2), and k2 exp(-omega z / 2) beyond (since z^(order-1) is
/// decreasing). Each piece dominates g on its interval, so acceptance by
/// the ratio g/h is exact.
fn two_param_three_piece<R: Rng + ?Sized>(lam: f64, om: f64, rng: &mut R) -> f64 {
    let xm = two_param_mode(lam, om);
    let x0 = om / (1.0 - lam);
    let k0 = log_g(xm, lam, om).exp();
    let a0 = k0 * x0;
    let (k1, a1, k2, a2, tail_start) = if x0 >= 2.0 / om {
        let k2 = x0.powf(lam - 1.0);
        let a2 = k2 * 2.0 * (-0.5 * om * x0).exp() / om;
        (0.0, 0.0, k2, a2, x0)
    } else {
        let k1 = (-om).exp();
        let a1 = if lam == 0.0 {
            k1 * (2.0 / (om * x0)).ln()
        } else {
            k1 / lam * ((2.0_f64 / om).powf(lam) - x0.powf(lam))
        };
        let k2 = (2.0 / om).powf(lam - 1.0);
        let a2 = k2 * 2.0 * (-1.0_f64).exp() / om;
        (k1, a1, k2, a2, 2.0 / om)
    };
    let total = a0 + a1 + a2;
    loop {
        let mut v = total * rng.random::<f64>();
        let (z, log_h) = if v <= a0 {
            (x0 * v / a0, k0.ln())
        } else if {
            v -= a0;
            v <= a1
        } {
            let z = if lam == 0.0 {
                x0 * (v / k1).exp()
            } else {
                (x0.powf(lam) + lam * v / k1).powf(1.0 / lam)
            };
            (z, k1.ln() + (lam - 1.0) * z.ln())
        } else {
            v -= a1;
            let arg = (-0.5 * om * tail_start).exp() - v * om / (2.0 * k2);
            if arg <= 0.0 {
                continue; // roundoff right at the tail mass boundary
            }
            let z = -2.0 / om * arg.ln();
            (z, k2.ln() - 0.5 * om * z)
        };
        if z > 0.0 && rng.random::<f64>().ln() <= log_g(z, lam, om) - log_h {
            return z;
        }
    }
}
