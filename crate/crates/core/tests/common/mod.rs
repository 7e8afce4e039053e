//! Independent numerical oracles shared by the integration tests.
//!
//! Everything here is deliberately written from scratch (golden-section
//! search, Gauss-Jordan elimination, Stirling-series special functions,
//! Simpson quadrature) so that test expectations never depend on the code
//! under test or on the same library routines it calls.

#![allow(dead_code)]

/// Golden-section maximizer over [lo, hi]. The objective must be unimodal
/// on the bracket. Returns the abscissa of the maximum.
pub fn golden_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, iters: usize) -> f64 {
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Maximizer of f over the positive axis, searched on a log scale with a
/// wide fixed bracket. Suitable for the scale-update objectives, which are
/// strictly concave in ln(x).
pub fn golden_max_positive(f: impl Fn(f64) -> f64) -> f64 {
    let g = |u: f64| f(u.exp());
    golden_max(g, -46.0, 46.0, 200).exp()
}

/// Solves a*x = b by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a[i].clone();
            row.push(b[i]);
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular oracle system");
        for j in col..=n {
            m[col][j] /= p;
        }
        for i in 0..n {
            if i != col {
                let factor = m[i][col];
                for j in col..=n {
                    m[i][j] -= factor * m[col][j];
                }
            }
        }
    }
    (0..n).map(|i| m[i][n]).collect()
}

/// Dense inverse via Gauss-Jordan on the augmented system.
pub fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv = vec![vec![0.0; n]; n];
    for (j, col) in inv.iter_mut().enumerate().take(n) {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let x = gauss_jordan_solve(a, &e);
        col.clone_from(&x);
    }
    // inv currently holds columns in rows; transpose back
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = inv[j][i];
        }
    }
    out
}

/// ln Gamma via recurrence down to x >= 12 plus the Stirling series.
pub fn oracle_ln_gamma(mut x: f64) -> f64 {
    assert!(x > 0.0);
    let mut shift = 0.0;
    while x < 12.0 {
        shift -= x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv / 12.0 - inv * inv2 / 360.0 + inv * inv2 * inv2 / 1260.0
        - inv * inv2 * inv2 * inv2 / 1680.0;
    shift + 0.5 * ((2.0 * std::f64::consts::PI).ln() - x.ln()) + x * (x.ln() - 1.0) + series
}

/// Digamma via recurrence up to x >= 10 plus the asymptotic series.
pub fn oracle_digamma(mut x: f64) -> f64 {
    assert!(x > 0.0);
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln() - 0.5 * inv - inv2 / 12.0 + inv2 * inv2 / 120.0 - inv2 * inv2 * inv2 / 252.0
}

/// Gamma density with shape/rate parameterization.
pub fn oracle_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    (shape * rate.ln() + (shape - 1.0) * x.ln() - rate * x - oracle_ln_gamma(shape)).exp()
}

/// Zero-mean normal density with variance v.
pub fn oracle_normal_pdf(x: f64, v: f64) -> f64 {
    (-0.5 * x * x / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

/// Composite Simpson integral of f over [lo, hi] with n panels (n even).
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    assert!(n % 2 == 0);
    let h = (hi - lo) / n as f64;
    let mut total = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        total += w * f(lo + i as f64 * h);
    }
    total * h / 3.0
}

/// Relative difference with an absolute guard for near-zero references.
pub fn rel_diff(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}

/// Rank-r reconstruction via one-sided Jacobi SVD (rotations orthogonalize
/// the columns; singular values are the resulting column norms). Gap-free
/// and accurate to machine precision, unlike power iteration.
pub fn jacobi_rank_r_reconstruction(a: &[Vec<f64>], r: usize) -> Vec<Vec<f64>> {
    let m = a.len();
    let n = a[0].len();
    let mut w: Vec<Vec<f64>> = a.to_vec(); // m x n, columns get rotated
    let mut v = vec![vec![0.0; n]; n];
    for (j, row) in v.iter_mut().enumerate() {
        row[j] = 1.0;
    }
    for _sweep in 0..60 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for row in &w {
                    app += row[p] * row[p];
                    aqq += row[q] * row[q];
                    apq += row[p] * row[q];
                }
                off = off.max(apq.abs() / (app * aqq).sqrt().max(1e-300));
                if apq.abs() <= 1e-15 * (app * aqq).sqrt() {
                    continue;
                }
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for row in w.iter_mut() {
                    let (xp, xq) = (row[p], row[q]);
                    row[p] = c * xp - s * xq;
                    row[q] = s * xp + c * xq;
                }
                for row in v.iter_mut() {
                    let (xp, xq) = (row[p], row[q]);
                    row[p] = c * xp - s * xq;
                    row[q] = s * xp + c * xq;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| w[i][j] * w[i][j]).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let mut recon = vec![vec![0.0; n]; m];
    for &j in order.iter().take(r) {
        // w column j is sigma_j * u_j; multiply by v row gives the rank-one term
        for (i, out_row) in recon.iter_mut().enumerate() {
            for (jj, out) in out_row.iter_mut().enumerate() {
                *out += w[i][j] * v[jj][j];
            }
        }
    }
    recon
}
