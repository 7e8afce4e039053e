//! Two-sided Wilcoxon rank-sum test.
//!
//! Small samples without ties get the exact permutation distribution of the
//! rank sum; everything else falls back to the normal approximation with the
//! usual tie correction and a continuity correction.

use thiserror::Error;

/// Combined sample size at or below which the exact distribution is used
/// (provided the pooled values carry no ties).
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Error)]
pub enum WilcoxonError {
    #[error("empty sample: {0}")]
    EmptySample(&'static str),
    #[error("non-finite value in sample {0}")]
    NonFinite(&'static str),
}

fn check(sample: &[f64], name: &'static str) -> Result<(), WilcoxonError> {
    if sample.is_empty() {
        return Err(WilcoxonError::EmptySample(name));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(WilcoxonError::NonFinite(name));
    }
    Ok(())
}

/// Midranks of the pooled sample (1-based, ties averaged), in pooled order,
/// plus the tie-group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].partial_cmp(&pooled[b]).expect("finite"));
    let mut ranks = vec![0.0; pooled.len()];
    let mut tie_sizes = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && pooled[order[end]] == pooled[order[start]] {
            end += 1;
        }
        // positions start..end share the average of ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        tie_sizes.push(end - start);
        start = end;
    }
    (ranks, tie_sizes)
}

/// Exact two-sided p-value for integer rank sum `w` of `nx` ranks out of
/// 1..=n, by counting subsets: p = P(|W - mu| >= |w - mu|) under uniform
/// subset choice. Works in doubled units so the mean n_x(n+1)/2 stays integral.
fn exact_p(w: u64, nx: usize, n: usize) -> f64 {
    // counts[k][s] = number of k-subsets of {1..r} with sum s, built up over r
    let max_sum = n * (n + 1) / 2;
    let mut counts = vec![vec![0u64; max_sum + 1]; nx + 1];
    counts[0][0] = 1;
    for rank in 1..=n {
        for k in (1..=nx.min(rank)).rev() {
            for s in (rank..=max_sum).rev() {
                counts[k][s] += counts[k - 1][s - rank];
            }
        }
    }
    let doubled_mean = (nx * (n + 1)) as i64;
    let observed = (2 * w as i64 - doubled_mean).abs();
    let mut extreme = 0u64;
    let mut total = 0u64;
    for (s, &c) in counts[nx].iter().enumerate() {
        total += c;
        if (2 * s as i64 - doubled_mean).abs() >= observed {
            extreme += c;
        }
    }
    extreme as f64 / total as f64
}

fn normal_sf(z: f64) -> f64 {
    // upper tail of the standard normal via the complementary error function
    use statrs::function::erf::erfc;
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Two-sided Wilcoxon rank-sum p-value for samples `x` and `y`.
///
/// When the pooled size is at most [`EXACT_LIMIT`] and all pooled values are
/// distinct, the p-value is exact (enumeration of rank subsets). Otherwise a
/// normal approximation with tie and continuity corrections is used; a pooled
/// sample with zero rank variance (all values equal) yields p = 1.
pub fn wilcoxon_rank_sum(x: &[f64], y: &[f64]) -> Result<f64, WilcoxonError> {
    check(x, "x")?;
    check(y, "y")?;
    let nx = x.len();
    let ny = y.len();
    let n = nx + ny;
    let pooled: Vec<f64> = x.iter().chain(y.iter()).copied().collect();
    let (ranks, tie_sizes) = midranks(&pooled);
    let w: f64 = ranks[..nx].iter().sum();
    let no_ties = tie_sizes.iter().all(|&t| t == 1);

    if n <= EXACT_LIMIT && no_ties {
        // all ranks are integers here, so w is too
        return Ok(exact_p(w.round() as u64, nx, n));
    }

    let mean = nx as f64 * (n + 1) as f64 / 2.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| (t * t * t - t) as f64)
        .sum::<f64>()
        / (n as f64 * (n as f64 - 1.0));
    let var = nx as f64 * ny as f64 / 12.0 * ((n + 1) as f64 - tie_term);
    if var <= 0.0 {
        // every pooled value identical: the test carries no information
        return Ok(1.0);
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    Ok((2.0 * normal_sf(z)).min(1.0))
}
