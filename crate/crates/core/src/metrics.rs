//! Scoring of recovered structure against ground truth: Jaccard-based
//! recovery/relevance over bicluster sets, a label- and scale-invariant
//! stability index between loading matrices, and a redundancy count over
//! component supports.

use crate::types::Bicluster;
use nalgebra::DMatrix;
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("bicluster {0} is empty")]
    EmptyBicluster(usize),
    #[error("{0} must be non-empty")]
    EmptyInput(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JaccardMode {
    /// joint (gene, sample) cell sets; the native reading for biclusters
    /// defined by loading and factor supports
    Cells,
    /// gene sets only, for comparability with loading-only methods
    Genes,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorePair {
    /// mean over true biclusters of the best match among found ones
    pub recovery: f64,
    /// mean over found biclusters of the best match among true ones
    pub relevance: f64,
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let set: HashSet<usize> = a.iter().copied().collect();
    b.iter().filter(|i| set.contains(i)).count()
}

/// Jaccard similarity of two biclusters. Cells mode intersects the Cartesian
/// gene x sample sets, which factorizes into per-side intersection counts.
pub fn jaccard(b1: &Bicluster, b2: &Bicluster, mode: JaccardMode) -> Result<f64, MetricsError> {
    for (idx, b) in [(0, b1), (1, b2)] {
        if b.genes.is_empty() || b.samples.is_empty() {
            return Err(MetricsError::EmptyBicluster(idx));
        }
    }
    let (inter, union) = match mode {
        JaccardMode::Cells => {
            let gi = intersection_size(&b1.genes, &b2.genes);
            let si = intersection_size(&b1.samples, &b2.samples);
            let inter = gi * si;
            let union = b1.n_cells() + b2.n_cells() - inter;
            (inter, union)
        }
        JaccardMode::Genes => {
            let gi = intersection_size(&b1.genes, &b2.genes);
            (gi, b1.genes.len() + b2.genes.len() - gi)
        }
    };
    Ok(inter as f64 / union as f64)
}

/// Recovery: how well each true bicluster is matched by the found set.
/// Relevance: how well each found bicluster matches something true.
/// An empty found set scores (0, 0) so a method that returns nothing ranks
/// worst on both axes.
pub fn recovery_relevance(
    truth: &[Bicluster],
    found: &[Bicluster],
    mode: JaccardMode,
) -> Result<ScorePair, MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::EmptyInput("truth bicluster set"));
    }
    if found.is_empty() {
        return Ok(ScorePair { recovery: 0.0, relevance: 0.0 });
    }
    let mut recovery = 0.0;
    for t in truth {
        let mut best = 0.0_f64;
        for f in found {
            best = best.max(jaccard(t, f, mode)?);
        }
        recovery += best;
    }
    let mut relevance = 0.0;
    for f in found {
        let mut best = 0.0_f64;
        for t in truth {
            best = best.max(jaccard(t, f, mode)?);
        }
        relevance += best;
    }
    Ok(ScorePair {
        recovery: recovery / truth.len() as f64,
        relevance: relevance / found.len() as f64,
    })
}

fn abs_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    (num / (va * vb).sqrt()).abs()
}

/// Similarity between two loading matrices that ignores column order, sign,
/// and scale: with r_ij the absolute Pearson correlation between true column
/// i and estimated column j (constant columns contribute 0), returns the
/// average of the two directed best-match means. Duplicated columns are not
/// penalized.
pub fn stability_index(
    true_mat: &DMatrix<f64>,
    est_mat: &DMatrix<f64>,
) -> Result<f64, MetricsError> {
    let (k1, k2) = (true_mat.ncols(), est_mat.ncols());
    if k1 == 0 || k2 == 0 {
        return Err(MetricsError::EmptyInput("loading matrix columns"));
    }
    let cols = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.ncols()).map(|j| m.column(j).iter().copied().collect()).collect()
    };
    let a = cols(true_mat);
    let b = cols(est_mat);
    let mut r = vec![vec![0.0; k2]; k1];
    for i in 0..k1 {
        for j in 0..k2 {
            r[i][j] = abs_pearson(&a[i], &b[j]);
        }
    }
    let row_best: f64 = r.iter().map(|row| row.iter().copied().fold(0.0, f64::max)).sum();
    let col_best: f64 = (0..k2)
        .map(|j| (0..k1).map(|i| r[i][j]).fold(0.0, f64::max))
        .sum();
    Ok(0.5 * (row_best / k1 as f64 + col_best / k2 as f64))
}

/// Counts pairs of components with identical gene and sample supports
/// (binary squared differences of zero on both sides). Components are
/// bucketed by support sizes first, so only plausible pairs are compared.
pub fn redundancy_count(components: &[(Vec<usize>, Vec<usize>)]) -> usize {
    let mut sorted: Vec<(Vec<usize>, Vec<usize>)> = components.to_vec();
    for (g, s) in &mut sorted {
        g.sort_unstable();
        s.sort_unstable();
    }
    let mut count = 0;
    for i in 0..sorted.len() {
        for j in (i + 1)..sorted.len() {
            if sorted[i].0.len() != sorted[j].0.len() || sorted[i].1.len() != sorted[j].1.len() {
                continue;
            }
            if sorted[i] == sorted[j] {
                count += 1;
            }
        }
    }
    count
}
