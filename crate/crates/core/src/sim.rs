//! Synthetic data generation for benchmarking, plus the principal-component
//! removal used to preprocess data for factor-free baselines.
//!
//! A simulated dataset is built from k_sparse sparse and k_dense dense
//! vectors per side. Sparse vectors have a support of m indices (m uniform
//! on a configured range) with a pairwise overlap cap against the supports
//! already drawn on the same side; dense vectors fill every entry. Values
//! are N(0, value_sd^2) and noise is N(0, noise_var). When pairing is
//! shuffled, factor vectors are permuted against loading vectors so a
//! sparse loading may pair with a dense factor.

use crate::types::{support, Bicluster, DataMatrix, ModelError};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("no support satisfying the overlap cap found after {attempts} attempts")]
    Infeasible { attempts: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimConfig {
    pub p: usize,
    pub n: usize,
    pub k_sparse: usize,
    pub k_dense: usize,
    /// inclusive range for the per-vector nonzero count
    pub m_range: (usize, usize),
    pub value_sd: f64,
    /// pairwise support-overlap cap among same-side sparse vectors
    pub max_shared: usize,
    /// noise variance
    pub noise_var: f64,
    pub shuffle_pairing: bool,
    pub seed: u64,
}

impl SimConfig {
    /// Sparse-only benchmark layout: 500 x 300, ten sparse components.
    pub fn sparse_only(noise_var: f64, seed: u64) -> Self {
        Self {
            p: 500,
            n: 300,
            k_sparse: 10,
            k_dense: 0,
            m_range: (5, 20),
            value_sd: 2.0_f64.sqrt(),
            max_shared: 4,
            noise_var,
            shuffle_pairing: true,
            seed,
        }
    }

    /// Mixed benchmark layout: ten sparse plus five dense components.
    pub fn mixed(noise_var: f64, seed: u64) -> Self {
        Self { k_dense: 5, ..Self::sparse_only(noise_var, seed) }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.p == 0 || self.n == 0 {
            return Err(SimError::InvalidConfig("p and n must be positive".into()));
        }
        let cap = self.p.min(self.n);
        if self.m_range.0 < 1 || self.m_range.0 > self.m_range.1 || self.m_range.1 > cap {
            return Err(SimError::InvalidConfig(format!(
                "m_range {:?} must be an interval within [1, {cap}]",
                self.m_range
            )));
        }
        if self.k_sparse > 0 && self.max_shared >= self.m_range.0 {
            return Err(SimError::InvalidConfig(format!(
                "max_shared {} must be below the smallest support size {}",
                self.max_shared, self.m_range.0
            )));
        }
        if !(self.value_sd > 0.0 && self.value_sd.is_finite()) {
            return Err(SimError::InvalidConfig("value_sd must be positive".into()));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(SimError::InvalidConfig("noise_var must be positive".into()));
        }
        Ok(())
    }
}

/// True decomposition behind a simulated dataset. `biclusters` lists the
/// cells of components that are sparse on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub lambda_true: DMatrix<f64>,
    pub x_true: DMatrix<f64>,
    pub loading_sparse: Vec<bool>,
    pub factor_sparse: Vec<bool>,
    pub biclusters: Vec<Bicluster>,
}

const MAX_SUPPORT_ATTEMPTS: usize = 10_000;

/// Draws a sparse vector: support size uniform on m_range, indices uniform
/// subject to sharing at most max_shared positions with every support in
/// `existing_supports`, values N(0, value_sd^2).
pub fn gen_sparse_vector<R: Rng>(
    length: usize,
    m_range: (usize, usize),
    value_sd: f64,
    existing_supports: &[Vec<usize>],
    max_shared: usize,
    rng: &mut R,
) -> Result<Vec<f64>, SimError> {
    let m = rng.random_range(m_range.0..=m_range.1);
    let normal = Normal::new(0.0, value_sd)
        .map_err(|e| SimError::InvalidConfig(format!("value_sd: {e}")))?;
    for _ in 0..MAX_SUPPORT_ATTEMPTS {
        let mut picked = rand::seq::index::sample(rng, length, m).into_vec();
        picked.sort_unstable();
        let ok = existing_supports.iter().all(|other| {
            let mut shared = 0;
            let (mut a, mut b) = (0, 0);
            while a < picked.len() && b < other.len() {
                match picked[a].cmp(&other[b]) {
                    std::cmp::Ordering::Less => a += 1,
                    std::cmp::Ordering::Greater => b += 1,
                    std::cmp::Ordering::Equal => {
                        shared += 1;
                        a += 1;
                        b += 1;
                    }
                }
            }
            shared <= max_shared
        });
        if ok {
            let mut v = vec![0.0; length];
            for &idx in &picked {
                v[idx] = normal.sample(rng);
            }
            return Ok(v);
        }
    }
    Err(SimError::Infeasible { attempts: MAX_SUPPORT_ATTEMPTS })
}

fn gen_side<R: Rng>(
    length: usize,
    config: &SimConfig,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<bool>), SimError> {
    let normal = Normal::new(0.0, config.value_sd)
        .map_err(|e| SimError::InvalidConfig(format!("value_sd: {e}")))?;
    let mut vectors = Vec::with_capacity(config.k_sparse + config.k_dense);
    let mut flags = Vec::with_capacity(config.k_sparse + config.k_dense);
    let mut supports: Vec<Vec<usize>> = Vec::with_capacity(config.k_sparse);
    for _ in 0..config.k_sparse {
        let v = gen_sparse_vector(
            length,
            config.m_range,
            config.value_sd,
            &supports,
            config.max_shared,
            rng,
        )?;
        supports.push(support(&v, 0.0));
        vectors.push(v);
        flags.push(true);
    }
    for _ in 0..config.k_dense {
        vectors.push((0..length).map(|_| normal.sample(rng)).collect());
        flags.push(false);
    }
    Ok((vectors, flags))
}

/// Gaussian noise matrix with the given variance, filled column by column.
pub fn noise_matrix<R: Rng>(p: usize, n: usize, noise_var: f64, rng: &mut R) -> DMatrix<f64> {
    let normal = Normal::new(0.0, noise_var.sqrt()).expect("validated variance");
    let mut e = DMatrix::zeros(p, n);
    for j in 0..n {
        for i in 0..p {
            e[(i, j)] = normal.sample(rng);
        }
    }
    e
}

/// Generates a dataset and its ground truth. Draw order is fixed (loading
/// vectors, factor vectors, pairing permutation, noise), so equal seeds give
/// identical output.
pub fn simulate(config: &SimConfig) -> Result<(DataMatrix, GroundTruth), SimError> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let k = config.k_sparse + config.k_dense;

    let (loading_vecs, loading_sparse) = gen_side(config.p, config, &mut rng)?;
    let (factor_vecs, factor_flags) = gen_side(config.n, config, &mut rng)?;

    let mut pairing: Vec<usize> = (0..k).collect();
    if config.shuffle_pairing {
        pairing.shuffle(&mut rng);
    }

    let mut lambda = DMatrix::zeros(config.p, k);
    let mut x = DMatrix::zeros(k, config.n);
    let mut factor_sparse = vec![false; k];
    for kk in 0..k {
        for i in 0..config.p {
            lambda[(i, kk)] = loading_vecs[kk][i];
        }
        let fv = &factor_vecs[pairing[kk]];
        for j in 0..config.n {
            x[(kk, j)] = fv[j];
        }
        factor_sparse[kk] = factor_flags[pairing[kk]];
    }

    let mut y = &lambda * &x;
    y += noise_matrix(config.p, config.n, config.noise_var, &mut rng);

    let mut biclusters = Vec::new();
    for kk in 0..k {
        if loading_sparse[kk] && factor_sparse[kk] {
            let genes = support(&loading_vecs[kk], 0.0);
            let samples = support(&factor_vecs[pairing[kk]], 0.0);
            biclusters.push(Bicluster { component_id: kk as u32, genes, samples });
        }
    }

    let gene_ids = (1..=config.p).map(|i| format!("g{i}")).collect();
    let sample_ids = (1..=config.n).map(|j| format!("s{j}")).collect();
    let data = DataMatrix::new(y, gene_ids, sample_ids)?;
    Ok((
        data,
        GroundTruth {
            lambda_true: lambda,
            x_true: x,
            loading_sparse,
            factor_sparse,
            biclusters,
        },
    ))
}

/// Which dimension is mean-centered before the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Centering {
    /// subtract each gene's mean across samples (default)
    Genes,
    /// subtract each sample's mean across genes
    Samples,
    None,
}

/// Removes the top n_pcs principal components: centers the matrix, subtracts
/// the rank-n_pcs truncated SVD reconstruction, and returns the residual
/// with the original identifiers.
pub fn remove_pcs(
    data: &DataMatrix,
    n_pcs: usize,
    centering: Centering,
) -> Result<DataMatrix, SimError> {
    let (p, n) = data.values.shape();
    if n_pcs >= p.min(n) {
        return Err(SimError::InvalidConfig(format!(
            "n_pcs {n_pcs} must be below min(p, n) = {}",
            p.min(n)
        )));
    }
    let mut centered = data.values.clone();
    match centering {
        Centering::Genes => {
            for i in 0..p {
                let mean = centered.row(i).mean();
                for j in 0..n {
                    centered[(i, j)] -= mean;
                }
            }
        }
        Centering::Samples => {
            for j in 0..n {
                let mean = centered.column(j).mean();
                for i in 0..p {
                    centered[(i, j)] -= mean;
                }
            }
        }
        Centering::None => {}
    }
    if n_pcs > 0 {
        let mut svd = centered.clone().svd(true, true);
        svd.sort_by_singular_values();
        let u = svd.u.as_ref().expect("requested u");
        let vt = svd.v_t.as_ref().expect("requested v_t");
        for r in 0..n_pcs {
            let sigma = svd.singular_values[r];
            let ur = u.column(r);
            let vr = vt.row(r);
            for j in 0..n {
                for i in 0..p {
                    centered[(i, j)] -= sigma * ur[i] * vr[j];
                }
            }
        }
    }
    Ok(DataMatrix::new(centered, data.gene_ids.clone(), data.sample_ids.clone())?)
}
