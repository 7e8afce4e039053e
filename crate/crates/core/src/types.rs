//! Model state, hyperparameters, and component classification.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound applied to every positive scale parameter after an update.
/// MAP updates of local shrinkage scales can hit exactly zero (for shape
/// sums at the boundary), which would make later log densities non-finite.
pub const FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid hyperparameter {name}: {value} (must be positive and finite)")]
    InvalidHyperparameter { name: &'static str, value: f64 },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },
    #[error("classification threshold {0} outside (0.5, 1]")]
    InvalidThreshold(f64),
    #[error("{0}")]
    Invalid(String),
}

/// Shape and rate settings for the gamma chains behind both shrinkage
/// hierarchies plus the beta-Bernoulli sparse/dense mixture weights.
///
/// The default is the horseshoe configuration: every chain shape 1/2 and
/// unit top-level rates and mixture pseudo-counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    // loading-side chain: gamma -> eta -> tau_k -> phi_k -> delta_ik -> theta_ik
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
    /// rate of the top-level loading-side gamma
    pub nu: f64,
    // factor-side chain: varphi -> chi -> kappa_k -> omega_k -> rho_kj -> sigma_kj
    pub a_x: f64,
    pub b_x: f64,
    pub c_x: f64,
    pub d_x: f64,
    pub e_x: f64,
    pub f_x: f64,
    /// rate of the top-level factor-side gamma
    pub xi: f64,
    // beta-Bernoulli mixture weights, loading then factor side
    pub alpha: f64,
    pub beta: f64,
    pub alpha_x: f64,
    pub beta_x: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            a: 0.5,
            b: 0.5,
            c: 0.5,
            d: 0.5,
            e: 0.5,
            f: 0.5,
            nu: 1.0,
            a_x: 0.5,
            b_x: 0.5,
            c_x: 0.5,
            d_x: 0.5,
            e_x: 0.5,
            f_x: 0.5,
            xi: 1.0,
            alpha: 1.0,
            beta: 1.0,
            alpha_x: 1.0,
            beta_x: 1.0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("d", self.d),
            ("e", self.e),
            ("f", self.f),
            ("nu", self.nu),
            ("a_x", self.a_x),
            ("b_x", self.b_x),
            ("c_x", self.c_x),
            ("d_x", self.d_x),
            ("e_x", self.e_x),
            ("f_x", self.f_x),
            ("xi", self.xi),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("alpha_x", self.alpha_x),
            ("beta_x", self.beta_x),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(ModelError::InvalidHyperparameter { name, value });
            }
        }
        Ok(())
    }
}

/// A gene-by-sample expression matrix with row and column identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    pub values: DMatrix<f64>,
    pub gene_ids: Vec<String>,
    pub sample_ids: Vec<String>,
}

impl DataMatrix {
    pub fn new(
        values: DMatrix<f64>,
        gene_ids: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self, ModelError> {
        if values.nrows() != gene_ids.len() || values.ncols() != sample_ids.len() {
            return Err(ModelError::DimensionMismatch {
                context: format!(
                    "matrix is {}x{} but has {} gene ids and {} sample ids",
                    values.nrows(),
                    values.ncols(),
                    gene_ids.len(),
                    sample_ids.len()
                ),
            });
        }
        for (idx, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(ModelError::NonFinite {
                    what: "data matrix".into(),
                    index: idx,
                });
            }
        }
        Ok(Self { values, gene_ids, sample_ids })
    }

    /// Builds a matrix with generated `g<i>` / `s<j>` identifiers.
    pub fn from_values(values: DMatrix<f64>) -> Result<Self, ModelError> {
        let gene_ids = (0..values.nrows()).map(|i| format!("g{i}")).collect();
        let sample_ids = (0..values.ncols()).map(|j| format!("s{j}")).collect();
        Self::new(values, gene_ids, sample_ids)
    }

    pub fn n_genes(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.values.ncols()
    }
}

/// Loading-side state: the p x K loading matrix and its shrinkage chain.
/// `z[k]` is the probability (or hard indicator) that column k is sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingSide {
    pub lambda: DMatrix<f64>,
    /// per-entry prior variances of sparse columns, p x K
    pub theta: DMatrix<f64>,
    /// per-entry rates for theta, p x K
    pub delta: DMatrix<f64>,
    /// per-column variance of the dense component, length K
    pub phi: DVector<f64>,
    /// per-column rates for phi, length K
    pub tau: DVector<f64>,
    pub eta: f64,
    pub gamma: f64,
    /// sparsity indicator per column, in [0,1]; 1 = sparse
    pub z: DVector<f64>,
}

/// Factor-side state: posterior mean/covariance of X plus its mirror chain.
/// `x_cov[j]` is the K x K posterior covariance of column j; `o[k]` is the
/// probability that factor row k is sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSide {
    pub x_mean: DMatrix<f64>,
    pub x_cov: Vec<DMatrix<f64>>,
    /// per-entry prior variances of sparse rows, K x n
    pub sigma: DMatrix<f64>,
    /// per-entry rates for sigma, K x n
    pub rho: DMatrix<f64>,
    /// per-row variance of the dense component, length K
    pub omega: DVector<f64>,
    /// per-row rates for omega, length K
    pub kappa: DVector<f64>,
    pub chi: f64,
    pub varphi: f64,
    /// sparsity indicator per row, in [0,1]; 1 = sparse
    pub o: DVector<f64>,
}

/// Independent per-gene noise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub psi: DVector<f64>,
}

/// Full model state shared by the Gibbs sampler and the variational fitter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub loading: LoadingSide,
    pub factor: FactorSide,
    pub noise: NoiseModel,
    /// stable identifiers that survive pruning, parallel to components
    pub component_ids: Vec<u32>,
}

impl ModelState {
    pub fn n_genes(&self) -> usize {
        self.loading.lambda.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.factor.x_mean.ncols()
    }

    pub fn n_components(&self) -> usize {
        self.loading.lambda.ncols()
    }

    /// Checks dimensional consistency and the scale floor across the state.
    pub fn validate(&self) -> Result<(), ModelError> {
        let p = self.n_genes();
        let n = self.n_samples();
        let k = self.n_components();
        let dims_ok = self.loading.theta.shape() == (p, k)
            && self.loading.delta.shape() == (p, k)
            && self.loading.phi.len() == k
            && self.loading.tau.len() == k
            && self.loading.z.len() == k
            && self.factor.x_mean.shape() == (k, n)
            && self.factor.x_cov.len() == n
            && self.factor.x_cov.iter().all(|c| c.shape() == (k, k))
            && self.factor.sigma.shape() == (k, n)
            && self.factor.rho.shape() == (k, n)
            && self.factor.omega.len() == k
            && self.factor.kappa.len() == k
            && self.factor.o.len() == k
            && self.noise.psi.len() == p
            && self.component_ids.len() == k;
        if !dims_ok {
            return Err(ModelError::DimensionMismatch {
                context: format!("inconsistent state for p={p}, n={n}, k={k}"),
            });
        }
        let scale_groups: [(&str, Box<dyn Iterator<Item = &f64> + '_>); 9] = [
            ("theta", Box::new(self.loading.theta.iter())),
            ("delta", Box::new(self.loading.delta.iter())),
            ("phi", Box::new(self.loading.phi.iter())),
            ("tau", Box::new(self.loading.tau.iter())),
            ("sigma", Box::new(self.factor.sigma.iter())),
            ("rho", Box::new(self.factor.rho.iter())),
            ("omega", Box::new(self.factor.omega.iter())),
            ("kappa", Box::new(self.factor.kappa.iter())),
            ("psi", Box::new(self.noise.psi.iter())),
        ];
        for (what, values) in scale_groups {
            for (index, v) in values.enumerate() {
                if !v.is_finite() || *v < FLOOR {
                    return Err(ModelError::Invalid(format!(
                        "{what}[{index}] = {v} below scale floor or non-finite"
                    )));
                }
            }
        }
        for (name, v) in [
            ("eta", self.loading.eta),
            ("gamma", self.loading.gamma),
            ("chi", self.factor.chi),
            ("varphi", self.factor.varphi),
        ] {
            if !v.is_finite() || v < FLOOR {
                return Err(ModelError::Invalid(format!("{name} = {v} below scale floor")));
            }
        }
        for (index, v) in self.loading.z.iter().chain(self.factor.o.iter()).enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(ModelError::Invalid(format!(
                    "indicator at {index} = {v} outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// Sparse/dense call for one side of a component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SideClass {
    Sparse,
    Dense,
}

/// Joint classification of a component from its two indicator expectations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentClass {
    pub loading: SideClass,
    pub factor: SideClass,
    pub z: f64,
    pub o: f64,
    /// set when the corresponding indicator fell strictly between the
    /// dense and sparse cutoffs and the side was assigned to the nearer one
    pub ambiguous_loading: bool,
    pub ambiguous_factor: bool,
}

impl ComponentClass {
    /// Two-letter label, loading side first: "SS", "SD", "DS", or "DD".
    pub fn label(&self) -> &'static str {
        match (self.loading, self.factor) {
            (SideClass::Sparse, SideClass::Sparse) => "SS",
            (SideClass::Sparse, SideClass::Dense) => "SD",
            (SideClass::Dense, SideClass::Sparse) => "DS",
            (SideClass::Dense, SideClass::Dense) => "DD",
        }
    }
}

fn classify_side(value: f64, threshold: f64) -> (SideClass, bool) {
    if value >= threshold {
        (SideClass::Sparse, false)
    } else if value <= 1.0 - threshold {
        (SideClass::Dense, false)
    } else if value > 0.5 {
        (SideClass::Sparse, true)
    } else {
        (SideClass::Dense, true)
    }
}

/// Classifies a component from its sparsity indicators.
///
/// `threshold` must lie in (0.5, 1]. A side is called sparse when its
/// indicator is >= threshold and dense when <= 1 - threshold; anything in
/// between is assigned to the nearer side and flagged ambiguous (an exact
/// 0.5 goes to dense).
pub fn classify_component(z: f64, o: f64, threshold: f64) -> Result<ComponentClass, ModelError> {
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(ModelError::InvalidThreshold(threshold));
    }
    for v in [z, o] {
        if !(0.0..=1.0).contains(&v) {
            return Err(ModelError::Invalid(format!("indicator {v} outside [0,1]")));
        }
    }
    let (loading, ambiguous_loading) = classify_side(z, threshold);
    let (factor, ambiguous_factor) = classify_side(o, threshold);
    Ok(ComponentClass { loading, factor, z, o, ambiguous_loading, ambiguous_factor })
}

/// Indices whose absolute value exceeds `eps`.
pub fn support(values: &[f64], eps: f64) -> Vec<usize> {
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > eps)
        .map(|(i, _)| i)
        .collect()
}

/// A gene-set by sample-set block attributed to one component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bicluster {
    pub component_id: u32,
    pub genes: Vec<usize>,
    pub samples: Vec<usize>,
}

impl Bicluster {
    pub fn n_cells(&self) -> usize {
        self.genes.len() * self.samples.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters_are_valid() {
        Hyperparameters::default().validate().unwrap();
        let h = Hyperparameters::default();
        assert_eq!(h.a, 0.5);
        assert_eq!(h.nu, 1.0);
        assert_eq!(h.alpha_x, 1.0);
    }

    #[test]
    fn nonpositive_hyperparameter_rejected() {
        let mut h = Hyperparameters::default();
        h.c = 0.0;
        assert!(h.validate().is_err());
        h.c = f64::NAN;
        assert!(h.validate().is_err());
    }

    #[test]
    fn classify_clear_cases() {
        let cc = classify_component(0.95, 0.97, 0.9).unwrap();
        assert_eq!(cc.label(), "SS");
        assert!(!cc.ambiguous_loading && !cc.ambiguous_factor);

        let cc = classify_component(0.02, 0.99, 0.9).unwrap();
        assert_eq!(cc.label(), "DS");

        let cc = classify_component(0.95, 0.03, 0.9).unwrap();
        assert_eq!(cc.label(), "SD");

        let cc = classify_component(0.01, 0.0, 0.9).unwrap();
        assert_eq!(cc.label(), "DD");
    }

    #[test]
    fn classify_ambiguous_goes_to_nearer_side() {
        // z = 0.5 sits exactly between: assigned dense, flagged
        let cc = classify_component(0.5, 0.95, 0.9).unwrap();
        assert_eq!(cc.label(), "DS");
        assert!(cc.ambiguous_loading);
        assert!(!cc.ambiguous_factor);

        let cc = classify_component(0.7, 0.2, 0.9).unwrap();
        assert_eq!(cc.loading, SideClass::Sparse);
        assert_eq!(cc.factor, SideClass::Dense);
        assert!(cc.ambiguous_loading && cc.ambiguous_factor);
    }

    #[test]
    fn classify_swapping_sides_swaps_label() {
        let ab = classify_component(0.93, 0.04, 0.9).unwrap();
        let ba = classify_component(0.04, 0.93, 0.9).unwrap();
        assert_eq!(ab.label(), "SD");
        assert_eq!(ba.label(), "DS");
    }

    #[test]
    fn classify_rejects_bad_threshold() {
        assert!(classify_component(0.9, 0.9, 0.5).is_err());
        assert!(classify_component(0.9, 0.9, 1.01).is_err());
    }

    #[test]
    fn support_is_strict() {
        assert_eq!(support(&[0.0, 1e-12, -3.0], 1e-10), vec![2]);
        assert_eq!(support(&[0.5, -0.5], 0.5), Vec::<usize>::new());
    }

    #[test]
    fn data_matrix_rejects_nan_and_bad_dims() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, f64::NAN]);
        assert!(DataMatrix::from_values(m).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!(DataMatrix::new(m, vec!["g0".into()], vec!["s0".into(), "s1".into()]).is_err());
    }
}
