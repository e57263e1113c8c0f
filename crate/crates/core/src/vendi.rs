//! Probability-weighted Vendi Score.
//!
//! For a similarity matrix `K` with unit diagonal and a probability vector
//! `p`, the weighted similarity is `Kᵖ = diag(√p) K diag(√p)`. Its eigenvalues
//! `λ` sum to one, and the score is `exp(−Σ λ ln λ)`: the effective number of
//! mutually dissimilar items.
//!
//! Two kernels are provided. [`SimilarityMatrix`] works on the dense `n×n`
//! matrix. [`FeatureKernel`] works on row-normalised features `X` with
//! `K = X Xᵀ` implicit, using the `d×d` matrix `Xᵀ diag(p) X`, which shares
//! every nonzero eigenvalue with `Kᵖ`. It scales to datasets where an `n×n`
//! decomposition per step is out of reach.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{eigh, FeatureMatrix, SimilarityMatrix, UNIT_ROW_TOLERANCE};

/// Eigenvalues below this contribute nothing to the entropy, and the
/// logarithm in the gradient is clamped here.
pub const EIGENVALUE_FLOOR: f64 = 1e-12;

/// Eigenvalues of `Kᵖ` below this mean `K` is not positive semi-definite.
pub const NEGATIVE_EIGENVALUE_LIMIT: f64 = -1e-6;

const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::validation("probability vector is empty"));
        }
        if let Some((i, v)) = p
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::validation(format!("probability {i} is {v}, outside [0, 1]")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::validation(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(p))
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution over zero items");
        Self(vec![1.0 / n as f64; n])
    }

    /// `w / Σw` for non-negative weights with a positive sum.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation("weights must be finite and non-negative"));
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::validation("weights sum to zero"));
        }
        Self::new(w.iter().map(|v| v / total).collect())
    }

    /// `exp(u) / Σ exp(u)`, evaluated with the maximum subtracted.
    pub fn from_log_weights(u: &[f64]) -> Result<Self> {
        if u.is_empty() || u.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("log-weights must be finite and non-empty"));
        }
        let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = u.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = w.iter().sum();
        Ok(Self(w.into_iter().map(|v| v / total).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `n·p_i`: 1 for every item under uniform weighting.
    pub fn relative_weights(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.0.iter().map(|p| n * p).collect()
    }

    fn require_positive(&self) -> Result<()> {
        match self.0.iter().position(|&v| v <= 0.0) {
            Some(i) => Err(Error::numerical(format!(
                "gradient needs strictly positive probabilities, p[{i}] = {}",
                self.0[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Score, spectral entropy and spectrum of one weighted similarity matrix.
#[derive(Debug, Clone)]
pub struct VendiEvaluation {
    pub score: f64,
    pub eigen_entropy: f64,
    /// Descending. The dense kernel returns all `n`, the feature kernel the `d`
    /// that can be nonzero.
    pub eigenvalues: Vec<f64>,
}

/// Natural-log Shannon entropy with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &ProbabilityVector) -> f64 {
    entropy_of(p.as_slice().iter().copied())
}

fn entropy_of(values: impl Iterator<Item = f64>) -> f64 {
    -values
        .filter(|&v| v >= EIGENVALUE_FLOOR)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// `∂H/∂p_i = −(ln p_i + 1)`.
pub fn shannon_entropy_gradient(p: &ProbabilityVector) -> Result<Vec<f64>> {
    p.require_positive()?;
    Ok(p.as_slice().iter().map(|v| -(v.ln() + 1.0)).collect())
}

fn evaluation_from_spectrum(eigenvalues: &DVector<f64>) -> Result<VendiEvaluation> {
    let min = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < NEGATIVE_EIGENVALUE_LIMIT {
        return Err(Error::numerical(format!(
            "weighted similarity has eigenvalue {min:e}; similarity matrix is not positive semi-definite"
        )));
    }
    let eigen_entropy = entropy_of(eigenvalues.iter().copied());
    Ok(VendiEvaluation {
        score: eigen_entropy.exp(),
        eigen_entropy,
        eigenvalues: eigenvalues.iter().copied().collect(),
    })
}

fn log_derivative(lambda: f64) -> f64 {
    -(lambda.max(EIGENVALUE_FLOOR).ln() + 1.0)
}

/// A similarity structure the weighted Vendi Score can be evaluated on.
pub trait VendiKernel: Sync {
    /// Number of items.
    fn len(&self) -> usize;

    fn evaluate(&self, p: &ProbabilityVector) -> Result<VendiEvaluation>;

    /// Score plus `∂H_λ/∂p`, where `H_λ = −Σ λ ln λ`, from one decomposition.
    /// The gradient of the score itself is `score · ∂H_λ/∂p`.
    fn evaluate_with_gradient(&self, p: &ProbabilityVector) -> Result<(VendiEvaluation, Vec<f64>)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_len(kernel_len: usize, p: &ProbabilityVector) -> Result<()> {
    if kernel_len != p.len() {
        return Err(Error::validation(format!(
            "similarity has {kernel_len} items but probability vector has {}",
            p.len()
        )));
    }
    Ok(())
}

/// `Kᵖ_ij = √(p_i p_j) K_ij`.
pub fn weighted_similarity(k: &SimilarityMatrix, p: &ProbabilityVector) -> Result<DMatrix<f64>> {
    check_len(k.n(), p)?;
    let sqrt_p: Vec<f64> = p.as_slice().iter().map(|v| v.sqrt()).collect();
    let kk = k.entries();
    Ok(DMatrix::from_fn(k.n(), k.n(), |i, j| {
        sqrt_p[i] * kk[(i, j)] * sqrt_p[j]
    }))
}

impl VendiKernel for SimilarityMatrix {
    fn len(&self) -> usize {
        self.n()
    }

    fn evaluate(&self, p: &ProbabilityVector) -> Result<VendiEvaluation> {
        let kp = weighted_similarity(self, p)?;
        evaluation_from_spectrum(&eigh(&kp)?.eigenvalues)
    }

    fn evaluate_with_gradient(&self, p: &ProbabilityVector) -> Result<(VendiEvaluation, Vec<f64>)> {
        p.require_positive()?;
        let kp = weighted_similarity(self, p)?;
        let eig = eigh(&kp)?;
        let eval = evaluation_from_spectrum(&eig.eigenvalues)?;
        // ∂H/∂p_i = (1/√p_i) Σ_j f'(Kᵖ)_ij K_ij √p_j. Since f'(Kᵖ)·Kᵖ = Q diag(λ f'(λ)) Qᵀ
        // this is (1/p_i) Σ_k Q_ik² λ_k f'(λ_k); null directions drop out exactly
        // instead of being amplified by f'(floor).
        let q = &eig.eigenvectors;
        let active: Vec<(usize, f64)> = eig
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l > EIGENVALUE_FLOOR)
            .map(|(k, &l)| (k, l * log_derivative(l)))
            .collect();
        let grad = p
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &pi)| active.iter().map(|&(k, w)| q[(i, k)] * q[(i, k)] * w).sum::<f64>() / pi)
            .collect();
        Ok((eval, grad))
    }
}

/// Implicit Gram kernel `K = X Xᵀ` over row-normalised features.
#[derive(Debug, Clone)]
pub struct FeatureKernel {
    x: DMatrix<f64>,
}

impl FeatureKernel {
    pub fn new(x: &FeatureMatrix) -> Result<Self> {
        if let Some(i) = (0..x.n()).find(|&i| (x.row_norm(i) - 1.0).abs() > UNIT_ROW_TOLERANCE) {
            return Err(Error::validation(format!(
                "row {i} has norm {}, the feature kernel needs row-normalised features",
                x.row_norm(i)
            )));
        }
        Ok(Self { x: x.data().clone() })
    }

    /// `Xᵀ diag(p) X`.
    fn weighted_covariance(&self, p: &ProbabilityVector) -> DMatrix<f64> {
        let mut scaled = self.x.clone();
        for (i, &pi) in p.as_slice().iter().enumerate() {
            scaled.row_mut(i).scale_mut(pi);
        }
        let c = self.x.transpose() * scaled;
        (&c + c.transpose()) * 0.5
    }
}

impl VendiKernel for FeatureKernel {
    fn len(&self) -> usize {
        self.x.nrows()
    }

    fn evaluate(&self, p: &ProbabilityVector) -> Result<VendiEvaluation> {
        check_len(self.len(), p)?;
        evaluation_from_spectrum(&eigh(&self.weighted_covariance(p))?.eigenvalues)
    }

    fn evaluate_with_gradient(&self, p: &ProbabilityVector) -> Result<(VendiEvaluation, Vec<f64>)> {
        check_len(self.len(), p)?;
        p.require_positive()?;
        let eig = eigh(&self.weighted_covariance(p))?;
        let eval = evaluation_from_spectrum(&eig.eigenvalues)?;
        // ∂/∂p_i Tr f(Xᵀ diag(p) X) = Σ_k (x_iᵀ v_k)² f'(λ_k). For positive p every
        // x_i is orthogonal to the null space of C, so only λ_k > floor count.
        let active: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&k| eig.eigenvalues[k] > EIGENVALUE_FLOOR)
            .collect();
        let proj = &self.x * eig.eigenvectors.select_columns(&active);
        let weights: Vec<f64> = active.iter().map(|&k| log_derivative(eig.eigenvalues[k])).collect();
        let grad = (0..self.len())
            .map(|i| proj.row(i).iter().zip(&weights).map(|(v, w)| v * v * w).sum())
            .collect();
        Ok((eval, grad))
    }
}

pub fn vendi_score(k: &impl VendiKernel, p: &ProbabilityVector) -> Result<VendiEvaluation> {
    k.evaluate(p)
}

/// `∂H_λ/∂p`; multiply by the score for the gradient of the score itself.
pub fn vendi_entropy_gradient(k: &impl VendiKernel, p: &ProbabilityVector) -> Result<Vec<f64>> {
    k.evaluate_with_gradient(p).map(|(_, g)| g)
}
