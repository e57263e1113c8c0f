//! Evaluation metrics for generated samples: Fréchet distance between
//! Gaussian fits (FID and its weighted-target variant wFID), the
//! mutual-information form of the Inception Score, k-NN precision/recall,
//! and the sample Vendi Score.

use std::fmt::Write as _;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{eigh, gram_matrix, normalize_rows, FeatureMatrix};
use crate::par::Execution;
use crate::vendi::{FeatureKernel, ProbabilityVector, VendiKernel};

/// Mean and covariance of a (possibly weighted) feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    /// Normalised by the total weight (by `n` when unweighted).
    pub covariance: DMatrix<f64>,
    pub weighted: bool,
    pub total_weight: f64,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn gaussian_stats(x: &FeatureMatrix) -> Result<GaussianStats> {
    let n = x.n();
    if n < 2 {
        return Err(Error::validation(format!(
            "need at least 2 rows for statistics, got {n}"
        )));
    }
    let data = x.data();
    let mean = data.row_sum().transpose() / n as f64;
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / n as f64;
    Ok(GaussianStats {
        mean,
        covariance: (&cov + cov.transpose()) * 0.5,
        weighted: false,
        total_weight: n as f64,
    })
}

/// `μ* = Σ w_i x_i / Σ w_i`, `C = Σ w_i (x_i − μ*)(x_i − μ*)ᵀ / Σ w_i`.
pub fn weighted_gaussian_stats(x: &FeatureMatrix, w: &[f64]) -> Result<GaussianStats> {
    if w.len() != x.n() {
        return Err(Error::validation(format!("{} weights for {} rows", w.len(), x.n())));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::validation("weights must be finite and non-negative"));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::validation("weights are all zero"));
    }
    let data = x.data();
    let mut mean = DVector::zeros(x.d());
    for (i, &wi) in w.iter().enumerate() {
        mean.axpy(wi, &data.row(i).transpose(), 1.0);
    }
    mean /= total;
    let mut scaled = data.clone();
    let mut centered = data.clone();
    for (i, &wi) in w.iter().enumerate() {
        let mut c = centered.row_mut(i);
        c -= mean.transpose();
        scaled.set_row(i, &(c.clone_owned() * wi));
    }
    let cov = centered.transpose() * scaled / total;
    Ok(GaussianStats {
        mean,
        covariance: (&cov + cov.transpose()) * 0.5,
        weighted: true,
        total_weight: total,
    })
}

/// Symmetric PSD square root via the spectrum, negative round-off clamped to 0.
fn psd_sqrt(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = eigh(a)?;
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-6 {
        warn!("{what} has eigenvalue {min:e}; clamping to zero");
    }
    Ok(eig.map_spectrum(|l| l.max(0.0).sqrt()))
}

/// `‖μ_a − μ_b‖² + Tr(C_a + C_b − 2 (C_a^{1/2} C_b C_a^{1/2})^{1/2})`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "statistics have dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let sqrt_a = psd_sqrt(&a.covariance, "covariance")?;
    let sandwich = &sqrt_a * &b.covariance * &sqrt_a;
    let sandwich = (&sandwich + sandwich.transpose()) * 0.5;
    let cross = psd_sqrt(&sandwich, "covariance product")?.trace();
    let d = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

pub fn fid(model: &FeatureMatrix, data: &FeatureMatrix) -> Result<f64> {
    check_same_dim(model, data)?;
    frechet_distance(&gaussian_stats(model)?, &gaussian_stats(data)?)
}

/// Fréchet distance from the unweighted model statistics to the weighted
/// data statistics.
pub fn wfid(model: &FeatureMatrix, data: &FeatureMatrix, w: &[f64]) -> Result<f64> {
    check_same_dim(model, data)?;
    frechet_distance(&gaussian_stats(model)?, &weighted_gaussian_stats(data, w)?)
}

fn check_same_dim(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.d() != b.d() {
        return Err(Error::validation(format!(
            "feature sets have {} and {} columns",
            a.d(),
            b.d()
        )));
    }
    Ok(())
}

/// Rows of class-conditional probabilities `p(y|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilityMatrix {
    rows: DMatrix<f64>,
}

impl ClassProbabilityMatrix {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::validation("class-probability matrix is empty"));
        }
        for (i, row) in rows.row_iter().enumerate() {
            let sum: f64 = row.sum();
            if row.iter().any(|v| !v.is_finite() || *v < -1e-6 || *v > 1.0 + 1e-6) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::validation(format!(
                    "row {i} is not a probability distribution (sum {sum})"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::validation("ragged class-probability rows"));
        }
        Self::new(DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]))
    }

    pub fn from_features(x: &FeatureMatrix) -> Result<Self> {
        Self::new(x.data().clone())
    }

    pub fn samples(&self) -> usize {
        self.rows.nrows()
    }

    pub fn classes(&self) -> usize {
        self.rows.ncols()
    }
}

fn plogp_sum<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    -values.filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `H(mean_x p(y|x)) − mean_x H(p(y|x))` over the whole set, natural log and
/// no exponential.
pub fn mutual_information_score(cond: &ClassProbabilityMatrix) -> f64 {
    let m = cond.samples() as f64;
    let marginal = cond.rows.row_sum() / m;
    let marginal_entropy = plogp_sum(marginal.iter());
    let mean_conditional = cond.rows.row_iter().map(|r| plogp_sum(r.iter())).sum::<f64>() / m;
    (marginal_entropy - mean_conditional).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Distance {
    #[default]
    Euclidean,
    /// `1 − cos(a, b)`.
    Cosine,
}

impl Distance {
    pub fn between(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Distance::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(Distance::Euclidean),
            "cosine" => Ok(Distance::Cosine),
            other => Err(Error::Usage(format!("unknown distance {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

/// Distance from each point to its k-th nearest neighbour in the same set.
pub fn knn_radii(points: &[Vec<f64>], k: usize, distance: Distance, exec: Execution) -> Vec<f64> {
    exec.map_range(points.len(), |i| {
        let mut d: Vec<f64> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| distance.between(&points[i], q))
            .collect();
        let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
        *kth
    })
}

/// Fraction of `queries` inside the union of balls around `support` with
/// the given radii.
pub fn manifold_coverage(
    support: &[Vec<f64>],
    radii: &[f64],
    queries: &[Vec<f64>],
    distance: Distance,
    exec: Execution,
) -> f64 {
    let inside = exec.map_slice(queries, |q| {
        support.iter().zip(radii).any(|(s, &r)| distance.between(q, s) <= r)
    });
    inside.iter().filter(|&&b| b).count() as f64 / queries.len() as f64
}

/// k-NN manifold precision and recall.
pub fn precision_recall(real: &FeatureMatrix, generated: &FeatureMatrix, k: usize) -> Result<PrecisionRecall> {
    precision_recall_with(real, generated, k, Distance::Euclidean, Execution::default())
}

pub fn precision_recall_with(
    real: &FeatureMatrix,
    generated: &FeatureMatrix,
    k: usize,
    distance: Distance,
    exec: Execution,
) -> Result<PrecisionRecall> {
    check_same_dim(real, generated)?;
    if k == 0 {
        return Err(Error::validation("k must be positive"));
    }
    for (name, n) in [("real", real.n()), ("generated", generated.n())] {
        if k >= n {
            return Err(Error::validation(format!(
                "k = {k} needs more than {k} {name} points, got {n}"
            )));
        }
    }
    let real_rows = real.to_rows();
    let gen_rows = generated.to_rows();
    let real_radii = knn_radii(&real_rows, k, distance, exec);
    let gen_radii = knn_radii(&gen_rows, k, distance, exec);
    Ok(PrecisionRecall {
        precision: manifold_coverage(&real_rows, &real_radii, &gen_rows, distance, exec),
        recall: manifold_coverage(&gen_rows, &gen_radii, &real_rows, distance, exec),
    })
}

/// Vendi Score of a sample with uniform probabilities over rows.
pub fn sample_vendi(features: &FeatureMatrix) -> Result<f64> {
    let x = normalize_rows(features)?;
    let p = ProbabilityVector::uniform(x.n());
    let eval = if x.d() < x.n() {
        FeatureKernel::new(&x)?.evaluate(&p)?
    } else {
        gram_matrix(&x)?.evaluate(&p)?
    };
    Ok(eval.score)
}

/// Named metric values, written as `metric_name,value` rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub entries: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric_name,value\n");
        for (name, value) in &self.entries {
            let _ = writeln!(out, "{name},{value}");
        }
        out
    }
}

/// Options for [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvaluationInputs<'a> {
    pub model: &'a FeatureMatrix,
    pub data: &'a FeatureMatrix,
    pub weights: Option<&'a [f64]>,
    pub cond_probs: Option<&'a ClassProbabilityMatrix>,
    pub k: usize,
    pub distance: Distance,
}

/// Every applicable metric for one model/data pair.
pub fn evaluate(inputs: &EvaluationInputs<'_>, exec: Execution) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    report.push("vendi_score", sample_vendi(inputs.model)?);
    let model_stats = gaussian_stats(inputs.model)?;
    check_same_dim(inputs.model, inputs.data)?;
    report.push("fid", frechet_distance(&model_stats, &gaussian_stats(inputs.data)?)?);
    if let Some(w) = inputs.weights {
        let weighted = weighted_gaussian_stats(inputs.data, w)?;
        report.push("wfid", frechet_distance(&model_stats, &weighted)?);
    }
    let pr = precision_recall_with(inputs.data, inputs.model, inputs.k, inputs.distance, exec)?;
    report.push("precision", pr.precision);
    report.push("recall", pr.recall);
    if let Some(cond) = inputs.cond_probs {
        report.push("inception_score_mi", mutual_information_score(cond));
    }
    Ok(report)
}
