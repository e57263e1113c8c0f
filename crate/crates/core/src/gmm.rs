//! Gaussian mixtures fit by sample-weighted EM, and a two-mode demo that
//! contrasts a model fit to uniform weights (mode coverage) with one fit to
//! optimised diversity weights (mode balancing).
//!
//! Sample weights scale each row's responsibilities in the M-step, which is
//! the closed-form counterpart of drawing training batches in proportion to
//! the weights. Covariances are clipped from below at `covariance_floor` in
//! eigenvalue, the constrained maximiser, so the weighted log-likelihood stays
//! monotone.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{eigh, normalize_rows, FeatureMatrix};
use crate::metrics::{fid, sample_vendi, wfid};
use crate::optimizer::{optimize_weights, OptimizerConfig};
use crate::par::Execution;
use crate::sampler::{seeded_rng, AliasTable};
use crate::vendi::{FeatureKernel, ProbabilityVector};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    components: Vec<GmmComponent>,
}

impl GmmModel {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::validation("mixture needs at least one component"))?;
        let d = first.mean.len();
        let weights: Vec<f64> = components.iter().map(|c| c.weight).collect();
        ProbabilityVector::new(weights)?;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != d || c.covariance.shape() != (d, d) {
                return Err(Error::validation(format!("component {i} has inconsistent dimensions")));
            }
            let min = eigh(&c.covariance)?.eigenvalues.min();
            if min < -1e-12 {
                return Err(Error::validation(format!(
                    "component {i} covariance is not positive semi-definite"
                )));
            }
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmConfig {
    pub max_iters: usize,
    /// Stop once the mean weighted log-likelihood improves by less than this.
    pub tol: f64,
    /// Smallest covariance eigenvalue; `None` uses 1e-6 times the average
    /// per-feature weighted variance of the data.
    pub covariance_floor: Option<f64>,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-8,
            covariance_floor: None,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean weighted log-likelihood before each M-step.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Log-density evaluator for one component.
struct Density {
    log_weight: f64,
    mean: DVector<f64>,
    /// Inverse Cholesky factor `L⁻¹` of the covariance.
    inv_chol: DMatrix<f64>,
    log_norm: f64,
}

impl Density {
    fn new(c: &GmmComponent) -> Result<Self> {
        let d = c.mean.len() as f64;
        let chol = c
            .covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical("component covariance is singular"))?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let inv_chol = l
            .solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows()))
            .ok_or_else(|| Error::numerical("component covariance is singular"))?;
        Ok(Self {
            log_weight: c.weight.ln(),
            mean: c.mean.clone(),
            inv_chol,
            log_norm: -0.5 * (d * LN_2PI + log_det),
        })
    }

    fn log_joint(&self, x: &DVector<f64>) -> f64 {
        let z = &self.inv_chol * (x - &self.mean);
        self.log_weight + self.log_norm - 0.5 * z.norm_squared()
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Responsibilities (rows × components) and per-row log-likelihood.
fn e_step(rows: &[DVector<f64>], densities: &[Density], exec: Execution) -> (Vec<Vec<f64>>, Vec<f64>) {
    let out = exec.map_slice(rows, |x| {
        let joint: Vec<f64> = densities.iter().map(|d| d.log_joint(x)).collect();
        let ll = log_sum_exp(&joint);
        let resp: Vec<f64> = joint.iter().map(|j| (j - ll).exp()).collect();
        (resp, ll)
    });
    out.into_iter().unzip()
}

fn clip_covariance(cov: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let sym = (cov + cov.transpose()) * 0.5;
    Ok(eigh(&sym)?.map_spectrum(|l| l.max(floor)))
}

/// Weight, mean and covariance of one component.
type ComponentParams = (f64, DVector<f64>, DMatrix<f64>);

/// Weighted M-step for one component; `None` when it holds no mass.
fn m_step_component(
    rows: &[DVector<f64>],
    s: &[f64],
    resp: &[Vec<f64>],
    k: usize,
    floor: f64,
) -> Result<Option<ComponentParams>> {
    let d = rows[0].len();
    let mass: f64 = resp.iter().zip(s).map(|(r, si)| r[k] * si).sum();
    if mass <= 1e-12 {
        return Ok(None);
    }
    let mut mean = DVector::zeros(d);
    for ((x, r), si) in rows.iter().zip(resp).zip(s) {
        mean.axpy(r[k] * si / mass, x, 1.0);
    }
    let mut cov = DMatrix::zeros(d, d);
    for ((x, r), si) in rows.iter().zip(resp).zip(s) {
        let c = x - &mean;
        cov.ger(r[k] * si / mass, &c, &c, 1.0);
    }
    Ok(Some((mass, mean, clip_covariance(&cov, floor)?)))
}

fn weighted_kmeanspp(rows: &[DVector<f64>], s: &[f64], m: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let mut rng = seeded_rng(seed);
    let pick = |scores: &[f64], rng: &mut crate::sampler::SeededRng| -> Result<usize> {
        let p = ProbabilityVector::from_weights(scores)?;
        Ok(AliasTable::new(&p).draw(rng))
    };
    let mut centers = vec![rows[pick(s, &mut rng)?].clone()];
    while centers.len() < m {
        let scores: Vec<f64> = rows
            .iter()
            .zip(s)
            .map(|(x, si)| {
                let d2 = centers
                    .iter()
                    .map(|c| (x - c).norm_squared())
                    .fold(f64::INFINITY, f64::min);
                si * d2
            })
            .collect();
        if scores.iter().sum::<f64>() <= 0.0 {
            return Err(Error::numerical(format!(
                "cannot seed {m} components: fewer distinct weighted points"
            )));
        }
        centers.push(rows[pick(&scores, &mut rng)?].clone());
    }
    Ok(centers)
}

/// Fits an `m`-component mixture by sample-weighted EM.
pub fn fit_weighted_gmm(x: &FeatureMatrix, sample_weights: &[f64], m: usize, config: &GmmConfig) -> Result<GmmFit> {
    let n = x.n();
    if sample_weights.len() != n {
        return Err(Error::validation(format!(
            "{} weights for {n} rows",
            sample_weights.len()
        )));
    }
    if m == 0 || m > n {
        return Err(Error::validation(format!("component count {m} must be in 1..={n}")));
    }
    let total: f64 = sample_weights.iter().sum();
    if sample_weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
        return Err(Error::validation(
            "sample weights must be non-negative with a positive sum",
        ));
    }
    let s: Vec<f64> = sample_weights.iter().map(|w| w / total).collect();
    let rows: Vec<DVector<f64>> = (0..n).map(|i| x.data().row(i).transpose()).collect();

    let floor = match config.covariance_floor {
        Some(f) => f,
        None => {
            let stats = crate::metrics::weighted_gaussian_stats(x, &s)?;
            (1e-6 * stats.covariance.trace() / x.d() as f64).max(f64::MIN_POSITIVE)
        }
    };

    // Hard assignment to the seeded centres, then a first M-step.
    let centers = weighted_kmeanspp(&rows, &s, m, config.seed)?;
    let mut resp: Vec<Vec<f64>> = rows
        .iter()
        .map(|x| {
            let nearest = (0..m)
                .min_by(|&a, &b| {
                    (x - &centers[a])
                        .norm_squared()
                        .total_cmp(&(x - &centers[b]).norm_squared())
                })
                .expect("m > 0");
            (0..m).map(|k| if k == nearest { 1.0 } else { 0.0 }).collect()
        })
        .collect();

    let mut reseeded = vec![false; m];
    let mut model = m_step(&rows, &s, &resp, m, floor, &mut reseeded, &centers)?;
    let mut log_likelihood = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iters {
        let densities = model.components.iter().map(Density::new).collect::<Result<Vec<_>>>()?;
        let (r, row_ll) = e_step(&rows, &densities, config.execution);
        let ll: f64 = row_ll.iter().zip(&s).map(|(l, si)| l * si).sum();
        if !ll.is_finite() {
            return Err(Error::numerical(format!(
                "EM iteration {iterations}: non-finite log-likelihood"
            )));
        }
        let improvement = log_likelihood.last().map(|prev| ll - prev);
        log_likelihood.push(ll);
        resp = r;
        if improvement.is_some_and(|d| d.abs() < config.tol) {
            converged = true;
            break;
        }
        model = m_step(&rows, &s, &resp, m, floor, &mut reseeded, &centers)?;
        iterations += 1;
    }

    Ok(GmmFit {
        model,
        log_likelihood,
        iterations,
        converged,
    })
}

fn m_step(
    rows: &[DVector<f64>],
    s: &[f64],
    resp: &[Vec<f64>],
    m: usize,
    floor: f64,
    reseeded: &mut [bool],
    centers: &[DVector<f64>],
) -> Result<GmmModel> {
    let d = rows[0].len();
    let mut components = Vec::with_capacity(m);
    for k in 0..m {
        match m_step_component(rows, s, resp, k, floor)? {
            Some((mass, mean, covariance)) => components.push(GmmComponent {
                weight: mass,
                mean,
                covariance,
            }),
            None if !reseeded[k] => {
                // Empty component: restart it at its seed centre with a broad covariance.
                reseeded[k] = true;
                let spread = rows
                    .iter()
                    .zip(s)
                    .map(|(x, si)| si * (x - &centers[k]).norm_squared())
                    .sum::<f64>()
                    / d as f64;
                components.push(GmmComponent {
                    weight: 1.0 / m as f64,
                    mean: centers[k].clone(),
                    covariance: DMatrix::identity(d, d) * spread.max(floor),
                });
            }
            None => {
                return Err(Error::numerical(format!(
                    "mixture component {k} collapsed again after re-seeding"
                )))
            }
        }
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    components.iter_mut().for_each(|c| c.weight /= total);
    Ok(GmmModel { components })
}

/// `count` i.i.d. draws: a component by weight, then its Gaussian.
pub fn sample_gmm(model: &GmmModel, count: usize, seed: u64) -> Result<FeatureMatrix> {
    sample_gmm_labeled(model, count, seed).map(|(x, _)| x)
}

/// Like [`sample_gmm`], also returning each draw's component index.
pub fn sample_gmm_labeled(model: &GmmModel, count: usize, seed: u64) -> Result<(FeatureMatrix, Vec<usize>)> {
    if count == 0 {
        return Err(Error::validation("sample count must be positive"));
    }
    let d = model.dim();
    let table = AliasTable::new(&ProbabilityVector::new(model.weights())?);
    // Symmetric square roots tolerate zero covariance, unlike Cholesky.
    let factors = model
        .components
        .iter()
        .map(|c| eigh(&c.covariance).map(|e| e.map_spectrum(|l| l.max(0.0).sqrt())))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = seeded_rng(seed);
    let mut data = DMatrix::zeros(count, d);
    let mut which = Vec::with_capacity(count);
    for i in 0..count {
        let k = table.draw(&mut rng);
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &model.components[k].mean + &factors[k] * z;
        data.set_row(i, &x.transpose());
        which.push(k);
    }
    Ok((FeatureMatrix::new(data)?, which))
}

/// Parameters of [`mode_balance_demo`].
#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub n_major: usize,
    pub n_minor: usize,
    pub gamma: f64,
    pub seed: u64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub dim: usize,
    /// Distance of each mode centre from the origin, along its own axis.
    pub mode_offset: f64,
    /// Per-coordinate standard deviation within a mode.
    pub mode_spread: f64,
    /// Draws per model; `None` draws as many as the dataset has rows.
    pub sample_count: Option<usize>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            n_major: 2000,
            n_minor: 200,
            gamma: 1.0,
            seed: 0,
            iterations: 100,
            learning_rate: 0.1,
            dim: 4,
            mode_offset: 6.0,
            mode_spread: 0.5,
            sample_count: None,
        }
    }
}

/// Metrics for one fitted model in the demo.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    /// Mixture weight on components whose mean is nearer the minority centre.
    pub minority_mass: f64,
    pub sample_vendi: f64,
    /// Against the unweighted data statistics.
    pub fid: f64,
    /// Against the diversity-weighted data statistics.
    pub wfid: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoReport {
    pub config: DemoConfig,
    pub data_vendi_uniform: f64,
    pub data_vendi_weighted: f64,
    /// Total diversity-weight probability on minority-mode rows.
    pub minority_probability: f64,
    pub baseline: ModelSummary,
    pub diversity: ModelSummary,
}

impl DemoReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,metric,value\n");
        let _ = writeln!(out, "data,vendi_uniform,{}", self.data_vendi_uniform);
        let _ = writeln!(out, "data,vendi_weighted,{}", self.data_vendi_weighted);
        let _ = writeln!(out, "data,minority_probability,{}", self.minority_probability);
        for (name, m) in [("baseline", &self.baseline), ("diversity", &self.diversity)] {
            let _ = writeln!(out, "{name},minority_mass,{}", m.minority_mass);
            let _ = writeln!(out, "{name},sample_vendi,{}", m.sample_vendi);
            let _ = writeln!(out, "{name},fid,{}", m.fid);
            let _ = writeln!(out, "{name},wfid,{}", m.wfid);
        }
        out
    }

    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "mode balancing demo: {} major / {} minor, gamma {}",
            c.n_major, c.n_minor, c.gamma
        );
        let _ = writeln!(
            out,
            "  data VS uniform {:.4}, weighted {:.4}; minority probability {:.4}",
            self.data_vendi_uniform, self.data_vendi_weighted, self.minority_probability
        );
        let _ = writeln!(
            out,
            "  {:<10} {:>14} {:>12} {:>10} {:>10}",
            "model", "minority_mass", "sample_VS", "FID", "wFID"
        );
        for (name, m) in [("baseline", &self.baseline), ("diversity", &self.diversity)] {
            let _ = writeln!(
                out,
                "  {:<10} {:>14.4} {:>12.4} {:>10.4} {:>10.4}",
                name, m.minority_mass, m.sample_vendi, m.fid, m.wfid
            );
        }
        out
    }
}

/// Imbalanced two-mode data: majority rows around `offset·e₀`, minority rows
/// around `offset·e₁`. Returns the features and a minority flag per row.
pub fn two_mode_dataset(config: &DemoConfig) -> Result<(FeatureMatrix, Vec<bool>)> {
    if config.dim < 2 {
        return Err(Error::validation("demo needs at least 2 feature dimensions"));
    }
    let mut rng = seeded_rng(config.seed);
    let n = config.n_major + config.n_minor;
    let mut data = DMatrix::zeros(n, config.dim);
    let mut minority = Vec::with_capacity(n);
    for i in 0..n {
        let is_minor = i >= config.n_major;
        for j in 0..config.dim {
            data[(i, j)] = config.mode_spread * rng.sample::<f64, _>(StandardNormal);
        }
        data[(i, usize::from(is_minor))] += config.mode_offset;
        minority.push(is_minor);
    }
    let labels = minority.iter().map(|&m| i64::from(m)).collect();
    Ok((FeatureMatrix::with_labels(data, Some(labels))?, minority))
}

fn summarize(
    model: &GmmModel,
    data: &FeatureMatrix,
    weights: &[f64],
    minor_center: &DVector<f64>,
    major_center: &DVector<f64>,
    count: usize,
    seed: u64,
) -> Result<ModelSummary> {
    let minority_mass = model
        .components()
        .iter()
        .filter(|c| (&c.mean - minor_center).norm() < (&c.mean - major_center).norm())
        .map(|c| c.weight)
        .sum();
    let draws = sample_gmm(model, count, seed)?;
    Ok(ModelSummary {
        minority_mass,
        sample_vendi: sample_vendi(&draws)?,
        fid: fid(&draws, data)?,
        wfid: wfid(&draws, data, weights)?,
    })
}

/// Runs data generation, weight optimisation, two mixture fits and their
/// evaluation.
pub fn mode_balance_demo(config: &DemoConfig) -> Result<DemoReport> {
    if config.n_minor < 10 || config.n_major < config.n_minor {
        return Err(Error::validation(format!(
            "demo needs n_major >= n_minor >= 10, got {} and {}",
            config.n_major, config.n_minor
        )));
    }
    let (data, minority) = two_mode_dataset(config)?;
    let kernel = FeatureKernel::new(&normalize_rows(&data)?)?;
    let opt = OptimizerConfig::default()
        .with_gamma(config.gamma)
        .with_iterations(config.iterations)
        .with_learning_rate(config.learning_rate);
    let opt = OptimizerConfig {
        seed: config.seed,
        ..opt
    };
    let trace = optimize_weights(&kernel, &opt)?;
    let p = trace.final_probabilities.as_slice();
    let minority_probability = p.iter().zip(&minority).filter(|(_, &m)| m).map(|(v, _)| v).sum();

    let gmm_config = GmmConfig {
        seed: config.seed,
        ..GmmConfig::default()
    };
    let n = data.n();
    let baseline = fit_weighted_gmm(&data, &vec![1.0; n], 2, &gmm_config)?.model;
    let diversity = fit_weighted_gmm(&data, p, 2, &gmm_config)?.model;

    let d = config.dim;
    let major_center = DVector::from_fn(d, |j, _| if j == 0 { config.mode_offset } else { 0.0 });
    let minor_center = DVector::from_fn(d, |j, _| if j == 1 { config.mode_offset } else { 0.0 });
    let count = config.sample_count.unwrap_or(n);
    let sample_seed = config.seed.wrapping_add(1);
    Ok(DemoReport {
        config: config.clone(),
        data_vendi_uniform: trace.initial_record().vendi_score,
        data_vendi_weighted: trace.final_record().vendi_score,
        minority_probability,
        baseline: summarize(&baseline, &data, p, &minor_center, &major_center, count, sample_seed)?,
        diversity: summarize(&diversity, &data, p, &minor_center, &major_center, count, sample_seed)?,
    })
}
