//! Diversity-weight optimisation.
//!
//! Minimises `L(p) = −γ·VS(K, p) − (1−γ)·H(p)` over the simplex. The
//! probabilities are the normalised exponentials of free log-weights `u`, so
//! every `p_i` stays strictly positive and `Σp = 1` holds by construction.
//! Gradients are taken with respect to `u` through the normalisation and fed
//! to Adam; the learning rate is multiplied by a decay factor every few steps.
//! There is no early stopping: a run always takes the configured number of
//! iterations.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::vendi::{shannon_entropy, shannon_entropy_gradient, ProbabilityVector, VendiKernel};

/// Largest item count accepted by default; each iteration decomposes a
/// matrix of this order.
pub const DEFAULT_MAX_ITEMS: usize = 8192;

/// Log-weight gradient components smaller than this fraction of
/// `Σ_j p_j |∂L/∂p_j|` are round-off and are zeroed before the Adam step.
/// Adam normalises by the running gradient magnitude, so left alone such
/// noise at a symmetric stationary point grows into visible drift.
pub const GRADIENT_NOISE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Balance between the diversity term (1) and the entropy term (0).
    pub gamma: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Unused by the deterministic algorithm; recorded for reproducibility.
    pub seed: u64,
    pub max_items: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            iterations: 100,
            learning_rate: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            lr_decay_factor: 0.99,
            lr_decay_every: 5,
            seed: 0,
            max_items: DEFAULT_MAX_ITEMS,
        }
    }
}

impl OptimizerConfig {
    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::validation(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !open_unit(self.adam_beta1) || !open_unit(self.adam_beta2) {
            return Err(Error::validation("Adam betas must lie in (0, 1)"));
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return Err(Error::validation("Adam epsilon must be positive"));
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor <= 0.0 || self.lr_decay_every == 0 {
            return Err(Error::validation(
                "learning-rate decay needs a positive factor and period",
            ));
        }
        Ok(())
    }
}

/// Log-weights and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct LogWeightState {
    pub u: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step_count: u64,
}

impl LogWeightState {
    /// All log-weights zero, i.e. unit weights and a uniform distribution.
    pub fn uniform(n: usize) -> Self {
        Self {
            u: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        }
    }

    pub fn probabilities(&self) -> Result<ProbabilityVector> {
        ProbabilityVector::from_log_weights(&self.u)
    }

    /// One bias-corrected Adam update of `u` against `gradient`.
    pub fn adam_step(&mut self, gradient: &[f64], lr: f64, config: &OptimizerConfig) -> Result<()> {
        if gradient.len() != self.u.len() {
            return Err(Error::validation(format!(
                "gradient has {} entries for {} weights",
                gradient.len(),
                self.u.len()
            )));
        }
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (((u, m), v), &g) in self
            .u
            .iter_mut()
            .zip(&mut self.adam_m)
            .zip(&mut self.adam_v)
            .zip(gradient)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *u -= lr * m_hat / (v_hat.sqrt() + config.adam_epsilon);
        }
        Ok(())
    }
}

/// Loss value with its two components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub vendi_score: f64,
    pub entropy: f64,
}

pub fn loss(k: &impl VendiKernel, p: &ProbabilityVector, gamma: f64) -> Result<LossTerms> {
    let vs = k.evaluate(p)?.score;
    let h = shannon_entropy(p);
    Ok(LossTerms {
        loss: -gamma * vs - (1.0 - gamma) * h,
        vendi_score: vs,
        entropy: h,
    })
}

/// Loss and its gradient with respect to the log-weights.
pub fn loss_and_log_weight_gradient(
    k: &impl VendiKernel,
    p: &ProbabilityVector,
    gamma: f64,
) -> Result<(LossTerms, Vec<f64>)> {
    gradient_with_scale(k, p, gamma).map(|(terms, grad, _)| (terms, grad))
}

/// Also returns `Σ_j p_j |∂L/∂p_j|`, the magnitude the noise floor is relative to.
fn gradient_with_scale(k: &impl VendiKernel, p: &ProbabilityVector, gamma: f64) -> Result<(LossTerms, Vec<f64>, f64)> {
    let (eval, vs_entropy_grad) = k.evaluate_with_gradient(p)?;
    let vs = eval.score;
    let h = shannon_entropy(p);
    let h_grad = shannon_entropy_gradient(p)?;
    let dl_dp: Vec<f64> = vs_entropy_grad
        .iter()
        .zip(&h_grad)
        .map(|(gv, gh)| -gamma * vs * gv - (1.0 - gamma) * gh)
        .collect();
    // p = softmax(u): dL/du_j = p_j (dL/dp_j − Σ_i p_i dL/dp_i)
    let probs = p.as_slice();
    let mean: f64 = probs.iter().zip(&dl_dp).map(|(p, g)| p * g).sum();
    let grad: Vec<f64> = probs.iter().zip(&dl_dp).map(|(p, g)| p * (g - mean)).collect();
    let scale: f64 = probs.iter().zip(&dl_dp).map(|(p, g)| p * g.abs()).sum();
    Ok((
        LossTerms {
            loss: -gamma * vs - (1.0 - gamma) * h,
            vendi_score: vs,
            entropy: h,
        },
        grad,
        scale,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub loss: f64,
    pub vendi_score: f64,
    pub entropy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    /// `iterations + 1` records; record 0 is the uniform starting point.
    pub records: Vec<TraceRecord>,
    pub final_probabilities: ProbabilityVector,
    pub final_relative_weights: Vec<f64>,
    pub final_state: LogWeightState,
}

impl OptimizationTrace {
    pub fn final_record(&self) -> &TraceRecord {
        self.records.last().expect("trace always has the initial record")
    }

    pub fn initial_record(&self) -> &TraceRecord {
        &self.records[0]
    }

    /// `iteration,loss,vs,entropy,lr`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,vs,entropy,lr\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.iteration, r.loss, r.vendi_score, r.entropy, r.learning_rate
            );
        }
        out
    }

    /// `index,label,probability,relative_weight`; the label column is empty
    /// when labels are unknown.
    pub fn weights_csv(&self, labels: Option<&[i64]>) -> String {
        weights_csv(&self.final_probabilities, labels)
    }
}

pub fn weights_csv(p: &ProbabilityVector, labels: Option<&[i64]>) -> String {
    let mut out = String::from("index,label,probability,relative_weight\n");
    for (i, (pi, rw)) in p.as_slice().iter().zip(p.relative_weights()).enumerate() {
        let label = labels.and_then(|l| l.get(i)).map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{i},{label},{pi},{rw}");
    }
    out
}

/// Runs the fixed-length log-space Adam optimisation from uniform weights.
pub fn optimize_weights(k: &impl VendiKernel, config: &OptimizerConfig) -> Result<OptimizationTrace> {
    config.validate()?;
    let n = k.len();
    if n < 2 {
        return Err(Error::validation(format!("need at least 2 items, got {n}")));
    }
    if n > config.max_items {
        return Err(Error::validation(format!(
            "{n} items exceeds the configured maximum of {}",
            config.max_items
        )));
    }

    let mut state = LogWeightState::uniform(n);
    let mut lr = config.learning_rate;
    let mut records = Vec::with_capacity(config.iterations + 1);

    for iteration in 0..config.iterations {
        let p = state.probabilities()?;
        let (terms, mut grad, scale) = gradient_with_scale(k, &p, config.gamma)
            .map_err(|e| Error::numerical(format!("iteration {iteration}: {e}")))?;
        check_finite(iteration, &terms, &grad)?;
        let floor = GRADIENT_NOISE_FLOOR * scale;
        grad.iter_mut().filter(|g| g.abs() <= floor).for_each(|g| *g = 0.0);
        records.push(TraceRecord {
            iteration,
            loss: terms.loss,
            vendi_score: terms.vendi_score,
            entropy: terms.entropy,
            learning_rate: lr,
        });
        state.adam_step(&grad, lr, config)?;
        if state.step_count.is_multiple_of(config.lr_decay_every as u64) {
            lr *= config.lr_decay_factor;
        }
    }

    let iteration = config.iterations;
    let p = state
        .probabilities()
        .map_err(|e| Error::numerical(format!("iteration {iteration}: {e}")))?;
    let terms = loss(k, &p, config.gamma).map_err(|e| Error::numerical(format!("iteration {iteration}: {e}")))?;
    check_finite(iteration, &terms, &[])?;
    records.push(TraceRecord {
        iteration,
        loss: terms.loss,
        vendi_score: terms.vendi_score,
        entropy: terms.entropy,
        learning_rate: lr,
    });

    Ok(OptimizationTrace {
        records,
        final_relative_weights: p.relative_weights(),
        final_probabilities: p,
        final_state: state,
    })
}

fn check_finite(iteration: usize, terms: &LossTerms, grad: &[f64]) -> Result<()> {
    if !terms.loss.is_finite() {
        return Err(Error::numerical(format!(
            "iteration {iteration}: non-finite loss (vs {}, entropy {})",
            terms.vendi_score, terms.entropy
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numerical(format!(
            "iteration {iteration}: non-finite gradient at item {i}"
        )));
    }
    Ok(())
}

/// Independent runs over a list of `gamma` values sharing one kernel.
pub fn optimize_sweep(
    k: &impl VendiKernel,
    gammas: &[f64],
    base: &OptimizerConfig,
    exec: Execution,
) -> Vec<Result<OptimizationTrace>> {
    exec.map_slice(gammas, |&g| optimize_weights(k, &base.clone().with_gamma(g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gram_matrix, normalize_rows, FeatureMatrix, SimilarityMatrix};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k_a() -> SimilarityMatrix {
        SimilarityMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 1.0, 1.0],
            vec![0.0, 1.0, 1.0, 1.0],
            vec![0.0, 1.0, 1.0, 1.0],
        ])
        .unwrap()
    }

    fn random_kernel(n: usize, d: usize, seed: u64) -> SimilarityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        gram_matrix(&normalize_rows(&FeatureMatrix::from_rows(&rows).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn loss_examples() {
        let t = loss(&SimilarityMatrix::identity(2), &ProbabilityVector::uniform(2), 1.0).unwrap();
        assert_abs_diff_eq!(t.loss, -2.0, epsilon = 1e-12);

        let t = loss(&k_a(), &ProbabilityVector::uniform(4), 0.0).unwrap();
        assert_abs_diff_eq!(t.loss, -(4f64.ln()), epsilon = 1e-12);

        let pc = ProbabilityVector::new(vec![0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0]).unwrap();
        let t = loss(&k_a(), &pc, 0.8).unwrap();
        assert_abs_diff_eq!(t.entropy, 1.2424, epsilon = 1e-4);
        assert_abs_diff_eq!(t.loss, -1.84848, epsilon = 1e-4);
    }

    #[test]
    fn adam_fixed_point_and_first_step() {
        let cfg = OptimizerConfig::default();
        let mut s = LogWeightState::uniform(3);
        for _ in 0..10 {
            s.adam_step(&[0.0; 3], 0.1, &cfg).unwrap();
        }
        assert_eq!(s.u, vec![0.0; 3]);

        let mut s = LogWeightState::uniform(2);
        s.adam_step(&[1.0, 1.0], 0.1, &cfg).unwrap();
        // m̂ = v̂ = 1 after bias correction
        assert_abs_diff_eq!(s.u[0], -0.1 / (1.0 + 1e-8), epsilon = 1e-15);
        assert_eq!(s.u[0], s.u[1]);
        assert_eq!(s.step_count, 1);

        assert!(s.adam_step(&[1.0], 0.1, &cfg).is_err());
    }

    #[test]
    fn adam_preserves_symmetry() {
        let cfg = OptimizerConfig::default();
        let mut s = LogWeightState::uniform(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let g: f64 = rng.random_range(-1.0..1.0);
            s.adam_step(&[g, g, 0.3], 0.05, &cfg).unwrap();
        }
        assert_eq!(s.u[0], s.u[1]);
    }

    #[test]
    fn log_weight_gradient_matches_finite_differences() {
        let k = random_kernel(7, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let u: Vec<f64> = (0..7).map(|_| rng.random_range(-0.5..0.5)).collect();
        for gamma in [0.0, 0.6, 1.0] {
            let p = ProbabilityVector::from_log_weights(&u).unwrap();
            let (_, g) = loss_and_log_weight_gradient(&k, &p, gamma).unwrap();
            let h = 1e-6;
            for i in 0..7 {
                let mut up = u.clone();
                up[i] += h;
                let mut um = u.clone();
                um[i] -= h;
                let lp = loss(&k, &ProbabilityVector::from_log_weights(&up).unwrap(), gamma)
                    .unwrap()
                    .loss;
                let lm = loss(&k, &ProbabilityVector::from_log_weights(&um).unwrap(), gamma)
                    .unwrap()
                    .loss;
                assert_abs_diff_eq!(g[i], (lp - lm) / (2.0 * h), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn recovers_balanced_weights_on_duplicates() {
        let cfg = OptimizerConfig::default().with_gamma(1.0).with_iterations(500);
        let trace = optimize_weights(&k_a(), &cfg).unwrap();
        let target = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        for (p, t) in trace.final_probabilities.as_slice().iter().zip(target) {
            assert!((p - t).abs() < 1e-3, "{:?}", trace.final_probabilities);
        }
        assert!(trace.final_record().vendi_score >= 1.999);
    }

    #[test]
    fn entropy_only_stays_uniform() {
        let k = random_kernel(12, 3, 1);
        let trace = optimize_weights(&k, &OptimizerConfig::default().with_gamma(0.0)).unwrap();
        for p in trace.final_probabilities.as_slice() {
            assert!((p - 1.0 / 12.0).abs() < 1e-6);
        }
    }

    #[test]
    fn orthogonal_set_stays_uniform() {
        for gamma in [0.3, 0.8, 1.0] {
            let trace = optimize_weights(
                &SimilarityMatrix::identity(9),
                &OptimizerConfig::default().with_gamma(gamma),
            )
            .unwrap();
            for p in trace.final_probabilities.as_slice() {
                assert!((p - 1.0 / 9.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn balanced_modes_stay_uniform() {
        // Within a block the score is flat, so only round-off could move p.
        let k = SimilarityMatrix::new(nalgebra::DMatrix::from_fn(12, 12, |i, j| {
            f64::from(u8::from(i / 4 == j / 4))
        }))
        .unwrap();
        for gamma in [0.2, 0.5, 0.8, 1.0] {
            let trace = optimize_weights(&k, &OptimizerConfig::default().with_gamma(gamma)).unwrap();
            for p in trace.final_probabilities.as_slice() {
                assert!((p - 1.0 / 12.0).abs() < 1e-6, "gamma {gamma}: {p}");
            }
        }
    }

    #[test]
    fn trace_shape_and_decay() {
        let cfg = OptimizerConfig::default().with_iterations(12);
        let trace = optimize_weights(&random_kernel(6, 3, 2), &cfg).unwrap();
        assert_eq!(trace.records.len(), 13);
        assert_eq!(trace.records[4].learning_rate, 0.1);
        assert_abs_diff_eq!(trace.records[5].learning_rate, 0.099, epsilon = 1e-15);
        assert_abs_diff_eq!(trace.records[10].learning_rate, 0.1 * 0.99 * 0.99, epsilon = 1e-15);
        let sum: f64 = trace.final_relative_weights.iter().sum();
        assert_abs_diff_eq!(sum, 6.0, epsilon = 1e-9);
        let csv = trace.to_csv();
        assert!(csv.starts_with("iteration,loss,vs,entropy,lr\n0,"));
        assert_eq!(csv.lines().count(), 14);
    }

    #[test]
    fn improves_on_uniform_and_is_deterministic() {
        let k = random_kernel(30, 5, 3);
        let cfg = OptimizerConfig::default().with_gamma(1.0);
        let a = optimize_weights(&k, &cfg).unwrap();
        let b = optimize_weights(&k, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.final_record().vendi_score >= a.initial_record().vendi_score - 1e-9);
    }

    #[test]
    fn permutation_equivariant() {
        let k = random_kernel(10, 4, 8);
        let perm: Vec<usize> = vec![3, 7, 0, 9, 1, 5, 2, 8, 6, 4];
        let cfg = OptimizerConfig::default().with_gamma(0.8);
        let a = optimize_weights(&k, &cfg).unwrap();
        let b = optimize_weights(&k.permuted(&perm), &cfg).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            let (pa, pb) = (
                a.final_probabilities.as_slice()[src],
                b.final_probabilities.as_slice()[i],
            );
            assert!((pa - pb).abs() <= 1e-8, "{pa} vs {pb}");
        }
    }

    #[test]
    fn simplex_holds_every_iteration() {
        let k = random_kernel(15, 4, 4);
        let cfg = OptimizerConfig::default().with_gamma(1.0);
        let mut state = LogWeightState::uniform(15);
        for _ in 0..60 {
            let p = state.probabilities().unwrap();
            let s: f64 = p.as_slice().iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
            assert!(p.as_slice().iter().all(|&v| v > 0.0 && v <= 1.0));
            let (_, g) = loss_and_log_weight_gradient(&k, &p, 1.0).unwrap();
            state.adam_step(&g, 0.1, &cfg).unwrap();
        }
    }

    #[test]
    fn config_validation() {
        assert!(optimize_weights(&k_a(), &OptimizerConfig::default().with_gamma(1.5)).is_err());
        assert!(optimize_weights(&k_a(), &OptimizerConfig::default().with_learning_rate(0.0)).is_err());
        assert!(optimize_weights(&SimilarityMatrix::identity(1), &OptimizerConfig::default()).is_err());
        let cfg = OptimizerConfig {
            max_items: 3,
            ..Default::default()
        };
        assert!(optimize_weights(&k_a(), &cfg).is_err());
    }

    #[test]
    fn sweep_matches_individual_runs() {
        let k = random_kernel(20, 4, 6);
        let base = OptimizerConfig::default().with_iterations(30);
        let seq = optimize_sweep(&k, &[0.6, 0.8, 1.0], &base, Execution::Sequential);
        let par = optimize_sweep(&k, &[0.6, 0.8, 1.0], &base, Execution::Parallel);
        for (a, b) in seq.into_iter().zip(par) {
            assert_eq!(a.unwrap(), b.unwrap());
        }
    }

    #[test]
    fn weights_csv_layout() {
        let p = ProbabilityVector::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(
            weights_csv(&p, Some(&[3, 8])),
            "index,label,probability,relative_weight\n0,3,0.25,0.5\n1,8,0.75,1.5\n"
        );
        assert_eq!(
            weights_csv(&p, None),
            "index,label,probability,relative_weight\n0,,0.25,0.5\n1,,0.75,1.5\n"
        );
    }
}
