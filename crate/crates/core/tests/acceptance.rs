//! Acceptance suite. Runs without the libtest harness so every check prints
//! one `[PASS]` or `[FAIL]` line; the process exits nonzero if any fails.

use std::fs;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use divw::gmm::{mode_balance_demo, DemoConfig};
use divw::metrics::{fid, mutual_information_score, precision_recall, wfid, ClassProbabilityMatrix, PrecisionRecall};
use divw::optimizer::optimize_sweep;
use divw::sampler::{build_alias_table, sample_batch};
use divw::vendi::vendi_entropy_gradient;
use divw::{
    gram_matrix, normalize_rows, optimize_weights, vendi_score, Execution, FeatureMatrix, OptimizerConfig,
    ProbabilityVector, SimilarityMatrix,
};

fn report(id: &str, what: &str, ok: bool, detail: String, elapsed: Duration) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("[{tag}] {id} {what}: {detail} ({:.3}s)", elapsed.as_secs_f64());
}

fn check(id: &str, what: &str, start: Instant, limit: Option<Duration>, ok: bool, detail: String) -> bool {
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed < l);
    let detail = match limit {
        Some(l) if !in_time => format!("{detail}; over the {}s limit", l.as_secs()),
        _ => detail,
    };
    report(id, what, ok && in_time, detail, elapsed);
    ok && in_time
}

fn k_singleton_and_triplet() -> SimilarityMatrix {
    SimilarityMatrix::from_rows(&[
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 1.0, 1.0],
        vec![0.0, 1.0, 1.0, 1.0],
        vec![0.0, 1.0, 1.0, 1.0],
    ])
    .unwrap()
}

fn k_orthogonal_pair() -> SimilarityMatrix {
    SimilarityMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
}

fn pv(v: &[f64]) -> ProbabilityVector {
    ProbabilityVector::new(v.to_vec()).unwrap()
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureMatrix {
    FeatureMatrix::new(DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal))).unwrap()
}

/// Unit-norm rows drawn around a few centres of unequal popularity.
fn clustered_similarity(rng: &mut ChaCha8Rng, n: usize, d: usize, clusters: usize) -> SimilarityMatrix {
    let centres: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let spread = rng.random_range(0.2..0.8);
    let data = DMatrix::from_fn(n, d, |_, _| 0.0);
    let mut data = data;
    for i in 0..n {
        // Squaring a uniform skews assignment toward cluster 0.
        let u: f64 = rng.random();
        let c = ((u * u) * clusters as f64) as usize;
        for j in 0..d {
            data[(i, j)] = centres[c][j] + spread * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let x = normalize_rows(&FeatureMatrix::new(data).unwrap()).unwrap();
    gram_matrix(&x).unwrap()
}

/// Eigenvalue entropy of `diag(√p) K diag(√p)` for any nonnegative `p`, not
/// only points on the simplex.
fn oracle_entropy(k: &DMatrix<f64>, p: &[f64]) -> f64 {
    let n = p.len();
    let kp = DMatrix::from_fn(n, n, |i, j| (p[i] * p[j]).sqrt() * k[(i, j)]);
    SymmetricEigen::new(kp)
        .eigenvalues
        .iter()
        .filter(|&&l| l > 1e-15)
        .map(|&l| -l * l.ln())
        .sum()
}

fn ac01_vendi_oracle_values() -> bool {
    let start = Instant::now();
    let a = vendi_score(&k_singleton_and_triplet(), &pv(&[0.25; 4])).unwrap().score;
    let b = vendi_score(&k_orthogonal_pair(), &pv(&[0.25, 0.75])).unwrap().score;
    let c = vendi_score(&k_singleton_and_triplet(), &pv(&[0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0]))
        .unwrap()
        .score;
    let ok = (a - 1.7548).abs() <= 1e-3 && (b - 1.7548).abs() <= 1e-3 && (c - 2.0).abs() <= 1e-9;
    check(
        "AC-1",
        "vendi oracle values",
        start,
        Some(Duration::from_secs(1)),
        ok,
        format!("VS_a={a:.6} VS_b={b:.6} VS_c={c:.12}"),
    )
}

fn ac02_optimizer_recovers_maximizer() -> bool {
    let start = Instant::now();
    let cfg = OptimizerConfig::default().with_gamma(1.0).with_iterations(500);
    let trace = optimize_weights(&k_singleton_and_triplet(), &cfg).unwrap();
    let target = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
    let err = trace
        .final_probabilities
        .as_slice()
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let vs = trace.final_record().vendi_score;
    check(
        "AC-2",
        "optimizer recovers the two-mode maximizer",
        start,
        Some(Duration::from_secs(5)),
        err <= 1e-3 && vs >= 1.999,
        format!("inf-norm error {err:.2e}, final VS {vs:.6}"),
    )
}

fn ac03_gamma_monotonicity() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = OptimizerConfig::default().with_iterations(200);
    let mut ok = true;
    let mut details = Vec::new();
    for trial in 0..5 {
        let k = clustered_similarity(&mut rng, 200, 12, 4 + trial);
        let uniform = vendi_score(&k, &ProbabilityVector::uniform(200)).unwrap().score;
        let runs = optimize_sweep(&k, &[1.0, 0.8, 0.6], &base, Execution::default());
        let vs: Vec<f64> = runs
            .into_iter()
            .map(|r| r.unwrap().final_record().vendi_score)
            .collect();
        ok &= vs[0] >= vs[1] && vs[1] >= vs[2] && vs[2] >= uniform - 1e-6;
        details.push(format!("[{:.3} {:.3} {:.3} | {:.3}]", vs[0], vs[1], vs[2], uniform));
    }
    check(
        "AC-3",
        "VS non-decreasing in gamma",
        start,
        Some(Duration::from_secs(120)),
        ok,
        details.join(" "),
    )
}

fn ac04_uniform_limits() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let max_dev = |p: &ProbabilityVector| {
        let u = 1.0 / p.len() as f64;
        p.as_slice().iter().map(|v| (v - u).abs()).fold(0.0, f64::max)
    };

    let k = clustered_similarity(&mut rng, 60, 6, 3);
    let cfg = OptimizerConfig::default().with_gamma(0.0);
    let dev_gamma0 = max_dev(&optimize_weights(&k, &cfg).unwrap().final_probabilities);

    // Two orthogonal modes of five identical items each, and the identity.
    let block = SimilarityMatrix::new(DMatrix::from_fn(10, 10, |i, j| f64::from(u8::from(i / 5 == j / 5)))).unwrap();
    let identity = SimilarityMatrix::identity(7);
    let mut dev_balanced: f64 = 0.0;
    for gamma in [0.2, 0.5, 0.8, 1.0] {
        let cfg = OptimizerConfig::default().with_gamma(gamma);
        dev_balanced = dev_balanced.max(max_dev(&optimize_weights(&block, &cfg).unwrap().final_probabilities));
        dev_balanced = dev_balanced.max(max_dev(&optimize_weights(&identity, &cfg).unwrap().final_probabilities));
    }
    check(
        "AC-4",
        "gamma=0 and balanced orthogonal modes stay uniform",
        start,
        None,
        dev_gamma0 <= 1e-6 && dev_balanced <= 1e-6,
        format!("gamma=0 deviation {dev_gamma0:.2e}, balanced deviation {dev_balanced:.2e}"),
    )
}

fn ac05_gradient_matches_finite_differences() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let n = [4, 8, 16][trial % 3];
        let d = rng.random_range(2..=n);
        let x = normalize_rows(&random_features(&mut rng, n, d)).unwrap();
        let k = gram_matrix(&x).unwrap();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let p = ProbabilityVector::from_weights(&w).unwrap();
        let analytic = vendi_entropy_gradient(&k, &p).unwrap();

        let base = p.as_slice();
        let numeric: Vec<f64> = (0..n)
            .map(|i| {
                let mut up = base.to_vec();
                let mut down = base.to_vec();
                up[i] += h;
                down[i] -= h;
                (oracle_entropy(k.entries(), &up) - oracle_entropy(k.entries(), &down)) / (2.0 * h)
            })
            .collect();
        let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale;
        worst = worst.max(err);
    }
    check(
        "AC-5",
        "entropy gradient vs central differences",
        start,
        None,
        worst < 1e-4,
        format!("worst relative error {worst:.2e} over 20 matrices"),
    )
}

fn ac06_duplication_invariance() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..12);
        let d = rng.random_range(1..6);
        let x = normalize_rows(&random_features(&mut rng, n, d)).unwrap();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let p = ProbabilityVector::from_weights(&w).unwrap();
        let before = vendi_score(&gram_matrix(&x).unwrap(), &p).unwrap().score;

        let split = rng.random_range(0..n);
        let mut rows = x.to_rows();
        rows.push(rows[split].clone());
        let mut q = p.as_slice().to_vec();
        q[split] /= 2.0;
        q.push(q[split]);
        let xd = FeatureMatrix::from_rows(&rows).unwrap();
        let after = vendi_score(&gram_matrix(&xd).unwrap(), &ProbabilityVector::new(q).unwrap())
            .unwrap()
            .score;
        worst = worst.max((after - before).abs());
    }
    check(
        "AC-6",
        "duplication invariance",
        start,
        None,
        worst < 1e-9,
        format!("worst |dVS| {worst:.2e} over 100 trials"),
    )
}

fn ac07_wfid_reductions() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = random_features(&mut rng, 500, 16);
    let data = FeatureMatrix::new(random_features(&mut rng, 500, 16).data().map(|v| 0.5 + 1.3 * v)).unwrap();
    let plain = fid(&model, &data).unwrap();
    let weighted = wfid(&model, &data, &vec![1.0 / 500.0; 500]).unwrap();
    let self_fid = fid(&model, &model).unwrap();
    check(
        "AC-7",
        "wFID reductions",
        start,
        None,
        (weighted - plain).abs() < 1e-6 && self_fid < 1e-6,
        format!("|wFID-FID| {:.2e}, FID(X,X) {self_fid:.2e}", (weighted - plain).abs()),
    )
}

/// Double loop over every pair, radii from fully sorted neighbour lists.
fn brute_force_pr(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> PrecisionRecall {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let radii = |set: &[Vec<f64>]| -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..set.len() {
            let mut d = Vec::new();
            for j in 0..set.len() {
                if i != j {
                    d.push(dist(&set[i], &set[j]));
                }
            }
            d.sort_by(f64::total_cmp);
            out.push(d[k - 1]);
        }
        out
    };
    let coverage = |support: &[Vec<f64>], r: &[f64], queries: &[Vec<f64>]| {
        let mut hit = 0;
        for q in queries {
            let mut inside = false;
            for (s, &rad) in support.iter().zip(r) {
                if dist(q, s) <= rad {
                    inside = true;
                }
            }
            hit += usize::from(inside);
        }
        hit as f64 / queries.len() as f64
    };
    PrecisionRecall {
        precision: coverage(real, &radii(real), gen),
        recall: coverage(gen, &radii(gen), real),
    }
}

fn ac08_precision_recall_oracle() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..50 {
        let d = rng.random_range(1..6);
        let (n_real, n_gen) = (rng.random_range(5..=200), rng.random_range(5..=200));
        let real = random_features(&mut rng, n_real, d);
        let shift: f64 = rng.random_range(0.0..2.0);
        let gen = FeatureMatrix::new(random_features(&mut rng, n_gen, d).data().map(|v| v + shift)).unwrap();
        let got = precision_recall(&real, &gen, 3).unwrap();
        if got != brute_force_pr(&real.to_rows(), &gen.to_rows(), 3) {
            mismatches += 1;
        }
    }
    let same = random_features(&mut rng, 100, 4);
    let identical = precision_recall(&same, &same, 3).unwrap();
    let far = FeatureMatrix::new(same.data().map(|v| v + 1e3)).unwrap();
    let disjoint = precision_recall(&same, &far, 3).unwrap();
    let ok = mismatches == 0
        && identical
            == PrecisionRecall {
                precision: 1.0,
                recall: 1.0,
            }
        && disjoint
            == PrecisionRecall {
                precision: 0.0,
                recall: 0.0,
            };
    check(
        "AC-8",
        "precision/recall matches brute force",
        start,
        None,
        ok,
        format!("{mismatches} mismatches in 50, identical {identical:?}, disjoint {disjoint:?}"),
    )
}

fn ac09_mutual_information_score() -> bool {
    let start = Instant::now();
    let mut worst_onehot: f64 = 0.0;
    for k in [2usize, 3, 5, 10] {
        let rows: Vec<Vec<f64>> = (0..4 * k)
            .map(|i| (0..k).map(|c| f64::from(u8::from(c == i % k))).collect())
            .collect();
        let score = mutual_information_score(&ClassProbabilityMatrix::from_rows(&rows).unwrap());
        worst_onehot = worst_onehot.max((score - (k as f64).ln()).abs());
    }
    let uniform = mutual_information_score(&ClassProbabilityMatrix::from_rows(&vec![vec![0.2; 5]; 9]).unwrap());
    check(
        "AC-9",
        "mutual-information inception score",
        start,
        None,
        worst_onehot <= 1e-9 && uniform.abs() <= 1e-12,
        format!("one-hot |IS-ln k| {worst_onehot:.2e}, uniform {uniform:.2e}"),
    )
}

fn ac10_sampler_fidelity() -> bool {
    let start = Instant::now();
    let target = [0.25, 0.75];
    let table = build_alias_table(&pv(&target));
    let draws = 100_000;
    let counts = |seed: u64| {
        let mut c = [0usize; 2];
        for i in sample_batch(&table, draws, seed, true).unwrap() {
            c[i] += 1;
        }
        c
    };
    let c0 = counts(0);
    let freq_err = (0..2)
        .map(|i| (c0[i] as f64 / draws as f64 - target[i]).abs())
        .fold(0.0, f64::max);

    let critical = ChiSquared::new(1.0).unwrap().inverse_cdf(0.999);
    let passes = (0..100u64)
        .filter(|&seed| {
            let c = counts(seed);
            let stat: f64 = (0..2)
                .map(|i| {
                    let e = target[i] * draws as f64;
                    (c[i] as f64 - e).powi(2) / e
                })
                .sum();
            stat <= critical
        })
        .count();
    check(
        "AC-10",
        "sampler fidelity",
        start,
        None,
        freq_err <= 0.01 && passes >= 99,
        format!("max frequency error {freq_err:.4}, chi-square passes {passes}/100 (critical {critical:.3})"),
    )
}

fn ac11_mode_balancing_demo() -> bool {
    let start = Instant::now();
    let r = mode_balance_demo(&DemoConfig {
        n_major: 2000,
        n_minor: 200,
        gamma: 1.0,
        ..Default::default()
    })
    .unwrap();
    let ok = (r.diversity.minority_mass - 0.5).abs() <= 0.1
        && (r.baseline.minority_mass - 0.09).abs() <= 0.05
        && r.diversity.sample_vendi > r.baseline.sample_vendi
        && r.diversity.wfid <= r.diversity.fid;
    check(
        "AC-11",
        "mode-balancing demo",
        start,
        Some(Duration::from_secs(120)),
        ok,
        format!(
            "minority mass {:.4} vs baseline {:.4}, sample VS {:.4} vs {:.4}, wFID {:.4} <= FID {:.4}",
            r.diversity.minority_mass,
            r.baseline.minority_mass,
            r.diversity.sample_vendi,
            r.baseline.sample_vendi,
            r.diversity.wfid,
            r.diversity.fid
        ),
    )
}

fn ac12_determinism() -> bool {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let features = random_features(&mut rng, 120, 6);
    let model = random_features(&mut rng, 80, 6);
    divw::io::save_features(dir.path().join("x.dwm").as_path(), &features).unwrap();
    divw::io::save_features(dir.path().join("m.dwm").as_path(), &model).unwrap();

    let commands: Vec<Vec<String>> = vec![
        vec![
            "optimize".into(),
            "--features".into(),
            p("x.dwm"),
            "--output-prefix".into(),
            p("run"),
            "--gamma".into(),
            "0.8".into(),
        ],
        vec![
            "sample".into(),
            "--weights".into(),
            p("run.weights.dwm"),
            "--output".into(),
            p("batch.csv"),
            "--seed".into(),
            "9".into(),
        ],
        vec![
            "metrics".into(),
            "--model".into(),
            p("m.dwm"),
            "--data".into(),
            p("x.dwm"),
            "--weights".into(),
            p("run.weights.dwm"),
            "--report".into(),
            p("metrics.csv"),
        ],
        vec![
            "demo".into(),
            "--n-major".into(),
            "400".into(),
            "--n-minor".into(),
            "40".into(),
            "--report".into(),
            p("demo.csv"),
        ],
    ];
    let outputs = [
        "run.weights.csv",
        "run.weights.dwm",
        "run.trace.csv",
        "run.manifest",
        "batch.csv",
        "batch.csv.manifest",
        "metrics.csv",
        "metrics.csv.manifest",
        "demo.csv",
        "demo.csv.manifest",
    ];
    let run_all = || {
        let mut stdout = Vec::new();
        for args in &commands {
            divw::cli::run_from(
                std::iter::once("divw".to_owned()).chain(args.iter().cloned()),
                &mut stdout,
            )
            .unwrap();
        }
        let files: Vec<Vec<u8>> = outputs.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
        (files, stdout)
    };
    let first = run_all();
    let second = run_all();
    let differing: Vec<&str> = outputs
        .iter()
        .zip(first.0.iter().zip(&second.0))
        .filter(|(_, (a, b))| a != b)
        .map(|(name, _)| *name)
        .collect();
    check(
        "AC-12",
        "byte-identical reruns",
        start,
        None,
        differing.is_empty() && first.1 == second.1,
        format!("{} files compared, differing: {differing:?}", outputs.len()),
    )
}

type Check = (&'static str, fn() -> bool);

fn main() {
    let checks: [Check; 12] = [
        ("AC-1", ac01_vendi_oracle_values),
        ("AC-2", ac02_optimizer_recovers_maximizer),
        ("AC-3", ac03_gamma_monotonicity),
        ("AC-4", ac04_uniform_limits),
        ("AC-5", ac05_gradient_matches_finite_differences),
        ("AC-6", ac06_duplication_invariance),
        ("AC-7", ac07_wfid_reductions),
        ("AC-8", ac08_precision_recall_oracle),
        ("AC-9", ac09_mutual_information_score),
        ("AC-10", ac10_sampler_fidelity),
        ("AC-11", ac11_mode_balancing_demo),
        ("AC-12", ac12_determinism),
    ];
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(id, run)| match std::panic::catch_unwind(run) {
            Ok(passed) => !passed,
            Err(_) => {
                println!("[FAIL] {id} aborted with a panic");
                true
            }
        })
        .map(|(id, _)| *id)
        .collect();
    println!(
        "acceptance: {} passed, {} failed",
        checks.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
