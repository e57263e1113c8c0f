//! The `divw` command line.
//!
//! Every subcommand writes its outputs plus a `<output>.manifest` file of
//! sorted `key=value` lines holding the resolved parameters and the SHA-256
//! of each input file. Parameter values come from flags first, then from an
//! optional `--config` file of `key=value` lines, then from built-in defaults.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gmm::{mode_balance_demo, DemoConfig};
use crate::io::{self, Format};
use crate::linalg::{gram_matrix, normalize_rows, FeatureMatrix, SimilarityMatrix};
use crate::metrics::{self, ClassProbabilityMatrix, Distance, EvaluationInputs};
use crate::optimizer::{optimize_weights, OptimizationTrace, OptimizerConfig};
use crate::par::Execution;
use crate::sampler::{batch_csv, build_alias_table, sample_batch};
use crate::vendi::{FeatureKernel, ProbabilityVector};

#[derive(Debug, Parser)]
#[command(
    name = "divw",
    version,
    about = "Diversity weights for datasets and diversity-aware evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the similarity (Gram) matrix of a feature file.
    Gram(GramArgs),
    /// Optimise diversity weights for a similarity matrix or feature file.
    Optimize(OptimizeArgs),
    /// Draw a batch of indices with replacement according to weights.
    Sample(SampleArgs),
    /// Evaluate model features against data features.
    Metrics(MetricsArgs),
    /// Run the two-mode mode-balancing demonstration.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct GramArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Use the features as given; rows must already have unit norm.
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    pub similarity: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Outputs go to `<prefix>.weights.csv`, `<prefix>.weights.dwm`,
    /// `<prefix>.trace.csv` and `<prefix>.manifest`.
    #[arg(long)]
    pub output_prefix: PathBuf,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Weights as DWM1 (n×1) or the weights CSV written by `optimize`.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Defaults to the number of weighted items.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feature file whose sampled rows are written to `--materialize`.
    #[arg(long, requires = "materialize")]
    pub features: Option<PathBuf>,
    #[arg(long, requires = "features")]
    pub materialize: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Diversity weights over the data rows; enables wFID.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Class probabilities p(y|x) for the model samples; enables the MI score.
    #[arg(long)]
    pub cond_probs: Option<PathBuf>,
    /// `euclidean` or `cosine`, for precision/recall.
    #[arg(long)]
    pub distance: Option<String>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub n_major: Option<usize>,
    #[arg(long)]
    pub n_minor: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// `key=value` settings from a config file.
#[derive(Debug, Default)]
struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("{}: line {}", path.display(), i + 1), "expected key=value"))?;
            values.insert(k.trim().replace('_', "-"), v.trim().to_string());
        }
        Ok(Self { values })
    }

    /// Flag value, else config value, else `default`.
    fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Usage(format!("config value {key}={raw} is invalid"))),
            None => Ok(default),
        }
    }

    fn resolve_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self
                .values
                .get(key)
                .map(|raw| {
                    raw.parse()
                        .map_err(|_| Error::Usage(format!("config value {key}={raw} is invalid")))
                })
                .transpose(),
        }
    }
}

/// Sorted `key=value` record of one run.
#[derive(Debug, Default)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.set(&format!("input.{name}.path"), path.display());
        self.set(&format!("input.{name}.sha256"), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn output(&mut self, name: &str, path: &Path) {
        self.set(&format!("output.{name}"), path.display());
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn write(&self, path: &Path) -> Result<()> {
        io::write_text(path, &self.render())
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_features(path: &Path) -> Result<FeatureMatrix> {
    io::load_features(path, Format::from_path(path))
}

/// Reads weights from DWM1 (n×1 or 1×n) or from a CSV with a `probability`
/// column (or a single headerless column).
pub fn load_weights(path: &Path) -> Result<Vec<f64>> {
    match Format::from_path(path) {
        Format::Binary => {
            let m = io::read_matrix(path)?;
            if m.ncols() != 1 && m.nrows() != 1 {
                return Err(Error::validation(format!(
                    "{}: weights must be a vector, got {}x{}",
                    path.display(),
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(m.iter().copied().collect())
        }
        Format::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_weights_csv(&text).map_err(|e| match e {
                Error::Parse { location, message } => Error::Parse {
                    location: format!("{}: {location}", path.display()),
                    message,
                },
                other => other,
            })
        }
    }
}

fn parse_weights_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();
    let (_, first) = lines
        .peek()
        .copied()
        .ok_or_else(|| Error::parse("line 1", "no weights"))?;
    let column = if first.trim().parse::<f64>().is_ok() {
        0
    } else {
        let col = first
            .split(',')
            .position(|h| h.trim() == "probability")
            .ok_or_else(|| Error::parse("line 1", "no probability column"))?;
        lines.next();
        col
    };
    lines
        .map(|(i, l)| {
            let field = l.split(',').nth(column).unwrap_or("").trim();
            field
                .parse::<f64>()
                .map_err(|_| Error::parse(format!("line {}", i + 1), format!("{field:?} is not a number")))
        })
        .collect()
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gram(a) => cmd_gram(&a),
        Command::Optimize(a) => cmd_optimize(&a).map(|_| ()),
        Command::Sample(a) => cmd_sample(&a),
        Command::Metrics(a) => cmd_metrics(&a),
        Command::Demo(a) => cmd_demo(&a, out),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    run(cli, out)
}

pub fn cmd_gram(args: &GramArgs) -> Result<()> {
    ConfigFile::load(args.config.as_deref())?;
    let x = load_features(&args.features)?;
    let x = if args.no_normalize { x } else { normalize_rows(&x)? };
    let k = gram_matrix(&x)?;
    io::write_matrix(&args.output, k.entries())?;

    let mut m = Manifest::new("gram");
    m.input("features", &args.features)?;
    m.set("normalize", !args.no_normalize);
    m.set("n", k.n());
    m.output("similarity", &args.output);
    m.write(&with_suffix(&args.output, ".manifest"))
}

pub fn cmd_optimize(args: &OptimizeArgs) -> Result<OptimizationTrace> {
    let cfg_file = ConfigFile::load(args.config.as_deref())?;
    let defaults = OptimizerConfig::default();
    let config = OptimizerConfig {
        gamma: cfg_file.resolve(args.gamma, "gamma", defaults.gamma)?,
        iterations: cfg_file.resolve(args.iters, "iters", defaults.iterations)?,
        learning_rate: cfg_file.resolve(args.lr, "lr", defaults.learning_rate)?,
        seed: cfg_file.resolve(args.seed, "seed", defaults.seed)?,
        ..defaults
    };
    if !(0.0..=1.0).contains(&config.gamma) {
        return Err(Error::Usage(format!("--gamma {} outside [0, 1]", config.gamma)));
    }
    if config.iterations == 0 {
        return Err(Error::Usage("--iters must be positive".into()));
    }
    if config.learning_rate.is_nan() || config.learning_rate <= 0.0 {
        return Err(Error::Usage("--lr must be positive".into()));
    }

    let mut manifest = Manifest::new("optimize");
    let (trace, labels) = match (&args.similarity, &args.features) {
        (Some(path), _) => {
            manifest.input("similarity", path)?;
            let k = SimilarityMatrix::new(io::read_matrix(path)?)?;
            (optimize_weights(&k, &config)?, None)
        }
        (None, Some(path)) => {
            manifest.input("features", path)?;
            let x = normalize_rows(&load_features(path)?)?;
            let trace = if x.d() < x.n() {
                manifest.set("kernel", "features");
                optimize_weights(&FeatureKernel::new(&x)?, &config)?
            } else {
                manifest.set("kernel", "dense");
                optimize_weights(&gram_matrix(&x)?, &config)?
            };
            (trace, x.labels().map(<[i64]>::to_vec))
        }
        (None, None) => return Err(Error::Usage("one of --similarity or --features is required".into())),
    };

    let prefix = &args.output_prefix;
    let weights_csv = with_suffix(prefix, ".weights.csv");
    let weights_bin = with_suffix(prefix, ".weights.dwm");
    let trace_csv = with_suffix(prefix, ".trace.csv");
    io::write_text(&weights_csv, &trace.weights_csv(labels.as_deref()))?;
    io::write_vector(&weights_bin, trace.final_probabilities.as_slice())?;
    io::write_text(&trace_csv, &trace.to_csv())?;

    for (key, value) in [
        ("gamma", config.gamma.to_string()),
        ("iters", config.iterations.to_string()),
        ("lr", config.learning_rate.to_string()),
        ("seed", config.seed.to_string()),
        ("adam-beta1", config.adam_beta1.to_string()),
        ("adam-beta2", config.adam_beta2.to_string()),
        ("adam-epsilon", config.adam_epsilon.to_string()),
        ("lr-decay-factor", config.lr_decay_factor.to_string()),
        ("lr-decay-every", config.lr_decay_every.to_string()),
    ] {
        manifest.set(key, value);
    }
    manifest.output("weights_csv", &weights_csv);
    manifest.output("weights_dwm", &weights_bin);
    manifest.output("trace_csv", &trace_csv);
    manifest.write(&with_suffix(prefix, ".manifest"))?;
    Ok(trace)
}

pub fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let cfg_file = ConfigFile::load(args.config.as_deref())?;
    let weights = load_weights(&args.weights)?;
    let p = ProbabilityVector::from_weights(&weights)?;
    let batch_size = cfg_file.resolve(args.batch_size, "batch-size", p.len())?;
    if batch_size == 0 {
        return Err(Error::Usage("--batch-size must be positive".into()));
    }
    let seed = cfg_file.resolve(args.seed, "seed", 0)?;
    let table = build_alias_table(&p);
    let batch = sample_batch(&table, batch_size, seed, true)?;
    io::write_text(&args.output, &batch_csv(&batch))?;

    let mut m = Manifest::new("sample");
    m.input("weights", &args.weights)?;
    m.set("batch-size", batch_size);
    m.set("seed", seed);
    m.set("with-replacement", true);
    m.output("indices", &args.output);
    if let (Some(features), Some(dest)) = (&args.features, &args.materialize) {
        let x = load_features(features)?;
        if x.n() != p.len() {
            return Err(Error::validation(format!(
                "{} feature rows for {} weights",
                x.n(),
                p.len()
            )));
        }
        io::save_features(dest, &x.select_rows(&batch)?)?;
        m.input("features", features)?;
        m.output("materialized", dest);
    }
    m.write(&with_suffix(&args.output, ".manifest"))
}

pub fn cmd_metrics(args: &MetricsArgs) -> Result<()> {
    let cfg_file = ConfigFile::load(args.config.as_deref())?;
    let k = cfg_file.resolve(args.k, "k", 3usize)?;
    let distance: Distance = cfg_file
        .resolve(args.distance.clone(), "distance", "euclidean".to_string())?
        .parse()?;
    let model = load_features(&args.model)?;
    let data = load_features(&args.data)?;
    let mut m = Manifest::new("metrics");
    m.input("model", &args.model)?;
    m.input("data", &args.data)?;

    let weights = match &args.weights {
        Some(path) => {
            m.input("weights", path)?;
            Some(load_weights(path)?)
        }
        None => None,
    };
    let cond = match &args.cond_probs {
        Some(path) => {
            m.input("cond_probs", path)?;
            Some(ClassProbabilityMatrix::from_features(&load_features(path)?)?)
        }
        None => None,
    };
    let report = metrics::evaluate(
        &EvaluationInputs {
            model: &model,
            data: &data,
            weights: weights.as_deref(),
            cond_probs: cond.as_ref(),
            k,
            distance,
        },
        Execution::default(),
    )?;
    io::write_text(&args.report, &report.to_csv())?;

    m.set("k", k);
    m.set("distance", format!("{distance:?}").to_lowercase());
    m.output("report", &args.report);
    m.write(&with_suffix(&args.report, ".manifest"))
}

pub fn cmd_demo(args: &DemoArgs, out: &mut dyn Write) -> Result<()> {
    let cfg_file = ConfigFile::load(args.config.as_deref())?;
    let d = DemoConfig::default();
    let config = DemoConfig {
        n_major: cfg_file.resolve(args.n_major, "n-major", d.n_major)?,
        n_minor: cfg_file.resolve(args.n_minor, "n-minor", d.n_minor)?,
        gamma: cfg_file.resolve(args.gamma, "gamma", d.gamma)?,
        seed: cfg_file.resolve(args.seed, "seed", d.seed)?,
        iterations: cfg_file.resolve(args.iters, "iters", d.iterations)?,
        learning_rate: cfg_file.resolve(args.lr, "lr", d.learning_rate)?,
        dim: cfg_file.resolve(None, "dim", d.dim)?,
        mode_offset: cfg_file.resolve(None, "mode-offset", d.mode_offset)?,
        mode_spread: cfg_file.resolve(None, "mode-spread", d.mode_spread)?,
        sample_count: cfg_file.resolve_opt(None, "sample-count")?,
    };
    if !(0.0..=1.0).contains(&config.gamma) {
        return Err(Error::Usage(format!("--gamma {} outside [0, 1]", config.gamma)));
    }
    let report = mode_balance_demo(&config)?;
    io::write_text(&args.report, &report.to_csv())?;
    out.write_all(report.summary().as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;

    let mut m = Manifest::new("demo");
    m.set("n-major", config.n_major);
    m.set("n-minor", config.n_minor);
    m.set("gamma", config.gamma);
    m.set("seed", config.seed);
    m.set("iters", config.iterations);
    m.set("lr", config.learning_rate);
    m.set("dim", config.dim);
    m.set("mode-offset", config.mode_offset);
    m.set("mode-spread", config.mode_spread);
    if let Some(c) = config.sample_count {
        m.set("sample-count", c);
    }
    m.output("report", &args.report);
    m.write(&with_suffix(&args.report, ".manifest"))
}
