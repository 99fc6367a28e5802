//! `streamfact` command-line front end: restoration runs, algorithm
//! comparisons and a small filter benchmark.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use streamfact::baselines::StepSize;
use streamfact::data::{SamplingMode, SyntheticSpec};
use streamfact::experiment::{
    compare, prepare, run_on, write_comparison, write_outputs, Algorithm, DataSource, ExperimentConfig, MaskMode,
};
use streamfact::oracle::FullFilterState;
use streamfact::{DenseVector, DictionaryState, ModelConfig, Observation};

const DEFAULT_SYNTHETIC: &str = "1024x200x10";

#[derive(Parser)]
#[command(
    name = "streamfact",
    version,
    about = "Streaming matrix factorisation by recursive least squares"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mask a dataset, run one algorithm and score the restoration
    Run {
        #[arg(long, value_enum, default_value_t = AlgoArg::Mfrlf)]
        algo: AlgoArg,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run several algorithms on the same masked dataset
    Compare {
        /// Comma-separated variants: mfrlf, mfrlf-kalman, mfrlf-frozen-v, sgd,
        /// sgd-broyden, sgd-constant, sgd-decay, nmf
        #[arg(long, value_delimiter = ',', default_value = "mfrlf,sgd-broyden,nmf")]
        algos: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Time the matrix-variate step against the dense vectorised filter
    Bench {
        #[arg(long, default_value_t = 4)]
        rank: usize,
        /// Observation dimensions to time
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, env = "STREAMFACT_SEED", default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum AlgoArg {
    Mfrlf,
    MfrlfKalman,
    Sgd,
    Nmf,
}

#[derive(Copy, Clone, ValueEnum)]
enum MaskArg {
    Block,
    Bernoulli,
}

#[derive(Copy, Clone, ValueEnum)]
enum SamplingArg {
    EpochShuffle,
    WithReplacement,
}

#[derive(Copy, Clone, ValueEnum)]
enum StepArg {
    Broyden,
    Constant,
    Decay,
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long, default_value_t = 40)]
    rank: usize,
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
    /// Passes over the data (streaming algorithms)
    #[arg(long, default_value_t = 10)]
    passes: usize,
    /// Batch sweeps (NMF)
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 0.25)]
    mask_fraction: f64,
    #[arg(long, value_enum, default_value_t = MaskArg::Block)]
    mask_mode: MaskArg,
    /// Length of each contiguous run of removed pixels (default: a quarter column)
    #[arg(long)]
    block_len: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    v0_scale: f64,
    /// Kalman process noise, Q_V = scale·I
    #[arg(long, default_value_t = 1e-4)]
    qv_scale: f64,
    /// Relative ridge on the coefficient Gram matrix
    #[arg(long, default_value_t = 1e-8)]
    ridge: f64,
    #[arg(long, env = "STREAMFACT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SamplingArg::EpochShuffle)]
    sampling: SamplingArg,
    #[arg(long, value_enum, default_value_t = StepArg::Broyden)]
    sgd_step: StepArg,
    /// Step size for the constant and decay SGD schedules
    #[arg(long, default_value_t = 0.1)]
    gamma0: f64,
    /// Hold V at its initial value
    #[arg(long)]
    freeze_v: bool,
    /// CSV matrix (one image per column) or a directory of PGM images
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Generate a rank-limited dataset, <m>x<n>x<rank>
    #[arg(long)]
    synthetic: Option<String>,
    /// Additive noise for --synthetic, relative to the data RMS
    #[arg(long, default_value_t = 0.0)]
    synthetic_noise: f64,
    /// Fail instead of falling back to synthetic data when --data is absent
    #[arg(long, conflicts_with = "synthetic")]
    no_synthetic: bool,
    /// Image height and width for CSV inputs, e.g. 64x64
    #[arg(long)]
    image_shape: Option<String>,
    #[arg(long, default_value = "streamfact-out")]
    out: PathBuf,
}

impl CommonArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let data = match (&self.data, &self.synthetic) {
            (Some(p), _) => DataSource::Path(p.clone()),
            (None, spec) if spec.is_some() || !self.no_synthetic => {
                let text = spec.as_deref().unwrap_or(DEFAULT_SYNTHETIC);
                let spec = SyntheticSpec::parse(text, self.seed)?;
                if !(self.synthetic_noise >= 0.0 && self.synthetic_noise.is_finite()) {
                    bail!("--synthetic-noise must be a nonnegative number");
                }
                DataSource::Synthetic(SyntheticSpec {
                    noise: self.synthetic_noise,
                    ..spec
                })
            }
            (None, _) => bail!(
                "no dataset given and synthetic fallback disabled; pass --data <csv file | directory of .pgm images> \
                 or drop --no-synthetic"
            ),
        };
        let image_shape = self.image_shape.as_deref().map(parse_shape).transpose()?;
        Ok(ExperimentConfig {
            algorithm: Algorithm::Mfrlf,
            rank: self.rank,
            lambda: self.lambda,
            passes: self.passes,
            iterations: self.iterations,
            mask_fraction: self.mask_fraction,
            mask_mode: match self.mask_mode {
                MaskArg::Block => MaskMode::Block,
                MaskArg::Bernoulli => MaskMode::Bernoulli,
            },
            block_len: self.block_len,
            v0_scale: self.v0_scale,
            qv_scale: self.qv_scale,
            ridge: self.ridge,
            seed: self.seed,
            sampling: match self.sampling {
                SamplingArg::EpochShuffle => SamplingMode::EpochShuffle,
                SamplingArg::WithReplacement => SamplingMode::WithReplacement,
            },
            sgd_step: match self.sgd_step {
                StepArg::Broyden => StepSize::Broyden,
                StepArg::Constant => StepSize::Constant,
                StepArg::Decay => StepSize::Decay,
            },
            gamma0: self.gamma0,
            freeze_covariance: self.freeze_v,
            data,
            image_shape,
        })
    }
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("image shape {s:?} must look like <height>x<width>"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

/// Applies a comparison variant name to the shared configuration.
fn variant(base: &ExperimentConfig, name: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.freeze_covariance = false;
    match name.trim() {
        "mfrlf-frozen-v" => {
            cfg.algorithm = Algorithm::Mfrlf;
            cfg.freeze_covariance = true;
        }
        "sgd-broyden" => (cfg.algorithm, cfg.sgd_step) = (Algorithm::Sgd, StepSize::Broyden),
        "sgd-constant" => (cfg.algorithm, cfg.sgd_step) = (Algorithm::Sgd, StepSize::Constant),
        "sgd-decay" => (cfg.algorithm, cfg.sgd_step) = (Algorithm::Sgd, StepSize::Decay),
        other => cfg.algorithm = other.parse()?,
    }
    Ok(cfg)
}

fn run(algo: AlgoArg, common: &CommonArgs) -> Result<()> {
    let mut cfg = common.config()?;
    cfg.algorithm = match algo {
        AlgoArg::Mfrlf => Algorithm::Mfrlf,
        AlgoArg::MfrlfKalman => Algorithm::MfrlfKalman,
        AlgoArg::Sgd => Algorithm::Sgd,
        AlgoArg::Nmf => Algorithm::Nmf,
    };
    let prepared = prepare(&cfg)?;
    let report = run_on(&prepared, &cfg)?;
    write_outputs(&common.out, &report, &prepared)?;
    if !report.flagged_columns.is_empty() {
        log::warn!("{} columns could not be reconstructed", report.flagged_columns.len());
    }
    println!(
        "{}: initial SNR {}, final SNR {}, wall time {:.3}s",
        report.label,
        report.initial_snr,
        report.final_snr,
        report.wall_time.as_secs_f64()
    );
    println!("outputs written to {}", common.out.display());
    Ok(())
}

fn run_compare(algos: &[String], common: &CommonArgs) -> Result<()> {
    let base = common.config()?;
    let cfgs = algos
        .iter()
        .filter(|a| !a.trim().is_empty())
        .map(|a| variant(&base, a))
        .collect::<Result<Vec<_>>>()?;
    for (i, cfg) in cfgs.iter().enumerate() {
        if cfgs[..i].iter().any(|c| c.label() == cfg.label()) {
            bail!("variant {} listed twice in --algos", cfg.label());
        }
    }
    let prepared = prepare(&base)?;
    let started = Instant::now();
    let cmp = compare(&prepared, &cfgs);
    write_comparison(&common.out, &cmp, &prepared)?;
    print!("{}", cmp.to_csv());
    for row in &cmp.rows {
        if let Ok(r) = &row.outcome {
            log::info!("{}: {:.3}s", row.label, r.wall_time.as_secs_f64());
        }
    }
    println!(
        "wall time {:.3}s; outputs written to {}",
        started.elapsed().as_secs_f64(),
        common.out.display()
    );
    Ok(())
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Result<DenseVector> {
    Ok(DenseVector::new(
        (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect(),
    )?)
}

fn bench(rank: usize, dims: &[usize], steps: usize, seed: u64) -> Result<()> {
    if rank == 0 || steps == 0 {
        bail!("--rank and --steps must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    println!("m,r,step_us,full_step_us,dictionary_rel_diff");
    for &m in dims {
        let cfg = ModelConfig {
            ridge: 0.0,
            init_seed: seed,
            ..ModelConfig::new(rank)
        };
        let start = DictionaryState::init(&cfg, m)?;
        let ys = (0..steps).map(|_| gaussian(&mut rng, m)).collect::<Result<Vec<_>>>()?;

        let t = Instant::now();
        let mut state = start.clone();
        let mut xs = Vec::with_capacity(steps);
        for y in &ys {
            let out = state.step(&Observation::unmasked(y.clone()), &cfg)?;
            xs.push(out.coefficients);
            state = out.state;
        }
        let fast = t.elapsed();

        // Same coefficients, so both filters follow one trajectory.
        let t = Instant::now();
        let mut full = FullFilterState::from_dictionary(&start)?;
        for (x, y) in xs.iter().zip(&ys) {
            full = full.full_step(x, y)?;
        }
        let slow = t.elapsed();

        let (c, _) = full.to_dictionary()?;
        let diff = c.rel_error(state.dictionary());
        let per = |d: std::time::Duration| d.as_secs_f64() * 1e6 / steps as f64;
        println!("{m},{rank},{:.2},{:.2},{diff:.2e}", per(fast), per(slow));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { algo, common } => run(*algo, common),
        Command::Compare { algos, common } => run_compare(algos, common),
        Command::Bench {
            rank,
            dims,
            steps,
            seed,
        } => bench(*rank, dims, *steps, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
