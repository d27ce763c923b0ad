use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use polarseq_cli::commands::sweep::{self, FindSnrSpec, Link, SweepSpec};
use polarseq_cli::commands::train::{
    ablate_pe, learned_sequence, open_cache, run_training, SEQUENCE_FILE,
};
use polarseq_cli::experiment::ExperimentConfig;
use polarseq_cli::output::{args_digest, emit, header, parse_grid, parse_k_list};
use polarseq_cli::Scheme;
use polarseq_core::channel::ChannelKind;
use polarseq_core::code::{CrcConfig, KConvention};
use polarseq_core::construction::{dega_sequence, mc_sequence, nr_sequence};
use polarseq_core::reward::{CalibrationConfig, RewardCache, StopRule};
use polarseq_policy::checkpoint;

#[derive(Parser)]
#[command(
    name = "polarseq",
    version,
    about = "Nested polar code reliability sequences: classic and learned"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a reliability sequence as JSON.
    Construct(ConstructArgs),
    /// Simulate BLER over an SNR grid; appends to a resumable CSV.
    Evaluate(EvaluateArgs),
    /// SNR needed to reach a target BLER, relative to the NR sequence.
    FindSnr(FindSnrArgs),
    /// Per-rate SNR table at the target BLER for one scheme.
    Calibrate(CalibrateArgs),
    /// Train the policy from a recipe.
    Train(TrainArgs),
    /// Train a recipe with positional encoding on and off.
    AblatePe(TrainArgs),
    /// Inspect or compact a reward cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ConstructScheme {
    Nr,
    Dega,
    Mc,
    Rl,
}

#[derive(Args)]
struct ConstructArgs {
    scheme: ConstructScheme,
    #[arg(long)]
    n: Option<usize>,
    /// Design Eb/N0 in dB (dega).
    #[arg(long)]
    design_ebno: Option<f64>,
    /// Eb/N0 in dB (mc).
    #[arg(long)]
    ebno: Option<f64>,
    /// Design rate K/N (dega, mc).
    #[arg(long, default_value_t = 0.5)]
    rate: f64,
    #[arg(long, default_value = "awgn")]
    channel: ChannelKind,
    /// Monte-Carlo trials (mc).
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training recipe (rl).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained checkpoint to read instead of training (rl).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    cache_path: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LinkArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "awgn")]
    channel: ChannelKind,
    #[arg(long, default_value_t = 8)]
    list_size: usize,
    /// `off`, `0x3` (x^4+x+1) or `<hex>/<len>`.
    #[arg(long, default_value = "0x3")]
    crc: String,
    /// Read `--k` as payload bits only; the CRC is added on top.
    #[arg(long)]
    k_excludes_crc: bool,
}

impl LinkArgs {
    fn link(&self) -> Result<Link> {
        Ok(Link {
            n: self.n,
            channel: self.channel,
            list_size: self.list_size,
            crc: CrcConfig::parse(&self.crc)?,
            k_convention: if self.k_excludes_crc {
                KConvention::ExcludesCrc
            } else {
                KConvention::IncludesCrc
            },
        })
    }
}

#[derive(Args)]
struct StopArgs {
    #[arg(long, default_value_t = 100)]
    target_errors: u64,
    #[arg(long, default_value_t = 100_000)]
    max_frames: u64,
}

impl StopArgs {
    fn rule(&self) -> StopRule {
        StopRule {
            target_errors: self.target_errors,
            max_frames: self.max_frames,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// nr, dega[@dB], mc[@dB], label=path.json or path.json; repeatable.
    #[arg(long = "scheme", required = true)]
    schemes: Vec<Scheme>,
    #[command(flatten)]
    link: LinkArgs,
    /// Information lengths, e.g. `16,32,48` or `1-64`.
    #[arg(long)]
    k: String,
    /// Eb/N0 points in dB, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "grid")]
    ebno: Vec<f64>,
    /// Eb/N0 grid `start:step:stop` in dB.
    #[arg(long)]
    grid: Option<String>,
    #[command(flatten)]
    stop: StopArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value_t = 0.01)]
    target_bler: f64,
    /// Lower end of the search bracket (dB).
    #[arg(long, default_value_t = -10.0, allow_negative_numbers = true)]
    lo_db: f64,
    /// Upper end of the search bracket (dB).
    #[arg(long, default_value_t = 20.0)]
    hi_db: f64,
    #[command(flatten)]
    stop: StopArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SearchArgs {
    fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            target_bler: self.target_bler,
            lo_db: self.lo_db,
            hi_db: self.hi_db,
            stop: self.stop.rule(),
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct FindSnrArgs {
    #[arg(long = "scheme", required = true)]
    schemes: Vec<Scheme>,
    #[command(flatten)]
    link: LinkArgs,
    #[arg(long)]
    k: String,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, default_value = "nr")]
    scheme: Scheme,
    #[command(flatten)]
    link: LinkArgs,
    #[arg(long)]
    k: String,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cache_path: Option<PathBuf>,
    /// Override the recipe's training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum CacheAction {
    Stats {
        #[arg(long)]
        cache_path: PathBuf,
    },
    Compact {
        #[arg(long)]
        cache_path: PathBuf,
    },
}

fn load_recipe(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn construct(a: ConstructArgs) -> Result<()> {
    let need_n = || a.n.context("--n is required");
    let seq = match a.scheme {
        ConstructScheme::Nr => {
            let n = need_n()?;
            nr_sequence(n)?.with_header(header(args_digest(&format!("construct;nr;N={n}")), a.seed))
        }
        ConstructScheme::Dega => {
            let n = need_n()?;
            let db = a
                .design_ebno
                .context("--design-ebno is required for dega")?;
            let canon = format!("construct;dega;N={n};design={db};rate={}", a.rate);
            dega_sequence(n, db, a.rate)?.with_header(header(args_digest(&canon), a.seed))
        }
        ConstructScheme::Mc => {
            let n = need_n()?;
            let db = a.ebno.context("--ebno is required for mc")?;
            let canon = format!(
                "construct;mc;N={n};channel={};ebno={db};rate={};trials={}",
                a.channel, a.rate, a.trials
            );
            mc_sequence(n, a.channel, db, a.rate, a.trials, a.seed)?
                .with_header(header(args_digest(&canon), a.seed))
        }
        ConstructScheme::Rl => {
            let path = a.config.as_ref().context("--config is required for rl")?;
            let cfg = load_recipe(path, None)?;
            if let Some(n) = a.n {
                if n != cfg.code.n {
                    bail!("--n {n} disagrees with the recipe's N={}", cfg.code.n);
                }
            }
            match &a.checkpoint {
                Some(ckpt) => {
                    let params = checkpoint::load(ckpt)?;
                    if params.config().digest() != cfg.policy_config().digest() {
                        bail!("checkpoint architecture does not match the recipe");
                    }
                    learned_sequence(&cfg, &params, "final")?
                }
                None => {
                    run_training(&cfg, open_cache(a.cache_path.as_deref())?, None, None)?.sequence
                }
            }
        }
    };
    emit(a.out.as_deref(), &(seq.to_json() + "\n"))
}

fn resolve_grid(ebno: &[f64], grid: &Option<String>) -> Result<Vec<f64>> {
    match grid {
        Some(g) => parse_grid(g),
        None if !ebno.is_empty() => Ok(ebno.to_vec()),
        None => bail!("give --ebno or --grid"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Construct(a) => construct(a),
        Command::Evaluate(a) => {
            let spec = SweepSpec {
                schemes: a.schemes,
                link: a.link.link()?,
                ks: parse_k_list(&a.k)?,
                grid: resolve_grid(&a.ebno, &a.grid)?,
                stop: a.stop.rule(),
                seed: a.seed,
            };
            let n = sweep::evaluate(&spec, &a.out)?;
            log::info!("{n} new rows in {}", a.out.display());
            Ok(())
        }
        Command::FindSnr(a) => {
            let spec = FindSnrSpec {
                schemes: a.schemes,
                link: a.link.link()?,
                ks: parse_k_list(&a.k)?,
                calibration: a.search.calibration(),
            };
            sweep::find_snr(&spec, &a.out)
        }
        Command::Calibrate(a) => sweep::calibrate_table(
            &a.scheme,
            &a.link.link()?,
            &parse_k_list(&a.k)?,
            &a.search.calibration(),
            &a.out,
        ),
        Command::Train(a) => {
            let cfg = load_recipe(&a.config, a.seed)?;
            let run = run_training(
                &cfg,
                open_cache(a.cache_path.as_deref())?,
                None,
                Some(&a.out),
            )?;
            log::info!(
                "learned sequence written to {}",
                a.out.join(SEQUENCE_FILE).display()
            );
            log::info!("greedy order: {:?}", run.sequence.order);
            Ok(())
        }
        Command::AblatePe(a) => {
            let cfg = load_recipe(&a.config, a.seed)?;
            ablate_pe(&cfg, open_cache(a.cache_path.as_deref())?, &a.out)?;
            Ok(())
        }
        Command::Cache { action } => match action {
            CacheAction::Stats { cache_path } => {
                let cache = RewardCache::open(&cache_path)?;
                println!("path: {}", cache_path.display());
                println!("entries: {}", cache.len());
                println!("skipped_lines: {}", cache.skipped());
                Ok(())
            }
            CacheAction::Compact { cache_path } => {
                let n = RewardCache::compact(&cache_path)?;
                println!("compacted {} to {n} entries", cache_path.display());
                Ok(())
            }
        },
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring worker pool")?;
    }
    run(cli)
}
