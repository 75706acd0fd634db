use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use contamscope::backend::{ApiStyle, BackendConfig, BASE_URL_ENV};
use contamscope::detectors::{DetectorConfig, DetectorId, DvdConfig};
use contamscope::mixture::MixtureSpec;
use contamscope::pipeline::{self, RunConfig, RunOutcome, SimulateConfig};
use contamscope::toy::ToyWorldConfig;
use contamscope::{Error, Execution};

/// Detect variant contamination of benchmark items from the variance of
/// synthetic difficulty across sampled generations.
#[derive(Parser, Debug)]
#[command(name = "contamscope", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample every dataset item from the backend and write traces.
    Collect(Common),
    /// Score recorded traces with the selected detectors. Makes no backend calls.
    Score(Common),
    /// Compute AUC, ROC, histograms and intervals from a score file.
    Eval(Common),
    /// Collect, score and evaluate in one run (once per seed with --seeds).
    Pipeline(Common),
    /// DVD AUC for several min-token values from recorded traces.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated m values.
        #[arg(long, value_delimiter = ',')]
        m_values: Option<Vec<usize>>,
    },
    /// Evaluate synthetic DVD scores drawn from a two-component mixture.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Write a labeled toy dataset and the matching toy model spec.
    ToyInit {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Dataset file, one JSON item per line.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Trace file to read (defaults to <out>/traces.jsonl).
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Score file to read for `eval` (defaults to <out>/scores.jsonl).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// `http(s)://host[:port]` of an OpenAI-compatible server, or
    /// `toy:<path to toy model spec>`.
    #[arg(long, env = BASE_URL_ENV, default_value = "")]
    backend_url: String,
    #[arg(long, default_value = "")]
    model: String,
    #[arg(long, value_enum, default_value = "completions")]
    api_style: Style,
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,
    /// Temperature samples per item (N).
    #[arg(long, default_value_t = 50)]
    num_samples: usize,
    /// Least likely tokens summed per sample (m).
    #[arg(long, default_value_t = 20)]
    min_tokens: usize,
    #[arg(long, default_value_t = 20.0)]
    k_percent: f64,
    #[arg(long, default_value_t = 0.05)]
    cdd_alpha: f64,
    /// Comma-separated detector names (default: all).
    #[arg(long, value_delimiter = ',')]
    detectors: Option<Vec<DetectorId>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated seeds for a multi-seed run.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 512)]
    max_tokens: usize,
    /// Maximum requests in flight.
    #[arg(long, default_value_t = 8)]
    concurrency: usize,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
    #[arg(long, default_value_t = 3)]
    retries: u32,
    /// Skip the embeddings endpoint.
    #[arg(long)]
    no_embeddings: bool,
    /// Bootstrap resamples for AUC intervals (0 disables).
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    /// Monte-Carlo replicates for the dip tests (0 disables).
    #[arg(long, default_value_t = 200)]
    dip_replicates: usize,
    #[arg(long, default_value_t = 40)]
    bins: usize,
    /// Run every loop on one thread.
    #[arg(long)]
    sequential: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace existing artifacts.
    #[arg(long)]
    force: bool,
    #[arg(long, default_value = "warn")]
    log_level: String,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Style {
    Completions,
    Chat,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[arg(long, default_value_t = 200)]
    items: usize,
    /// Distance between the memory and drift means.
    #[arg(long, default_value_t = 2.0)]
    gap: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    pi_m: f64,
}

#[derive(Args, Debug)]
struct WorldArgs {
    #[arg(long, default_value_t = 100)]
    n_contaminated: usize,
    #[arg(long, default_value_t = 100)]
    n_clean: usize,
    #[arg(long, default_value_t = 128)]
    answer_length: usize,
    #[arg(long, default_value_t = 0.5)]
    pi_m: f64,
    #[arg(long, default_value_t = 0.9)]
    lambda_hi: f64,
    #[arg(long, default_value_t = 0)]
    world_seed: u64,
}

impl Common {
    fn run_config(&self) -> RunConfig {
        let mut backend = BackendConfig::new(self.backend_url.clone());
        backend.model_name = self.model.clone();
        backend.api_style = match self.api_style {
            Style::Completions => ApiStyle::Completions,
            Style::Chat => ApiStyle::Chat,
        };
        backend.temperature = self.temperature;
        backend.num_samples = self.num_samples;
        backend.max_tokens = self.max_tokens;
        backend.max_concurrent_requests = self.concurrency;
        backend.request_timeout = Duration::from_secs(self.timeout);
        backend.retry_limit = self.retries;
        backend.embeddings = !self.no_embeddings;
        let backend = backend.with_env();

        let detectors = DetectorConfig {
            dvd: DvdConfig {
                min_tokens_m: self.min_tokens,
                ..Default::default()
            },
            k_percent: self.k_percent,
            cdd_alpha: self.cdd_alpha,
            detectors: self
                .detectors
                .clone()
                .unwrap_or_else(|| DetectorId::ALL.to_vec()),
            ..Default::default()
        };

        RunConfig {
            dataset: self.dataset.clone(),
            traces: self.traces.clone(),
            scores: self.scores.clone(),
            backend,
            detectors,
            seed: self.seed,
            seeds: self.seeds.clone().unwrap_or_default(),
            force: self.force,
            histogram_bins: self.bins,
            bootstrap_replicates: self.bootstrap,
            dip_replicates: self.dip_replicates,
            exec: if self.sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            },
            ..RunConfig::new(self.out.clone())
        }
    }
}

fn init_logging(level: &str) {
    let _ = env_logger::Builder::new().parse_filters(level).try_init();
}

fn report(outcome: &RunOutcome) {
    if let Some(r) = &outcome.report {
        print!("{}", contamscope::eval::report_table(r));
    }
    if let Some(rows) = &outcome.sweep {
        print!("{}", contamscope::eval::sweep_csv(rows));
    }
    for f in &outcome.manifest.failed_items {
        eprintln!("failed item {}: {}", f.item_id, f.error);
    }
    for p in &outcome.written {
        log::info!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<i32, Error> {
    let outcome = match cli.command {
        Command::Collect(c) => {
            init_logging(&c.log_level);
            pipeline::run_collect(&c.run_config())?
        }
        Command::Score(c) => {
            init_logging(&c.log_level);
            pipeline::run_score(&c.run_config())?
        }
        Command::Eval(c) => {
            init_logging(&c.log_level);
            pipeline::run_eval(&c.run_config())?
        }
        Command::Pipeline(c) => {
            init_logging(&c.log_level);
            pipeline::run_pipeline(&c.run_config())?
        }
        Command::Sweep { common, m_values } => {
            init_logging(&common.log_level);
            let mut cfg = common.run_config();
            if let Some(ms) = m_values {
                cfg.sweep_ms = ms;
            }
            pipeline::run_sweep(&cfg)?
        }
        Command::Simulate { common, sim } => {
            init_logging(&common.log_level);
            let mut cfg = common.run_config();
            cfg.simulate = SimulateConfig {
                contaminated: MixtureSpec {
                    pi_m: sim.pi_m,
                    mu_m: -1.0,
                    sigma_m: sim.sigma,
                    mu_u: -1.0 - sim.gap,
                    sigma_u: sim.sigma,
                },
                clean: MixtureSpec::drift_only(-1.0 - sim.gap, sim.sigma),
                items: sim.items,
                samples_per_item: common.num_samples,
            };
            pipeline::run_simulate(&cfg)?
        }
        Command::ToyInit { world, out, force } => {
            init_logging("warn");
            let cfg = ToyWorldConfig {
                n_contaminated: world.n_contaminated,
                n_clean: world.n_clean,
                answer_length: world.answer_length,
                min_answer_length: world.answer_length,
                pi_m: world.pi_m,
                lambda_hi: world.lambda_hi,
                seed: world.world_seed,
                ..Default::default()
            };
            for p in pipeline::toy_init(&cfg, &out, force)? {
                println!("{}", p.display());
            }
            return Ok(0);
        }
    };
    report(&outcome);
    Ok(outcome.status.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
