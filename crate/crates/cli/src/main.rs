use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use vqarank_cli::commands::{self, RerankInputs};
use vqarank_cli::config::require_path;
use vqarank_cli::serve::{self, AppState};
use vqarank_cli::{BackendMode, CliError, Config, Overrides};

/// Question-driven VQA re-ranking for composed image retrieval.
#[derive(Debug, Parser)]
#[command(name = "vqarank", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Weight of the compressed VQA score.
    #[arg(long, global = true)]
    lambda_vqa: Option<f64>,
    /// Steepness of the VQA score compression.
    #[arg(long, global = true)]
    k: Option<f64>,
    /// Number of top candidates to re-rank.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Seed for dataset sampling and balancing.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendMode>,
    /// Directory for response caches.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Maximum concurrent backend requests.
    #[arg(long, global = true)]
    fan_out: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate visual questions for every triplet.
    Questions {
        #[arg(long)]
        triplets: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the balanced yes/no VQA corpus.
    BuildDataset {
        #[arg(long)]
        triplets: Option<PathBuf>,
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        image_index: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Re-rank base retrieval results with VQA scores.
    Rerank {
        #[command(flatten)]
        inputs: RerankArgs,
        #[arg(long)]
        rankings_out: Option<PathBuf>,
        #[arg(long)]
        traces_out: Option<PathBuf>,
    },
    /// Compute retrieval metrics for a rankings file.
    Eval {
        #[arg(long)]
        rankings: Option<PathBuf>,
        #[arg(long)]
        triplets: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Row label in the printed table.
        #[arg(long, default_value = "vqarank")]
        label: String,
    },
    /// Show the per-question answers behind one candidate's score.
    Trace {
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long)]
        candidate: String,
    },
    /// Evaluate several re-ranking depths.
    Sweep {
        #[command(flatten)]
        inputs: RerankArgs,
        /// Comma-separated depths; 0 means no re-ranking.
        #[arg(long, value_delimiter = ',', required = true)]
        ns: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve POST /rerank over HTTP.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
}

#[derive(Debug, Args)]
struct RerankArgs {
    #[arg(long)]
    triplets: Option<PathBuf>,
    #[arg(long)]
    cir_scores: Option<PathBuf>,
    #[arg(long)]
    questions: Option<PathBuf>,
}

impl RerankArgs {
    fn load(self, config: &Config) -> Result<RerankInputs, CliError> {
        let p = &config.paths;
        RerankInputs::load(
            &require_path(self.triplets, &p.triplets, "triplets")?,
            &require_path(self.cir_scores, &p.cir_scores, "CIR scores")?,
            &require_path(self.questions, &p.questions, "questions")?,
        )
    }
}

fn load_config(global: &GlobalArgs) -> Result<Config, CliError> {
    let mut config = match &global.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    config.apply(&Overrides {
        lambda_vqa: global.lambda_vqa,
        k: global.k,
        n: global.n,
        seed: global.seed,
        backend: global.backend,
        cache_dir: global.cache_dir.clone(),
        fan_out: global.fan_out,
    })?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli.global)?;
    let p = &config.paths;
    match cli.command {
        Command::Questions { triplets, out } => {
            let summary = commands::questions(
                &config,
                &require_path(triplets, &p.triplets, "triplets")?,
                &require_path(out, &p.questions, "questions output")?,
            )?;
            let s = &summary.stats;
            println!(
                "{} queries, {} questions ({:.2} per triplet, {:.1}% dual-image), {} backend calls",
                s.num_queries,
                s.total_questions,
                s.avg_questions_per_triplet,
                100.0 * s.dual_image_fraction,
                summary.backend_calls
            );
        }
        Command::BuildDataset { triplets, questions, image_index, out, report } => {
            let report = commands::build_dataset(
                &config,
                &require_path(triplets, &p.triplets, "triplets")?,
                &require_path(questions, &p.questions, "questions")?,
                &require_path(image_index, &p.image_index, "image index")?,
                &require_path(out, &p.corpus, "corpus output")?,
                report.or_else(|| p.balance_report.clone()).as_deref(),
            )?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Rerank { inputs, rankings_out, traces_out } => {
            let rankings_out = require_path(rankings_out, &p.rankings, "rankings output")?;
            let traces_out = require_path(traces_out, &p.traces, "traces output")?;
            let inputs = inputs.load(&config)?;
            let summary = commands::rerank(&config, &inputs, &rankings_out, &traces_out)?;
            println!(
                "{} queries re-ranked, {} VQA requests, {} backend calls",
                summary.queries, summary.requests_issued, summary.backend_calls
            );
        }
        Command::Eval { rankings, triplets, out, label } => {
            let report = commands::eval(
                &require_path(rankings, &p.rankings, "rankings")?,
                &require_path(triplets, &p.triplets, "triplets")?,
                out.or_else(|| p.metrics.clone()).as_deref(),
            )?;
            print!("{}", report.render_text(&label));
        }
        Command::Trace { traces, query, candidate } => {
            let traces = require_path(traces, &p.traces, "traces")?;
            print!("{}", commands::trace(&traces, &query, &candidate)?);
        }
        Command::Sweep { inputs, ns, out } => {
            let inputs = inputs.load(&config)?;
            let points = commands::sweep(&config, &inputs, &ns)?;
            print!("{}", commands::render_sweep(&points));
            if let Some(path) = out {
                commands::write_sweep(&path, &points)?;
            }
        }
        Command::Serve { addr } => {
            let addr = addr.unwrap_or_else(|| config.serve.addr.clone());
            // Blocking HTTP clients must be created and dropped outside the runtime.
            let state = Arc::new(AppState::from_config(&config)?);
            let runtime = tokio::runtime::Runtime::new()
                .map_err(|e| CliError::Usage(format!("starting runtime: {e}")))?;
            let served = runtime.block_on({
                let state = Arc::clone(&state);
                async move {
                    let listener = tokio::net::TcpListener::bind(&addr)
                        .await
                        .map_err(|e| CliError::Usage(format!("binding {addr}: {e}")))?;
                    tracing::info!("listening on {addr}");
                    eprintln!("listening on http://{}", listener.local_addr().map_err(|e| CliError::Usage(e.to_string()))?);
                    serve::run(listener, state)
                        .await
                        .map_err(|e| CliError::Usage(format!("server error: {e}")))
                }
            });
            drop(runtime);
            drop(state);
            served?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            EnvFilter::try_from_env("VQARANK_LOG").unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
