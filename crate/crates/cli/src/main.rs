use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use rcv_cli::commands;
use rcv_cli::config::{ConfigError, DetectorSpec, PipelineConfig};
use rcv_core::detect::{DetectError, ExternalConfig};
use rcv_core::io::IoError;
use rcv_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "rcv", version, about = "Recursive cross-view 3D box detection")]
struct Cli {
    /// JSON pipeline config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value by dotted key, e.g. recursion.max_steps=4.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic scene directories.
    Synth {
        #[arg(long, default_value_t = 1)]
        scenes: usize,
        /// Seed of the first scene; scene k uses seed + k.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect 3D boxes in frames given by manifests or scene directories.
    Detect {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Write OUT/<frame>/boxes.json instead of next to each manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth and print the AP table.
    Eval {
        /// Scene directories with ground truth.
        #[arg(long)]
        gt: PathBuf,
        /// Directory holding <frame>/boxes.json predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Report path; defaults to PRED/eval_report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure accuracy over a grid of pseudo-view detector noise.
    Sweep {
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8")]
        sigmas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        miss: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the annotation HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Where exported records are written.
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.set)?;
    match cli.cmd {
        Cmd::Synth { scenes, seed, out } => {
            for p in commands::synth(&cfg, scenes, seed.unwrap_or(cfg.synth.seed), &out)? {
                println!("{}", p.display());
            }
        }
        Cmd::Detect { inputs, out } => {
            for p in commands::detect(&cfg, &inputs, out.as_deref())? {
                println!("{}", p.display());
            }
        }
        Cmd::Eval { gt, pred, out } => {
            let reports = commands::eval(&cfg, &gt, &pred)?;
            let path = out.unwrap_or_else(|| pred.join("eval_report.json"));
            rcv_core::io::write_json(&path, &reports)?;
            print!("{}", commands::format_ap_table(&reports));
        }
        Cmd::Sweep {
            scenes,
            seed,
            sigmas,
            miss,
            out,
        } => {
            let rows = commands::sweep(&cfg, scenes, seed.unwrap_or(cfg.synth.seed), &sigmas, &miss)?;
            commands::write_sweep_csv(&out, &rows)?;
            println!("{}", out.display());
        }
        Cmd::Serve { port, host, data } => {
            let (oracle_noise, external) = match &cfg.detector_pv {
                DetectorSpec::Oracle { noise } => (*noise, None),
                DetectorSpec::External { command, pool_size } => (
                    Default::default(),
                    Some(ExternalConfig {
                        command: command.clone(),
                        scratch_dir: cfg.scratch_dir.clone(),
                        pool_size: *pool_size,
                    }),
                ),
            };
            let service = ServiceConfig {
                data_dir: data,
                recursion: cfg.recursion.clone(),
                oracle_noise,
                external,
            };
            let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                rcv_service::serve(listener, service).await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<IoError>() || cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<DetectError>() {
            return "detector";
        }
    }
    "runtime"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
