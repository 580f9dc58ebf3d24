use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use facepaste::masks::mask_path;
use facepaste::oracle::serve;
use facepaste::runner::{
    curve_csv, parse_modes, parse_pair, read_run, report, run_matrix, run_pgd_batch, scatter_export, thresholds,
    tradeoff_curve, RunConfig,
};
use facepaste::toy;
use facepaste::Result;

#[derive(Parser)]
#[command(name = "facepaste", version, about = "Black-box face-paste attacks with Bayesian optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run attack campaigns and write logs, summary, curve and scatter data.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Restrict to these pairs (repeatable), e.g. `--pair 3:7`.
        #[arg(long = "pair", value_name = "S:T")]
        pairs: Vec<String>,
        /// `manual`, `auto`, or `both`.
        #[arg(long, default_value = "manual")]
        mode: String,
    },
    /// Serve the simulated oracle over HTTP.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
    /// SSIM-constrained PGD against the simulated surrogate.
    Pgd {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "pair", value_name = "S:T")]
        pairs: Vec<String>,
        /// Also score the results on the transfer oracle.
        #[arg(long)]
        transfer: bool,
    },
    /// Summarize the logs of a run directory.
    Report {
        run_dir: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Print the confidence/stealthiness tradeoff curve as CSV.
    Curve {
        run_dir: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        min: f64,
        #[arg(long, default_value_t = 1.0)]
        max: f64,
        #[arg(long, default_value_t = 51)]
        steps: usize,
    },
    /// Print position/rotation of successful queries as CSV.
    Scatter { run_dir: PathBuf },
    /// Write the toy face set and its manual masks as PNG files.
    GenFaces {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf, pairs: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    if !pairs.is_empty() {
        cfg.pairs = Some(pairs.iter().map(|p| parse_pair(p)).collect::<Result<_>>()?);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Attack { config, pairs, mode } => {
            let cfg = load_config(&config, &pairs)?;
            let summary = run_matrix(&cfg, &parse_modes(&mode)?)?;
            print!("{}", summary.report.to_text());
            println!("results in {}", summary.run_dir.display());
        }
        Command::Serve { config, bind } => {
            let cfg = RunConfig::from_file(&config)?;
            let ws = cfg.workspace()?;
            let handle = serve(cfg.simulated_oracle(&ws.faces)?, &bind, cfg.server_query_limit)?;
            println!("serving on {}", handle.url());
            handle.wait();
        }
        Command::Pgd { config, pairs, transfer } => {
            let cfg = load_config(&config, &pairs)?;
            let s = run_pgd_batch(&cfg, transfer)?;
            println!("white-box success {}/{}", s.white_box_successes, s.pairs);
            if let (Some(mean), Some(max)) = (s.mean_transfer_confidence, s.max_transfer_confidence) {
                println!("transferred confidence mean {mean:.6} max {max:.6}");
            }
            println!("results in {}", s.run_dir.display());
        }
        Command::Report { run_dir, json } => {
            let rep = report(&read_run(&run_dir)?);
            if json {
                println!("{}", serde_json::to_string_pretty(&rep)?);
            } else {
                print!("{}", rep.to_text());
            }
        }
        Command::Curve { run_dir, min, max, steps } => {
            let records = read_run(&run_dir)?;
            print!("{}", curve_csv(&tradeoff_curve(&records, &thresholds(min, max, steps))));
        }
        Command::Scatter { run_dir } => {
            print!("{}", scatter_export(&read_run(&run_dir)?));
        }
        Command::GenFaces { seed, out } => {
            let t = toy::generate(seed);
            t.faces.save_dir(&out)?;
            for (i, m) in t.manual_masks.iter().enumerate() {
                m.as_image().write_png(mask_path(&out, i))?;
            }
            println!("wrote {} faces and masks to {}", t.faces.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
