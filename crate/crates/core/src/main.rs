use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mambaplace::commands::{self, Stage};
use mambaplace::config::RunConfig;
use mambaplace::scenegen::Split;
use mambaplace::train::TrainOptions;
use mambaplace::Result;

const VERIFY_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "mambaplace", version, about = "Text-to-point-cloud place recognition")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key as `--key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write its split files.
    GenData {
        /// Output directory (default: data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train one stage and write its checkpoint into run_dir.
    Train {
        #[arg(long, default_value = "coarse")]
        stage: Stage,
        /// Continue from an existing checkpoint of this stage.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Checkpoint directory (default: run_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score both stages on a split and print the metrics JSON.
    Eval {
        /// Split to score (default: eval_split).
        #[arg(long)]
        split: Option<Split>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every hand-written backward rule.
    Gradcheck,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.extend(["--seed".to_string(), seed.to_string()]);
    }
    let cfg = commands::load_config(common.config.as_deref(), &overrides)?;
    eprint!("{}", cfg.canonical().lines().map(|l| format!("config {l}\n")).collect::<String>());
    eprintln!("config_digest={}", cfg.digest());
    Ok(cfg)
}

/// Writes each log line to stdout and appends it to a file.
struct Tee {
    file: std::fs::File,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stdout().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stdout().flush()?;
        self.file.flush()
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Command::GenData { out, force, common } => {
            let cfg = resolve(&common)?;
            let dir = out.unwrap_or_else(|| cfg.data_dir.clone());
            let m = commands::gen_data(&cfg, &dir, force)?;
            for f in &m.files {
                println!("split={} file={} submaps={} queries={} sha256={}", f.split, f.file, f.submaps, f.queries, f.sha256);
            }
        }
        Command::Train {
            stage,
            resume,
            stop_after,
            out,
            common,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(dir) = out {
                cfg.run_dir = dir;
            }
            std::fs::create_dir_all(&cfg.run_dir)?;
            let file = OpenOptions::new().create(true).append(true).open(cfg.run_dir.join("train.log"))?;
            let opts = TrainOptions { stop_after, resume };
            commands::train(&cfg, stage, &opts, &mut Tee { file })?;
        }
        Command::Eval { split, out, common } => {
            let cfg = resolve(&common)?;
            let report = commands::eval(&cfg, split.unwrap_or(cfg.eval_split))?;
            let mut json = serde_json::to_string_pretty(&report)?;
            json.push('\n');
            print!("{json}");
            if let Some(path) = out {
                std::fs::write(path, json)?;
            }
        }
        Command::Gradcheck => {
            let (reports, secs) = commands::gradcheck()?;
            let mut failed = false;
            for r in &reports {
                let verdict = if r.passed() { "pass" } else { "FAIL" };
                println!("{:<18} seeds={} max_rel_err={:.3e} {verdict}", r.block, r.seeds, r.max_rel_err);
                failed |= !r.passed();
            }
            println!("elapsed_s={secs:.2}");
            if failed {
                return Ok(VERIFY_FAILED);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
