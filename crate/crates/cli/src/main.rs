//! Benchmark harness: one subcommand per experiment, CSV out.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use vmshortcut::experiments::{self, BenchConfig, Experiment, Scale};
use vmshortcut::Backend;

#[derive(Parser)]
#[command(name = "vmshortcut", version, about = "Page-table shortcut experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Random reads through a traditional node vs a shortcut, growing leaf count.
    Motivation(Common),
    /// Cost of building a node and accessing it twice.
    Creation(Common),
    /// Random reads at fan-ins 512 down to 1.
    Fanin(Common),
    /// Remap cost while reader threads run.
    Shootdown(Common),
    /// Insert, lookup and mixed workloads over all hash indexes.
    Workloads(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Real,
    Emulated,
}

#[derive(Args)]
struct Common {
    #[arg(long, value_enum, default_value = "desk")]
    scale: ScaleArg,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "real")]
    backend: BackendArg,
    /// CSV output path [default: results/<experiment>.csv]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated cores; threads are pinned in creation order.
    #[arg(long, value_delimiter = ',')]
    cores: Vec<usize>,
    /// Largest average fan-in at which Shortcut-EH routes through the shortcut.
    #[arg(long, default_value_t = vmshortcut::shortcut_eh::DEFAULT_FANIN_THRESHOLD)]
    fanin_threshold: u32,
    /// Mapper poll interval in milliseconds [default: per experiment]
    #[arg(long)]
    poll_ms: Option<f64>,
    /// Entries HTI migrates per access.
    #[arg(long, default_value_t = vmshortcut::baselines::DEFAULT_MIGRATE_BATCH)]
    hti_batch: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Overrides the main size: slots, leaves or entries.
    #[arg(long)]
    size: Option<usize>,
    /// Overrides the number of accesses or remaps.
    #[arg(long)]
    accesses: Option<usize>,
    /// Run the shootdown experiment on fewer than two cores.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn config(&self, experiment: Experiment) -> anyhow::Result<BenchConfig> {
        let mut c = BenchConfig::new(experiment)
            .scale(match self.scale {
                ScaleArg::Paper => Scale::Paper,
                ScaleArg::Desk => Scale::Desk,
            })
            .backend(match self.backend {
                BackendArg::Real => Backend::Real,
                BackendArg::Emulated => Backend::Emulated,
            })
            .seed(self.seed)
            .cores(self.cores.clone())
            .repetitions(self.reps)
            .force(self.force);
        c.fanin_threshold = self.fanin_threshold;
        c.hti_batch = self.hti_batch;
        if let Some(ms) = self.poll_ms {
            anyhow::ensure!(ms.is_finite() && ms > 0.0, "--poll-ms must be positive");
            c = c.poll_interval(Duration::from_secs_f64(ms / 1e3));
        }
        if let Some(n) = self.size {
            c = c.size(n);
        }
        if let Some(n) = self.accesses {
            c = c.accesses(n);
        }
        anyhow::ensure!(self.reps > 0, "--reps must be at least 1");
        anyhow::ensure!(self.hti_batch > 0, "--hti-batch must be at least 1");
        Ok(c)
    }
}

fn run(experiment: Experiment, args: &Common) -> anyhow::Result<bool> {
    let config = args.config(experiment)?;
    let outcome = experiments::run(&config)?;
    if let Some(reason) = &outcome.skipped {
        println!("{reason}");
        return Ok(true);
    }
    let path = args.out.clone().unwrap_or_else(|| PathBuf::from(format!("results/{}.csv", experiment.id())));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    experiments::write_csv(&outcome.rows, BufWriter::new(file))?;
    println!("{experiment}: {} rows written to {}", outcome.rows.len(), path.display());
    for check in outcome.correctness.iter().chain(&outcome.trends) {
        println!("{check}");
    }
    Ok(outcome.correct())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (experiment, args) = match &cli.command {
        Command::Motivation(a) => (Experiment::Motivation, a),
        Command::Creation(a) => (Experiment::Creation, a),
        Command::Fanin(a) => (Experiment::Fanin, a),
        Command::Shootdown(a) => (Experiment::Shootdown, a),
        Command::Workloads(a) => (Experiment::Workloads, a),
    };
    match run(experiment, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{experiment}: correctness check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
