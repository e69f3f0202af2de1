use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diffprune::experiment::{
    cmd_analyze, cmd_export, cmd_prune, cmd_report, cmd_sweep, cmd_train, sweep_csv, sweep_spread,
    Analysis, ExperimentConfig, RunSummary,
};
use diffprune::graph::{parse_model_spec, Architecture};
use diffprune::par::{set_global_threads, Parallelism};
use diffprune::resources::ResourceOptions;
use diffprune::zoo;

/// Exit status of a completed run whose final usage exceeds the budget.
const EXIT_OVER_BUDGET: u8 = 2;

#[derive(Parser)]
#[command(
    name = "diffprune",
    version,
    about = "Prune CNNs to fit microcontroller budgets"
)]
struct Cli {
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print size, MACs and peak memory of a model.
    Analyze(AnalyzeArgs),
    /// Train without pruning.
    Train(RunArgs),
    /// Train with pruning; exits 2 if the final model misses a budget.
    Prune(RunArgs),
    /// Write the pruned spec and int8 weights from a checkpoint.
    Export {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a prune run's telemetry as CSV and markdown.
    Report {
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid over alpha ratio and pruning learning rate.
    Sweep(RunArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Model spec file.
    #[arg(long, conflicts_with_all = ["builtin", "config"])]
    model: Option<PathBuf>,
    /// Bundled model name.
    #[arg(long, conflicts_with = "config")]
    builtin: Option<String>,
    /// Take the model and resource options from an experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON array of per-group width multipliers.
    #[arg(long)]
    pi: Option<PathBuf>,
    /// Let `add` accumulate into a dying summand.
    #[arg(long)]
    add_accumulate: bool,
    /// Also print the per-layer table.
    #[arg(long)]
    layers: bool,
    /// Emit the full report as JSON instead of CSV.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`, then `./out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let (arch, mut options) = if let Some(path) = &args.config {
        let cfg = ExperimentConfig::load(path)?;
        (cfg.architecture()?, cfg.resources.options())
    } else {
        let text = match (&args.model, &args.builtin) {
            (Some(p), None) => {
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
            }
            (None, Some(b)) => zoo::builtin(b)
                .with_context(|| format!("unknown builtin `{b}`"))?
                .to_string(),
            _ => bail!("give one of --model, --builtin or --config"),
        };
        (
            Architecture::new(parse_model_spec(&text)?)?,
            ResourceOptions::default(),
        )
    };
    options.planner.add_accumulate |= args.add_accumulate;
    let pi = args.pi.as_deref().map(read_pi).transpose()?;
    let report = cmd_analyze(&arch, pi.as_deref(), &options)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", analysis_csv(&report, args.layers));
    }
    Ok(())
}

fn analysis_csv(a: &Analysis, layers: bool) -> String {
    let mut s = a.summary_csv();
    s += &format!(
        "\nschedule,nodes\norder,{}\nbottleneck,{}\nimprecise_node,{}\n",
        a.order.join(" "),
        a.bottleneck.join(" "),
        a.imprecise_node
    );
    if layers {
        s.push('\n');
        s += &a.layers_csv();
    }
    s
}

fn read_pi(path: &Path) -> Result<Vec<f64>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("{}: expected a JSON array of numbers", path.display()))
}

fn print_run(s: &RunSummary, out: &Path) {
    let (u, b) = (&s.usage, &s.budget);
    let cap = |v: u64| {
        if v == u64::MAX {
            "-".to_string()
        } else {
            v.to_string()
        }
    };
    println!(
        "pmu {} / {}  size {} / {}  macs {} / {}",
        u.pmu_bytes,
        cap(b.pmu_bytes),
        u.size_bytes,
        cap(b.size_bytes),
        u.macs,
        cap(b.macs)
    );
    println!(
        "val accuracy {:.4}  training MACs {}  budgets {}",
        s.val_accuracy,
        s.training_macs,
        if s.budgets_met { "met" } else { "NOT met" }
    );
    println!("artifacts in {}", out.display());
}

fn run(cli: Cli) -> Result<ExitCode> {
    let par = match cli.threads {
        Some(0) => bail!("--threads must be at least 1"),
        Some(1) => Parallelism::Sequential,
        Some(n) => {
            set_global_threads(n);
            Parallelism::Parallel
        }
        None => Parallelism::Parallel,
    };
    match cli.command {
        Command::Analyze(args) => analyze(&args)?,
        Command::Train(args) => {
            let (cfg, out) = args.load()?;
            let s = cmd_train(&cfg, &out, par)?;
            print_run(&s, &out);
        }
        Command::Prune(args) => {
            let (cfg, out) = args.load()?;
            let s = cmd_prune(&cfg, &out, par)?;
            print_run(&s, &out);
            if !s.budgets_met {
                return Ok(ExitCode::from(EXIT_OVER_BUDGET));
            }
        }
        Command::Export { checkpoint, out } => {
            let a = cmd_export(&checkpoint, &out)?;
            print!("{}", a.summary_csv());
        }
        Command::Report { run_dir, out } => {
            let out = out.unwrap_or_else(|| run_dir.join("report"));
            let r = cmd_report(&run_dir, &out)?;
            println!(
                "{} intervals over {} groups; report in {}",
                r.rows,
                r.groups,
                out.display()
            );
        }
        Command::Sweep(args) => {
            let (cfg, out) = args.load()?;
            let cells = cmd_sweep(&cfg, &out, par)?;
            print!("{}", sweep_csv(&cells));
            if let Some(spread) = sweep_spread(&cells) {
                println!("accuracy spread (max-min): {spread:.4}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
