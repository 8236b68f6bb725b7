use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdgnn::model::Family;
use mdgnn_exp::selftest;
use mdgnn_exp::spec::{transfer_default, ExperimentSpec};
use mdgnn_exp::{apply_overrides, compare_table, plot_script, read_csv, run, write_csv, Axis, ExpError, Task};

/// Worker threads for the grid pool; defaults to all cores.
const WORKERS_ENV: &str = "MDGNN_WORKERS";

#[derive(Parser)]
#[command(name = "mdgnn-exp", version, about = "Sweeps, comparison tables and transfer runs for MDGNN families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every family across a grid.
    Sweep(SweepArgs),
    /// Print a WMMSE-relative table from a results CSV.
    Table { csv: PathBuf },
    /// Train at one size and test across the grid (default: train K=3, test K=4..8).
    Transfer {
        #[command(flatten)]
        sweep: SweepArgs,
        /// Axis value used for training.
        #[arg(long)]
        train_value: Option<f64>,
    },
    /// Fast sanity checks.
    Selftest,
}

#[derive(Args)]
struct SweepArgs {
    /// precoding | power-zf | power-lmmse
    #[arg(long)]
    task: Option<String>,
    /// Comma-separated family names.
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<String>>,
    /// Comma-separated structure rows, e.g. 2D-GNN-L-K.
    #[arg(long, value_delimiter = ',')]
    structure: Option<Vec<String>>,
    /// sigma_i_sq | beta | M | K | N
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training steps per run.
    #[arg(long)]
    steps: Option<usize>,
    /// Treat sigma_i_sq values as standard deviations rather than variances.
    #[arg(long)]
    sigma_is_std: bool,
    /// Output directory for results.csv, plot.txt and spec.json.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// JSON file whose keys override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl SweepArgs {
    fn spec(&self, mut spec: ExperimentSpec) -> Result<ExperimentSpec, ExpError> {
        if let Some(t) = &self.task {
            spec.task = Task::parse(t)?;
        }
        if let Some(f) = &self.families {
            spec.families = f.iter().map(|s| Family::parse(s.trim())).collect::<mdgnn::Result<_>>()?;
        }
        if let Some(s) = &self.structure {
            spec.structures = s.iter().map(|x| x.trim().to_string()).collect();
        }
        if let Some(a) = &self.axis {
            spec.axis = Axis::parse(a)?;
        }
        if let Some(g) = &self.grid {
            spec.grid = g.clone();
        }
        if let Some(t) = self.trials {
            spec.trials = t;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        if let Some(s) = self.steps {
            spec.budget.steps = s;
        }
        if self.sigma_is_std {
            spec.sigma_is_std = true;
        }
        if let Some(path) = &self.config {
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
            spec = apply_overrides(&spec, &v)?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn write_outputs(spec: &ExperimentSpec, out: &Path) -> Result<(), ExpError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    let rows = run(spec)?;
    write_csv(&rows, fs::File::create(out.join("results.csv"))?)?;
    fs::write(out.join("plot.txt"), plot_script(&rows, "results.csv"))?;
    print!("{}", compare_table(&rows));
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn configure_pool() -> Result<(), ExpError> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| ExpError::InvalidSpec(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| ExpError::InvalidSpec(e.to_string()))?;
    }
    Ok(())
}

fn main_inner(cli: Cli) -> Result<bool, ExpError> {
    configure_pool()?;
    match cli.command {
        Command::Sweep(args) => {
            let spec = args.spec(ExperimentSpec::default())?;
            write_outputs(&spec, &args.out)?;
        }
        Command::Transfer { sweep, train_value } => {
            let mut spec = sweep.spec(transfer_default())?;
            if let Some(t) = train_value {
                spec.transfer_from = Some(t);
            }
            spec.validate()?;
            write_outputs(&spec, &sweep.out)?;
        }
        Command::Table { csv } => {
            let rows = read_csv(fs::File::open(csv)?)?;
            print!("{}", compare_table(&rows));
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
