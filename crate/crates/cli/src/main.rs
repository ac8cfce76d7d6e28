use std::path::PathBuf;
use std::process::ExitCode;

use churnlab::dataset::{generate_synthetic, load_csv, save_csv, GeneratorConfig};
use churnlab::exec::Execution;
use churnlab::pipeline::{run_experiment, ExperimentConfig, SearchGrid};
use churnlab::report::{format_table, verify_report, write_lift_plots, write_results};
use churnlab::{ChurnError, Result};
use clap::{Args, Parser, Subcommand};

/// Churn modeling with RFM sequences: synthetic panels, nested CV, reports.
#[derive(Parser, Debug)]
#[command(name = "churnlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic customer panel as CSV.
    Generate(GenerateArgs),
    /// Run the nested cross-validation experiment on a panel.
    Run(RunArgs),
    /// Check a results directory and print its report table.
    Report(ReportArgs),
    /// Draw per-fold lift curves from a results directory as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Number of customers.
    #[arg(long = "n", default_value_t = GeneratorConfig::default().n_customers)]
    n_customers: usize,
    #[arg(long, default_value_t = GeneratorConfig::default().churn_rate)]
    churn_rate: f64,
    /// Static feature columns.
    #[arg(long, default_value_t = GeneratorConfig::default().n_static)]
    n_static: usize,
    /// Static columns that drive churn.
    #[arg(long, default_value_t = GeneratorConfig::default().n_informative_static)]
    n_informative_static: usize,
    /// Weight of the informative static columns in the churn score.
    #[arg(long, default_value_t = GeneratorConfig::default().static_signal)]
    static_signal: f64,
    /// How sharply churners' activity declines near the window end.
    #[arg(long, default_value_t = GeneratorConfig::default().signal_strength)]
    signal_strength: f64,
    #[arg(long, default_value_t = GeneratorConfig::default().noise_scale)]
    noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Panel CSV (overrides `panel` in the config file).
    #[arg(long)]
    panel: Option<PathBuf>,
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides `cv.master_seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Results directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated model keys; default all nine.
    #[arg(long, value_delimiter = ',')]
    specs: Vec<String>,
    /// Use the reduced LSTM grid.
    #[arg(long)]
    smoke: bool,
    /// Disable data parallelism.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Results directory written by `run`.
    #[arg(long)]
    results: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Results directory written by `run`.
    #[arg(long)]
    results: PathBuf,
    /// Where to write the SVG files; default `<results>/plots`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated model keys to overlay; default all in the curve files.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
}

fn generate(args: GenerateArgs) -> Result<()> {
    let config = GeneratorConfig {
        n_customers: args.n_customers,
        churn_rate: args.churn_rate,
        n_static: args.n_static,
        n_informative_static: args.n_informative_static,
        static_signal: args.static_signal,
        signal_strength: args.signal_strength,
        noise_scale: args.noise_scale,
        seed: args.seed,
    };
    let panel = generate_synthetic(&config)?;
    save_csv(&panel, &args.out)?;
    println!(
        "wrote {}: {} customers, {} churners ({:.4}%)",
        args.out.display(),
        panel.len(),
        panel.n_churners(),
        100.0 * panel.prevalence()
    );
    Ok(())
}

fn resolve_run_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &args.panel {
        config.panel = Some(p.clone());
    }
    if let Some(seed) = args.seed {
        config.cv.master_seed = seed;
    }
    if let Some(out) = &args.out {
        config.output_dir = Some(out.clone());
    }
    if !args.specs.is_empty() {
        config.specs = args.specs.clone();
    }
    if args.smoke {
        config.grid = SearchGrid {
            c: config.grid.c.clone(),
            ..SearchGrid::smoke()
        };
    }
    if args.sequential {
        config.cv.execution = Execution::Sequential;
    }
    config.validate()?;
    Ok(config)
}

fn run(args: RunArgs) -> Result<()> {
    let config = resolve_run_config(&args)?;
    let panel_path = config
        .panel
        .clone()
        .ok_or_else(|| ChurnError::InvalidConfig("no panel given (--panel or `panel` in the config)".into()))?;
    let out = config
        .output_dir
        .clone()
        .ok_or_else(|| ChurnError::InvalidConfig("no output directory given (--out or `output_dir`)".into()))?;
    let panel = load_csv(&panel_path)?;
    eprintln!(
        "panel {}: {} customers, {} churners",
        panel_path.display(),
        panel.len(),
        panel.n_churners()
    );
    let result = run_experiment(&panel, &config)?;
    write_results(&out, &result, &config)?;
    let rows = verify_report(&out)?;
    print!("{}", format_table(&rows));
    println!(
        "leakage audit: {} fitted models, no violations; results in {}",
        result.audit.len(),
        out.display()
    );
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let rows = verify_report(&args.results)?;
    print!("{}", format_table(&rows));
    let lift = |key: &str| rows.iter().find(|r| r.key == key).map(|r| r.lift);
    if let (Some(a), Some(b)) = (lift("static+lstm"), lift("static")) {
        println!(
            "lift improvement of Static + LSTM prob. over Only static: {:.1}%",
            100.0 * churnlab::pipeline::improvement_ratio(a, b)
        );
    }
    Ok(())
}

fn plot(args: PlotArgs) -> Result<()> {
    let out = args.out.unwrap_or_else(|| args.results.join("plots"));
    for path in write_lift_plots(&args.results, &out, &args.models)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
        Command::Plot(a) => plot(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
