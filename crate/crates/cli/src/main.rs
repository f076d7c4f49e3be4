//! `neural-screen`: conditional variable screening from the command line.
//!
//! Exit status is 0 on success, 1 when a stage fails (the stage is named on
//! standard error) and 2 on a usage error.

mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use neural_screen::data::{load_csv, Dataset};
use neural_screen::nn::{sawtooth_norms, SawtoothNorms};
use neural_screen::pipeline::{cross_validate, screen_all, BandwidthChoice, Mode, PipelineConfig};
use neural_screen::simulation::{run_monte_carlo, DgpSpec, Hypothesis, Model, PipelineRunner, SpreadReading};
use neural_screen::{Result, ScreenError};
use serde::{Deserialize, Serialize};

const THREADS_ENV: &str = "NEURAL_SCREEN_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "neural-screen",
    version,
    about = "Screen covariates for conditional relevance beyond latent factors",
    arg_required_else_help = true
)]
struct Cli {
    /// Worker threads; NEURAL_SCREEN_THREADS takes precedence
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the screening tests for one or more coordinates
    Screen(ScreenArgs),
    /// Monte Carlo size and power table from a JSON config
    Simulate(SimulateArgs),
    /// Cross-validation table for the smoothing bandwidth
    CvBandwidth(CvArgs),
    /// Norms of the sawtooth network, raw and smoothed
    DemoSawtooth(SawtoothArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    High,
    Low,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// CSV file with a header row
    #[arg(long)]
    data: PathBuf,
    /// Name of the response column
    #[arg(long)]
    target: String,
    /// Number of diversified factors (high-dimensional mode)
    #[arg(long, default_value_t = 4)]
    rbar: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::High)]
    mode: ModeArg,
    /// Rows reserved for the projector; default min(100, ceil(5 ln n) rbar)
    #[arg(long)]
    reserved_rows: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Riemann grid size N
    #[arg(long, default_value_t = 50)]
    grid_size: usize,
    /// Override the regressor's epoch budget
    #[arg(long)]
    regressor_epochs: Option<usize>,
    /// Override the score network's epoch budget
    #[arg(long)]
    score_epochs: Option<usize>,
}

impl FitArgs {
    fn pipeline(&self) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            mode: match self.mode {
                ModeArg::High => Mode::HighDim,
                ModeArg::Low => Mode::LowDim,
            },
            rbar: self.rbar,
            reserved_rows: self.reserved_rows,
            grid_size: self.grid_size,
            seed: self.seed,
            ..PipelineConfig::default()
        };
        cfg.tests.alpha = self.alpha;
        if let Some(e) = self.regressor_epochs {
            cfg.regressor.epochs = e;
        }
        if let Some(e) = self.score_epochs {
            cfg.score.epochs = e;
        }
        cfg
    }

    fn load(&self) -> Result<Dataset> {
        load_csv(&self.data, &self.target).map_err(|e| e.at_stage("load"))
    }
}

#[derive(Args, Debug)]
struct ScreenArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Coordinates to screen, by column name or 1-based position
    #[arg(long, value_delimiter = ',', required = true)]
    coords: Vec<String>,
    /// Fixed bandwidth in the units of the screened column
    #[arg(long, conflicts_with = "bandwidth_grid")]
    bandwidth: Option<f64>,
    /// Candidate bandwidths; the CV minimiser is used
    #[arg(long, value_delimiter = ',')]
    bandwidth_grid: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Keep fitted networks in the JSON reports
    #[arg(long)]
    keep_models: bool,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON simulation config
    config: PathBuf,
    /// Output directory for table.csv and table.json
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Coordinate, by column name or 1-based position
    #[arg(long)]
    coord: String,
    /// Candidate bandwidths
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// CSV output; a JSON copy is written next to it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SawtoothArgs {
    /// Largest depth L; rows are written for 1..=L
    #[arg(long)]
    depth: usize,
    #[arg(long, default_value_t = 0.2)]
    bandwidth: f64,
    /// Quadrature cells on [0, 1]
    #[arg(long, default_value_t = 100_000)]
    points: usize,
    /// Optional CSV copy of the table
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_bandwidths() -> Vec<f64> {
    vec![0.1, 1.0, 1.5, 2.0]
}

fn default_hypotheses() -> Vec<Hypothesis> {
    vec![Hypothesis::Null, Hypothesis::Alternative]
}

/// Contents of the `simulate` config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulationFile {
    model: Model,
    n: usize,
    d: usize,
    replications: usize,
    #[serde(default = "default_bandwidths")]
    bandwidths: Vec<f64>,
    #[serde(default = "default_hypotheses")]
    hypotheses: Vec<Hypothesis>,
    #[serde(default)]
    master_seed: u64,
    spread_reading: Option<SpreadReading>,
    #[serde(default)]
    pipeline: PipelineConfig,
}

fn output<T>(r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| ScreenError::from(e).at_stage("output"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ScreenError::from(e).at_stage("output"))?;
    output(std::fs::write(path, text + "\n"))
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn fmt_ratio(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.3}"))
}

fn run_screen(args: &ScreenArgs) -> Result<()> {
    let data = args.fit.load()?;
    let coords = args
        .coords
        .iter()
        .map(|c| data.resolve_column(c))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_stage("load"))?;
    let mut cfg = args.fit.pipeline();
    cfg.keep_models = args.keep_models;
    cfg.bandwidth = match args.bandwidth {
        _ if !args.bandwidth_grid.is_empty() => BandwidthChoice::CrossValidated {
            candidates: args.bandwidth_grid.clone(),
            folds: args.folds,
        },
        Some(h) => BandwidthChoice::Fixed(h),
        None => BandwidthChoice::Fixed(1.0),
    };

    let reports = screen_all(&data, &coords, &cfg)?;
    output(std::fs::create_dir_all(&args.out))?;
    println!("coordinate\th\tfixed-t\tsup\tsquare\t(centered interval endpoints)");
    for report in &reports {
        let path = args.out.join(format!("report_{}.json", file_stem(&report.column_name)));
        write_json(&path, report)?;
        let [f, s, q] = report.centered.intervals();
        println!(
            "{}\t{}\t{}\t{}\t{}",
            report.column_name,
            report.bandwidth,
            fmt_ratio(f),
            fmt_ratio(s),
            fmt_ratio(q)
        );
    }
    output(std::fs::write(args.out.join("intervals.svg"), plot::interval_svg(&reports)))
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| ScreenError::from(e).at_stage("config"))?;
    let file: SimulationFile = serde_json::from_str(&text).map_err(|e| ScreenError::from(e).at_stage("config"))?;
    let mut dgp = DgpSpec::standard(file.model, Hypothesis::Null, file.n, file.d, 0);
    if let Some(reading) = file.spread_reading {
        dgp.spread_reading = reading;
    }
    dgp.validate().map_err(|e| e.at_stage("config"))?;
    let runner = PipelineRunner {
        dgp,
        pipeline: file.pipeline.clone(),
        bandwidths: file.bandwidths.clone(),
        master_seed: file.master_seed,
    };
    let result = run_monte_carlo(&runner, &file.hypotheses, &file.bandwidths, file.replications)
        .map_err(|e| e.at_stage("simulate"))?;
    output(std::fs::create_dir_all(&args.out))?;
    let metadata = serde_json::to_value(&file).map_err(|e| ScreenError::from(e).at_stage("output"))?;
    result
        .write(&args.out.join("table.csv"), &args.out.join("table.json"), metadata)
        .map_err(|e| e.at_stage("output"))?;
    print!("{}", result.table_csv());
    for f in &result.failures {
        eprintln!("replication {} ({:?}) failed: {}", f.replication, f.hypothesis, f.message);
    }
    Ok(())
}

fn run_cv(args: &CvArgs) -> Result<()> {
    let data = args.fit.load()?;
    let coord = data.resolve_column(&args.coord).map_err(|e| e.at_stage("load"))?;
    let cfg = args.fit.pipeline();
    let result = cross_validate(&data, coord, &args.grid, args.folds, &cfg)?;
    let mut csv = String::from("h,cv,terms\n");
    for row in &result.rows {
        writeln!(csv, "{},{},{}", row.bandwidth, row.cv, row.terms).unwrap();
    }
    output(std::fs::write(&args.out, &csv))?;
    write_json(&args.out.with_extension("json"), &result)?;
    print!("{csv}");
    println!("selected h = {}", result.best);
    Ok(())
}

fn run_sawtooth(args: &SawtoothArgs) -> Result<()> {
    if args.depth == 0 {
        return Err(ScreenError::Config("depth must be at least 1".into()).at_stage("sawtooth"));
    }
    let mut table = String::from("depth,norm,closed_form_norm,derivative_norm,smoothed_derivative_norm\n");
    for depth in 1..=args.depth {
        let norms = sawtooth_norms(depth, args.bandwidth, args.points, 4_000).map_err(|e| e.at_stage("sawtooth"))?;
        writeln!(
            table,
            "{depth},{:.6e},{:.6e},{:.3},{:.3}",
            norms.value_norm,
            SawtoothNorms::expected_value_norm(depth),
            norms.derivative_norm,
            norms.smoothed_derivative_norm
        )
        .unwrap();
    }
    print!("{table}");
    if let Some(path) = &args.out {
        output(std::fs::write(path, &table))?;
    }
    Ok(())
}

fn thread_count(flag: Option<usize>) -> std::result::Result<Option<usize>, String> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got '{v}'")),
        Err(_) => Ok(flag),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match thread_count(cli.threads) {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: cannot configure thread pool: {e}");
                return ExitCode::from(1);
            }
        }
        Ok(None) => {}
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    }

    let outcome = match &cli.command {
        Command::Screen(a) => run_screen(a),
        Command::Simulate(a) => run_simulate(a),
        Command::CvBandwidth(a) => run_cv(a),
        Command::DemoSawtooth(a) => run_sawtooth(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
