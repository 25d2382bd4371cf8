use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "smoa", version, about = "Spectrum modulation adapter laboratory")]
struct Cli {
    #[command(flatten)]
    run: RunArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Master seed for every stochastic choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Rank tolerance; defaults to max(rows, cols) * sigma_max * 2^-53.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,

    /// Directory for artifacts.
    #[arg(long, global = true, env = "SMOA_OUT", default_value = ".")]
    pub out: PathBuf,

    /// Stdout format; `csv` prints the command's table where it has one.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,

    /// Only errors on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    /// More log output on stderr (repeatable).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a test matrix.
    Gen(commands::GenArgs),
    /// Build a block plan from a base weight.
    Plan(commands::PlanArgs),
    /// Create an adapter file.
    Adapter(commands::AdapterArgs),
    /// Materialize an adapter's dense update.
    Update(commands::UpdateArgs),
    /// Numerical rank of a matrix or adapter update.
    Rank(commands::RankArgs),
    /// Analytic rank ceiling of SMoA on a plan.
    Ceiling(commands::CeilingArgs),
    /// Build a witness bundle over a plan.
    Witness(commands::WitnessArgs),
    /// Rank-r approximation gap of a witness target.
    Gap(commands::GapArgs),
    /// Fit an adapter to a target by gradient descent.
    Fit(commands::FitArgs),
    /// Marchenko-Pastur spectral diagnostics.
    Diagnose(commands::DiagnoseArgs),
    /// Rank sweep over a (d, K, r) grid.
    Sweep(commands::SweepArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match (cli.run.quiet, cli.run.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let run = &cli.run;
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(run, a),
        Command::Plan(a) => commands::plan(run, a),
        Command::Adapter(a) => commands::adapter(run, a),
        Command::Update(a) => commands::update(run, a),
        Command::Rank(a) => commands::rank(run, a),
        Command::Ceiling(a) => commands::ceiling(run, a),
        Command::Witness(a) => commands::witness(run, a),
        Command::Gap(a) => commands::gap(run, a),
        Command::Fit(a) => commands::fit(run, a),
        Command::Diagnose(a) => commands::diagnose(run, a),
        Command::Sweep(a) => commands::sweep(run, a),
    };
    match result {
        Ok(out) => {
            match (run.format, out.csv) {
                (Format::Csv, Some(csv)) => print!("{csv}"),
                _ => println!("{}", out.json),
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
