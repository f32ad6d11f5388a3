use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flexgrid::algorithms::AlgorithmKind;
use flexgrid::experiment::{self, RunConfig, RunError, Stage};
use flexgrid::scenarios::{Scenario, ScenarioSpec};
use flexgrid::Error;

#[derive(Parser)]
#[command(name = "flexgrid", version, about = "Demand-response dispatch of flexible loads on radial grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Randomized,
    Regular,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario preset used when no config is given.
    #[arg(long, value_enum, default_value = "regular")]
    scenario: Kind,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = AlgorithmKind::NAMES)]
    algorithm: Option<String>,
    /// Line (or transformer) id reported separately and used by critical-line.
    #[arg(long)]
    critical_line: Option<u64>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generates a scenario and writes scenario.json.
    GenerateScenario(RunArgs),
    /// Runs scenario, dispatch and power flow and writes a run directory.
    Simulate(RunArgs),
    /// Recomputes the metrics of a run directory from its CSV files.
    Report { dir: PathBuf },
    /// Prints the metrics of two runs of the same scenario side by side.
    Compare { a: PathBuf, b: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Topology(_) | Error::Profile(_) | Error::ScenarioMismatch(_) => 2,
        Error::Solver(_) => 3,
        Error::PowerFlow(_) => 4,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => 1,
    }
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn fail(e: RunError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e.error))
}

fn config(args: &RunArgs) -> Result<RunConfig, RunError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| RunError {
                stage: Stage::Config,
                error: Error::Config(format!("{}: {e}", path.display())),
            })?;
            RunConfig::from_json(&text).map_err(|error| RunError { stage: Stage::Config, error })?
        }
        None => {
            let spec = match args.scenario {
                Kind::Randomized => ScenarioSpec::randomized(0),
                Kind::Regular => ScenarioSpec::regular(0),
            };
            RunConfig::new(spec, AlgorithmKind::NoControl)
        }
    };
    if let Some(seed) = args.seed {
        cfg.scenario.seed = seed;
    }
    if args.critical_line.is_some() {
        cfg.critical_line = args.critical_line;
    }
    if let Some(name) = &args.algorithm {
        cfg.algorithm = AlgorithmKind::parse(name, args.critical_line).expect("clap validated the name");
    }
    if let AlgorithmKind::CriticalLine { line: None } = cfg.algorithm {
        cfg.algorithm = AlgorithmKind::CriticalLine { line: cfg.critical_line };
    }
    Ok(cfg)
}

fn generate(args: &RunArgs) -> Result<(), RunError> {
    let cfg = config(args)?;
    let at = |stage| move |error| RunError { stage, error };
    let topology = cfg.load_topology().map_err(at(Stage::Config))?;
    let scenario = Scenario::generate(&cfg.scenario, &topology).map_err(at(Stage::Scenario))?;
    write_json(&args.out_dir, "scenario.json", &scenario).map_err(at(Stage::Output))?;
    emit(&format!(
        "{} units, {} devices, {} steps -> {}",
        scenario.units.len(),
        scenario.devices.len(),
        scenario.horizon(),
        args.out_dir.join("scenario.json").display()
    ));
    Ok(())
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn simulate(args: &RunArgs) -> Result<(), RunError> {
    let cfg = config(args)?;
    let out = experiment::run(&cfg, &args.out_dir)?;
    log::info!("solve {:.3} s, power flow {:.3} s", out.timing.solve_seconds, out.timing.power_flow_seconds);
    emit(&serde_json::to_string_pretty(&out.metrics).expect("metrics serialize"));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenerateScenario(args) => generate(args),
        Command::Simulate(args) => simulate(args),
        Command::Report { dir } => experiment::report(dir)
            .map(|m| emit(&serde_json::to_string_pretty(&m).expect("metrics serialize")))
            .map_err(|error| RunError { stage: Stage::Config, error }),
        Command::Compare { a, b } => experiment::compare(a, b)
            .map(|c| emit(c.to_string().trim_end()))
            .map_err(|error| RunError { stage: Stage::Config, error }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
