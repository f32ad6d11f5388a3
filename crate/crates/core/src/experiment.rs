//! End-to-end runs: scenario generation, dispatch, per-step power flow and
//! metrics, written to a run directory as JSON and CSV.
//!
//! A run directory holds
//!
//! - `manifest.json`: resolved config, topology and scenario spec
//! - `scenario.json`, `dispatch.json`
//! - `loads.csv`, `buses.csv`, `flows.csv`: per-step power-flow results
//! - `metrics.json`: recomputable from the three CSVs alone
//! - `timing.json`: wall-clock durations, kept apart so `metrics.json` stays
//!   deterministic

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{dispatch, AlgorithmKind, DeviceOrder, DispatchInput, DispatchResult};
use crate::error::{Error, Result};
use crate::grid::{Topology, TopologyFile};
use crate::powerflow::{
    metrics, BranchKind, BranchSample, BusLoad, BusSample, MetricsReport, PowerFlowModel, PowerFlowOptions,
    PowerFlowSolution, StepSummary,
};
use crate::scenarios::{Scenario, ScenarioSpec, UnitKind};
use crate::scheduling::{ProblemConfig, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerFlowSettings {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for PowerFlowSettings {
    fn default() -> Self {
        let d = PowerFlowOptions::<f64>::default();
        PowerFlowSettings { max_iterations: d.max_iterations, tolerance: d.voltage_tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Topology file; the bundled grid when absent.
    #[serde(default)]
    pub topology: Option<PathBuf>,
    pub scenario: ScenarioSpec,
    #[serde(default = "no_control")]
    pub algorithm: AlgorithmKind,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub order: DeviceOrder,
    /// Line whose loading is reported separately.
    #[serde(default)]
    pub critical_line: Option<u64>,
    #[serde(default)]
    pub power_flow: PowerFlowSettings,
}

fn no_control() -> AlgorithmKind {
    AlgorithmKind::NoControl
}

impl RunConfig {
    pub fn new(scenario: ScenarioSpec, algorithm: AlgorithmKind) -> RunConfig {
        RunConfig {
            topology: None,
            scenario,
            algorithm,
            problem: ProblemConfig::default(),
            solver: SolverConfig::default(),
            order: DeviceOrder::default(),
            critical_line: None,
            power_flow: PowerFlowSettings::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load_topology(&self) -> Result<Topology> {
        match &self.topology {
            Some(path) => Ok(Topology::load(path)?),
            None => Ok(Topology::default_grid()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Scenario,
    Dispatch,
    PowerFlow,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Scenario => "scenario",
            Stage::Dispatch => "dispatch",
            Stage::PowerFlow => "power-flow",
            Stage::Output => "output",
        })
    }
}

/// A pipeline failure tagged with the stage it happened in.
#[derive(Debug)]
pub struct RunError {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage: {}", self.stage, self.error)
    }
}

impl std::error::Error for RunError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, RunError>;
}

impl<T, E: Into<Error>> AtStage<T> for std::result::Result<T, E> {
    fn at(self, stage: Stage) -> std::result::Result<T, RunError> {
        self.map_err(|e| RunError { stage, error: e.into() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub topology: TopologyFile,
    pub base_mva: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub scenario_seconds: f64,
    pub solve_seconds: f64,
    pub power_flow_seconds: f64,
}

/// Everything a run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: RunConfig,
    pub scenario: Scenario,
    pub dispatch: DispatchResult,
    pub steps: Vec<StepSummary>,
    pub metrics: MetricsReport,
    pub timing: Timing,
}

/// Power flow for every step of a controlled residual (kW, consumption
/// positive, topology bus order).
pub fn solve_steps(
    topology: &Topology,
    bus_p: &[Vec<f64>],
    bus_q: &[Vec<f64>],
    settings: &PowerFlowSettings,
) -> Result<Vec<PowerFlowSolution<f64>>> {
    let model = PowerFlowModel::<f64>::new(topology)?;
    let opts = PowerFlowOptions {
        max_iterations: settings.max_iterations,
        voltage_tol: settings.tolerance,
        power_tol: settings.tolerance,
    };
    let horizon = bus_p.first().map_or(0, Vec::len);
    let to_pu = 1.0 / (1000.0 * topology.base_mva);
    (0..horizon)
        .into_par_iter()
        .map(|t| {
            let loads: Vec<BusLoad<f64>> =
                bus_p.iter().zip(bus_q).map(|(p, q)| BusLoad { p: p[t] * to_pu, q: q[t] * to_pu }).collect();
            Ok(model.solve(&loads, &opts)?)
        })
        .collect()
}

/// Gross consumption per step (kW, kVAr): load units plus devices.
fn consumption(scenario: &Scenario, dispatch: &DispatchResult) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); scenario.horizon()];
    for u in scenario.units.iter().filter(|u| u.kind == UnitKind::Load) {
        for (o, (p, q)) in out.iter_mut().zip(u.p_kw.iter().zip(&u.q_kvar)) {
            o.0 += p;
            o.1 += q;
        }
    }
    for d in &dispatch.devices {
        for (o, (p, q)) in out.iter_mut().zip(d.p_kw.iter().zip(&d.q_kvar)) {
            o.0 += p;
            o.1 += q;
        }
    }
    out
}

/// Runs the pipeline without touching the file system.
pub fn execute(config: &RunConfig) -> std::result::Result<RunOutput, RunError> {
    let topology = config.load_topology().at(Stage::Config)?;
    execute_on(config, &topology)
}

pub fn execute_on(config: &RunConfig, topology: &Topology) -> std::result::Result<RunOutput, RunError> {
    config.scenario.validate().at(Stage::Config)?;
    if let Some(line) = config.critical_line {
        if topology.line(line).is_none() {
            return Err(RunError {
                stage: Stage::Config,
                error: crate::error::TopologyError::UnknownLine(line).into(),
            });
        }
    }
    let start = Instant::now();
    let scenario = Scenario::generate(&config.scenario, topology).at(Stage::Scenario)?;
    let scenario_seconds = start.elapsed().as_secs_f64();

    let input = DispatchInput {
        topology,
        dt_hours: config.scenario.dt_hours,
        devices: &scenario.devices,
        residual_p: &scenario.residual_p,
        residual_q: &scenario.residual_q,
        problem: config.problem,
        solver: config.solver,
        order: config.order,
    };
    let result = dispatch(config.algorithm, &input).at(Stage::Dispatch)?;

    let start = Instant::now();
    let solutions = solve_steps(topology, &result.bus_p, &result.bus_q, &config.power_flow).at(Stage::PowerFlow)?;
    let power_flow_seconds = start.elapsed().as_secs_f64();

    let steps: Vec<StepSummary> = solutions
        .iter()
        .zip(consumption(&scenario, &result))
        .map(|(sol, (p, q))| StepSummary::from_solution(sol, p / 1000.0, q / 1000.0))
        .collect();
    let report = metrics(&steps, config.scenario.dt_hours, topology.base_mva, config.critical_line);
    let timing = Timing { scenario_seconds, solve_seconds: result.solve_seconds, power_flow_seconds };
    Ok(RunOutput { config: config.clone(), scenario, dispatch: result, steps, metrics: report, timing })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct LoadRow {
    step: usize,
    consumption_p_mw: f64,
    consumption_q_mvar: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BusRow {
    step: usize,
    bus: u64,
    u_mag: f64,
    theta_rad: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowRow {
    step: usize,
    branch: u64,
    kind: BranchKind,
    p_km: f64,
    q_km: f64,
    p_loss: f64,
    loading_pct: f64,
}

pub fn write_steps(dir: &Path, steps: &[StepSummary]) -> Result<()> {
    let mut loads = csv::Writer::from_path(dir.join("loads.csv"))?;
    let mut buses = csv::Writer::from_path(dir.join("buses.csv"))?;
    let mut flows = csv::Writer::from_path(dir.join("flows.csv"))?;
    for (step, s) in steps.iter().enumerate() {
        loads.serialize(LoadRow {
            step,
            consumption_p_mw: s.consumption_p_mw,
            consumption_q_mvar: s.consumption_q_mvar,
        })?;
        for b in &s.buses {
            buses.serialize(BusRow { step, bus: b.id, u_mag: b.u_mag, theta_rad: b.theta_rad })?;
        }
        for b in &s.branches {
            flows.serialize(FlowRow {
                step,
                branch: b.id,
                kind: b.kind,
                p_km: b.p_km,
                q_km: b.q_km,
                p_loss: b.p_loss,
                loading_pct: b.loading_pct,
            })?;
        }
    }
    loads.flush()?;
    buses.flush()?;
    flows.flush()?;
    Ok(())
}

/// Rebuilds the per-step summaries from `loads.csv`, `buses.csv` and
/// `flows.csv`.
pub fn read_steps(dir: &Path) -> Result<Vec<StepSummary>> {
    let mut steps: Vec<StepSummary> = Vec::new();
    for row in csv::Reader::from_path(dir.join("loads.csv"))?.deserialize::<LoadRow>() {
        let row = row?;
        if row.step != steps.len() {
            return Err(Error::Config(format!("loads.csv: unexpected step {}", row.step)));
        }
        steps.push(StepSummary {
            buses: Vec::new(),
            branches: Vec::new(),
            consumption_p_mw: row.consumption_p_mw,
            consumption_q_mvar: row.consumption_q_mvar,
        });
    }
    let missing = |file: &str, step: usize| Error::Config(format!("{file}: step {step} not in loads.csv"));
    for row in csv::Reader::from_path(dir.join("buses.csv"))?.deserialize::<BusRow>() {
        let row = row?;
        let s = steps.get_mut(row.step).ok_or_else(|| missing("buses.csv", row.step))?;
        s.buses.push(BusSample { id: row.bus, u_mag: row.u_mag, theta_rad: row.theta_rad });
    }
    for row in csv::Reader::from_path(dir.join("flows.csv"))?.deserialize::<FlowRow>() {
        let row = row?;
        let s = steps.get_mut(row.step).ok_or_else(|| missing("flows.csv", row.step))?;
        s.branches.push(BranchSample {
            id: row.branch,
            kind: row.kind,
            p_km: row.p_km,
            q_km: row.q_km,
            p_loss: row.p_loss,
            loading_pct: row.loading_pct,
        });
    }
    Ok(steps)
}

/// Runs the pipeline and writes the run directory.
pub fn run(config: &RunConfig, out_dir: &Path) -> std::result::Result<RunOutput, RunError> {
    let topology = config.load_topology().at(Stage::Config)?;
    let out = execute_on(config, &topology)?;
    write_run(&out, &topology, out_dir).at(Stage::Output)?;
    Ok(out)
}

pub fn write_run(out: &RunOutput, topology: &Topology, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest { config: out.config.clone(), topology: topology.to_file(), base_mva: topology.base_mva };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("scenario.json"), &out.scenario)?;
    write_json(&dir.join("dispatch.json"), &out.dispatch)?;
    write_steps(dir, &out.steps)?;
    write_json(&dir.join("metrics.json"), &out.metrics)?;
    write_json(&dir.join("timing.json"), &out.timing)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Recomputes the metrics of a run directory from its CSV files.
pub fn report(dir: &Path) -> Result<MetricsReport> {
    let manifest = read_manifest(dir)?;
    let steps = read_steps(dir)?;
    Ok(metrics(&steps, manifest.config.scenario.dt_hours, manifest.base_mva, manifest.config.critical_line))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub algorithm_a: String,
    pub algorithm_b: String,
    pub rows: Vec<ComparisonRow>,
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<34} {:>16} {:>16} {:>16}", "metric", self.algorithm_a, self.algorithm_b, "delta")?;
        for r in &self.rows {
            writeln!(f, "{:<34} {:>16.6} {:>16.6} {:>16.6}", r.metric, r.a, r.b, r.delta)?;
        }
        Ok(())
    }
}

/// The named figures of a report in table order.
pub fn metric_rows(m: &MetricsReport) -> Vec<(String, f64)> {
    let mut rows: Vec<(String, f64)> = [
        ("total_load_mwh", m.total_load_mwh),
        ("total_load_mvarh", m.total_load_mvarh),
        ("residual_load_mwh", m.residual_load_mwh),
        ("residual_load_mvarh", m.residual_load_mvarh),
        ("active_losses_mw", m.active_losses_mw),
        ("voltage_deviation_sum_pct", m.voltage_deviation_sum_pct),
        ("voltage_deviation_max_pct", m.voltage_deviation_max_pct),
        ("phase_angle_sum_deg", m.phase_angle_sum_deg),
        ("line_loading_sum_pct", m.line_loading_sum_pct),
        ("line_loading_step_sum_pct", m.line_loading_step_sum_pct),
        ("line_loading_max_pct", m.line_loading_max_pct),
        ("transformer_loading_sum_pct", m.transformer_loading_sum_pct),
        ("transformer_loading_step_sum_pct", m.transformer_loading_step_sum_pct),
        ("transformer_loading_max_pct", m.transformer_loading_max_pct),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    if let Some(c) = &m.critical_line {
        rows.push((format!("critical_line_{}_loading_step_sum_pct", c.line), c.loading_step_sum_pct));
        rows.push((format!("critical_line_{}_loading_max_pct", c.line), c.loading_max_pct));
    }
    rows
}

/// Side-by-side metrics of two runs of the same scenario.
pub fn compare(dir_a: &Path, dir_b: &Path) -> Result<Comparison> {
    let (ma, mb) = (read_manifest(dir_a)?, read_manifest(dir_b)?);
    if ma.config.scenario != mb.config.scenario {
        return Err(Error::ScenarioMismatch(format!(
            "{:?} seed {} vs {:?} seed {}",
            ma.config.scenario.kind, ma.config.scenario.seed, mb.config.scenario.kind, mb.config.scenario.seed
        )));
    }
    if ma.topology != mb.topology {
        return Err(Error::ScenarioMismatch("runs use different topologies".into()));
    }
    let (ra, rb) = (report(dir_a)?, report(dir_b)?);
    let rows_b = metric_rows(&rb);
    let rows = metric_rows(&ra)
        .into_iter()
        .filter_map(|(metric, a)| {
            let b = rows_b.iter().find(|(k, _)| *k == metric)?.1;
            Some(ComparisonRow { metric, a, b, delta: b - a })
        })
        .collect();
    Ok(Comparison {
        algorithm_a: ma.config.algorithm.name().to_string(),
        algorithm_b: mb.config.algorithm.name().to_string(),
        rows,
    })
}
