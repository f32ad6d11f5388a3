//! Scheduling of flexible loads against residual-load profiles.
//!
//! A problem consists of devices and *channels*. A channel is a residual
//! profile (active and reactive, kW/kVAr) plus the devices whose consumption
//! adds to it; the objective penalizes every channel's controlled profile and
//! the comfort slacks of every device. Grid-level problems use one channel per
//! feeder; line-level problems add one channel per line.

mod exact;
mod model;
mod relaxed;
mod rounding;

use serde::{Deserialize, Serialize};

use crate::devices::{DeviceParams, ExogenousSeries};
use crate::error::SolverError;

pub use model::{objective_value, ComfortConstraints};
pub use rounding::distribute_coarse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    SumNormQuadratic,
    EuclideanNorm,
    MaxNorm,
    ApproxLinearGradient,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [
        ObjectiveKind::SumNormQuadratic,
        ObjectiveKind::EuclideanNorm,
        ObjectiveKind::MaxNorm,
        ObjectiveKind::ApproxLinearGradient,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    Active,
    Reactive,
    Both,
}

impl PowerMode {
    pub const ALL: [PowerMode; 3] = [PowerMode::Active, PowerMode::Reactive, PowerMode::Both];

    pub fn uses_active(self) -> bool {
        matches!(self, PowerMode::Active | PowerMode::Both)
    }

    pub fn uses_reactive(self) -> bool {
        matches!(self, PowerMode::Reactive | PowerMode::Both)
    }
}

/// Comfort slack weighting. `InternalController` keeps the storage `margin`
/// (default: the dead band) away from the bound where the device's own
/// thermostat would switch it off, penalized with `w2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ControlMode {
    FullControl {
        w1: f64,
    },
    InternalController {
        w1: f64,
        w2: f64,
        #[serde(default)]
        margin: Option<f64>,
    },
}

impl ControlMode {
    pub fn w1(&self) -> f64 {
        match *self {
            ControlMode::FullControl { w1 } | ControlMode::InternalController { w1, .. } => w1,
        }
    }
}

impl Default for ControlMode {
    fn default() -> Self {
        ControlMode::FullControl { w1: 1e6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableMode {
    Binary,
    RelaxedRounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProblemConfig {
    pub objective: ObjectiveKind,
    pub power_mode: PowerMode,
    pub control: ControlMode,
    pub variable_mode: VariableMode,
    /// Restrict slacks to non-negative integers.
    pub integer_slack: bool,
    /// Power unit of the objective (kW). Residuals and ratings are given in
    /// kW and divided by this before entering the norms, which sets how the
    /// comfort weights compare with the residual terms.
    pub power_unit_kw: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            objective: ObjectiveKind::SumNormQuadratic,
            power_mode: PowerMode::Both,
            control: ControlMode::default(),
            variable_mode: VariableMode::RelaxedRounded,
            integer_slack: false,
            power_unit_kw: 1000.0,
        }
    }
}

/// Tuning of the exact and relaxed solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Largest horizon solved exactly for a single device.
    pub exact_single_bits: usize,
    /// Largest `devices × horizon` solved exactly in a joint problem.
    pub exact_joint_bits: usize,
    pub admm_max_iterations: usize,
    pub admm_abs_tol: f64,
    pub admm_rel_tol: f64,
    /// Relative objective improvement of a sweep below which block-coordinate
    /// descent stops.
    pub bcd_tolerance: f64,
    pub bcd_max_sweeps: usize,
    /// Local search after rounding.
    pub polish: bool,
    /// Treat a relaxed solve that hits the iteration limit as an error.
    pub strict_convergence: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            exact_single_bits: 20,
            exact_joint_bits: 24,
            admm_max_iterations: 5000,
            admm_abs_tol: 1e-6,
            admm_rel_tol: 1e-5,
            bcd_tolerance: 1e-8,
            bcd_max_sweeps: 30,
            polish: true,
            strict_convergence: false,
        }
    }
}

/// A device taking part in a scheduling problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedDevice {
    pub id: u64,
    pub params: DeviceParams<f64>,
    pub x0: f64,
    pub exo: ExogenousSeries<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    /// Element the channel stands for (transformer or line id).
    pub id: u64,
    pub r_act: Vec<f64>,
    pub r_react: Vec<f64>,
    /// Indices into `ScheduleProblem::devices`.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleProblem {
    pub horizon: usize,
    pub dt_hours: f64,
    pub devices: Vec<SchedDevice>,
    pub channels: Vec<Channel>,
    pub config: ProblemConfig,
}

impl ScheduleProblem {
    /// One channel carrying every device.
    pub fn new(
        r_act: Vec<f64>,
        r_react: Vec<f64>,
        devices: Vec<SchedDevice>,
        dt_hours: f64,
        config: ProblemConfig,
    ) -> Result<Self, SolverError> {
        let members = (0..devices.len()).collect();
        let horizon = r_act.len();
        Self::with_channels(horizon, vec![Channel { id: 0, r_act, r_react, members }], devices, dt_hours, config)
    }

    pub fn with_channels(
        horizon: usize,
        channels: Vec<Channel>,
        devices: Vec<SchedDevice>,
        dt_hours: f64,
        config: ProblemConfig,
    ) -> Result<Self, SolverError> {
        let p = ScheduleProblem { horizon, dt_hours, devices, channels, config };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let t = self.horizon;
        if t == 0 {
            return Err(SolverError::Shape("empty horizon".into()));
        }
        if !(self.dt_hours > 0.0) {
            return Err(SolverError::Shape(format!("step length {} h", self.dt_hours)));
        }
        for c in &self.channels {
            if c.r_act.len() != t || c.r_react.len() != t {
                return Err(SolverError::Shape(format!(
                    "channel {} residual lengths {}/{} differ from horizon {t}",
                    c.id,
                    c.r_act.len(),
                    c.r_react.len()
                )));
            }
            if let Some(&m) = c.members.iter().find(|&&m| m >= self.devices.len()) {
                return Err(SolverError::Shape(format!("channel {} lists unknown device index {m}", c.id)));
            }
        }
        for d in &self.devices {
            if d.exo.len() != t {
                return Err(SolverError::Shape(format!("device {} exogenous length {} != {t}", d.id, d.exo.len())));
            }
            d.exo.validate().map_err(SolverError::Shape)?;
            d.params.validate().map_err(|e| SolverError::Config(format!("device {}: {e}", d.id)))?;
        }
        if !(self.config.power_unit_kw > 0.0 && self.config.power_unit_kw.is_finite()) {
            return Err(SolverError::Config(format!("power unit {} kW", self.config.power_unit_kw)));
        }
        match self.config.control {
            ControlMode::FullControl { w1 } if !(w1 > 0.0) => Err(SolverError::Config(format!("w1 = {w1}"))),
            ControlMode::InternalController { w1, w2, .. } if !(w1 > 0.0 && w2 > 0.0) => {
                Err(SolverError::Config(format!("w1 = {w1}, w2 = {w2}")))
            }
            _ => Ok(()),
        }
    }

    /// The same channels with only device `index` left schedulable.
    pub fn restricted_to(&self, index: usize) -> ScheduleProblem {
        let channels = self
            .channels
            .iter()
            .filter(|c| c.members.contains(&index))
            .map(|c| Channel { members: vec![0], ..c.clone() })
            .collect();
        ScheduleProblem {
            horizon: self.horizon,
            dt_hours: self.dt_hours,
            devices: vec![self.devices[index].clone()],
            channels,
            config: self.config,
        }
    }

    /// Objective of a binary or fractional schedule (one row per device).
    pub fn evaluate(&self, u: &[Vec<f64>]) -> f64 {
        model::Model::compile(self).evaluate(u)
    }

    /// Per-step comfort constraints of device `index`, linear in its switches.
    pub fn feasibility_bounds(&self, index: usize) -> ComfortConstraints {
        model::Model::compile(self).constraints(index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSchedule {
    pub device_id: u64,
    pub u: Vec<u8>,
    /// Comfort slack per step (weighted units).
    pub slack: Vec<f64>,
    /// Storage states after each step.
    pub states: Vec<f64>,
}

impl DeviceSchedule {
    pub fn on_steps(&self) -> usize {
        self.u.iter().filter(|&&b| b == 1).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComfortSummary {
    /// Device steps whose storage state left the comfort band.
    pub violating_steps: usize,
    /// Largest distance outside the band (°C).
    pub max_violation: f64,
    pub total_slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    BranchAndBound,
    BruteForce,
    RelaxedRounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolverStats {
    pub nodes: u64,
    pub relaxed_solves: u64,
    pub admm_iterations: u64,
    pub unconverged: u64,
    pub bcd_sweeps: u64,
    pub repair_flips: u64,
    pub polish_moves: u64,
}

impl SolverStats {
    pub fn absorb(&mut self, o: &SolverStats) {
        self.nodes += o.nodes;
        self.relaxed_solves += o.relaxed_solves;
        self.admm_iterations += o.admm_iterations;
        self.unconverged += o.unconverged;
        self.bcd_sweeps += o.bcd_sweeps;
        self.repair_flips += o.repair_flips;
        self.polish_moves += o.polish_moves;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub devices: Vec<DeviceSchedule>,
    pub objective: f64,
    pub method: SolveMethod,
    /// Binary mode was requested but the problem exceeded the exact budget.
    pub exact_fallback: bool,
    pub comfort: ComfortSummary,
    pub stats: SolverStats,
}

impl Schedule {
    pub fn u_matrix(&self) -> Vec<Vec<f64>> {
        self.devices.iter().map(|d| d.u.iter().map(|&b| f64::from(b)).collect()).collect()
    }
}

fn to_schedule(
    problem: &ScheduleProblem,
    model: &model::Model,
    u: Vec<Vec<u8>>,
    method: SolveMethod,
    exact_fallback: bool,
    stats: SolverStats,
) -> Schedule {
    let uf: Vec<Vec<f64>> = u.iter().map(|r| r.iter().map(|&b| f64::from(b)).collect()).collect();
    let objective = model.evaluate(&uf);
    let mut comfort = ComfortSummary::default();
    let devices = u
        .into_iter()
        .enumerate()
        .map(|(i, bits)| {
            let states = model.states(i, &uf[i]);
            let slack: Vec<f64> = states.iter().enumerate().map(|(s, &x)| model.slack(i, s, x)).collect();
            let band = problem.devices[i].params.comfort_band();
            for &x in &states {
                let v = band.violation(x);
                if v > 1e-9 {
                    comfort.violating_steps += 1;
                    comfort.max_violation = comfort.max_violation.max(v);
                }
            }
            comfort.total_slack += slack.iter().sum::<f64>();
            DeviceSchedule { device_id: problem.devices[i].id, u: bits, slack, states }
        })
        .collect();
    Schedule { devices, objective, method, exact_fallback, comfort, stats }
}

/// Exhaustive enumeration in lexicographic order; ties keep the smaller `u`.
pub fn brute_force_oracle(problem: &ScheduleProblem, max_bits: usize) -> Result<Schedule, SolverError> {
    problem.validate()?;
    let bits = problem.devices.len() * problem.horizon;
    if bits > max_bits {
        return Err(SolverError::BudgetExceeded { bits, limit: max_bits });
    }
    let model = model::Model::compile(problem);
    let (u, nodes) = exact::brute_force(&model);
    Ok(to_schedule(problem, &model, u, SolveMethod::BruteForce, false, SolverStats { nodes, ..Default::default() }))
}

/// Depth-first branch and bound over the same lexicographic order as the oracle.
pub fn branch_and_bound(problem: &ScheduleProblem, max_bits: usize) -> Result<Schedule, SolverError> {
    problem.validate()?;
    let bits = problem.devices.len() * problem.horizon;
    if bits > max_bits {
        return Err(SolverError::BudgetExceeded { bits, limit: max_bits });
    }
    let model = model::Model::compile(problem);
    let (u, nodes) = exact::branch_and_bound(&model);
    Ok(to_schedule(problem, &model, u, SolveMethod::BranchAndBound, false, SolverStats { nodes, ..Default::default() }))
}

/// Relaxed solve followed by rounding, repair and local search.
pub fn solve_relaxed_rounded(problem: &ScheduleProblem, cfg: &SolverConfig) -> Result<Schedule, SolverError> {
    problem.validate()?;
    let model = model::Model::compile(problem);
    let (u, stats) = relaxed::solve_joint(&model, cfg)?;
    Ok(to_schedule(problem, &model, u, SolveMethod::RelaxedRounded, false, stats))
}

pub fn solve_single_device(problem: &ScheduleProblem, cfg: &SolverConfig) -> Result<Schedule, SolverError> {
    if problem.devices.len() != 1 {
        return Err(SolverError::Shape(format!("expected one device, got {}", problem.devices.len())));
    }
    solve_with_budget(problem, cfg, cfg.exact_single_bits)
}

pub fn solve_multi_device(problem: &ScheduleProblem, cfg: &SolverConfig) -> Result<Schedule, SolverError> {
    if problem.devices.is_empty() {
        return Err(SolverError::Shape("no devices".into()));
    }
    let limit = if problem.devices.len() == 1 { cfg.exact_single_bits } else { cfg.exact_joint_bits };
    solve_with_budget(problem, cfg, limit)
}

fn solve_with_budget(problem: &ScheduleProblem, cfg: &SolverConfig, limit: usize) -> Result<Schedule, SolverError> {
    match problem.config.variable_mode {
        VariableMode::Binary if problem.devices.len() * problem.horizon <= limit => branch_and_bound(problem, limit),
        VariableMode::Binary => {
            log::debug!(
                "{} bits exceed the exact budget of {limit}; using the relaxed solver",
                problem.devices.len() * problem.horizon
            );
            let mut s = solve_relaxed_rounded(problem, cfg)?;
            s.exact_fallback = true;
            Ok(s)
        }
        VariableMode::RelaxedRounded => solve_relaxed_rounded(problem, cfg),
    }
}

/// Threshold at 0.5 (ties round up), then greedy repair of comfort violations.
/// Device `index` is rounded with the other devices fixed at `others`.
pub fn round_and_repair(
    problem: &ScheduleProblem,
    index: usize,
    u: &[f64],
    others: &[Vec<f64>],
) -> Result<Vec<u8>, SolverError> {
    let model = model::Model::compile(problem);
    let sub = model.subproblem(index, others);
    rounding::round_and_repair(&sub, u).map(|(bits, _)| bits)
}
