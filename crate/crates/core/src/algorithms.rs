//! Demand-response control algorithms: how devices are grouped into
//! scheduling problems over the grid and in which order they are solved.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::devices::{simulate_uncontrolled, DeviceParams, ExogenousSeries};
use crate::error::{Error, SolverError, TopologyError};
use crate::grid::Topology;
use crate::scheduling::{
    solve_multi_device, solve_single_device, Channel, ComfortSummary, ProblemConfig, SchedDevice, Schedule,
    ScheduleProblem, SolverConfig, SolverStats,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlgorithmKind {
    /// Thermostat-driven devices, no dispatch.
    NoControl,
    OptimalGrid,
    HeuristicGrid,
    OptimalLine,
    HeuristicLine,
    /// Devices below `line` first; a transformer id selects its whole feeder.
    CriticalLine {
        line: Option<u64>,
    },
}

impl AlgorithmKind {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmKind::NoControl => "no-control",
            AlgorithmKind::OptimalGrid => "optimal-grid",
            AlgorithmKind::HeuristicGrid => "heuristic-grid",
            AlgorithmKind::OptimalLine => "optimal-line",
            AlgorithmKind::HeuristicLine => "heuristic-line",
            AlgorithmKind::CriticalLine { .. } => "critical-line",
        }
    }

    pub fn parse(name: &str, critical: Option<u64>) -> Option<AlgorithmKind> {
        Some(match name {
            "no-control" => AlgorithmKind::NoControl,
            "optimal-grid" => AlgorithmKind::OptimalGrid,
            "heuristic-grid" => AlgorithmKind::HeuristicGrid,
            "optimal-line" => AlgorithmKind::OptimalLine,
            "heuristic-line" => AlgorithmKind::HeuristicLine,
            "critical-line" => AlgorithmKind::CriticalLine { line: critical },
            _ => return None,
        })
    }

    pub const NAMES: [&'static str; 6] =
        ["no-control", "optimal-grid", "heuristic-grid", "optimal-line", "heuristic-line", "critical-line"];
}

/// Order in which heuristics dispatch devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceOrder {
    /// Descending dead band × rated power, ties by id.
    #[default]
    Flexibility,
    Id,
}

/// A flexible device at a bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedDevice {
    pub id: u64,
    pub bus: u64,
    pub params: DeviceParams<f64>,
    pub x0: f64,
    pub exo: ExogenousSeries<f64>,
}

impl PlacedDevice {
    fn sched(&self) -> SchedDevice {
        SchedDevice { id: self.id, params: self.params, x0: self.x0, exo: self.exo.clone() }
    }
}

/// Everything an algorithm needs. Residuals are per bus in topology order,
/// consumption-positive, kW and kVAr.
#[derive(Debug, Clone)]
pub struct DispatchInput<'a> {
    pub topology: &'a Topology,
    pub dt_hours: f64,
    pub devices: &'a [PlacedDevice],
    pub residual_p: &'a [Vec<f64>],
    pub residual_q: &'a [Vec<f64>],
    pub problem: ProblemConfig,
    pub solver: SolverConfig,
    pub order: DeviceOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDispatch {
    pub device_id: u64,
    pub bus: u64,
    pub u: Vec<u8>,
    pub p_kw: Vec<f64>,
    pub q_kvar: Vec<f64>,
    /// Storage state after each step.
    pub states: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchResult {
    pub algorithm: AlgorithmKind,
    /// In input device order.
    pub devices: Vec<DeviceDispatch>,
    /// Order the devices were dispatched in (empty for joint solves).
    pub dispatch_order: Vec<u64>,
    /// Controlled residual per bus (topology order).
    pub bus_p: Vec<Vec<f64>>,
    pub bus_q: Vec<Vec<f64>>,
    /// Controlled residual per transformer.
    pub feeder_p: BTreeMap<u64, Vec<f64>>,
    pub feeder_q: BTreeMap<u64, Vec<f64>>,
    pub comfort: ComfortSummary,
    pub stats: SolverStats,
    #[serde(skip)]
    pub solve_seconds: f64,
}

impl DispatchInput<'_> {
    pub fn horizon(&self) -> usize {
        self.residual_p.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<(), Error> {
        let n = self.topology.buses.len();
        if self.residual_p.len() != n || self.residual_q.len() != n {
            return Err(Error::Config(format!(
                "residuals given for {}/{} buses, topology has {n}",
                self.residual_p.len(),
                self.residual_q.len()
            )));
        }
        let t = self.horizon();
        if self.residual_p.iter().chain(self.residual_q).any(|r| r.len() != t) {
            return Err(Error::Config("bus residuals differ in length".into()));
        }
        let mut seen = BTreeSet::new();
        for d in self.devices {
            if !seen.insert(d.id) {
                return Err(Error::Config(format!("duplicate device id {}", d.id)));
            }
            if self.topology.bus(d.bus).is_none() {
                return Err(Error::Config(format!("device {} placed at unknown bus {}", d.id, d.bus)));
            }
        }
        Ok(())
    }

    fn bus_index(&self, bus: u64) -> usize {
        self.topology.bus_position(bus).expect("validated bus")
    }

    fn feeder_of(&self, d: &PlacedDevice) -> u64 {
        self.topology.bus(d.bus).expect("validated bus").feeder
    }

    fn sum_buses<'b>(&self, buses: impl Iterator<Item = &'b u64>) -> (Vec<f64>, Vec<f64>) {
        let t = self.horizon();
        let (mut p, mut q) = (vec![0.0; t], vec![0.0; t]);
        for &b in buses {
            let i = self.bus_index(b);
            add(&mut p, &self.residual_p[i]);
            add(&mut q, &self.residual_q[i]);
        }
        (p, q)
    }

    /// Heuristic dispatch order of a set of device indices.
    fn ordered(&self, mut idx: Vec<usize>) -> Vec<usize> {
        match self.order {
            DeviceOrder::Flexibility => idx.sort_by(|&a, &b| {
                let (da, db) = (&self.devices[a], &self.devices[b]);
                let fa = da.params.t_db * da.params.p_rated;
                let fb = db.params.t_db * db.params.p_rated;
                fb.total_cmp(&fa).then(da.id.cmp(&db.id))
            }),
            DeviceOrder::Id => idx.sort_by_key(|&i| self.devices[i].id),
        }
        idx
    }
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

/// A device schedule as produced by one of the solves.
struct Solved {
    index: usize,
    u: Vec<u8>,
    states: Vec<f64>,
}

#[derive(Default)]
struct FeederOutcome {
    solved: Vec<Solved>,
    order: Vec<u64>,
    stats: SolverStats,
}

impl FeederOutcome {
    fn absorb(&mut self, indices: &[usize], s: Schedule) {
        self.stats.absorb(&s.stats);
        for (&index, d) in indices.iter().zip(s.devices) {
            self.solved.push(Solved { index, u: d.u, states: d.states });
        }
    }
}

fn profile(d: &PlacedDevice, u: &[u8]) -> (Vec<f64>, Vec<f64>) {
    (
        u.iter().map(|&b| d.params.p_rated * f64::from(b)).collect(),
        u.iter().map(|&b| d.params.q_rated * f64::from(b)).collect(),
    )
}

fn single(input: &DispatchInput<'_>, index: usize, r_p: &[f64], r_q: &[f64]) -> Result<Schedule, SolverError> {
    let p = ScheduleProblem::new(
        r_p.to_vec(),
        r_q.to_vec(),
        vec![input.devices[index].sched()],
        input.dt_hours,
        input.problem,
    )?;
    solve_single_device(&p, &input.solver)
}

/// Dispatches `order` one device at a time against `(r_p, r_q)`, adding each
/// schedule to the residual before the next device.
fn sequential(
    input: &DispatchInput<'_>,
    order: &[usize],
    r_p: &mut [f64],
    r_q: &mut [f64],
    out: &mut FeederOutcome,
) -> Result<(), SolverError> {
    for &i in order {
        let s = single(input, i, r_p, r_q)?;
        let (p, q) = profile(&input.devices[i], &s.devices[0].u);
        add(r_p, &p);
        add(r_q, &q);
        out.order.push(input.devices[i].id);
        out.absorb(&[i], s);
    }
    Ok(())
}

fn feeder_devices(input: &DispatchInput<'_>, feeder: u64) -> Vec<usize> {
    (0..input.devices.len()).filter(|&i| input.feeder_of(&input.devices[i]) == feeder).collect()
}

fn feeder_buses(input: &DispatchInput<'_>, feeder: u64) -> Vec<u64> {
    input.topology.feeder(feeder).expect("known feeder").order.clone()
}

fn optimal_grid_feeder(input: &DispatchInput<'_>, feeder: u64) -> Result<FeederOutcome, Error> {
    let mut out = FeederOutcome::default();
    let idx = feeder_devices(input, feeder);
    if idx.is_empty() {
        return Ok(out);
    }
    let (r_p, r_q) = input.sum_buses(feeder_buses(input, feeder).iter());
    let devices = idx.iter().map(|&i| input.devices[i].sched()).collect();
    let p = ScheduleProblem::new(r_p, r_q, devices, input.dt_hours, input.problem)?;
    out.absorb(&idx, solve_multi_device(&p, &input.solver)?);
    Ok(out)
}

fn heuristic_grid_feeder(input: &DispatchInput<'_>, feeder: u64) -> Result<FeederOutcome, Error> {
    let mut out = FeederOutcome::default();
    let (mut r_p, mut r_q) = input.sum_buses(feeder_buses(input, feeder).iter());
    let order = input.ordered(feeder_devices(input, feeder));
    sequential(input, &order, &mut r_p, &mut r_q, &mut out)?;
    Ok(out)
}

fn optimal_line_feeder(input: &DispatchInput<'_>, feeder: u64) -> Result<FeederOutcome, Error> {
    let mut out = FeederOutcome::default();
    let idx = feeder_devices(input, feeder);
    if idx.is_empty() {
        return Ok(out);
    }
    let topo = input.topology;
    let local: BTreeMap<usize, usize> = idx.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let members_at = |buses: &BTreeSet<u64>| -> Vec<usize> {
        idx.iter().filter(|&&i| buses.contains(&input.devices[i].bus)).map(|i| local[i]).collect()
    };
    let all: BTreeSet<u64> = feeder_buses(input, feeder).into_iter().collect();
    let (r_p, r_q) = input.sum_buses(all.iter());
    let mut channels = vec![Channel { id: feeder, r_act: r_p, r_react: r_q, members: members_at(&all) }];
    for l in topo.lines.iter().filter(|l| topo.bus(l.from).is_some_and(|b| b.feeder == feeder)) {
        let down = topo.downstream_buses(l.id)?;
        let (r_p, r_q) = input.sum_buses(down.iter());
        channels.push(Channel { id: l.id, r_act: r_p, r_react: r_q, members: members_at(&down) });
    }
    let devices = idx.iter().map(|&i| input.devices[i].sched()).collect();
    let p = ScheduleProblem::with_channels(input.horizon(), channels, devices, input.dt_hours, input.problem)?;
    out.absorb(&idx, solve_multi_device(&p, &input.solver)?);
    Ok(out)
}

fn heuristic_line_feeder(input: &DispatchInput<'_>, feeder: u64) -> Result<FeederOutcome, Error> {
    let topo = input.topology;
    let mut out = FeederOutcome::default();
    let mut buses = feeder_buses(input, feeder);
    buses.sort_by(|&a, &b| {
        topo.depth(b).cmp(&topo.depth(a)).then(topo.subtree_depth(b).cmp(&topo.subtree_depth(a))).then(a.cmp(&b))
    });
    let t = input.horizon();
    let mut acc: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let idx = feeder_devices(input, feeder);
    for &b in &buses {
        let i = input.bus_index(b);
        let (mut r_p, mut r_q) = acc.remove(&b).unwrap_or_else(|| (vec![0.0; t], vec![0.0; t]));
        add(&mut r_p, &input.residual_p[i]);
        add(&mut r_q, &input.residual_q[i]);
        let here = input.ordered(idx.iter().copied().filter(|&d| input.devices[d].bus == b).collect());
        sequential(input, &here, &mut r_p, &mut r_q, &mut out)?;
        if let Some(line) = topo.parent_line(b) {
            let parent = topo.upstream_bus(line);
            let e = acc.entry(parent).or_insert_with(|| (vec![0.0; t], vec![0.0; t]));
            add(&mut e.0, &r_p);
            add(&mut e.1, &r_q);
        }
    }
    Ok(out)
}

fn critical_line_feeder(input: &DispatchInput<'_>, feeder: u64, critical: Option<u64>) -> Result<FeederOutcome, Error> {
    let topo = input.topology;
    let below: Option<BTreeSet<u64>> = match critical {
        Some(l) if topo.line(l).is_some() && topo.feeder_of_line(l)? == feeder => Some(topo.downstream_buses(l)?),
        Some(t) if t == feeder => Some(feeder_buses(input, feeder).into_iter().collect()),
        _ => None,
    };
    let Some(below) = below else {
        return heuristic_grid_feeder(input, feeder);
    };
    let mut out = FeederOutcome::default();
    let idx = feeder_devices(input, feeder);
    let (first, rest): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| below.contains(&input.devices[i].bus));
    let (mut c_p, mut c_q) = input.sum_buses(below.iter());
    sequential(input, &input.ordered(first), &mut c_p, &mut c_q, &mut out)?;
    let (mut r_p, mut r_q) = input.sum_buses(feeder_buses(input, feeder).iter());
    for s in &out.solved {
        let (p, q) = profile(&input.devices[s.index], &s.u);
        add(&mut r_p, &p);
        add(&mut r_q, &q);
    }
    sequential(input, &input.ordered(rest), &mut r_p, &mut r_q, &mut out)?;
    Ok(out)
}

fn no_control_states(input: &DispatchInput<'_>) -> Vec<Solved> {
    input
        .devices
        .iter()
        .enumerate()
        .map(|(index, d)| {
            let traj = simulate_uncontrolled(&d.params, d.x0, &d.exo, input.dt_hours);
            Solved { index, u: traj.v.iter().map(|&v| u8::from(v)).collect(), states: traj.x[1..].to_vec() }
        })
        .collect()
}

/// Runs an algorithm on every feeder (in parallel) and assembles the
/// controlled residuals.
pub fn dispatch(kind: AlgorithmKind, input: &DispatchInput<'_>) -> Result<DispatchResult, Error> {
    input.validate()?;
    if let AlgorithmKind::CriticalLine { line: Some(l) } = kind {
        if input.topology.line(l).is_none() && input.topology.transformer(l).is_none() {
            return Err(TopologyError::UnknownLine(l).into());
        }
    }
    let start = Instant::now();
    let feeders: Vec<u64> = input.topology.feeders().iter().map(|f| f.transformer).collect();
    let mut solved = Vec::new();
    let mut order = Vec::new();
    let mut stats = SolverStats::default();
    if kind == AlgorithmKind::NoControl {
        solved = no_control_states(input);
    } else {
        let outcomes: Vec<Result<FeederOutcome, Error>> = feeders
            .par_iter()
            .map(|&f| match kind {
                AlgorithmKind::OptimalGrid => optimal_grid_feeder(input, f),
                AlgorithmKind::HeuristicGrid => heuristic_grid_feeder(input, f),
                AlgorithmKind::OptimalLine => optimal_line_feeder(input, f),
                AlgorithmKind::HeuristicLine => heuristic_line_feeder(input, f),
                AlgorithmKind::CriticalLine { line } => critical_line_feeder(input, f, line),
                AlgorithmKind::NoControl => unreachable!(),
            })
            .collect();
        for o in outcomes {
            let o = o?;
            stats.absorb(&o.stats);
            order.extend(o.order);
            solved.extend(o.solved);
        }
    }
    let solve_seconds = start.elapsed().as_secs_f64();
    solved.sort_by_key(|s| s.index);

    let t = input.horizon();
    let mut bus_p = input.residual_p.to_vec();
    let mut bus_q = input.residual_q.to_vec();
    let mut comfort = ComfortSummary::default();
    let mut devices = Vec::with_capacity(solved.len());
    for s in solved {
        let d = &input.devices[s.index];
        let (p, q) = profile(d, &s.u);
        let b = input.bus_index(d.bus);
        add(&mut bus_p[b], &p);
        add(&mut bus_q[b], &q);
        let band = d.params.comfort_band();
        for &x in &s.states {
            let v = band.violation(x);
            if v > 1e-9 {
                comfort.violating_steps += 1;
                comfort.max_violation = comfort.max_violation.max(v);
            }
        }
        devices.push(DeviceDispatch { device_id: d.id, bus: d.bus, u: s.u, p_kw: p, q_kvar: q, states: s.states });
    }
    let mut feeder_p = BTreeMap::new();
    let mut feeder_q = BTreeMap::new();
    for &f in &feeders {
        let (mut p, mut q) = (vec![0.0; t], vec![0.0; t]);
        for &b in &feeder_buses(input, f) {
            let i = input.bus_index(b);
            add(&mut p, &bus_p[i]);
            add(&mut q, &bus_q[i]);
        }
        feeder_p.insert(f, p);
        feeder_q.insert(f, q);
    }
    comfort.total_slack = total_slack(&devices, input);
    Ok(DispatchResult {
        algorithm: kind,
        devices,
        dispatch_order: order,
        bus_p,
        bus_q,
        feeder_p,
        feeder_q,
        comfort,
        stats,
        solve_seconds,
    })
}

/// Weighted comfort slack of the final schedules under the problem weights.
fn total_slack(devices: &[DeviceDispatch], input: &DispatchInput<'_>) -> f64 {
    let by_id: BTreeMap<u64, &PlacedDevice> = input.devices.iter().map(|d| (d.id, d)).collect();
    devices
        .iter()
        .map(|dd| {
            let d = by_id[&dd.device_id];
            let t = dd.u.len();
            let p = ScheduleProblem {
                horizon: t,
                dt_hours: input.dt_hours,
                devices: vec![d.sched()],
                channels: Vec::new(),
                config: input.problem,
            };
            let u: Vec<f64> = dd.u.iter().map(|&b| f64::from(b)).collect();
            p.evaluate(&[u])
        })
        .sum()
}

pub fn optimal_grid(input: &DispatchInput<'_>) -> Result<DispatchResult, Error> {
    dispatch(AlgorithmKind::OptimalGrid, input)
}

pub fn heuristic_grid(input: &DispatchInput<'_>) -> Result<DispatchResult, Error> {
    dispatch(AlgorithmKind::HeuristicGrid, input)
}

pub fn optimal_line(input: &DispatchInput<'_>) -> Result<DispatchResult, Error> {
    dispatch(AlgorithmKind::OptimalLine, input)
}

pub fn heuristic_line(input: &DispatchInput<'_>) -> Result<DispatchResult, Error> {
    dispatch(AlgorithmKind::HeuristicLine, input)
}

pub fn critical_line(input: &DispatchInput<'_>, line: Option<u64>) -> Result<DispatchResult, Error> {
    dispatch(AlgorithmKind::CriticalLine { line }, input)
}

pub fn no_control(input: &DispatchInput<'_>) -> Result<DispatchResult, Error> {
    dispatch(AlgorithmKind::NoControl, input)
}

/// Aggregated profile through every transformer and line: the sum of the
/// bus values on its far side.
pub fn branch_profiles(topology: &Topology, bus_values: &[Vec<f64>]) -> Result<BTreeMap<u64, Vec<f64>>, Error> {
    let t = bus_values.first().map_or(0, Vec::len);
    let sum = |buses: &mut dyn Iterator<Item = u64>| {
        let mut v = vec![0.0; t];
        for b in buses {
            add(&mut v, &bus_values[topology.bus_position(b).expect("known bus")]);
        }
        v
    };
    let mut out = BTreeMap::new();
    for f in topology.feeders() {
        out.insert(f.transformer, sum(&mut f.order.iter().copied()));
    }
    for l in &topology.lines {
        out.insert(l.id, sum(&mut topology.downstream_buses(l.id)?.into_iter()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::{DeviceKind, ExoSample};
    use crate::grid::{Bus, Line, Slack, TopologyFile, Transformer};
    use crate::scheduling::{ObjectiveKind, PowerMode, VariableMode};

    /// Transformer 7 feeding the chain 1 – 2 – 3.
    fn chain() -> Topology {
        let line = |id, from, to| Line { id, from, to, r: 0.2, x: 0.08, len_km: 0.1, imax_a: 200.0, bsh: 0.0 };
        Topology::build(TopologyFile {
            buses: (1..=3).map(|id| Bus { id, feeder: 7, kv: 0.4 }).collect(),
            lines: vec![line(12, 1, 2), line(23, 2, 3)],
            transformers: vec![Transformer {
                id: 7,
                hv_kv: 20.0,
                lv_kv: 0.4,
                s_mva: 0.4,
                uk_pct: 4.0,
                ur_pct: 1.0,
                tap: 1.0,
                phase_deg: 0.0,
                lv_bus: Some(1),
            }],
            slack: Slack { bus: 0, kv: 20.0 },
        })
        .unwrap()
    }

    /// One unit of energy to place: on exactly once within the horizon.
    fn unit(id: u64, bus: u64, t: usize) -> PlacedDevice {
        let mut params = DeviceKind::StorageWaterBoiler.nominal::<f64>();
        params.p_rated = 1.0;
        params.load_factor = 1.0;
        params.q_rated = 0.0;
        params.c_inp = 1.0;
        params.c_use = 0.0;
        params.c_los = 0.0;
        params.t_set = 1.0;
        params.t_db = 1.0;
        PlacedDevice { id, bus, params, x0: 0.0, exo: ExogenousSeries::constant(t, ExoSample::default()) }
    }

    fn config(variable_mode: VariableMode) -> ProblemConfig {
        ProblemConfig {
            objective: ObjectiveKind::SumNormQuadratic,
            power_mode: PowerMode::Active,
            variable_mode,
            ..Default::default()
        }
    }

    fn input<'a>(
        topo: &'a Topology,
        devices: &'a [PlacedDevice],
        p: &'a [Vec<f64>],
        q: &'a [Vec<f64>],
        mode: VariableMode,
    ) -> DispatchInput<'a> {
        DispatchInput {
            topology: topo,
            dt_hours: 0.25,
            devices,
            residual_p: p,
            residual_q: q,
            problem: config(mode),
            solver: SolverConfig::default(),
            order: DeviceOrder::Flexibility,
        }
    }

    fn toy_devices() -> Vec<PlacedDevice> {
        let mut v: Vec<PlacedDevice> = (0..5).map(|k| unit(100 + k, 3, 3)).collect();
        v.extend((0..3).map(|k| unit(200 + k, 2, 3)));
        v
    }

    fn toy_residual() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (vec![vec![0.0, -8.0, 3.0], vec![0.0, -4.0, 3.0], vec![-8.0, 2.0, 1.0]], vec![vec![0.0; 3]; 3])
    }

    fn peak(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    #[test]
    fn chain_example_optimal_grid_keeps_exchange_at_seven() {
        let topo = chain();
        let devs = toy_devices();
        let (p, q) = toy_residual();
        let r = optimal_grid(&input(&topo, &devs, &p, &q, VariableMode::Binary)).unwrap();
        assert_eq!(r.feeder_p[&7], vec![-5.0, -5.0, 7.0]);
        assert_eq!(peak(&r.feeder_p[&7]), 7.0);
        assert_eq!(r.comfort.violating_steps, 0);
    }

    #[test]
    fn chain_example_heuristic_line_sweep() {
        let topo = chain();
        let devs = toy_devices();
        let (p, q) = toy_residual();
        let r = heuristic_line(&input(&topo, &devs, &p, &q, VariableMode::Binary)).unwrap();
        let flows = branch_profiles(&topo, &r.bus_p).unwrap();
        assert_eq!(flows[&23], vec![-3.0, 2.0, 1.0]);
        assert_eq!(flows[&12], vec![-1.0, -1.0, 4.0]);
        assert_eq!(flows[&7], vec![-1.0, -9.0, 7.0]);
        let base = branch_profiles(&topo, &p).unwrap();
        let line_peaks = |f: &BTreeMap<u64, Vec<f64>>| peak(&f[&12]) + peak(&f[&23]);
        assert!(line_peaks(&flows) <= line_peaks(&base));
        let og = optimal_grid(&input(&topo, &devs, &p, &q, VariableMode::Binary)).unwrap();
        assert!(peak(&flows[&7]) >= peak(&og.feeder_p[&7]));
    }

    #[test]
    fn zero_devices_leave_residual() {
        let topo = chain();
        let (p, q) = toy_residual();
        for kind in [
            AlgorithmKind::OptimalGrid,
            AlgorithmKind::HeuristicGrid,
            AlgorithmKind::HeuristicLine,
            AlgorithmKind::OptimalLine,
        ] {
            let r = dispatch(kind, &input(&topo, &[], &p, &q, VariableMode::RelaxedRounded)).unwrap();
            assert_eq!(r.bus_p, p);
            assert!(r.devices.is_empty());
        }
    }

    #[test]
    fn one_device_grid_algorithms_agree() {
        let topo = chain();
        let devs = vec![unit(1, 3, 3)];
        let (p, q) = toy_residual();
        let inp = input(&topo, &devs, &p, &q, VariableMode::RelaxedRounded);
        let a = optimal_grid(&inp).unwrap();
        let b = heuristic_grid(&inp).unwrap();
        assert_eq!(a.devices, b.devices);
        assert_eq!(a.bus_p, b.bus_p);
    }

    #[test]
    fn critical_line_fallbacks_match_heuristic_grid() {
        let topo = chain();
        let devs = toy_devices();
        let (p, q) = toy_residual();
        let inp = input(&topo, &devs, &p, &q, VariableMode::Binary);
        let hg = heuristic_grid(&inp).unwrap();
        for line in [None, Some(7)] {
            let c = critical_line(&inp, line).unwrap();
            assert_eq!(serde_json::to_string(&c.devices).unwrap(), serde_json::to_string(&hg.devices).unwrap());
            assert_eq!(c.dispatch_order, hg.dispatch_order);
        }
        assert!(matches!(critical_line(&inp, Some(99)), Err(Error::Topology(TopologyError::UnknownLine(99)))));
    }

    #[test]
    fn critical_devices_dispatched_first() {
        let topo = chain();
        let devs = toy_devices();
        let (p, q) = toy_residual();
        let inp = input(&topo, &devs, &p, &q, VariableMode::Binary);
        let c = critical_line(&inp, Some(23)).unwrap();
        assert_eq!(&c.dispatch_order[..5], &[100, 101, 102, 103, 104]);
        let flows = branch_profiles(&topo, &c.bus_p).unwrap();
        assert_eq!(flows[&23], vec![-3.0, 2.0, 1.0]);
    }

    #[test]
    fn residual_conservation() {
        let topo = chain();
        let devs = toy_devices();
        let (p, q) = toy_residual();
        let inp = input(&topo, &devs, &p, &q, VariableMode::RelaxedRounded);
        for kind in [
            AlgorithmKind::NoControl,
            AlgorithmKind::OptimalGrid,
            AlgorithmKind::HeuristicGrid,
            AlgorithmKind::OptimalLine,
            AlgorithmKind::HeuristicLine,
            AlgorithmKind::CriticalLine { line: Some(12) },
        ] {
            let r = dispatch(kind, &inp).unwrap();
            let before: f64 = p.iter().flatten().sum();
            let after: f64 = r.bus_p.iter().flatten().sum();
            let dev: f64 = r.devices.iter().flat_map(|d| &d.p_kw).sum();
            assert!((after - before - dev).abs() < 1e-9, "{kind:?}");
            assert!((r.feeder_p[&7].iter().sum::<f64>() - after).abs() < 1e-9);
        }
    }

    fn line_objective(topo: &Topology, bus_p: &[Vec<f64>]) -> f64 {
        branch_profiles(topo, bus_p).unwrap().values().flatten().map(|x| x * x).sum()
    }

    #[test]
    fn optimal_line_matches_enumeration() {
        let topo = chain();
        let mut d = unit(1, 3, 4);
        d.params.p_rated = 2.0;
        d.params.t_set = 3.0;
        d.params.t_db = 3.0;
        d.x0 = 1.0;
        let devs = vec![d];
        let p = vec![vec![1.0, -2.0, 0.5, -1.0], vec![-1.0, 1.0, -0.5, 0.0], vec![0.5, -3.0, 1.0, -2.0]];
        let q = vec![vec![0.0; 4]; 3];
        let r = optimal_line(&input(&topo, &devs, &p, &q, VariableMode::Binary)).unwrap();
        let mut best = f64::INFINITY;
        for mask in 0..16u32 {
            let u: Vec<f64> = (0..4).map(|t| f64::from((mask >> (3 - t)) & 1)).collect();
            let mut x = 1.0;
            let mut ok = true;
            for t in 0..4 {
                x += 2.0 * u[t];
                let lo = if t == 3 { 1.5 } else { 0.0 };
                ok &= x >= lo && x <= 3.0;
            }
            if !ok {
                continue;
            }
            let mut bp = p.clone();
            for t in 0..4 {
                bp[2][t] += 2.0 * u[t];
            }
            best = best.min(line_objective(&topo, &bp));
        }
        assert!((line_objective(&topo, &r.bus_p) - best).abs() < 1e-9);
        let hl = heuristic_line(&input(&topo, &devs, &p, &q, VariableMode::Binary)).unwrap();
        assert!(line_objective(&topo, &r.bus_p) <= line_objective(&topo, &hl.bus_p) + 1e-9);
    }

    #[test]
    fn single_bus_line_equals_grid() {
        let topo = Topology::build(TopologyFile {
            buses: vec![Bus { id: 1, feeder: 7, kv: 0.4 }],
            lines: vec![],
            transformers: chain().transformers.clone(),
            slack: Slack { bus: 0, kv: 20.0 },
        })
        .unwrap();
        let devs = vec![unit(1, 1, 3), unit(2, 1, 3)];
        let p = vec![vec![-2.0, 1.0, 0.0]];
        let q = vec![vec![0.0; 3]];
        let inp = input(&topo, &devs, &p, &q, VariableMode::Binary);
        assert_eq!(optimal_line(&inp).unwrap().devices, optimal_grid(&inp).unwrap().devices);
        assert_eq!(heuristic_line(&inp).unwrap().devices, heuristic_grid(&inp).unwrap().devices);
    }

    #[test]
    fn joint_no_worse_than_sequential_on_toy() {
        let topo = chain();
        let devs = vec![unit(1, 2, 3), unit(2, 3, 3)];
        let p = vec![vec![0.0; 3], vec![-1.0, 0.5, 0.0], vec![-0.5, -0.5, 1.0]];
        let q = vec![vec![0.0; 3]; 3];
        let inp = input(&topo, &devs, &p, &q, VariableMode::Binary);
        let og = optimal_grid(&inp).unwrap();
        let hg = heuristic_grid(&inp).unwrap();
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        assert!(sq(&og.feeder_p[&7]) <= sq(&hg.feeder_p[&7]) + 1e-9);
    }

    #[test]
    fn flexibility_order() {
        let topo = chain();
        let mut devs = vec![unit(5, 2, 3), unit(3, 2, 3), unit(9, 2, 3)];
        devs[2].params.p_rated = 2.0;
        let (p, q) = toy_residual();
        let r = heuristic_grid(&input(&topo, &devs, &p, &q, VariableMode::Binary)).unwrap();
        assert_eq!(r.dispatch_order, vec![9, 3, 5]);
    }
}
