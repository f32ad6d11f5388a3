//! Instance generators and independent oracles shared by the integration and
//! acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use num_complex::Complex;
use rand::Rng;

use flexgrid::devices::{
    randomize_params, step_state, step_terms, DeviceKind, DeviceParams, DeviceState, ExogenousSeries,
};
use flexgrid::grid::{Bus, Line, Slack, Topology, TopologyFile, Transformer};
use flexgrid::powerflow::{BusLoad, PowerFlowSolution};
use flexgrid::scheduling::{
    ControlMode, ObjectiveKind, PowerMode, ProblemConfig, SchedDevice, ScheduleProblem, VariableMode,
};

pub fn random_exo(rng: &mut impl Rng, len: usize) -> ExogenousSeries<f64> {
    ExogenousSeries {
        tem: (0..len).map(|_| rng.random_range(-5.0..30.0)).collect(),
        sol: (0..len).map(|_| rng.random_range(0.0..600.0)).collect(),
        wat: (0..len).map(|_| rng.random_range(0.0..10.0)).collect(),
        occ: (0..len).map(|_| rng.random_range(0.0..=1.0)).collect(),
    }
}

pub fn random_params(rng: &mut impl Rng, kind: DeviceKind) -> DeviceParams<f64> {
    randomize_params(&kind.nominal::<f64>(), rng.next_u64())
}

/// States `x[1..=T]` by stepping the storage recursion one step at a time.
pub fn iterate_states(
    params: &DeviceParams<f64>,
    x0: f64,
    exo: &ExogenousSeries<f64>,
    u: &[bool],
    dt: f64,
) -> Vec<f64> {
    let mut state = DeviceState { x: x0, v: true };
    u.iter()
        .enumerate()
        .map(|(t, &on)| {
            let terms = step_terms(params, &state, exo.at(t), on, true, dt);
            state = step_state(&state, &terms);
            state.x
        })
        .collect()
}

/// A scheduling instance with `n` devices over `t` steps.
pub fn random_problem(
    rng: &mut impl Rng,
    n: usize,
    t: usize,
    objective: ObjectiveKind,
    power_mode: PowerMode,
) -> ScheduleProblem {
    let devices: Vec<SchedDevice> = (0..n)
        .map(|i| {
            let kind = DeviceKind::ALL[rng.random_range(0..DeviceKind::ALL.len())];
            let mut params = random_params(rng, kind);
            // A few degrees of band keep the comfort terms active on short horizons.
            params.t_db = rng.random_range(1.0..4.0);
            let band = params.comfort_band();
            let x0 = rng.random_range(band.t_low..=band.t_up);
            SchedDevice { id: i as u64 + 1, params, x0, exo: random_exo(rng, t) }
        })
        .collect();
    let scale: f64 = devices.iter().map(|d| d.params.p_rated).sum::<f64>().max(1.0);
    let r_act = (0..t).map(|_| rng.random_range(-1.5 * scale..1.5 * scale)).collect();
    let r_react = (0..t).map(|_| rng.random_range(-0.5 * scale..0.5 * scale)).collect();
    let w1 = [1.0, 50.0, 1e6][rng.random_range(0..3)];
    let control = if rng.random_bool(0.25) {
        ControlMode::InternalController { w1, w2: w1 * 0.1, margin: None }
    } else {
        ControlMode::FullControl { w1 }
    };
    let config = ProblemConfig {
        objective,
        power_mode,
        control,
        variable_mode: VariableMode::Binary,
        integer_slack: rng.random_bool(0.1),
        power_unit_kw: 1.0,
    };
    ScheduleProblem::new(r_act, r_react, devices, 0.25, config).expect("generated problem is valid")
}

/// Objective of a binary schedule, written out from the model definition.
pub fn oracle_objective(p: &ScheduleProblem, u: &[Vec<bool>]) -> f64 {
    let unit = p.config.power_unit_kw;
    let t_len = p.horizon;
    let mut total = 0.0;
    for c in &p.channels {
        let mut channel = |r: &[f64], power: &dyn Fn(&SchedDevice) -> f64| {
            let v: Vec<f64> = (0..t_len)
                .map(|t| {
                    let base = match p.config.objective {
                        ObjectiveKind::ApproxLinearGradient if t == 0 => 0.0,
                        ObjectiveKind::ApproxLinearGradient => r[t] - r[t - 1],
                        _ => r[t],
                    };
                    let dev: f64 = c.members.iter().filter(|&&i| u[i][t]).map(|&i| power(&p.devices[i])).sum();
                    (base + dev) / unit
                })
                .collect();
            total += match p.config.objective {
                ObjectiveKind::SumNormQuadratic => v.iter().map(|x| x * x).sum(),
                ObjectiveKind::EuclideanNorm => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
                ObjectiveKind::MaxNorm => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
                ObjectiveKind::ApproxLinearGradient => v.iter().map(|x| x.abs()).sum(),
            };
        };
        if p.config.power_mode.uses_active() {
            channel(&c.r_act, &|d| d.params.p_rated);
        }
        if p.config.power_mode.uses_reactive() {
            channel(&c.r_react, &|d| d.params.q_rated);
        }
    }
    for (d, ui) in p.devices.iter().zip(u) {
        total += oracle_slacks(p, d, ui).iter().sum::<f64>();
    }
    total
}

/// Weighted comfort slack per step of one device.
pub fn oracle_slacks(p: &ScheduleProblem, d: &SchedDevice, u: &[bool]) -> Vec<f64> {
    let states = iterate_states(&d.params, d.x0, &d.exo, u, p.dt_hours);
    let band = d.params.comfort_band();
    let cooling = d.params.kind.is_cooling();
    let (mut lo, mut hi) = (band.t_low, band.t_up);
    let (mut w_lo, mut w_hi) = (p.config.control.w1(), p.config.control.w1());
    if let ControlMode::InternalController { w2, margin, .. } = p.config.control {
        let m = margin.unwrap_or(d.params.t_db);
        if cooling {
            lo = band.t_low + m;
            w_lo = w2;
        } else {
            hi = band.t_up - m;
            w_hi = w2;
        }
    }
    let last = states.len() - 1;
    states
        .iter()
        .enumerate()
        .map(|(s, &x)| {
            let (mut l, mut h) = (lo, hi);
            if s == last {
                if cooling {
                    h = h.min(band.midpoint());
                } else {
                    l = l.max(band.midpoint());
                }
            }
            let a = (w_lo * (l - x)).max(w_hi * (x - h)).max(0.0);
            if p.config.integer_slack {
                (a - 1e-9).ceil().max(0.0)
            } else {
                a
            }
        })
        .collect()
}

pub struct Enumeration {
    pub best: f64,
    /// Every schedule within `tol` of the best, in lexicographic order.
    pub near_optimal: Vec<Vec<Vec<bool>>>,
}

/// Exhaustive search over all device-major bit strings.
pub fn enumerate(p: &ScheduleProblem, tol: f64) -> Enumeration {
    let (n, t) = (p.devices.len(), p.horizon);
    let bits = n * t;
    let decode = |mask: u64| -> Vec<Vec<bool>> {
        (0..n).map(|i| (0..t).map(|s| (mask >> (bits - 1 - (i * t + s))) & 1 == 1).collect()).collect()
    };
    let values: Vec<f64> = (0..1u64 << bits).map(|m| oracle_objective(p, &decode(m))).collect();
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    let cut = best + tol * best.abs().max(1.0);
    let near_optimal = (0..1u64 << bits).filter(|&m| values[m as usize] <= cut).map(decode).collect();
    Enumeration { best, near_optimal }
}

pub fn as_bools(u: &[u8]) -> Vec<bool> {
    u.iter().map(|&b| b == 1).collect()
}

/// A random radial grid: one to three feeders, each a random tree.
pub fn random_topology(rng: &mut impl Rng) -> Topology {
    let mut buses = Vec::new();
    let mut lines = Vec::new();
    let mut transformers = Vec::new();
    let mut next_bus = 1u64;
    for f in 0..rng.random_range(1..=3u64) {
        let trafo = 100 + f;
        let size = rng.random_range(1..=12usize);
        let ids: Vec<u64> = (0..size).map(|k| next_bus + k as u64).collect();
        next_bus += size as u64;
        for &id in &ids {
            buses.push(Bus { id, feeder: trafo, kv: 0.4 });
        }
        for k in 1..size {
            let parent = ids[rng.random_range(0..k)];
            let (from, to) = if rng.random_bool(0.8) { (parent, ids[k]) } else { (ids[k], parent) };
            lines.push(Line {
                id: 1000 + ids[k],
                from,
                to,
                r: rng.random_range(0.1..0.6),
                x: rng.random_range(0.05..0.3),
                len_km: rng.random_range(0.01..0.08),
                imax_a: rng.random_range(150.0..350.0),
                bsh: if rng.random_bool(0.3) { rng.random_range(0.0..1e-4) } else { 0.0 },
            });
        }
        transformers.push(Transformer {
            id: trafo,
            hv_kv: 20.0,
            lv_kv: 0.4,
            s_mva: rng.random_range(0.25..0.8),
            uk_pct: rng.random_range(3.5..6.0),
            ur_pct: rng.random_range(0.5..1.5),
            tap: 1.0,
            phase_deg: 0.0,
            lv_bus: Some(ids[0]),
        });
    }
    Topology::build(TopologyFile { buses, lines, transformers, slack: Slack { bus: 0, kv: 20.0 } })
        .expect("generated topology is radial")
}

pub fn random_loads(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<BusLoad<f64>> {
    (0..n)
        .map(|_| BusLoad { p: rng.random_range(-scale..scale), q: rng.random_range(-0.5 * scale..0.5 * scale) })
        .collect()
}

/// Series and shunt admittance of a line in per unit on the system base.
pub fn line_admittance(line: &Line, kv: f64, base_mva: f64) -> (Complex<f64>, f64) {
    let z_base = kv * kv / base_mva;
    let z = Complex::new(line.r, line.x) * line.len_km / z_base;
    (z.inv(), line.bsh)
}

/// Largest bus power mismatch of a solution, from an admittance matrix built
/// here: `E_k · conj(Σ_m Y_km E_m) + S_load,k` for every low-voltage bus.
pub fn kcl_residual(topology: &Topology, loads: &[BusLoad<f64>], sol: &PowerFlowSolution<f64>) -> f64 {
    let idx: BTreeMap<u64, usize> = sol.bus_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let e: Vec<Complex<f64>> = sol.buses.iter().map(|b| b.phasor()).collect();
    let mut current = vec![Complex::new(0.0, 0.0); e.len()];
    for line in &topology.lines {
        let (y, bsh) = line_admittance(line, topology.bus_kv(line.from), topology.base_mva);
        let (k, m) = (idx[&line.from], idx[&line.to]);
        let shunt = Complex::new(0.0, bsh);
        current[k] += y * (e[k] - e[m]) + shunt * e[k];
        current[m] += y * (e[m] - e[k]) + shunt * e[m];
    }
    for t in &topology.transformers {
        let (r, x) = t.impedance_pu(topology.base_mva).unwrap();
        let y = Complex::new(r, x).inv();
        let root = idx[&t.lv_bus.unwrap()];
        current[root] += y * (e[root] - Complex::new(1.0, 0.0));
    }
    let position: BTreeMap<u64, usize> = topology.buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();
    sol.bus_ids
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let l = loads[position[id]];
            (e[k] * current[k].conj() + Complex::new(l.p, l.q)).norm()
        })
        .fold(0.0, f64::max)
}

/// Buses below `line`, found by a breadth-first search over an adjacency list
/// built from the raw line list.
pub fn bfs_downstream(topology: &Topology, line: u64) -> BTreeSet<u64> {
    let mut adj: BTreeMap<u64, Vec<(u64, u64)>> = BTreeMap::new();
    for l in &topology.lines {
        adj.entry(l.from).or_default().push((l.to, l.id));
        adj.entry(l.to).or_default().push((l.from, l.id));
    }
    let l = topology.line(line).unwrap();
    let feeder = topology.bus(l.from).unwrap().feeder;
    let root = topology.transformer(feeder).unwrap().lv_bus.unwrap();
    // Distance from the root decides which end of the line is downstream.
    let mut dist = BTreeMap::from([(root, 0usize)]);
    let mut queue = VecDeque::from([root]);
    while let Some(b) = queue.pop_front() {
        for &(nb, _) in adj.get(&b).map(Vec::as_slice).unwrap_or(&[]) {
            if !dist.contains_key(&nb) {
                dist.insert(nb, dist[&b] + 1);
                queue.push_back(nb);
            }
        }
    }
    let start = if dist[&l.from] > dist[&l.to] { l.from } else { l.to };
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(b) = queue.pop_front() {
        for &(nb, id) in adj.get(&b).map(Vec::as_slice).unwrap_or(&[]) {
            if id != line && dist[&nb] > dist[&b] && seen.insert(nb) {
                queue.push_back(nb);
            }
        }
    }
    seen
}
