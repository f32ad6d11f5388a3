//! Backward/forward sweep power flow for the radial topology.

use num_complex::Complex;

use super::identities::{check_transformer_losses, line_flow_pair, phase_shift_transformer_flow};
use super::{BranchFlow, BranchKind, BusLoad, BusState, PowerFlowSolution};
use crate::error::{PowerFlowError, TopologyError};
use crate::grid::Topology;
use crate::num::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowOptions<T = f64> {
    pub max_iterations: usize,
    /// Largest voltage update (pu) accepted as converged.
    pub voltage_tol: T,
    /// Largest bus power mismatch (pu) accepted as converged.
    pub power_tol: T,
}

impl<T: Scalar> Default for PowerFlowOptions<T> {
    fn default() -> Self {
        let tol = T::of(1e-8).max(T::epsilon() * T::of(100.0));
        PowerFlowOptions { max_iterations: 100, voltage_tol: tol, power_tol: tol }
    }
}

#[derive(Debug, Clone)]
struct SweepLine<T> {
    id: u64,
    /// Index of the line in the topology.
    pos: usize,
    up: usize,
    down: usize,
    z: Complex<T>,
    g: T,
    b: T,
    b_sh: T,
    /// Current base (A) at the line's voltage level.
    i_base: T,
    imax: T,
    /// `from` in the topology is the upstream bus.
    forward: bool,
}

#[derive(Debug, Clone)]
struct SweepTrafo<T> {
    id: u64,
    root: usize,
    z: Complex<T>,
    g: T,
    b: T,
    tap: T,
    phase: T,
    s_rated_pu: T,
}

/// Precomputed sweep structure for one topology, reusable across time steps.
#[derive(Debug, Clone)]
pub struct PowerFlowModel<T = f64> {
    bus_ids: Vec<u64>,
    /// Line feeding each bus (index into `lines`), `None` for feeder roots.
    parent: Vec<Option<usize>>,
    /// Buses ordered root to leaf across all feeders.
    order: Vec<usize>,
    lines: Vec<SweepLine<T>>,
    trafos: Vec<SweepTrafo<T>>,
    /// Sum of end shunt susceptances attached to each bus.
    shunt: Vec<T>,
    base_mva: T,
}

impl<T: Scalar> PowerFlowModel<T> {
    pub fn new(topology: &Topology) -> Result<Self, TopologyError> {
        let n = topology.buses.len();
        let pos = |id: u64| topology.bus_position(id).expect("validated bus");
        let base_mva = topology.base_mva;
        let mut parent = vec![None; n];
        let mut shunt = vec![T::zero(); n];
        let mut lines = Vec::with_capacity(topology.lines.len());
        for (i, l) in topology.lines.iter().enumerate() {
            let up_id = topology.upstream_bus(l.id);
            let down_id = topology.downstream_bus(l.id);
            let kv = topology.bus_kv(up_id);
            let (r, x) = l.impedance_pu(kv, base_mva);
            let (g, b) = l.admittance_pu(kv, base_mva);
            let (up, down) = (pos(up_id), pos(down_id));
            parent[down] = Some(lines.len());
            shunt[up] += T::of(l.bsh);
            shunt[down] += T::of(l.bsh);
            lines.push(SweepLine {
                id: l.id,
                pos: i,
                up,
                down,
                z: Complex::new(T::of(r), T::of(x)),
                g: T::of(g),
                b: T::of(b),
                b_sh: T::of(l.bsh),
                i_base: T::of(base_mva * 1e3 / (3f64.sqrt() * kv)),
                imax: T::of(l.imax_a),
                forward: l.from == up_id,
            });
        }
        let mut trafos = Vec::with_capacity(topology.transformers.len());
        for t in &topology.transformers {
            let feeder = topology.feeder(t.id).expect("validated feeder");
            let (r, x) = t.impedance_pu(base_mva)?;
            let (g, b) = crate::grid::series_admittance(r, x);
            trafos.push(SweepTrafo {
                id: t.id,
                root: pos(feeder.root),
                z: Complex::new(T::of(r), T::of(x)),
                g: T::of(g),
                b: T::of(b),
                tap: T::of(t.tap),
                phase: T::of(t.phase_rad()),
                s_rated_pu: T::of(t.s_mva / base_mva),
            });
        }
        let order = topology.feeders().iter().flat_map(|f| f.order.iter().map(|&b| pos(b))).collect();
        Ok(PowerFlowModel {
            bus_ids: topology.buses.iter().map(|b| b.id).collect(),
            parent,
            order,
            lines,
            trafos,
            shunt,
            base_mva: T::of(base_mva),
        })
    }

    pub fn bus_count(&self) -> usize {
        self.bus_ids.len()
    }

    /// Solves one time step. `loads` are consumption-positive per-unit powers
    /// aligned with `topology.buses`.
    pub fn solve(
        &self,
        loads: &[BusLoad<T>],
        opts: &PowerFlowOptions<T>,
    ) -> Result<PowerFlowSolution<T>, PowerFlowError> {
        let n = self.bus_ids.len();
        if loads.len() != n {
            return Err(PowerFlowError::MissingBus(self.bus_ids.get(loads.len()).copied().unwrap_or(0)));
        }
        let slack = Complex::new(T::one(), T::zero());
        let mut e = vec![slack; n];
        for t in &self.trafos {
            e[t.root] = Complex::from_polar(t.tap, t.phase);
        }
        for &k in &self.order {
            if let Some(l) = self.parent[k] {
                e[k] = e[self.lines[l].up];
            }
        }
        let s_load: Vec<Complex<T>> = loads.iter().map(|l| Complex::new(l.p, l.q)).collect();
        let mut inj = vec![Complex::new(T::zero(), T::zero()); n];
        let mut branch = vec![Complex::new(T::zero(), T::zero()); n];
        let mut iterations = 0;
        let mut mismatch = T::infinity();
        let mut converged = false;
        while iterations < opts.max_iterations {
            iterations += 1;
            for k in 0..n {
                let shunt_i = Complex::new(T::zero(), self.shunt[k]) * e[k];
                inj[k] = (s_load[k] / e[k]).conj() + shunt_i;
            }
            // Backward: accumulate downstream current into each bus's feeding branch.
            branch.copy_from_slice(&inj);
            for &k in self.order.iter().rev() {
                if let Some(l) = self.parent[k] {
                    let up = self.lines[l].up;
                    let j = branch[k];
                    branch[up] += j;
                }
            }
            // Forward: update voltages from the slack outwards.
            let mut dv = T::zero();
            for t in &self.trafos {
                let ratio = Complex::from_polar(t.tap, t.phase);
                let v = ratio * slack - t.z * branch[t.root];
                dv = dv.max((v - e[t.root]).norm());
                e[t.root] = v;
            }
            for &k in &self.order {
                if let Some(l) = self.parent[k] {
                    let line = &self.lines[l];
                    let v = e[line.up] - line.z * branch[k];
                    dv = dv.max((v - e[k]).norm());
                    e[k] = v;
                }
            }
            mismatch = T::zero();
            for k in 0..n {
                let required = s_load[k] - Complex::new(T::zero(), self.shunt[k] * e[k].norm_sqr());
                mismatch = mismatch.max((e[k] * inj[k].conj() - required).norm());
            }
            if dv < opts.voltage_tol && mismatch < opts.power_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(PowerFlowError::Diverged { iterations, mismatch: mismatch.as_f64() });
        }
        self.assemble(e, loads, iterations, mismatch)
    }

    fn assemble(
        &self,
        e: Vec<Complex<T>>,
        loads: &[BusLoad<T>],
        iterations: usize,
        mismatch: T,
    ) -> Result<PowerFlowSolution<T>, PowerFlowError> {
        let hundred = T::of(100.0);
        let mut branches = Vec::with_capacity(self.lines.len() + self.trafos.len());
        let mut lines: Vec<&SweepLine<T>> = self.lines.iter().collect();
        lines.sort_by_key(|l| l.pos);
        for l in lines {
            let (k, m) = if l.forward { (l.up, l.down) } else { (l.down, l.up) };
            let f = line_flow_pair(l.g, l.b, l.b_sh, e[k], e[m]).map_err(|err| with_branch(err, l.id))?;
            let i_k = Complex::new(f.p_km, f.q_km).norm() / e[k].norm();
            let i_m = Complex::new(f.p_mk, f.q_mk).norm() / e[m].norm();
            let loading = i_k.max(i_m) * l.i_base / l.imax * hundred;
            branches.push(BranchFlow {
                id: l.id,
                kind: BranchKind::Line,
                from: self.bus_ids[k],
                to: self.bus_ids[m],
                flow: f,
                loading_pct: loading,
            });
        }
        let mut slack_s = Complex::new(T::zero(), T::zero());
        for t in &self.trafos {
            let (u_m, th_m) = e[t.root].to_polar();
            let f = phase_shift_transformer_flow(t.tap, t.phase, t.g, t.b, T::one(), u_m, -th_m);
            check_transformer_losses(&f).map_err(|err| with_branch(err, t.id))?;
            slack_s += Complex::new(f.p_km, f.q_km);
            let s = Complex::new(f.p_km, f.q_km).norm().max(Complex::new(f.p_mk, f.q_mk).norm());
            branches.push(BranchFlow {
                id: t.id,
                kind: BranchKind::Transformer,
                from: 0,
                to: self.bus_ids[t.root],
                flow: f,
                loading_pct: s / t.s_rated_pu * hundred,
            });
        }
        let buses = e
            .iter()
            .map(|v| {
                let (u_mag, theta) = v.to_polar();
                BusState { u_mag, theta }
            })
            .collect();
        let load_p = loads.iter().fold(T::zero(), |a, l| a + l.p);
        let loss_p = branches.iter().fold(T::zero(), |a, b| a + b.flow.p_loss);
        let balance = (slack_s.re - load_p - loss_p).abs();
        Ok(PowerFlowSolution {
            bus_ids: self.bus_ids.clone(),
            buses,
            branches,
            slack_p: slack_s.re,
            slack_q: slack_s.im,
            iterations,
            mismatch,
            balance_error: balance,
            base_mva: self.base_mva,
        })
    }
}

fn with_branch(err: PowerFlowError, id: u64) -> PowerFlowError {
    match err {
        PowerFlowError::Consistency { detail, .. } => PowerFlowError::Consistency { branch: id, detail },
        other => other,
    }
}

/// One-off solve for a single time step.
pub fn solve_power_flow<T: Scalar>(
    topology: &Topology,
    loads: &[BusLoad<T>],
    opts: &PowerFlowOptions<T>,
) -> crate::Result<PowerFlowSolution<T>> {
    let model = PowerFlowModel::new(topology)?;
    Ok(model.solve(loads, opts)?)
}
