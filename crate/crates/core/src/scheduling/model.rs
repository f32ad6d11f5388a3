//! Compiled form of a scheduling problem: affine device dynamics, per-step
//! bounds and objective components.

use serde::{Deserialize, Serialize};

use super::{ControlMode, ObjectiveKind, PowerMode, ScheduleProblem};
use crate::devices::affine_step;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Norm {
    SumSq,
    L2,
    Linf,
    L1,
}

impl Norm {
    pub(crate) fn of(kind: ObjectiveKind) -> Norm {
        match kind {
            ObjectiveKind::SumNormQuadratic => Norm::SumSq,
            ObjectiveKind::EuclideanNorm => Norm::L2,
            ObjectiveKind::MaxNorm => Norm::Linf,
            ObjectiveKind::ApproxLinearGradient => Norm::L1,
        }
    }

    pub(crate) fn value(self, v: impl Iterator<Item = f64>) -> f64 {
        match self {
            Norm::SumSq => v.map(|x| x * x).sum(),
            Norm::L2 => v.map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.fold(0.0, |m, x| m.max(x.abs())),
            Norm::L1 => v.map(f64::abs).sum(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DevModel {
    pub alpha: f64,
    pub x0: f64,
    pub drift: Vec<f64>,
    pub gain: Vec<f64>,
    /// States after each step with every switch off.
    pub base: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub w_lo: Vec<f64>,
    pub w_hi: Vec<f64>,
}

impl DevModel {
    pub(crate) fn states(&self, u: &[f64]) -> Vec<f64> {
        let mut x = self.x0;
        u.iter()
            .enumerate()
            .map(|(s, &us)| {
                x = self.alpha * x + self.drift[s] + self.gain[s] * us;
                x
            })
            .collect()
    }

    pub(crate) fn slack(&self, s: usize, x: f64, integer: bool) -> f64 {
        let a = (self.w_lo[s] * (self.lo[s] - x)).max(self.w_hi[s] * (x - self.hi[s])).max(0.0);
        if integer {
            (a - 1e-9).ceil().max(0.0)
        } else {
            a
        }
    }

    pub(crate) fn slack_total(&self, u: &[f64], integer: bool) -> f64 {
        self.states(u).iter().enumerate().map(|(s, &x)| self.slack(s, x, integer)).sum()
    }

    /// Unweighted distance outside the bounds, summed over steps.
    pub(crate) fn violation(&self, u: &[f64]) -> f64 {
        self.states(u).iter().enumerate().map(|(s, &x)| (self.lo[s] - x).max(x - self.hi[s]).max(0.0)).sum()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Component {
    pub norm: Norm,
    pub offset: Vec<f64>,
    /// `(device index, power coefficient)`.
    pub members: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub(crate) struct Model {
    pub t: usize,
    pub devs: Vec<DevModel>,
    pub comps: Vec<Component>,
    pub integer_slack: bool,
}

/// One device's view of the objective with every other device held fixed.
#[derive(Debug, Clone)]
pub(crate) struct SubProblem<'a> {
    pub dev: &'a DevModel,
    pub comps: Vec<SubComp>,
    pub integer_slack: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct SubComp {
    pub norm: Norm,
    pub offset: Vec<f64>,
    pub coef: f64,
}

impl SubProblem<'_> {
    pub(crate) fn channel_value(&self, u: &[f64]) -> f64 {
        self.comps.iter().map(|c| c.norm.value(c.offset.iter().zip(u).map(|(o, &x)| o + c.coef * x))).sum()
    }

    pub(crate) fn value(&self, u: &[f64]) -> f64 {
        self.channel_value(u) + self.dev.slack_total(u, self.integer_slack)
    }
}

fn differenced(r: &[f64]) -> Vec<f64> {
    (0..r.len()).map(|t| if t == 0 { 0.0 } else { r[t] - r[t - 1] }).collect()
}

impl Model {
    pub(crate) fn compile(p: &ScheduleProblem) -> Model {
        let t = p.horizon;
        let w1 = p.config.control.w1();
        let devs = p
            .devices
            .iter()
            .map(|d| {
                let mut alpha = 1.0;
                let mut drift = Vec::with_capacity(t);
                let mut gain = Vec::with_capacity(t);
                for s in 0..t {
                    let a = affine_step(&d.params, d.exo.at(s), p.dt_hours);
                    alpha = a.retain;
                    drift.push(a.drift);
                    gain.push(a.gain);
                }
                let mut base = Vec::with_capacity(t);
                let mut x = d.x0;
                for s in 0..t {
                    x = alpha * x + drift[s];
                    base.push(x);
                }
                let band = d.params.comfort_band();
                let cooling = d.params.kind.is_cooling();
                let (mut lo, mut hi) = (vec![band.t_low; t], vec![band.t_up; t]);
                let (mut w_lo, mut w_hi) = (vec![w1; t], vec![w1; t]);
                if let ControlMode::InternalController { w2, margin, .. } = p.config.control {
                    let m = margin.unwrap_or(d.params.t_db);
                    if cooling {
                        lo.iter_mut().for_each(|v| *v = band.t_low + m);
                        w_lo.iter_mut().for_each(|w| *w = w2);
                    } else {
                        hi.iter_mut().for_each(|v| *v = band.t_up - m);
                        w_hi.iter_mut().for_each(|w| *w = w2);
                    }
                }
                let mid = band.midpoint();
                if cooling {
                    hi[t - 1] = hi[t - 1].min(mid);
                } else {
                    lo[t - 1] = lo[t - 1].max(mid);
                }
                DevModel { alpha, x0: d.x0, drift, gain, base, lo, hi, w_lo, w_hi }
            })
            .collect();

        let norm = Norm::of(p.config.objective);
        let unit = p.config.power_unit_kw;
        let mut comps = Vec::new();
        for c in &p.channels {
            let mut push = |r: &[f64], coef: &dyn Fn(usize) -> f64| {
                let r: Vec<f64> = r.iter().map(|v| v / unit).collect();
                let offset = if norm == Norm::L1 { differenced(&r) } else { r };
                let members = c.members.iter().map(|&i| (i, coef(i) / unit)).collect();
                comps.push(Component { norm, offset, members });
            };
            if p.config.power_mode.uses_active() {
                push(&c.r_act, &|i| p.devices[i].params.p_rated);
            }
            if p.config.power_mode.uses_reactive() {
                push(&c.r_react, &|i| p.devices[i].params.q_rated);
            }
        }
        Model { t, devs, comps, integer_slack: p.config.integer_slack }
    }

    pub(crate) fn states(&self, i: usize, u: &[f64]) -> Vec<f64> {
        self.devs[i].states(u)
    }

    pub(crate) fn slack(&self, i: usize, s: usize, x: f64) -> f64 {
        self.devs[i].slack(s, x, self.integer_slack)
    }

    pub(crate) fn channel_value(&self, u: &[Vec<f64>]) -> f64 {
        self.comps
            .iter()
            .map(|c| {
                c.norm
                    .value((0..self.t).map(|t| c.offset[t] + c.members.iter().map(|&(i, k)| k * u[i][t]).sum::<f64>()))
            })
            .sum()
    }

    pub(crate) fn evaluate(&self, u: &[Vec<f64>]) -> f64 {
        let slack: f64 = self.devs.iter().zip(u).map(|(d, ui)| d.slack_total(ui, self.integer_slack)).sum();
        self.channel_value(u) + slack
    }

    pub(crate) fn subproblem(&self, i: usize, u: &[Vec<f64>]) -> SubProblem<'_> {
        let comps = self
            .comps
            .iter()
            .filter_map(|c| {
                let coef = c.members.iter().find(|&&(j, _)| j == i)?.1;
                let mut offset = c.offset.clone();
                for &(j, k) in &c.members {
                    if j != i {
                        for (o, &x) in offset.iter_mut().zip(&u[j]) {
                            *o += k * x;
                        }
                    }
                }
                Some(SubComp { norm: c.norm, offset, coef })
            })
            .collect();
        SubProblem { dev: &self.devs[i], comps, integer_slack: self.integer_slack }
    }

    pub(crate) fn constraints(&self, i: usize) -> ComfortConstraints {
        let d = &self.devs[i];
        ComfortConstraints {
            alpha: d.alpha,
            base: d.base.clone(),
            gain: d.gain.clone(),
            lower: d.lo.clone(),
            upper: d.hi.clone(),
            w_lower: d.w_lo.clone(),
            w_upper: d.w_hi.clone(),
        }
    }
}

/// `lower[s] − a[s]/w_lower[s] ≤ x[s+1] ≤ upper[s] + a[s]/w_upper[s]` with
/// `x[s+1] = base[s] + Σ_{n≤s} alpha^(s−n) gain[n] u[n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComfortConstraints {
    pub alpha: f64,
    pub base: Vec<f64>,
    pub gain: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub w_lower: Vec<f64>,
    pub w_upper: Vec<f64>,
}

impl ComfortConstraints {
    pub fn coefficient(&self, s: usize, n: usize) -> f64 {
        if n > s {
            0.0
        } else {
            self.alpha.powi((s - n) as i32) * self.gain[n]
        }
    }

    pub fn state(&self, s: usize, u: &[f64]) -> f64 {
        self.base[s] + (0..=s).map(|n| self.coefficient(s, n) * u[n]).sum::<f64>()
    }

    pub fn satisfied(&self, u: &[f64], slack: &[f64], tol: f64) -> bool {
        (0..self.base.len()).all(|s| {
            let x = self.state(s, u);
            x >= self.lower[s] - slack[s] / self.w_lower[s] - tol
                && x <= self.upper[s] + slack[s] / self.w_upper[s] + tol
        })
    }
}

/// Objective of one residual channel: the chosen norm of `r + Σ P_i u_i`
/// (plus the reactive analogue in `Both` mode) and the sum of slacks.
pub fn objective_value(
    kind: ObjectiveKind,
    mode: PowerMode,
    r_act: &[f64],
    r_react: &[f64],
    powers: &[(f64, f64)],
    u: &[Vec<f64>],
    slacks: &[Vec<f64>],
) -> f64 {
    let norm = Norm::of(kind);
    let term = |r: &[f64], pick: fn(&(f64, f64)) -> f64| {
        let offset = if norm == Norm::L1 { differenced(r) } else { r.to_vec() };
        norm.value((0..r.len()).map(|t| offset[t] + powers.iter().zip(u).map(|(pw, ui)| pick(pw) * ui[t]).sum::<f64>()))
    };
    let mut total = 0.0;
    if mode.uses_active() {
        total += term(r_act, |p| p.0);
    }
    if mode.uses_reactive() {
        total += term(r_react, |p| p.1);
    }
    total + slacks.iter().flatten().sum::<f64>()
}
