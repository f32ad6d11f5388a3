//! Run-level grid metrics aggregated over all time steps.

use serde::{Deserialize, Serialize};

use super::{BranchKind, PowerFlowSolution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusSample {
    pub id: u64,
    pub u_mag: f64,
    pub theta_rad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchSample {
    pub id: u64,
    pub kind: BranchKind,
    /// Sending-end active power (pu); for transformers the power drawn from the slack.
    pub p_km: f64,
    pub q_km: f64,
    pub p_loss: f64,
    pub loading_pct: f64,
}

/// What the metrics need from one time step. Built either from a solution or
/// from the emitted CSV rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub buses: Vec<BusSample>,
    pub branches: Vec<BranchSample>,
    /// Gross consumption of all loads and devices (MW).
    pub consumption_p_mw: f64,
    pub consumption_q_mvar: f64,
}

impl StepSummary {
    pub fn from_solution(sol: &PowerFlowSolution<f64>, consumption_p_mw: f64, consumption_q_mvar: f64) -> Self {
        StepSummary {
            buses: sol
                .bus_ids
                .iter()
                .zip(&sol.buses)
                .map(|(&id, b)| BusSample { id, u_mag: b.u_mag, theta_rad: b.theta })
                .collect(),
            branches: sol
                .branches
                .iter()
                .map(|b| BranchSample {
                    id: b.id,
                    kind: b.kind,
                    p_km: b.flow.p_km,
                    q_km: b.flow.q_km,
                    p_loss: b.flow.p_loss,
                    loading_pct: b.loading_pct,
                })
                .collect(),
            consumption_p_mw,
            consumption_q_mvar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalLineMetrics {
    pub line: u64,
    pub loading_step_sum_pct: f64,
    pub loading_max_pct: f64,
}

/// Grid metrics of one run.
///
/// Loading sums add each element's peak loading over the horizon; the
/// `*_step_sum_pct` fields add the loading of every element at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub steps: usize,
    pub total_load_mwh: f64,
    pub total_load_mvarh: f64,
    pub residual_load_mwh: f64,
    pub residual_load_mvarh: f64,
    pub active_losses_mw: f64,
    pub voltage_deviation_sum_pct: f64,
    pub voltage_deviation_max_pct: f64,
    pub phase_angle_sum_deg: f64,
    pub line_loading_sum_pct: f64,
    pub line_loading_step_sum_pct: f64,
    pub line_loading_max_pct: f64,
    pub transformer_loading_sum_pct: f64,
    pub transformer_loading_step_sum_pct: f64,
    pub transformer_loading_max_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub critical_line: Option<CriticalLineMetrics>,
}

#[derive(Default)]
struct LoadingAcc {
    sum: f64,
    max: f64,
    peaks: std::collections::BTreeMap<u64, f64>,
}

impl LoadingAcc {
    fn add(&mut self, id: u64, pct: f64) {
        self.sum += pct;
        self.max = self.max.max(pct);
        let peak = self.peaks.entry(id).or_insert(0.0);
        *peak = peak.max(pct);
    }

    fn peak_sum(&self) -> f64 {
        self.peaks.values().sum()
    }
}

pub fn metrics(steps: &[StepSummary], dt_hours: f64, base_mva: f64, critical_line: Option<u64>) -> MetricsReport {
    let mut r = MetricsReport {
        steps: steps.len(),
        total_load_mwh: 0.0,
        total_load_mvarh: 0.0,
        residual_load_mwh: 0.0,
        residual_load_mvarh: 0.0,
        active_losses_mw: 0.0,
        voltage_deviation_sum_pct: 0.0,
        voltage_deviation_max_pct: 0.0,
        phase_angle_sum_deg: 0.0,
        line_loading_sum_pct: 0.0,
        line_loading_step_sum_pct: 0.0,
        line_loading_max_pct: 0.0,
        transformer_loading_sum_pct: 0.0,
        transformer_loading_step_sum_pct: 0.0,
        transformer_loading_max_pct: 0.0,
        critical_line: None,
    };
    let mut lines = LoadingAcc::default();
    let mut trafos = LoadingAcc::default();
    let mut critical =
        critical_line.map(|id| CriticalLineMetrics { line: id, loading_step_sum_pct: 0.0, loading_max_pct: 0.0 });
    let (mut exchange_p, mut exchange_q) = (0.0, 0.0);
    for step in steps {
        r.total_load_mwh += step.consumption_p_mw.abs() * dt_hours;
        r.total_load_mvarh += step.consumption_q_mvar.abs() * dt_hours;
        for b in &step.buses {
            let dev = (b.u_mag - 1.0).abs() * 100.0;
            r.voltage_deviation_sum_pct += dev;
            r.voltage_deviation_max_pct = r.voltage_deviation_max_pct.max(dev);
            r.phase_angle_sum_deg += b.theta_rad.to_degrees().abs();
        }
        for br in &step.branches {
            r.active_losses_mw += br.p_loss * base_mva;
            match br.kind {
                BranchKind::Line => {
                    lines.add(br.id, br.loading_pct);
                    if let Some(c) = critical.as_mut().filter(|c| c.line == br.id) {
                        c.loading_step_sum_pct += br.loading_pct;
                        c.loading_max_pct = c.loading_max_pct.max(br.loading_pct);
                    }
                }
                BranchKind::Transformer => {
                    trafos.add(br.id, br.loading_pct);
                    exchange_p += br.p_km * base_mva * dt_hours;
                    exchange_q += br.q_km * base_mva * dt_hours;
                }
            }
        }
    }
    r.residual_load_mwh = exchange_p.abs();
    r.residual_load_mvarh = exchange_q.abs();
    r.line_loading_step_sum_pct = lines.sum;
    r.line_loading_max_pct = lines.max;
    r.line_loading_sum_pct = lines.peak_sum();
    r.transformer_loading_step_sum_pct = trafos.sum;
    r.transformer_loading_max_pct = trafos.max;
    r.transformer_loading_sum_pct = trafos.peak_sum();
    r.critical_line = critical;
    r
}
