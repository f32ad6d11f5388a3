//! AC power flow on the radial grid, branch flow identities and run metrics.

pub mod identities;
pub mod metrics;
pub mod sweep;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::num::Scalar;

pub use identities::{
    check_transformer_losses, inphase_transformer_flow, line_flow, line_flow_pair, line_losses,
    phase_shift_transformer_flow, FlowPair,
};
pub use metrics::{metrics, BranchSample, BusSample, CriticalLineMetrics, MetricsReport, StepSummary};
pub use sweep::{solve_power_flow, PowerFlowModel, PowerFlowOptions};

/// Consumption-positive bus load in per unit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BusLoad<T = f64> {
    pub p: T,
    pub q: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BusState<T = f64> {
    pub u_mag: T,
    pub theta: T,
}

impl<T: Scalar> BusState<T> {
    pub fn phasor(&self) -> Complex<T> {
        Complex::from_polar(self.u_mag, self.theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Line,
    Transformer,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Line => "line",
            BranchKind::Transformer => "transformer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchFlow<T = f64> {
    pub id: u64,
    pub kind: BranchKind,
    /// `k` end; the slack bus for transformers.
    pub from: u64,
    pub to: u64,
    pub flow: FlowPair<T>,
    /// Current against `I_max` for lines, apparent power against rating for transformers.
    pub loading_pct: T,
}

/// Converged state of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution<T = f64> {
    pub bus_ids: Vec<u64>,
    pub buses: Vec<BusState<T>>,
    /// Lines in topology order, then transformers.
    pub branches: Vec<BranchFlow<T>>,
    /// Power drawn from the medium-voltage slack (pu).
    pub slack_p: T,
    pub slack_q: T,
    pub iterations: usize,
    pub mismatch: T,
    /// `|P_slack − Σ loads − Σ losses|` in pu.
    pub balance_error: T,
    pub base_mva: T,
}

impl<T: Scalar> PowerFlowSolution<T> {
    pub fn total_p_loss(&self) -> T {
        self.branches.iter().fold(T::zero(), |a, b| a + b.flow.p_loss)
    }

    pub fn total_q_loss(&self) -> T {
        self.branches.iter().fold(T::zero(), |a, b| a + b.flow.q_loss)
    }
}
