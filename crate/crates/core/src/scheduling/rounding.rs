//! Rounding of relaxed schedules, comfort repair and local search.

use super::model::{Norm, SubProblem};
use crate::error::SolverError;

/// Threshold at 0.5, then flip single bits while the total distance outside
/// the comfort bounds shrinks. When no single flip helps, the best exchange of
/// an on-step with an off-step anywhere in the horizon is tried. Returns the
/// bits and the number of flips.
pub(crate) fn round_and_repair(sub: &SubProblem<'_>, u: &[f64]) -> Result<(Vec<u8>, u64), SolverError> {
    repair(sub, u.iter().map(|&x| if x >= 0.5 { 1.0 } else { 0.0 }).collect())
}

/// Greedy comfort repair of a binary schedule.
pub(crate) fn repair(sub: &SubProblem<'_>, mut bits: Vec<f64>) -> Result<(Vec<u8>, u64), SolverError> {
    let t = bits.len();
    let mut current = sub.dev.violation(&bits);
    let limit = (t * t) as u64;
    let mut flips = 0u64;
    while current > 1e-9 {
        let mut best: Option<(usize, Option<usize>, f64)> = None;
        for s in 0..t {
            bits[s] = 1.0 - bits[s];
            let v = sub.dev.violation(&bits);
            bits[s] = 1.0 - bits[s];
            if v < current - 1e-12 && best.is_none_or(|(_, _, b)| v < b) {
                best = Some((s, None, v));
            }
        }
        if best.is_none() {
            // Exchanges entirely after the first violated step cannot reach it.
            let states = sub.dev.states(&bits);
            let first = (0..t).find(|&s| states[s] < sub.dev.lo[s] || states[s] > sub.dev.hi[s]).unwrap_or(t - 1);
            for a in 0..=first {
                for b in a + 1..t {
                    if bits[a] == bits[b] {
                        continue;
                    }
                    bits.swap(a, b);
                    let v = sub.dev.violation(&bits);
                    bits.swap(a, b);
                    if v < current - 1e-12 && best.is_none_or(|(_, _, c)| v < c) {
                        best = Some((a, Some(b), v));
                    }
                }
            }
        }
        let Some((a, b, v)) = best else { break };
        flips += 1 + u64::from(b.is_some());
        if flips > limit {
            return Err(SolverError::RepairLimit { limit: limit as usize });
        }
        bits[a] = 1.0 - bits[a];
        if let Some(b) = b {
            bits[b] = 1.0 - bits[b];
        }
        current = v;
    }
    Ok((bits.iter().map(|&b| b as u8).collect(), flips))
}

/// Rounds step by step so the binary state follows the relaxed trajectory,
/// preferring in-band states.
pub(crate) fn track_round(sub: &SubProblem<'_>, u: &[f64]) -> Vec<f64> {
    let d = sub.dev;
    let target = d.states(u);
    let mut x = d.x0;
    (0..u.len())
        .map(|s| {
            let off = d.alpha * x + d.drift[s];
            let on = off + d.gain[s];
            let cost = |y: f64| (d.lo[s] - y).max(y - d.hi[s]).max(0.0) * 1e6 + (y - target[s]).abs();
            let bit = if cost(on) < cost(off) { 1.0 } else { 0.0 };
            x = if bit == 1.0 { on } else { off };
            bit
        })
        .collect()
}

/// Incremental objective of one device's binary schedule.
struct Local<'a, 'b> {
    sub: &'b SubProblem<'a>,
    u: Vec<f64>,
    states: Vec<f64>,
    slack: Vec<f64>,
    /// Per component: Σv² (SumSq, L2) or Σ|v| (L1); unused for Linf.
    acc: Vec<f64>,
    /// Accumulators and state/slack tails of the last trial.
    trial_acc: Vec<f64>,
    trial_states: Vec<f64>,
    trial_slack: Vec<f64>,
}

impl<'a, 'b> Local<'a, 'b> {
    fn new(sub: &'b SubProblem<'a>, u: Vec<f64>) -> Self {
        let states = sub.dev.states(&u);
        let slack = states.iter().enumerate().map(|(s, &x)| sub.dev.slack(s, x, sub.integer_slack)).collect();
        let acc: Vec<f64> = sub
            .comps
            .iter()
            .map(|c| {
                let v = c.offset.iter().zip(&u).map(|(o, &x)| o + c.coef * x);
                match c.norm {
                    Norm::L1 => v.map(f64::abs).sum(),
                    Norm::Linf => 0.0,
                    _ => v.map(|x| x * x).sum(),
                }
            })
            .collect();
        let t = u.len();
        Local {
            sub,
            trial_acc: acc.clone(),
            u,
            states,
            slack,
            acc,
            trial_states: Vec::with_capacity(t),
            trial_slack: Vec::with_capacity(t),
        }
    }

    fn comp_value(&self, j: usize, acc: f64) -> f64 {
        match self.sub.comps[j].norm {
            Norm::SumSq | Norm::L1 => acc,
            Norm::L2 => acc.max(0.0).sqrt(),
            Norm::Linf => unreachable!(),
        }
    }

    fn linf(&self, j: usize, changes: &[usize]) -> f64 {
        let c = &self.sub.comps[j];
        (0..self.u.len())
            .map(|t| {
                let x = if changes.contains(&t) { 1.0 - self.u[t] } else { self.u[t] };
                (c.offset[t] + c.coef * x).abs()
            })
            .fold(0.0, f64::max)
    }

    fn value(&self) -> f64 {
        let ch: f64 =
            (0..self.acc.len())
                .map(|j| {
                    if self.sub.comps[j].norm == Norm::Linf {
                        self.linf(j, &[])
                    } else {
                        self.comp_value(j, self.acc[j])
                    }
                })
                .sum();
        ch + self.slack.iter().sum::<f64>()
    }

    /// Objective change from flipping the listed positions. The new
    /// accumulators and tails are kept for `commit`.
    fn trial(&mut self, changes: &[usize]) -> f64 {
        let mut delta = 0.0;
        let mut acc = std::mem::take(&mut self.trial_acc);
        acc.copy_from_slice(&self.acc);
        for (j, c) in self.sub.comps.iter().enumerate() {
            if c.norm == Norm::Linf {
                delta += self.linf(j, changes) - self.linf(j, &[]);
                continue;
            }
            for &t in changes {
                let old = c.offset[t] + c.coef * self.u[t];
                let new = c.offset[t] + c.coef * (1.0 - self.u[t]);
                acc[j] += match c.norm {
                    Norm::L1 => new.abs() - old.abs(),
                    _ => new * new - old * old,
                };
            }
            delta += self.comp_value(j, acc[j]) - self.comp_value(j, self.acc[j]);
        }
        let start = *changes.iter().min().unwrap();
        let d = self.sub.dev;
        let mut x = if start == 0 { d.x0 } else { self.states[start - 1] };
        let (mut states, mut slack) = (std::mem::take(&mut self.trial_states), std::mem::take(&mut self.trial_slack));
        states.clear();
        slack.clear();
        for s in start..self.u.len() {
            let us = if changes.contains(&s) { 1.0 - self.u[s] } else { self.u[s] };
            x = d.alpha * x + d.drift[s] + d.gain[s] * us;
            let a = d.slack(s, x, self.sub.integer_slack);
            delta += a - self.slack[s];
            states.push(x);
            slack.push(a);
        }
        (self.trial_acc, self.trial_states, self.trial_slack) = (acc, states, slack);
        delta
    }

    /// Applies the flips of the preceding `trial`.
    fn commit(&mut self, changes: &[usize]) {
        for &t in changes {
            self.u[t] = 1.0 - self.u[t];
        }
        let start = *changes.iter().min().unwrap();
        self.acc.copy_from_slice(&self.trial_acc);
        self.states[start..].copy_from_slice(&self.trial_states);
        self.slack[start..].copy_from_slice(&self.trial_slack);
    }

    fn try_move(&mut self, changes: &[usize], current: &mut f64) -> bool {
        let delta = self.trial(changes);
        if delta < -1e-12 * current.abs().max(1.0) {
            self.commit(changes);
            *current += delta;
            true
        } else {
            false
        }
    }
}

const POLISH_PASSES: usize = 20;
const SWAP_WINDOW: usize = 8;
pub(crate) const FULL_SWAP_HORIZON: usize = 24;

/// First-improvement local search with single flips and swaps of nearby
/// steps. Short horizons use every pair (double flips included) and try every
/// triple flip once the cheaper moves are exhausted. Returns the improved bits and the
/// number of moves.
pub(crate) fn polish(sub: &SubProblem<'_>, bits: &[u8]) -> (Vec<u8>, u64) {
    let t = bits.len();
    let mut local = Local::new(sub, bits.iter().map(|&b| f64::from(b)).collect());
    let mut current = local.value();
    let short = t <= FULL_SWAP_HORIZON;
    let window = if short { t } else { SWAP_WINDOW };
    let mut moves = 0u64;
    for _ in 0..POLISH_PASSES {
        let mut improved = false;
        for s in 0..t {
            if local.try_move(&[s], &mut current) {
                moves += 1;
                improved = true;
            }
        }
        for a in 0..t {
            for b in a + 1..t.min(a + window + 1) {
                if (short || local.u[a] != local.u[b]) && local.try_move(&[a, b], &mut current) {
                    moves += 1;
                    improved = true;
                }
            }
        }
        if !improved && short {
            for a in 0..t {
                for b in a + 1..t {
                    for c in b + 1..t {
                        if local.try_move(&[a, b, c], &mut current) {
                            moves += 1;
                            improved = true;
                        }
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    (local.u.iter().map(|&b| b as u8).collect(), moves)
}

/// Spreads fractional duties over coarse steps of `k` fine steps each:
/// `round(d·k)` on-steps, placed at the start of the coarse step.
pub fn distribute_coarse(duty: &[f64], k: usize) -> Vec<u8> {
    duty.iter()
        .flat_map(|&d| {
            let on = (d.clamp(0.0, 1.0) * k as f64).round() as usize;
            (0..k).map(move |j| u8::from(j < on))
        })
        .collect()
}
