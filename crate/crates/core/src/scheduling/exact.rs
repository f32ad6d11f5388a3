//! Exhaustive enumeration and depth-first branch and bound over binary
//! schedules. Bits are ordered device-major (`k = i·T + t`) and both solvers
//! visit leaves in lexicographic order, so they break ties identically.

use super::model::{Model, Norm};

fn improves(obj: f64, best: f64) -> bool {
    obj < best - tol(best)
}

fn tol(best: f64) -> f64 {
    if best.is_finite() {
        1e-9 * best.abs().max(1.0)
    } else {
        0.0
    }
}

fn unflatten(model: &Model, bits: &[i8]) -> Vec<Vec<u8>> {
    bits.chunks(model.t).map(|c| c.iter().map(|&b| b as u8).collect()).collect()
}

fn as_f64(model: &Model, bits: &[i8]) -> Vec<Vec<f64>> {
    bits.chunks(model.t).map(|c| c.iter().map(|&b| f64::from(b)).collect()).collect()
}

pub(crate) fn brute_force(model: &Model) -> (Vec<Vec<u8>>, u64) {
    let n = model.devs.len() * model.t;
    let mut best = f64::INFINITY;
    let mut best_bits = vec![0i8; n];
    let mut bits = vec![0i8; n];
    let mut count = 0u64;
    for mask in 0u64..(1u64 << n) {
        for (k, b) in bits.iter_mut().enumerate() {
            *b = ((mask >> (n - 1 - k)) & 1) as i8;
        }
        count += 1;
        let obj = model.evaluate(&as_f64(model, &bits));
        if improves(obj, best) {
            best = obj;
            best_bits.copy_from_slice(&bits);
        }
    }
    (unflatten(model, &best_bits), count)
}

struct Search<'a> {
    model: &'a Model,
    bits: Vec<i8>,
    best: f64,
    best_bits: Vec<i8>,
    nodes: u64,
}

impl Search<'_> {
    /// Lower bound over all completions of the current partial assignment
    /// (`-1` marks a free bit).
    fn lower_bound(&self) -> f64 {
        let m = self.model;
        let t_len = m.t;
        let mut lb = 0.0;
        for (i, d) in m.devs.iter().enumerate() {
            let row = &self.bits[i * t_len..(i + 1) * t_len];
            let (mut xmin, mut xmax) = (d.x0, d.x0);
            for s in 0..t_len {
                let g = d.gain[s];
                let (add_lo, add_hi) = match row[s] {
                    -1 => (g.min(0.0), g.max(0.0)),
                    b => (g * f64::from(b), g * f64::from(b)),
                };
                xmin = d.alpha * xmin + d.drift[s] + add_lo;
                xmax = d.alpha * xmax + d.drift[s] + add_hi;
                let a = (d.w_lo[s] * (d.lo[s] - xmax)).max(d.w_hi[s] * (xmin - d.hi[s])).max(0.0);
                lb += if m.integer_slack { (a - 1e-9).ceil().max(0.0) } else { a };
            }
        }
        let mut free = Vec::new();
        for c in &m.comps {
            let mut acc = 0.0f64;
            for t in 0..t_len {
                let mut v = c.offset[t];
                free.clear();
                for &(i, k) in &c.members {
                    match self.bits[i * t_len + t] {
                        -1 => free.push(k),
                        b => v += k * f64::from(b),
                    }
                }
                let min_abs = if free.len() <= 4 {
                    (0..1usize << free.len())
                        .map(|mask| {
                            let s: f64 =
                                free.iter().enumerate().filter(|(j, _)| mask >> j & 1 == 1).map(|(_, k)| k).sum();
                            (v + s).abs()
                        })
                        .fold(f64::INFINITY, f64::min)
                } else {
                    let lo = v + free.iter().map(|k| k.min(0.0)).sum::<f64>();
                    let hi = v + free.iter().map(|k| k.max(0.0)).sum::<f64>();
                    if lo > 0.0 {
                        lo
                    } else if hi < 0.0 {
                        -hi
                    } else {
                        0.0
                    }
                };
                match c.norm {
                    Norm::SumSq | Norm::L2 => acc += min_abs * min_abs,
                    Norm::Linf => acc = acc.max(min_abs),
                    Norm::L1 => acc += min_abs,
                }
            }
            lb += if c.norm == Norm::L2 { acc.sqrt() } else { acc };
        }
        lb
    }

    fn dfs(&mut self, k: usize) {
        self.nodes += 1;
        if k == self.bits.len() {
            let obj = self.model.evaluate(&as_f64(self.model, &self.bits));
            if improves(obj, self.best) {
                self.best = obj;
                self.best_bits.copy_from_slice(&self.bits);
            }
            return;
        }
        for b in [0i8, 1] {
            self.bits[k] = b;
            if self.best.is_finite() && self.lower_bound() >= self.best - tol(self.best) {
                continue;
            }
            self.dfs(k + 1);
        }
        self.bits[k] = -1;
    }
}

pub(crate) fn branch_and_bound(model: &Model) -> (Vec<Vec<u8>>, u64) {
    let n = model.devs.len() * model.t;
    let mut s = Search { model, bits: vec![-1; n], best: f64::INFINITY, best_bits: vec![0; n], nodes: 0 };
    s.dfs(0);
    (unflatten(model, &s.best_bits), s.nodes)
}
