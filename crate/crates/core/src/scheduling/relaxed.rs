//! Continuous relaxation `u ∈ [0,1]^T` solved per device by ADMM, joint
//! problems by block-coordinate descent over devices.
//!
//! A device subproblem is split into consensus blocks: one per objective
//! component (`z = u`, prox of the norm), one box block (`z = u`, clamp) and
//! one comfort block (`z = σ M u`, prox of the piecewise-linear slack), where
//! `M` maps switches to state deviations. The `u`-update solves
//! `(k I + σ² MᵀM) u = h` through a tridiagonal system of size `T`.

use super::model::{Model, Norm, SubProblem};
use super::{rounding, SolverConfig, SolverStats};
use crate::error::SolverError;

struct Comp {
    norm: Norm,
    offset: Vec<f64>,
    coef: f64,
}

/// Components of a subproblem with zero coefficients dropped and the
/// separable quadratics merged into one.
fn components(sub: &SubProblem<'_>, t: usize) -> Vec<Comp> {
    let mut out = Vec::new();
    let (mut cc, mut d) = (0.0, vec![0.0; t]);
    for c in sub.comps.iter().filter(|c| c.coef.abs() > 1e-12) {
        if c.norm == Norm::SumSq {
            cc += c.coef * c.coef;
            for (di, o) in d.iter_mut().zip(&c.offset) {
                *di += c.coef * o;
            }
        } else {
            out.push(Comp { norm: c.norm, offset: c.offset.clone(), coef: c.coef });
        }
    }
    if cc > 0.0 {
        let c = cc.sqrt();
        out.push(Comp { norm: Norm::SumSq, offset: d.iter().map(|v| v / c).collect(), coef: c });
    }
    out
}

/// `argmin_y f(y) + ‖y − a‖²/(2λ)` for the component norms.
fn prox(norm: Norm, a: &[f64], lambda: f64, out: &mut [f64]) {
    match norm {
        Norm::SumSq => {
            for (o, &x) in out.iter_mut().zip(a) {
                *o = x / (1.0 + 2.0 * lambda);
            }
        }
        Norm::L2 => {
            let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let f = if n > lambda { 1.0 - lambda / n } else { 0.0 };
            for (o, &x) in out.iter_mut().zip(a) {
                *o = x * f;
            }
        }
        Norm::L1 => {
            for (o, &x) in out.iter_mut().zip(a) {
                *o = x.signum() * (x.abs() - lambda).max(0.0);
            }
        }
        Norm::Linf => {
            let p = project_l1_ball(a, lambda);
            for ((o, &x), pi) in out.iter_mut().zip(a).zip(p) {
                *o = x - pi;
            }
        }
    }
}

fn project_l1_ball(a: &[f64], radius: f64) -> Vec<f64> {
    if a.iter().map(|x| x.abs()).sum::<f64>() <= radius {
        return a.to_vec();
    }
    let mut m: Vec<f64> = a.iter().map(|x| x.abs()).collect();
    m.sort_by(|x, y| y.total_cmp(x));
    let (mut cum, mut theta) = (0.0, 0.0);
    for (j, &mj) in m.iter().enumerate() {
        cum += mj;
        let th = (cum - radius) / (j + 1) as f64;
        if mj > th {
            theta = th;
        }
    }
    a.iter().map(|x| x.signum() * (x.abs() - theta).max(0.0)).collect()
}

/// Convex piecewise-linear function of one variable given by its kinks and
/// the slopes between them (`slopes.len() == kinks.len() + 1`).
struct Pwl {
    kinks: [f64; 2],
    slopes: [f64; 3],
    n: usize,
}

impl Pwl {
    /// `max(a(b1 − q), b(q − b2), 0)` with `a, b > 0`.
    fn slack(a: f64, b1: f64, b: f64, b2: f64) -> Pwl {
        if b1 <= b2 {
            Pwl { kinks: [b1, b2], slopes: [-a, 0.0, b], n: 2 }
        } else {
            let q = (a * b1 + b * b2) / (a + b);
            Pwl { kinks: [q, 0.0], slopes: [-a, b, 0.0], n: 1 }
        }
    }

    /// `argmin_q f(q) + ρ/2 (q − c)²`.
    fn prox(&self, c: f64, rho: f64) -> f64 {
        for j in 0..=self.n {
            let q = c - self.slopes[j] / rho;
            let lo = if j == 0 { f64::NEG_INFINITY } else { self.kinks[j - 1] };
            let hi = if j == self.n { f64::INFINITY } else { self.kinks[j] };
            if q >= lo && q <= hi {
                return q;
            }
        }
        for j in 0..self.n {
            let b = self.kinks[j];
            if b >= c - self.slopes[j + 1] / rho && b <= c - self.slopes[j] / rho {
                return b;
            }
        }
        // Floating-point edge between a piece and its kink.
        self.kinks[..self.n].iter().copied().min_by(|x, y| (x - c).abs().total_cmp(&(y - c).abs())).unwrap_or(c)
    }
}

struct Comfort {
    sigma: f64,
    alpha: f64,
    gain: Vec<f64>,
    pieces: Vec<Pwl>,
}

impl Comfort {
    fn new(sub: &SubProblem<'_>) -> Option<Comfort> {
        let d = sub.dev;
        let gmax = d.gain.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax <= 0.0 {
            return None;
        }
        let sigma = 1.0 / gmax;
        let pieces = (0..d.gain.len())
            .map(|s| {
                Pwl::slack(
                    d.w_lo[s] / sigma,
                    sigma * (d.lo[s] - d.base[s]),
                    d.w_hi[s] / sigma,
                    sigma * (d.hi[s] - d.base[s]),
                )
            })
            .collect();
        Some(Comfort { sigma, alpha: d.alpha, gain: d.gain.clone(), pieces })
    }

    /// `σ M u`.
    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let mut x = 0.0;
        for s in 0..u.len() {
            x = self.alpha * x + self.gain[s] * u[s];
            out[s] = self.sigma * x;
        }
    }

    /// `σ Mᵀ y`.
    fn apply_t(&self, y: &[f64], out: &mut [f64]) {
        let mut z = 0.0;
        for s in (0..y.len()).rev() {
            z = y[s] + self.alpha * z;
            out[s] = self.sigma * self.gain[s] * z;
        }
    }
}

/// LDLᵀ-style factors of `k BBᵀ + G̃²` for the Thomas algorithm.
struct Tridiag {
    off: f64,
    c_prime: Vec<f64>,
    denom: Vec<f64>,
}

impl Tridiag {
    fn new(k: f64, alpha: f64, g: &[f64]) -> Tridiag {
        let t = g.len();
        let off = -k * alpha;
        let mut c_prime = vec![0.0; t];
        let mut denom = vec![0.0; t];
        for s in 0..t {
            let diag = k * if s == 0 { 1.0 } else { 1.0 + alpha * alpha } + g[s] * g[s];
            let d = if s == 0 { diag } else { diag - off * c_prime[s - 1] };
            denom[s] = d;
            c_prime[s] = off / d;
        }
        Tridiag { off, c_prime, denom }
    }

    fn solve(&self, rhs: &mut [f64]) {
        let t = rhs.len();
        for s in 0..t {
            let prev = if s == 0 { 0.0 } else { rhs[s - 1] };
            rhs[s] = (rhs[s] - self.off * prev) / self.denom[s];
        }
        for s in (0..t.saturating_sub(1)).rev() {
            rhs[s] -= self.c_prime[s] * rhs[s + 1];
        }
    }
}

pub(crate) struct AdmmResult {
    pub u: Vec<f64>,
    pub iterations: u64,
    pub converged: bool,
}

/// Iterations between penalty updates.
const RHO_INTERVAL: usize = 25;

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relaxed optimum of one device subproblem, warm-started at `warm`.
pub(crate) fn solve_device(sub: &SubProblem<'_>, warm: &[f64], cfg: &SolverConfig) -> AdmmResult {
    let t = warm.len();
    let comps = components(sub, t);
    let comfort = Comfort::new(sub);
    let k = (comps.len() + 1) as f64;
    let g_scaled: Vec<f64> = match &comfort {
        Some(c) => c.gain.iter().map(|g| c.sigma * g).collect(),
        None => vec![0.0; t],
    };
    let tri = comfort.as_ref().map(|c| Tridiag::new(k, c.alpha, &g_scaled));

    let nb = comps.len() + 1;
    let mut u = warm.to_vec();
    let mut z: Vec<Vec<f64>> = vec![u.clone(); nb];
    let mut w = vec![vec![0.0; t]; nb];
    let mut zm = vec![0.0; t];
    let mut wm = vec![0.0; t];
    let mut mu = vec![0.0; t];
    if let Some(c) = &comfort {
        c.apply(&u, &mut zm);
    }
    let mut rho = {
        let s: f64 = comps.iter().map(|c| 2.0 * c.coef * c.coef).sum::<f64>() / k;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };

    let m_rows = (nb + usize::from(comfort.is_some())) * t;
    let (mut h, mut tmp, mut a, mut y) = (vec![0.0; t], vec![0.0; t], vec![0.0; t], vec![0.0; t]);
    let mut z_prev = z.clone();
    let mut zm_prev = zm.clone();
    let mut iterations = 0u64;
    let mut converged = false;
    for it in 1..=cfg.admm_max_iterations {
        iterations = it as u64;
        // u-update
        h.iter_mut().for_each(|v| *v = 0.0);
        for (zj, wj) in z.iter().zip(&w) {
            for s in 0..t {
                h[s] += zj[s] - wj[s];
            }
        }
        if let (Some(c), Some(tri)) = (&comfort, &tri) {
            for s in 0..t {
                a[s] = zm[s] - wm[s];
            }
            c.apply_t(&a, &mut tmp);
            for s in 0..t {
                h[s] += tmp[s];
            }
            for s in 0..t {
                tmp[s] = g_scaled[s] * h[s];
            }
            tri.solve(&mut tmp);
            for s in 0..t {
                u[s] = (h[s] - g_scaled[s] * tmp[s]) / k;
            }
            c.apply(&u, &mut mu);
        } else {
            for s in 0..t {
                u[s] = h[s] / k;
            }
        }

        // z-updates
        for (zp, zj) in z_prev.iter_mut().zip(&z) {
            zp.copy_from_slice(zj);
        }
        zm_prev.copy_from_slice(&zm);
        for (j, c) in comps.iter().enumerate() {
            for s in 0..t {
                a[s] = c.offset[s] + c.coef * (u[s] + w[j][s]);
            }
            prox(c.norm, &a, c.coef * c.coef / rho, &mut y);
            for s in 0..t {
                z[j][s] = (y[s] - c.offset[s]) / c.coef;
            }
        }
        let bx = nb - 1;
        for s in 0..t {
            z[bx][s] = (u[s] + w[bx][s]).clamp(0.0, 1.0);
        }
        if let Some(c) = &comfort {
            for s in 0..t {
                zm[s] = c.pieces[s].prox(mu[s] + wm[s], rho);
            }
        }

        // dual updates and residuals
        let mut r2 = 0.0;
        let mut au2 = 0.0;
        let mut z2 = 0.0;
        h.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..nb {
            for s in 0..t {
                let r = u[s] - z[j][s];
                w[j][s] += r;
                r2 += r * r;
                au2 += u[s] * u[s];
                z2 += z[j][s] * z[j][s];
                h[s] += z[j][s] - z_prev[j][s];
            }
        }
        if let Some(c) = &comfort {
            for s in 0..t {
                let r = mu[s] - zm[s];
                wm[s] += r;
                r2 += r * r;
                au2 += mu[s] * mu[s];
                z2 += zm[s] * zm[s];
                a[s] = zm[s] - zm_prev[s];
            }
            c.apply_t(&a, &mut tmp);
            for s in 0..t {
                h[s] += tmp[s];
            }
        }
        let r_norm = r2.sqrt();
        let s_norm = rho * norm2(&h);

        // ‖Aᵀw‖ for the dual tolerance
        let mut atw = vec![0.0; t];
        for wj in &w {
            for s in 0..t {
                atw[s] += wj[s];
            }
        }
        if let Some(c) = &comfort {
            c.apply_t(&wm, &mut tmp);
            for s in 0..t {
                atw[s] += tmp[s];
            }
        }
        let eps_pri = (m_rows as f64).sqrt() * cfg.admm_abs_tol + cfg.admm_rel_tol * au2.sqrt().max(z2.sqrt());
        let eps_dual = (t as f64).sqrt() * cfg.admm_abs_tol + cfg.admm_rel_tol * rho * norm2(&atw);
        if r_norm <= eps_pri && s_norm <= eps_dual {
            converged = true;
            break;
        }
        if it % RHO_INTERVAL == 0 {
            let ratio = ((r_norm / eps_pri) / (s_norm / eps_dual).max(1e-12)).sqrt();
            if !(0.2..=5.0).contains(&ratio) {
                let scale = ratio.clamp(0.01, 100.0);
                rho *= scale;
                for wj in w.iter_mut() {
                    wj.iter_mut().for_each(|v| *v /= scale);
                }
                wm.iter_mut().for_each(|v| *v /= scale);
            }
        }
    }
    AdmmResult { u: z[nb - 1].clone(), iterations, converged }
}

fn record(stats: &mut SolverStats, r: &AdmmResult, cfg: &SolverConfig) -> Result<(), SolverError> {
    stats.relaxed_solves += 1;
    stats.admm_iterations += r.iterations;
    if !r.converged {
        stats.unconverged += 1;
        if cfg.strict_convergence {
            return Err(SolverError::IterationLimit { iterations: r.iterations as usize, residual: f64::NAN });
        }
        log::debug!("relaxed device solve stopped at the iteration limit ({})", r.iterations);
    }
    Ok(())
}

/// Block-coordinate descent on the relaxation, then device-by-device
/// rounding against the already fixed devices.
pub(crate) fn solve_joint(model: &Model, cfg: &SolverConfig) -> Result<(Vec<Vec<u8>>, SolverStats), SolverError> {
    let n = model.devs.len();
    let mut stats = SolverStats::default();
    let mut u = vec![vec![0.0; model.t]; n];
    for _ in 0..cfg.bcd_max_sweeps.max(1) {
        stats.bcd_sweeps += 1;
        let (mut gain, mut scale) = (0.0f64, 1.0f64);
        for i in 0..n {
            let sub = model.subproblem(i, &u);
            let r = solve_device(&sub, &u[i], cfg);
            record(&mut stats, &r, cfg)?;
            let (old, new) = (sub.value(&u[i]), sub.value(&r.u));
            scale = scale.max(old.abs());
            if new <= old {
                gain += old - new;
                u[i] = r.u;
            }
        }
        if n == 1 || gain <= cfg.bcd_tolerance * scale {
            break;
        }
    }

    let mut bits = vec![Vec::new(); n];
    for i in 0..n {
        let sub = model.subproblem(i, &u);
        let r = if n == 1 {
            AdmmResult { u: u[i].clone(), iterations: 0, converged: true }
        } else {
            let r = solve_device(&sub, &u[i], cfg);
            record(&mut stats, &r, cfg)?;
            r
        };
        let (threshold, flips) = rounding::round_and_repair(&sub, &r.u)?;
        stats.repair_flips += flips;
        let mut candidates = vec![threshold];
        if model.t <= rounding::FULL_SWAP_HORIZON {
            let (tracked, flips) = rounding::repair(&sub, rounding::track_round(&sub, &r.u))?;
            stats.repair_flips += flips;
            candidates.push(tracked);
        }
        let mut best: Option<(f64, Vec<u8>)> = None;
        for mut b in candidates {
            if cfg.polish {
                let (p, moves) = rounding::polish(&sub, &b);
                stats.polish_moves += moves;
                b = p;
            }
            let v = sub.value(&b.iter().map(|&x| f64::from(x)).collect::<Vec<_>>());
            if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                best = Some((v, b));
            }
        }
        let (_, b) = best.expect("at least one candidate");
        u[i] = b.iter().map(|&x| f64::from(x)).collect();
        bits[i] = b;
    }
    if cfg.polish && n > 1 {
        for _ in 0..3 {
            let mut moved = false;
            for i in 0..n {
                let sub = model.subproblem(i, &u);
                let (p, moves) = rounding::polish(&sub, &bits[i]);
                if moves > 0 {
                    moved = true;
                    stats.polish_moves += moves;
                    u[i] = p.iter().map(|&x| f64::from(x)).collect();
                    bits[i] = p;
                }
            }
            if n * model.t <= JOINT_EXCHANGE_BITS {
                let moves = exchange_pass(model, &mut u);
                if moves > 0 {
                    moved = true;
                    stats.polish_moves += moves;
                    for (b, row) in bits.iter_mut().zip(&u) {
                        *b = row.iter().map(|&x| x as u8).collect();
                    }
                }
            }
            if !moved {
                break;
            }
        }
    }
    Ok((bits, stats))
}

/// Largest `devices × horizon` for which the joint polish also flips one step
/// of two devices at once.
const JOINT_EXCHANGE_BITS: usize = 512;

fn exchange_pass(model: &Model, u: &mut [Vec<f64>]) -> u64 {
    let mut current = model.evaluate(u);
    let mut moves = 0;
    for i in 0..u.len() {
        for j in i + 1..u.len() {
            for s in 0..model.t {
                u[i][s] = 1.0 - u[i][s];
                u[j][s] = 1.0 - u[j][s];
                let v = model.evaluate(u);
                if v < current - 1e-12 * current.abs().max(1.0) {
                    current = v;
                    moves += 1;
                } else {
                    u[i][s] = 1.0 - u[i][s];
                    u[j][s] = 1.0 - u[j][s];
                }
            }
        }
    }
    moves
}
