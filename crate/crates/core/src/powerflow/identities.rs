//! Branch flow and loss expressions for lines, in-phase and phase-shifting
//! transformers, written in polar voltage coordinates.

use num_complex::Complex;

use crate::error::PowerFlowError;
use crate::num::Scalar;

/// Flows in both directions of a branch plus its losses (per unit).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowPair<T = f64> {
    pub p_km: T,
    pub q_km: T,
    pub p_mk: T,
    pub q_mk: T,
    pub p_loss: T,
    pub q_loss: T,
}

/// Sending-end flow of a pi-model line:
/// `P = U_k² g − U_k U_m (g cos θ + b sin θ)`,
/// `Q = −U_k² (b + b_sh) + U_k U_m (b cos θ − g sin θ)`.
pub fn line_flow<T: Scalar>(g: T, b: T, b_sh: T, u_k: T, u_m: T, theta_km: T) -> (T, T) {
    let (s, c) = theta_km.sin_cos();
    let ukm = u_k * u_m;
    let p = u_k * u_k * g - ukm * g * c - ukm * b * s;
    let q = -u_k * u_k * (b + b_sh) + ukm * b * c - ukm * g * s;
    (p, q)
}

/// Tolerance for comparing two loss expressions of magnitude `scale`.
fn identity_tol<T: Scalar>(scale: T) -> T {
    let floor = T::of(1e-10).max(T::epsilon() * T::of(1e4));
    floor * scale.abs().max(T::one())
}

fn check<T: Scalar>(what: &str, from_flows: T, closed: T) -> Result<(), PowerFlowError> {
    if (from_flows - closed).abs() > identity_tol(closed) {
        return Err(PowerFlowError::Consistency {
            branch: 0,
            detail: format!("{what}: flow sum {from_flows} vs closed form {closed}"),
        });
    }
    Ok(())
}

/// Line losses from the voltage drop, cross-checked against the flow sums:
/// `p_loss = g |E_k − E_m|²`, `q_loss = −b_sh (U_k² + U_m²) − b |E_k − E_m|²`.
pub fn line_losses<T: Scalar>(
    flows: (T, T, T, T),
    e_k: Complex<T>,
    e_m: Complex<T>,
    g: T,
    b: T,
    b_sh: T,
) -> Result<(T, T), PowerFlowError> {
    let (p_km, q_km, p_mk, q_mk) = flows;
    let drop = (e_k - e_m).norm_sqr();
    let p_loss = g * drop;
    let q_loss = -b_sh * (e_k.norm_sqr() + e_m.norm_sqr()) - b * drop;
    check("line active loss", p_km + p_mk, p_loss)?;
    check("line reactive loss", q_km + q_mk, q_loss)?;
    Ok((p_loss, q_loss))
}

/// Both flow directions and losses of a line.
pub fn line_flow_pair<T: Scalar>(
    g: T,
    b: T,
    b_sh: T,
    e_k: Complex<T>,
    e_m: Complex<T>,
) -> Result<FlowPair<T>, PowerFlowError> {
    let (u_k, th_k) = e_k.to_polar();
    let (u_m, th_m) = e_m.to_polar();
    let (p_km, q_km) = line_flow(g, b, b_sh, u_k, u_m, th_k - th_m);
    let (p_mk, q_mk) = line_flow(g, b, b_sh, u_m, u_k, th_m - th_k);
    let (p_loss, q_loss) = line_losses((p_km, q_km, p_mk, q_mk), e_k, e_m, g, b, b_sh)?;
    Ok(FlowPair { p_km, q_km, p_mk, q_mk, p_loss, q_loss })
}

/// In-phase transformer with the ideal ratio `a` on the `k` side.
///
/// The reactive loss is returned as `−b |a E_k − E_m|²`, which is what the sum
/// `Q_km + Q_mk` evaluates to.
pub fn inphase_transformer_flow<T: Scalar>(a_km: T, g: T, b: T, u_k: T, u_m: T, theta_km: T) -> FlowPair<T> {
    let (s, c) = theta_km.sin_cos();
    let auk = a_km * u_k;
    let akm = auk * u_m;
    let p_km = auk * auk * g - akm * g * c - akm * b * s;
    let q_km = -auk * auk * b + akm * b * c - akm * g * s;
    // θ_mk = −θ_km
    let p_mk = u_m * u_m * g - akm * g * c + akm * b * s;
    let q_mk = -u_m * u_m * b + akm * b * c + akm * g * s;
    let drop = auk * auk + u_m * u_m - T::of(2.0) * akm * c;
    FlowPair { p_km, q_km, p_mk, q_mk, p_loss: g * drop, q_loss: -b * drop }
}

/// Phase-shifting transformer with complex ratio `t = a e^{jφ}`.
pub fn phase_shift_transformer_flow<T: Scalar>(
    a_km: T,
    phi_km: T,
    g: T,
    b: T,
    u_k: T,
    u_m: T,
    theta_km: T,
) -> FlowPair<T> {
    let shifted = theta_km + phi_km;
    let (s, c) = shifted.sin_cos();
    let auk = a_km * u_k;
    let akm = auk * u_m;
    let p_km = auk * auk * g - akm * g * c - akm * b * s;
    let q_km = -auk * auk * b + akm * b * c - akm * g * s;
    // θ_mk − φ_km = −(θ_km + φ_km)
    let p_mk = u_m * u_m * g - akm * g * c + akm * b * s;
    let q_mk = -u_m * u_m * b + akm * b * c + akm * g * s;
    let t = Complex::from_polar(a_km, phi_km);
    let drop = (t * Complex::from_polar(u_k, theta_km) - Complex::new(u_m, T::zero())).norm_sqr();
    FlowPair { p_km, q_km, p_mk, q_mk, p_loss: g * drop, q_loss: -b * drop }
}

/// Verifies that a transformer flow satisfies both loss identities.
pub fn check_transformer_losses<T: Scalar>(f: &FlowPair<T>) -> Result<(), PowerFlowError> {
    check("transformer active loss", f.p_km + f.p_mk, f.p_loss)?;
    check("transformer reactive loss", f.q_km + f.q_mk, f.q_loss)
}
