//! Flexible loads modelled as thermal storage with output, loss and input terms.
//!
//! Every device evolves as `x[t+1] = x[t] - out[t] - loss[t] + inp[t]`. The
//! storage state is a temperature in °C. Rate-type coefficients (`c_use`,
//! `c_sol`, `c_inp`) are expressed per 15-minute step and scaled by
//! `dt / 0.25 h`; `c_los` is a per-hour fraction scaled by `dt`. Hot-water
//! draws are volumes per step and are not rescaled.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::num::{clamp, Scalar};

/// Step length the rate coefficients are quoted for.
pub const REFERENCE_STEP_HOURS: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    NightStorageHeater,
    StorageWaterBoiler,
    HeatPump,
    Fridge,
    Freezer,
    AirConditioner,
}

impl DeviceKind {
    pub const ALL: [DeviceKind; 6] = [
        DeviceKind::NightStorageHeater,
        DeviceKind::StorageWaterBoiler,
        DeviceKind::HeatPump,
        DeviceKind::Fridge,
        DeviceKind::Freezer,
        DeviceKind::AirConditioner,
    ];

    /// Cooling devices pull the storage temperature down when switched on.
    pub fn is_cooling(self) -> bool {
        matches!(self, DeviceKind::Fridge | DeviceKind::Freezer | DeviceKind::AirConditioner)
    }

    pub fn name(self) -> &'static str {
        match self {
            DeviceKind::NightStorageHeater => "night_storage_heater",
            DeviceKind::StorageWaterBoiler => "storage_water_boiler",
            DeviceKind::HeatPump => "heat_pump",
            DeviceKind::Fridge => "fridge",
            DeviceKind::Freezer => "freezer",
            DeviceKind::AirConditioner => "air_conditioner",
        }
    }

    /// Nominal parameter set for this kind.
    pub fn nominal<T: Scalar>(self) -> DeviceParams<T> {
        let n = NominalParams::for_kind(self);
        let t = T::of;
        let mut p = DeviceParams {
            kind: self,
            p_rated: t(n.p),
            q_rated: T::zero(),
            load_factor: t(n.load_factor),
            t_set: t(n.t_set),
            t_db: t(n.t_db),
            t_ss: t(n.t_ss),
            t_lol: t(HEAT_PUMP_T_LOL),
            t_hol: t(HEAT_PUMP_T_HOL),
            c_use: t(n.c_use),
            c_use_water: t(n.c_use_water),
            c_sol: t(n.c_sol),
            c_los: t(n.c_los),
            c_inp: t(n.c_inp),
        };
        p.q_rated = reactive_rating(p.p_rated, p.load_factor);
        p
    }
}

/// Heat pump input reaches zero at this ambient temperature (°C).
pub const HEAT_PUMP_T_HOL: f64 = 20.0;
/// Heat pump input is at full rating at or below this ambient temperature (°C).
pub const HEAT_PUMP_T_LOL: f64 = -10.0;

/// Heater usage coefficient: a full day at -10 °C without sun drains 600 °C.
pub const HEATER_C_USE: f64 = 600.0 / (96.0 * (20.0 - (-10.0)));

struct NominalParams {
    load_factor: f64,
    p: f64,
    t_set: f64,
    t_db: f64,
    t_ss: f64,
    c_use: f64,
    c_use_water: f64,
    c_sol: f64,
    c_los: f64,
    c_inp: f64,
}

impl NominalParams {
    fn for_kind(kind: DeviceKind) -> Self {
        let base = NominalParams {
            load_factor: 1.0,
            p: 0.0,
            t_set: 0.0,
            t_db: 1.0,
            t_ss: 20.0,
            c_use: 0.0,
            c_use_water: 0.0,
            c_sol: 0.0,
            c_los: 0.0,
            c_inp: 0.0,
        };
        match kind {
            DeviceKind::NightStorageHeater => NominalParams {
                load_factor: 0.9,
                p: 5.0,
                t_set: 580.0,
                t_db: 20.0,
                c_use: HEATER_C_USE,
                c_sol: 0.001,
                c_los: 0.01,
                c_inp: 1.2916,
                ..base
            },
            DeviceKind::StorageWaterBoiler => NominalParams {
                load_factor: 0.9,
                p: 4.0,
                t_set: 70.0,
                t_db: 25.0,
                c_use: 0.0142,
                c_los: 0.0125,
                c_inp: 1.26,
                ..base
            },
            DeviceKind::HeatPump => NominalParams {
                load_factor: 0.8,
                p: 5.0,
                t_set: 45.0,
                t_db: 5.0,
                c_use: 0.01,
                c_use_water: 0.006,
                c_sol: 0.001,
                c_los: 0.001,
                c_inp: 0.456,
                ..base
            },
            DeviceKind::Fridge => NominalParams {
                load_factor: 0.7,
                p: 0.8,
                t_set: 8.5,
                t_db: 1.5,
                c_use: 0.0015,
                c_los: 0.003,
                c_inp: 0.3201,
                ..base
            },
            DeviceKind::Freezer => NominalParams {
                load_factor: 0.7,
                p: 1.0,
                t_set: -16.5,
                t_db: 1.5,
                c_use: 0.001,
                c_los: 0.004,
                c_inp: 0.2967,
                ..base
            },
            DeviceKind::AirConditioner => NominalParams {
                load_factor: 0.6,
                p: 2.0,
                t_set: 21.0,
                t_db: 1.5,
                t_ss: 21.0,
                c_use: 0.0017,
                c_sol: 0.00016,
                c_los: 0.02,
                c_inp: 0.2829,
                ..base
            },
        }
    }
}

/// `|q| = |p| * sqrt(1/cos²φ - 1)`, carrying the sign of `p`.
pub fn reactive_rating<T: Scalar>(p: T, load_factor: T) -> T {
    p * (T::one() / (load_factor * load_factor) - T::one()).max(T::zero()).sqrt()
}

/// Coefficients of one flexible load.
///
/// For heat pumps `c_use` is the space-heating coefficient and `c_use_water`
/// the hot-water coefficient; other kinds leave `c_use_water` at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams<T = f64> {
    pub kind: DeviceKind,
    /// Active power rating (kW).
    pub p_rated: T,
    /// Reactive power rating (kVAr).
    pub q_rated: T,
    /// cos φ
    pub load_factor: T,
    pub t_set: T,
    pub t_db: T,
    pub t_ss: T,
    pub t_lol: T,
    pub t_hol: T,
    pub c_use: T,
    #[serde(default)]
    pub c_use_water: T,
    pub c_sol: T,
    pub c_los: T,
    pub c_inp: T,
}

impl<T: Scalar> DeviceParams<T> {
    pub fn comfort_band(&self) -> ComfortBand<T> {
        ComfortBand { t_low: self.t_set - self.t_db, t_up: self.t_set }
    }

    pub fn validate(&self) -> Result<(), String> {
        let lf = self.load_factor;
        if !(lf > T::zero() && lf <= T::one()) {
            return Err(format!("load factor {lf} outside (0, 1]"));
        }
        if !(self.t_db > T::zero()) {
            return Err(format!("dead band {} must be positive", self.t_db));
        }
        if self.p_rated < T::zero() {
            return Err(format!("negative power rating {}", self.p_rated));
        }
        if self.kind == DeviceKind::HeatPump && !(self.t_hol > self.t_lol) {
            return Err(format!("heat pump T_HOL {} must exceed T_LOL {}", self.t_hol, self.t_lol));
        }
        let q = reactive_rating(self.p_rated, lf);
        let scale = q.abs().max(T::of(1e-12));
        if ((self.q_rated - q) / scale).abs() > T::of(1e-6) {
            return Err(format!("reactive rating {} inconsistent with P and cos φ (expected {q})", self.q_rated));
        }
        Ok(())
    }

    /// Per-step electric input gain for a switched-on device (°C), including
    /// heat pump derating at the given ambient temperature.
    pub fn input_gain(&self, ambient: T, dt_hours: T) -> T {
        let scale = dt_hours / T::of(REFERENCE_STEP_HOURS);
        let full = self.c_inp * self.p_rated * scale;
        match self.kind {
            DeviceKind::HeatPump => full * self.heat_pump_derating(ambient),
            k if k.is_cooling() => -full,
            _ => full,
        }
    }

    /// Linear input derating between `t_lol` (full input) and `t_hol` (none).
    pub fn heat_pump_derating(&self, ambient: T) -> T {
        let span = self.t_hol - self.t_lol;
        T::one() - clamp((ambient - self.t_lol) / span, T::zero(), T::one())
    }
}

/// Storage temperature interval that keeps the consumer comfortable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComfortBand<T = f64> {
    pub t_low: T,
    pub t_up: T,
}

impl<T: Scalar> ComfortBand<T> {
    pub fn midpoint(&self) -> T {
        (self.t_low + self.t_up) / T::of(2.0)
    }

    pub fn contains(&self, x: T) -> bool {
        x >= self.t_low && x <= self.t_up
    }

    /// Distance outside the band, zero inside.
    pub fn violation(&self, x: T) -> T {
        (self.t_low - x).max(x - self.t_up).max(T::zero())
    }
}

/// Exogenous forecasts driving a device: ambient temperature (°C), solar
/// irradiance (W/m²), hot-water draw (l per step) and occupancy (0..1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExogenousSeries<T = f64> {
    pub tem: Vec<T>,
    pub sol: Vec<T>,
    pub wat: Vec<T>,
    pub occ: Vec<T>,
}

/// The exogenous values of a single step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExoSample<T = f64> {
    pub tem: T,
    pub sol: T,
    pub wat: T,
    pub occ: T,
}

impl<T: Scalar> ExogenousSeries<T> {
    pub fn constant(len: usize, sample: ExoSample<T>) -> Self {
        ExogenousSeries {
            tem: vec![sample.tem; len],
            sol: vec![sample.sol; len],
            wat: vec![sample.wat; len],
            occ: vec![sample.occ; len],
        }
    }

    pub fn len(&self) -> usize {
        self.tem.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tem.is_empty()
    }

    pub fn at(&self, t: usize) -> ExoSample<T> {
        ExoSample { tem: self.tem[t], sol: self.sol[t], wat: self.wat[t], occ: self.occ[t] }
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.tem.len();
        if self.sol.len() != n || self.wat.len() != n || self.occ.len() != n {
            return Err(format!(
                "series lengths differ: tem {n}, sol {}, wat {}, occ {}",
                self.sol.len(),
                self.wat.len(),
                self.occ.len()
            ));
        }
        for t in 0..n {
            let s = self.at(t);
            if !(s.tem.is_finite() && s.sol.is_finite() && s.wat.is_finite() && s.occ.is_finite()) {
                return Err(format!("non-finite exogenous value at step {t}"));
            }
            if s.sol < T::zero() || s.wat < T::zero() {
                return Err(format!("negative solar or water value at step {t}"));
            }
            if s.occ < T::zero() || s.occ > T::one() {
                return Err(format!("occupancy {} outside [0, 1] at step {t}", s.occ));
            }
        }
        Ok(())
    }
}

/// The three additive terms of one storage step (°C).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepTerms<T = f64> {
    pub out: T,
    pub loss: T,
    pub inp: T,
}

impl<T: Scalar> StepTerms<T> {
    /// Net change of the storage state.
    pub fn net(&self) -> T {
        -self.out - self.loss + self.inp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviceState<T = f64> {
    /// Storage temperature (°C).
    pub x: T,
    /// Internal controller switch.
    pub v: bool,
}

/// Output, loss and input of one step for the device's kind.
pub fn step_terms<T: Scalar>(
    params: &DeviceParams<T>,
    state: &DeviceState<T>,
    exo: ExoSample<T>,
    u: bool,
    v: bool,
    dt_hours: T,
) -> StepTerms<T> {
    let scale = dt_hours / T::of(REFERENCE_STEP_HOURS);
    let loss_rate = params.c_los * dt_hours;
    let on = if u && v { T::one() } else { T::zero() };
    let x = state.x;
    let zero = T::zero();
    match params.kind {
        DeviceKind::NightStorageHeater => StepTerms {
            out: (params.c_use * (params.t_ss - exo.tem) - params.c_sol * exo.sol).max(zero) * scale,
            loss: loss_rate * (x - params.t_ss),
            inp: params.c_inp * params.p_rated * on * scale,
        },
        DeviceKind::StorageWaterBoiler => StepTerms {
            out: params.c_use * exo.wat,
            loss: loss_rate * (x - params.t_ss),
            inp: params.c_inp * params.p_rated * on * scale,
        },
        DeviceKind::HeatPump => StepTerms {
            out: (params.c_use * (params.t_ss - exo.tem) - params.c_sol * exo.sol).max(zero) * scale
                + params.c_use_water * exo.wat,
            loss: loss_rate * (x - params.t_ss),
            inp: params.c_inp * params.p_rated * params.heat_pump_derating(exo.tem) * on * scale,
        },
        DeviceKind::Fridge | DeviceKind::Freezer => StepTerms {
            out: -params.c_use * exo.occ * scale,
            loss: -loss_rate * (params.t_ss - x),
            inp: -params.c_inp * params.p_rated * on * scale,
        },
        DeviceKind::AirConditioner => StepTerms {
            out: -params.c_use * exo.occ * scale,
            loss: -loss_rate * (exo.tem - x) - params.c_sol * exo.sol * scale,
            inp: -params.c_inp * params.p_rated * on * scale,
        },
    }
}

/// Applies one step of the storage recursion; the controller switch is kept.
pub fn step_state<T: Scalar>(state: &DeviceState<T>, terms: &StepTerms<T>) -> DeviceState<T> {
    DeviceState { x: state.x - terms.out - terms.loss + terms.inp, v: state.v }
}

/// Hysteresis thermostat: returns the internal switch for the current state.
pub fn thermostat<T: Scalar>(params: &DeviceParams<T>, state: &DeviceState<T>) -> bool {
    let band = params.comfort_band();
    if params.kind.is_cooling() {
        if state.x >= band.t_up {
            true
        } else if state.x <= band.t_low {
            false
        } else {
            state.v
        }
    } else if state.x <= band.t_low {
        true
    } else if state.x >= band.t_up {
        false
    } else {
        state.v
    }
}

/// Thermostat-driven run with the external switch held on.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T = f64> {
    /// States `x[0..=T]`.
    pub x: Vec<T>,
    /// Internal switch per step.
    pub v: Vec<bool>,
    /// Active consumption per step (kW).
    pub p: Vec<T>,
    /// Reactive consumption per step (kVAr).
    pub q: Vec<T>,
    /// Largest single-step change of the state.
    pub max_step_drift: T,
    /// The state left the band by more than one step's drift.
    pub band_escape: bool,
}

impl<T: Scalar> Trajectory<T> {
    pub fn on_steps(&self) -> usize {
        self.v.iter().filter(|&&v| v).count()
    }
}

pub fn simulate_uncontrolled<T: Scalar>(
    params: &DeviceParams<T>,
    x0: T,
    exo: &ExogenousSeries<T>,
    dt_hours: T,
) -> Trajectory<T> {
    let horizon = exo.len();
    let mut state = DeviceState { x: x0, v: false };
    let mut traj = Trajectory {
        x: Vec::with_capacity(horizon + 1),
        v: Vec::with_capacity(horizon),
        p: Vec::with_capacity(horizon),
        q: Vec::with_capacity(horizon),
        max_step_drift: T::zero(),
        band_escape: false,
    };
    traj.x.push(x0);
    for t in 0..horizon {
        state.v = thermostat(params, &state);
        let terms = step_terms(params, &state, exo.at(t), true, state.v, dt_hours);
        traj.max_step_drift = traj.max_step_drift.max(terms.net().abs());
        state = step_state(&state, &terms);
        let on = if state.v { T::one() } else { T::zero() };
        traj.v.push(state.v);
        traj.p.push(params.p_rated * on);
        traj.q.push(params.q_rated * on);
        traj.x.push(state.x);
    }
    let band = params.comfort_band();
    let slack = traj.max_step_drift * (T::one() + T::of(1e-9)) + T::of(1e-12);
    traj.band_escape = traj.x.iter().any(|&x| x < band.t_low - slack || x > band.t_up + slack);
    if traj.band_escape {
        log::warn!("{} left its comfort band by more than one step of drift", params.kind.name());
    }
    traj
}

/// Affine form of one step: `x[t+1] = retain * x[t] + drift + gain * switch`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineStep<T = f64> {
    pub retain: T,
    pub drift: T,
    pub gain: T,
}

/// Per-kind affine expansion of the storage step, as used by the closed-form
/// state and the scheduling constraints.
pub fn affine_step<T: Scalar>(params: &DeviceParams<T>, exo: ExoSample<T>, dt_hours: T) -> AffineStep<T> {
    let s = dt_hours / T::of(REFERENCE_STEP_HOURS);
    let k = params.c_los * dt_hours;
    let retain = T::one() - k;
    let heating = |c_heat: T| (c_heat * (params.t_ss - exo.tem) - params.c_sol * exo.sol).max(T::zero()) * s;
    let input = params.c_inp * params.p_rated * s;
    let (drift, gain) = match params.kind {
        DeviceKind::StorageWaterBoiler => (k * params.t_ss - params.c_use * exo.wat, input),
        DeviceKind::NightStorageHeater => (k * params.t_ss - heating(params.c_use), input),
        DeviceKind::HeatPump => (
            k * params.t_ss - params.c_use_water * exo.wat - heating(params.c_use),
            input * params.heat_pump_derating(exo.tem),
        ),
        DeviceKind::Fridge | DeviceKind::Freezer => (params.c_use * exo.occ * s + k * params.t_ss, -input),
        DeviceKind::AirConditioner => (params.c_use * exo.occ * s + k * exo.tem + params.c_sol * exo.sol * s, -input),
    };
    AffineStep { retain, drift, gain }
}

/// State after applying steps `0..=t` with the given effective switches,
/// computed from the induction formula
/// `x0·(1-k)^(t+1) + Σ_n (drift_n + gain_n·u_n)·(1-k)^(t-n)`.
pub fn closed_form_state<T: Scalar>(
    params: &DeviceParams<T>,
    x0: T,
    exo: &ExogenousSeries<T>,
    switches: &[bool],
    dt_hours: T,
    t: usize,
) -> T {
    assert!(t < switches.len() && t < exo.len(), "step {t} outside horizon");
    let retain = T::one() - params.c_los * dt_hours;
    let mut acc = x0 * retain.powi(t as i32 + 1);
    for n in 0..=t {
        let a = affine_step(params, exo.at(n), dt_hours);
        let on = if switches[n] { T::one() } else { T::zero() };
        acc += (a.drift + a.gain * on) * retain.powi((t - n) as i32);
    }
    acc
}

/// Scales every coefficient and capacity by an independent Uniform(0.9, 1.1)
/// factor. The load factor is kept, so the reactive rating follows `p_rated`.
pub fn randomize_params<T: Scalar>(nominal: &DeviceParams<T>, seed: u64) -> DeviceParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factor = || T::of(rng.random_range(0.9..=1.1));
    let mut p = *nominal;
    p.c_use = p.c_use * factor();
    p.c_use_water = p.c_use_water * factor();
    p.c_sol = p.c_sol * factor();
    p.c_los = p.c_los * factor();
    p.c_inp = p.c_inp * factor();
    p.t_db = p.t_db * factor();
    p.p_rated = p.p_rated * factor();
    p.q_rated = reactive_rating(p.p_rated, p.load_factor);
    p
}

/// One entry of a device fleet file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetEntry {
    pub kind: DeviceKind,
    pub bus_id: u64,
    /// Seed of the ±10% parameter randomization; `None` keeps nominal values.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Coefficient overrides by field name, applied after randomization.
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

impl FleetEntry {
    pub fn params(&self) -> Result<DeviceParams<f64>, String> {
        let nominal = self.kind.nominal::<f64>();
        let mut p = match self.seed {
            Some(seed) => randomize_params(&nominal, seed),
            None => nominal,
        };
        for (name, &value) in &self.overrides {
            let slot = match name.as_str() {
                "p_rated" => &mut p.p_rated,
                "load_factor" => &mut p.load_factor,
                "t_set" => &mut p.t_set,
                "t_db" => &mut p.t_db,
                "t_ss" => &mut p.t_ss,
                "t_lol" => &mut p.t_lol,
                "t_hol" => &mut p.t_hol,
                "c_use" => &mut p.c_use,
                "c_use_water" => &mut p.c_use_water,
                "c_sol" => &mut p.c_sol,
                "c_los" => &mut p.c_los,
                "c_inp" => &mut p.c_inp,
                other => return Err(format!("unknown device coefficient `{other}`")),
            };
            *slot = value;
        }
        p.q_rated = reactive_rating(p.p_rated, p.load_factor);
        p.validate()?;
        Ok(p)
    }
}

pub fn parse_fleet(json: &str) -> Result<Vec<FleetEntry>, serde_json::Error> {
    serde_json::from_str(json)
}

/// Compares each kind's coefficients with its documented nominal behaviour and
/// logs the mismatches. Returns the messages.
pub fn calibration_notes() -> Vec<String> {
    let mut notes = Vec::new();
    let heater = DeviceKind::NightStorageHeater.nominal::<f64>();
    let heater_loss = heater.c_los * (600.0 - heater.t_ss);
    if (heater_loss - 5.8).abs() > 1e-9 {
        notes.push(format!("heater loss at 600 °C is {heater_loss:.3} °C/h, documented 5.8"));
    }
    let boiler = DeviceKind::StorageWaterBoiler.nominal::<f64>();
    let boiler_loss = boiler.c_los * (95.0 - boiler.t_ss);
    if (boiler_loss - 3.75).abs() > 1e-6 {
        notes.push(format!("boiler loss at 95 °C is {boiler_loss:.3} °C/h, documented 3.75"));
    }
    for (kind, documented) in [
        (DeviceKind::NightStorageHeater, 6.458),
        (DeviceKind::StorageWaterBoiler, 5.03),
        (DeviceKind::Fridge, -0.2561),
        (DeviceKind::Freezer, -0.2967),
        (DeviceKind::AirConditioner, -0.5659),
    ] {
        let p = kind.nominal::<f64>();
        let inp = p.input_gain(0.0, REFERENCE_STEP_HOURS);
        if (inp - documented).abs() > 5e-3 {
            notes.push(format!("{} input {inp:.4} °C/step, documented {documented}", kind.name()));
        }
    }
    for n in &notes {
        log::info!("device calibration: {n}");
    }
    notes
}
