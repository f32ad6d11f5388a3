//! Seeded scenario generators: prosumer placement, non-controllable unit
//! series and the flexible device fleet.
//!
//! Every random draw comes from a `ChaCha8Rng` seeded with the scenario seed
//! and switched to a dedicated stream:
//!
//! | stream | use |
//! |---|---|
//! | 1, 2 | randomized base series (load, wind) |
//! | 3 | generation unit placement |
//! | 1000 + k | device placement attempt k |
//! | 1_000_000 + unit id | unit rating, load factor and draws |
//! | 2_000_000 + device id | device kind, parameters, x0 and water draws |

pub mod profiles;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::algorithms::PlacedDevice;
use crate::devices::{
    affine_step, randomize_params, reactive_rating, simulate_uncontrolled, DeviceKind, DeviceParams, ExogenousSeries,
};
use crate::error::{Error, Result};
use crate::grid::Topology;
pub use profiles::Profiles;

const STREAM_LOAD_BASE: u64 = 1;
const STREAM_WIND_BASE: u64 = 2;
const STREAM_GEN_PLACEMENT: u64 = 3;
const STREAM_PLACEMENT: u64 = 1000;
const STREAM_UNIT: u64 = 1_000_000;
const STREAM_DEVICE: u64 = 2_000_000;

const PLACEMENT_ATTEMPTS: u64 = 200_000;
const DEVICE_DRAWS: usize = 100;

/// Kinds placed in generated fleets. Air conditioners are not part of the
/// experiments.
pub const FLEET_KINDS: [DeviceKind; 5] = [
    DeviceKind::NightStorageHeater,
    DeviceKind::StorageWaterBoiler,
    DeviceKind::HeatPump,
    DeviceKind::Fridge,
    DeviceKind::Freezer,
];

/// Mean hot-water draw per step (l).
const BOILER_DRAW: f64 = 70.0;
const HEAT_PUMP_DRAW: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Uniform base series with exponential per-unit draws.
    Randomized,
    /// Profile-driven load, PV and wind over three days.
    Regular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub horizon: usize,
    pub devices: usize,
    pub dt_hours: f64,
    /// Target share of device energy in total consumption.
    pub controllable_share: f64,
    /// Generated energy over total consumed energy.
    pub generation_ratio: f64,
    /// PV share of generated energy in regular scenarios; wind supplies the
    /// rest.
    #[serde(default = "default_pv_share")]
    pub pv_share: f64,
    /// Search placements until the fullest feeder holds exactly this many
    /// devices.
    #[serde(default)]
    pub max_per_feeder: Option<usize>,
    /// Directory with `pv.csv`, `wind.csv` and `load.csv`; the shipped
    /// synthetic profiles otherwise.
    #[serde(default)]
    pub profile_dir: Option<PathBuf>,
}

fn default_pv_share() -> f64 {
    0.7
}

impl ScenarioSpec {
    pub fn randomized(seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            kind: ScenarioKind::Randomized,
            seed,
            horizon: 96,
            devices: 30,
            dt_hours: 0.25,
            controllable_share: 0.31,
            generation_ratio: 0.25,
            pv_share: default_pv_share(),
            max_per_feeder: Some(19),
            profile_dir: None,
        }
    }

    pub fn regular(seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            kind: ScenarioKind::Regular,
            seed,
            horizon: 288,
            devices: 150,
            dt_hours: 0.25,
            controllable_share: 0.51,
            generation_ratio: 0.5,
            pv_share: default_pv_share(),
            max_per_feeder: None,
            profile_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.horizon == 0 {
            return bad("scenario horizon must be positive".into());
        }
        if !(self.dt_hours > 0.0 && self.dt_hours.is_finite()) {
            return bad(format!("step length {} h must be positive", self.dt_hours));
        }
        if !(self.controllable_share > 0.0 && self.controllable_share < 1.0) {
            return bad(format!("controllable share {} outside (0, 1)", self.controllable_share));
        }
        if !(self.generation_ratio >= 0.0 && self.generation_ratio.is_finite()) {
            return bad(format!("generation ratio {} must be non-negative", self.generation_ratio));
        }
        if !(0.0..=1.0).contains(&self.pv_share) {
            return bad(format!("pv share {} outside [0, 1]", self.pv_share));
        }
        if let Some(m) = self.max_per_feeder {
            if m > self.devices || (self.devices > 0 && m == 0) {
                return bad(format!("max_per_feeder {m} unreachable with {} devices", self.devices));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Load,
    Pv,
    Wind,
}

impl UnitKind {
    pub fn is_generation(self) -> bool {
        self != UnitKind::Load
    }
}

/// A non-controllable load or generation unit. Consumption is positive,
/// generation negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: u64,
    pub bus: u64,
    pub kind: UnitKind,
    /// Rated (scale) active power after calibration (kW).
    pub rating_kw: f64,
    /// Inductive cos φ.
    pub load_factor: f64,
    pub p_kw: Vec<f64>,
    pub q_kvar: Vec<f64>,
}

/// What sits at one bus.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BusPlacement {
    pub bus: u64,
    pub loads: Vec<u64>,
    pub pv: Vec<u64>,
    pub wind: Vec<u64>,
    pub devices: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub units: Vec<Unit>,
    pub devices: Vec<PlacedDevice>,
    /// Non-controllable active injection per bus in topology order (kW).
    pub residual_p: Vec<Vec<f64>>,
    /// Non-controllable reactive injection per bus in topology order (kVAr).
    pub residual_q: Vec<Vec<f64>>,
}

/// Reactive power of a unit from its active power and inductive load factor:
/// `sign(p)·|p|·tan φ`. Consumption draws reactive power, generation (negative
/// `p`) supplies it.
pub fn reactive_from_active(p_kw: f64, load_factor: f64) -> Result<f64> {
    if !(load_factor > 0.0 && load_factor <= 1.0) {
        return Err(Error::Config(format!("load factor {load_factor} outside (0, 1]")));
    }
    Ok(reactive_rating(p_kw, load_factor))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn hour_of_day(t: usize, dt: f64) -> f64 {
    (t as f64 * dt).rem_euclid(24.0)
}

/// Ambient temperature (°C): daily swing between 3 and 10 °C, coldest at 5 h.
pub fn ambient_temperature(hour: f64) -> f64 {
    6.5 - 3.5 * (2.0 * PI * (hour - 5.0) / 24.0).cos()
}

/// Irradiance (W/m²), a half sine between 6 h and 18 h.
pub fn irradiance(hour: f64) -> f64 {
    600.0 * (PI * (hour - 6.0) / 12.0).sin().max(0.0)
}

pub fn occupancy(hour: f64) -> f64 {
    if (7.0..22.0).contains(&hour) {
        0.8
    } else {
        0.3
    }
}

fn raw_draw(hour: f64) -> f64 {
    0.3 + 1.2 * (-(hour - 7.0).powi(2) / 2.0).exp() + 1.0 * (-(hour - 19.0).powi(2) / 4.0).exp()
}

/// Hot-water draw shape with morning and evening peaks, mean 1 over a day.
pub fn water_shape(hour: f64) -> f64 {
    const N: usize = 1440;
    let mean = (0..N).map(|i| raw_draw(i as f64 * 24.0 / N as f64)).sum::<f64>() / N as f64;
    raw_draw(hour) / mean
}

fn exogenous(kind: DeviceKind, horizon: usize, dt: f64, draw_scale: f64) -> ExogenousSeries<f64> {
    let hours: Vec<f64> = (0..horizon).map(|t| hour_of_day(t, dt)).collect();
    let litres = match kind {
        DeviceKind::StorageWaterBoiler => BOILER_DRAW,
        DeviceKind::HeatPump => HEAT_PUMP_DRAW,
        _ => 0.0,
    };
    ExogenousSeries {
        tem: hours.iter().map(|&h| ambient_temperature(h)).collect(),
        sol: hours.iter().map(|&h| irradiance(h)).collect(),
        wat: hours.iter().map(|&h| litres * draw_scale * water_shape(h)).collect(),
        occ: hours.iter().map(|&h| occupancy(h)).collect(),
    }
}

/// Bus of every device. Placement attempts are tried in order until the
/// fullest feeder holds exactly `max_per_feeder` devices.
fn place_devices(spec: &ScenarioSpec, topology: &Topology) -> Result<Vec<u64>> {
    let buses: Vec<(u64, u64)> = topology.buses.iter().map(|b| (b.id, b.feeder)).collect();
    if buses.is_empty() {
        return Err(Error::Config("topology has no buses".into()));
    }
    for attempt in 0..PLACEMENT_ATTEMPTS {
        let mut rng = stream_rng(spec.seed, STREAM_PLACEMENT + attempt);
        let chosen: Vec<(u64, u64)> = (0..spec.devices).map(|_| buses[rng.random_range(0..buses.len())]).collect();
        let Some(target) = spec.max_per_feeder else {
            return Ok(chosen.iter().map(|c| c.0).collect());
        };
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for &(_, f) in &chosen {
            *counts.entry(f).or_default() += 1;
        }
        if counts.values().copied().max().unwrap_or(0) == target {
            log::debug!("device placement accepted at attempt {attempt}");
            return Ok(chosen.iter().map(|c| c.0).collect());
        }
    }
    Err(Error::Config(format!(
        "no placement with {} devices per feeder in {PLACEMENT_ATTEMPTS} attempts",
        spec.max_per_feeder.unwrap_or(0)
    )))
}

fn build_devices(spec: &ScenarioSpec, topology: &Topology) -> Result<Vec<PlacedDevice>> {
    let buses = place_devices(spec, topology)?;
    buses
        .into_iter()
        .enumerate()
        .map(|(i, bus)| -> Result<PlacedDevice> {
            let id = i as u64 + 1;
            let mut rng = stream_rng(spec.seed, STREAM_DEVICE + id);
            let kind = FLEET_KINDS[rng.random_range(0..FLEET_KINDS.len())];
            for _ in 0..DEVICE_DRAWS {
                let mut params = randomize_params(&kind.nominal::<f64>(), rng.random());
                params.load_factor = rng.random_range(0.8..=1.0);
                params.q_rated = reactive_rating(params.p_rated, params.load_factor);
                let band = params.comfort_band();
                let x0 = rng.random_range(band.t_low..=band.t_up);
                let draw_scale = rng.random_range(0.8..=1.2);
                let exo = exogenous(kind, spec.horizon, spec.dt_hours, draw_scale);
                if holds_band(&params, &exo, spec.dt_hours) {
                    return Ok(PlacedDevice { id, bus, params, x0, exo });
                }
            }
            Err(Error::Config(format!("device {id}: no {} parameter draw can hold its comfort band", kind.name())))
        })
        .collect()
}

/// Whether switching on exactly when the band would otherwise be left keeps
/// the state inside it at every step: one step of input never crosses the
/// whole band, full input outpaces the drain at the near edge and the idle
/// device drifts towards that edge from the far one.
pub fn holds_band(params: &DeviceParams<f64>, exo: &ExogenousSeries<f64>, dt_hours: f64) -> bool {
    let band = params.comfort_band();
    let (near, far) = if params.kind.is_cooling() { (band.t_up, band.t_low) } else { (band.t_low, band.t_up) };
    let toward = if params.kind.is_cooling() { 1.0 } else { -1.0 };
    (0..exo.len()).all(|t| {
        let a = affine_step(params, exo.at(t), dt_hours);
        let idle = |x: f64| a.retain * x + a.drift;
        a.gain.abs() <= params.t_db && toward * (idle(near) + a.gain - near) <= 0.0 && toward * (idle(far) - far) >= 0.0
    })
}

/// Thermostat-baseline energy of the fleet (kWh).
pub fn baseline_device_energy(devices: &[PlacedDevice], dt_hours: f64) -> f64 {
    devices
        .iter()
        .map(|d| simulate_uncontrolled(&d.params, d.x0, &d.exo, dt_hours).p.iter().sum::<f64>() * dt_hours)
        .sum()
}

/// Per-bus generation units of one kind, each bus independently with
/// probability `share`, and at least one per feeder.
fn generation_buses(topology: &Topology, rng: &mut ChaCha8Rng, share: f64) -> Vec<u64> {
    let mut chosen: Vec<u64> = topology.buses.iter().filter(|_| rng.random_bool(share)).map(|b| b.id).collect();
    for f in topology.feeders() {
        if !f.order.iter().any(|b| chosen.contains(b)) {
            chosen.push(*f.order.last().expect("feeder has buses"));
        }
    }
    chosen.sort_by_key(|&b| topology.bus_position(b));
    chosen
}

struct UnitDraft {
    bus: u64,
    kind: UnitKind,
    rating: f64,
    load_factor: f64,
    p: Vec<f64>,
}

fn unit_rng(seed: u64, id: u64) -> ChaCha8Rng {
    stream_rng(seed, STREAM_UNIT + id)
}

fn randomized_units(spec: &ScenarioSpec, topology: &Topology) -> Vec<UnitDraft> {
    let t = spec.horizon;
    let base = |stream| {
        let mut rng = stream_rng(spec.seed, stream);
        (0..t).map(|_| rng.random::<f64>()).collect::<Vec<f64>>()
    };
    let load_base = base(STREAM_LOAD_BASE);
    let wind_base = base(STREAM_WIND_BASE);
    let wind_buses = generation_buses(topology, &mut stream_rng(spec.seed, STREAM_GEN_PLACEMENT), 0.5);
    let mut slots: Vec<(u64, UnitKind)> = topology.buses.iter().map(|b| (b.id, UnitKind::Load)).collect();
    slots.extend(wind_buses.iter().map(|&b| (b, UnitKind::Wind)));
    slots
        .into_iter()
        .enumerate()
        .map(|(i, (bus, kind))| {
            let mut rng = unit_rng(spec.seed, i as u64 + 1);
            let rating = rng.random_range(0.8..=1.2);
            let load_factor = rng.random_range(0.8..=1.0);
            let base = if kind == UnitKind::Load { &load_base } else { &wind_base };
            let p = base
                .iter()
                .map(|&b| {
                    let e: f64 = Exp1.sample(&mut rng);
                    e * b * rating
                })
                .collect();
            UnitDraft { bus, kind, rating, load_factor, p }
        })
        .collect()
}

fn regular_units(spec: &ScenarioSpec, topology: &Topology, profiles: &Profiles) -> Result<Vec<UnitDraft>> {
    let t = spec.horizon;
    if profiles.len() < t {
        return Err(Error::Profile(format!("profiles cover {} steps, horizon is {t}", profiles.len())));
    }
    let mut rng = stream_rng(spec.seed, STREAM_GEN_PLACEMENT);
    let pv_buses = generation_buses(topology, &mut rng, 0.6);
    let wind_buses = generation_buses(topology, &mut rng, 0.2);
    let mut slots: Vec<(u64, UnitKind)> = topology.buses.iter().map(|b| (b.id, UnitKind::Load)).collect();
    slots.extend(pv_buses.iter().map(|&b| (b, UnitKind::Pv)));
    slots.extend(wind_buses.iter().map(|&b| (b, UnitKind::Wind)));
    Ok(slots
        .into_iter()
        .enumerate()
        .map(|(i, (bus, kind))| {
            let mut rng = unit_rng(spec.seed, i as u64 + 1);
            let rating = rng.random_range(0.8..=1.2);
            let load_factor = rng.random_range(0.8..=1.0);
            let profile = match kind {
                UnitKind::Load => &profiles.load,
                UnitKind::Pv => &profiles.pv,
                UnitKind::Wind => &profiles.wind,
            };
            UnitDraft { bus, kind, rating, load_factor, p: profile[..t].iter().map(|v| v * rating).collect() }
        })
        .collect())
}

/// Scales every unit of `kind` so that its summed energy equals `target`.
fn scale_to(drafts: &mut [UnitDraft], kind: UnitKind, target: f64, dt: f64) {
    let energy: f64 = drafts.iter().filter(|d| d.kind == kind).map(|d| d.p.iter().sum::<f64>() * dt).sum();
    if energy <= 0.0 {
        return;
    }
    let s = target / energy;
    for d in drafts.iter_mut().filter(|d| d.kind == kind) {
        d.rating *= s;
        d.p.iter_mut().for_each(|p| *p *= s);
    }
}

impl Scenario {
    /// Generates the scenario described by `spec` on `topology`.
    pub fn generate(spec: &ScenarioSpec, topology: &Topology) -> Result<Scenario> {
        match spec.kind {
            ScenarioKind::Randomized => generate_randomized(spec, topology),
            ScenarioKind::Regular => {
                let profiles = match &spec.profile_dir {
                    Some(dir) => Profiles::from_dir(dir)?,
                    None => Profiles::synthetic(),
                };
                generate_regular(spec, topology, &profiles)
            }
        }
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn placement(&self) -> Vec<BusPlacement> {
        let mut map: BTreeMap<u64, BusPlacement> = BTreeMap::new();
        for u in &self.units {
            let e = map.entry(u.bus).or_insert_with(|| BusPlacement { bus: u.bus, ..Default::default() });
            match u.kind {
                UnitKind::Load => e.loads.push(u.id),
                UnitKind::Pv => e.pv.push(u.id),
                UnitKind::Wind => e.wind.push(u.id),
            }
        }
        for d in &self.devices {
            map.entry(d.bus).or_insert_with(|| BusPlacement { bus: d.bus, ..Default::default() }).devices.push(d.id);
        }
        map.into_values().collect()
    }

    /// Energy of all units of `kind` (kWh, generation negative).
    pub fn unit_energy(&self, kind: UnitKind) -> f64 {
        self.units.iter().filter(|u| u.kind == kind).map(|u| u.p_kw.iter().sum::<f64>()).sum::<f64>()
            * self.spec.dt_hours
    }

    /// Residual active injection summed per feeder transformer (kW).
    pub fn feeder_residual(&self, topology: &Topology) -> BTreeMap<u64, Vec<f64>> {
        let mut out: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for (bus, series) in topology.buses.iter().zip(&self.residual_p) {
            let acc = out.entry(bus.feeder).or_insert_with(|| vec![0.0; series.len()]);
            for (a, v) in acc.iter_mut().zip(series) {
                *a += v;
            }
        }
        out
    }
}

fn assemble(
    spec: &ScenarioSpec,
    topology: &Topology,
    mut drafts: Vec<UnitDraft>,
    devices: Vec<PlacedDevice>,
) -> Result<Scenario> {
    let dt = spec.dt_hours;
    let d = baseline_device_energy(&devices, dt);
    let s = spec.controllable_share;
    let load = d * (1.0 - s) / s;
    let generation = spec.generation_ratio * (d + load);
    scale_to(&mut drafts, UnitKind::Load, load, dt);
    let has_pv = drafts.iter().any(|u| u.kind == UnitKind::Pv);
    let pv_share = if has_pv { spec.pv_share } else { 0.0 };
    scale_to(&mut drafts, UnitKind::Pv, pv_share * generation, dt);
    scale_to(&mut drafts, UnitKind::Wind, (1.0 - pv_share) * generation, dt);

    let n = topology.buses.len();
    let mut residual_p = vec![vec![0.0; spec.horizon]; n];
    let mut residual_q = vec![vec![0.0; spec.horizon]; n];
    let mut units = Vec::with_capacity(drafts.len());
    for (i, draft) in drafts.into_iter().enumerate() {
        let sign = if draft.kind.is_generation() { -1.0 } else { 1.0 };
        let p_kw: Vec<f64> = draft.p.iter().map(|p| sign * p).collect();
        let q_kvar = p_kw.iter().map(|&p| reactive_from_active(p, draft.load_factor)).collect::<Result<Vec<_>>>()?;
        let b = topology.bus_position(draft.bus).expect("unit on topology bus");
        for t in 0..spec.horizon {
            residual_p[b][t] += p_kw[t];
            residual_q[b][t] += q_kvar[t];
        }
        units.push(Unit {
            id: i as u64 + 1,
            bus: draft.bus,
            kind: draft.kind,
            rating_kw: draft.rating,
            load_factor: draft.load_factor,
            p_kw,
            q_kvar,
        });
    }
    Ok(Scenario { spec: spec.clone(), units, devices, residual_p, residual_q })
}

/// Randomized scenario: per-type base series drawn uniformly from [0, 1],
/// unit values drawn exponentially around base × rating.
pub fn generate_randomized(spec: &ScenarioSpec, topology: &Topology) -> Result<Scenario> {
    spec.validate()?;
    let devices = build_devices(spec, topology)?;
    let drafts = randomized_units(spec, topology);
    assemble(spec, topology, drafts, devices)
}

/// Regular scenario: unit series follow the load, PV and wind profiles.
pub fn generate_regular(spec: &ScenarioSpec, topology: &Topology, profiles: &Profiles) -> Result<Scenario> {
    spec.validate()?;
    let devices = build_devices(spec, topology)?;
    let drafts = regular_units(spec, topology, profiles)?;
    assemble(spec, topology, drafts, devices)
}
