//! Radial network topology, nameplate data and per-unit conversion.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TopologyError;
use crate::num::Scalar;

/// System power base (MVA).
pub const BASE_MVA: f64 = 0.5;
/// Low-voltage base (kV).
pub const BASE_KV_LV: f64 = 0.4;
/// Medium-voltage base (kV).
pub const BASE_KV_MV: f64 = 20.0;

const DEFAULT_TOPOLOGY: &str = include_str!("../data/default_topology.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u64,
    /// Id of the transformer feeding this bus's low-voltage grid.
    pub feeder: u64,
    pub kv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: u64,
    pub from: u64,
    pub to: u64,
    /// Resistance (Ω/km).
    pub r: f64,
    /// Reactance (Ω/km).
    pub x: f64,
    pub len_km: f64,
    pub imax_a: f64,
    /// Shunt susceptance at each line end (pu on the system base).
    #[serde(default)]
    pub bsh: f64,
}

impl Line {
    /// Series impedance in per unit for the given voltage level.
    pub fn impedance_pu(&self, kv: f64, base_mva: f64) -> (f64, f64) {
        let z_base = kv * kv / base_mva;
        (self.r * self.len_km / z_base, self.x * self.len_km / z_base)
    }

    /// Series admittance `(g, b)` in per unit.
    pub fn admittance_pu(&self, kv: f64, base_mva: f64) -> (f64, f64) {
        let (r, x) = self.impedance_pu(kv, base_mva);
        series_admittance(r, x)
    }
}

/// `g = r/(r²+x²)`, `b = -x/(r²+x²)`.
pub fn series_admittance<T: Scalar>(r: T, x: T) -> (T, T) {
    let d = r * r + x * x;
    (r / d, -x / d)
}

pub fn ohm_to_pu<T: Scalar>(ohm: T, kv: T, base_mva: T) -> T {
    ohm * base_mva / (kv * kv)
}

pub fn pu_to_ohm<T: Scalar>(pu: T, kv: T, base_mva: T) -> T {
    pu * kv * kv / base_mva
}

fn default_tap() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub id: u64,
    pub hv_kv: f64,
    pub lv_kv: f64,
    pub s_mva: f64,
    pub uk_pct: f64,
    pub ur_pct: f64,
    /// Off-load tap ratio `a`.
    #[serde(default = "default_tap")]
    pub tap: f64,
    #[serde(default)]
    pub phase_deg: f64,
    /// Low-voltage bus the transformer feeds. Inferred when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lv_bus: Option<u64>,
}

impl Transformer {
    pub fn impedance_pu(&self, base_mva: f64) -> Result<(f64, f64), TopologyError> {
        transformer_impedance(self.uk_pct, self.ur_pct, self.s_mva, base_mva)
            .map_err(|reason| TopologyError::InvalidNameplate { transformer: self.id, reason })
    }

    pub fn phase_rad(&self) -> f64 {
        self.phase_deg.to_radians()
    }
}

/// Per-unit series impedance from nameplate data, rescaled to `base_mva`.
pub fn transformer_impedance<T: Scalar>(uk_pct: T, ur_pct: T, s_mva: T, base_mva: T) -> Result<(T, T), String> {
    let hundred = T::of(100.0);
    if !(s_mva > T::zero()) {
        return Err(format!("rated power {s_mva} must be positive"));
    }
    if ur_pct < T::zero() || ur_pct >= uk_pct {
        return Err(format!("copper losses {ur_pct}% must lie in [0, U_k = {uk_pct}%)"));
    }
    let z = uk_pct / hundred;
    let r = ur_pct / hundred;
    let scale = base_mva / s_mva;
    Ok((r * scale, (z * z - r * r).sqrt() * scale))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slack {
    pub bus: u64,
    pub kv: f64,
}

/// Serialized form of a topology file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub transformers: Vec<Transformer>,
    pub slack: Slack,
}

/// Tree structure of one transformer's low-voltage grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Feeder {
    pub transformer: u64,
    pub root: u64,
    /// Buses in breadth-first order from the root.
    pub order: Vec<u64>,
}

/// A validated radial network.
#[derive(Debug, Clone)]
pub struct Topology {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub transformers: Vec<Transformer>,
    pub slack: Slack,
    pub base_mva: f64,
    feeders: Vec<Feeder>,
    bus_index: HashMap<u64, usize>,
    line_index: HashMap<u64, usize>,
    trafo_index: HashMap<u64, usize>,
    /// Line towards the feeder root, per bus index.
    parent_line: Vec<Option<u64>>,
    /// Upstream bus of each line, per line index.
    upstream: Vec<u64>,
    children: Vec<Vec<u64>>,
    depth: Vec<usize>,
}

impl Topology {
    pub fn default_grid() -> Self {
        Self::from_json(DEFAULT_TOPOLOGY).expect("shipped topology is valid")
    }

    pub fn load(path: &Path) -> Result<Self, TopologyError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TopologyError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, TopologyError> {
        let file: TopologyFile = serde_json::from_str(text).map_err(|e| TopologyError::Parse(e.to_string()))?;
        Self::build(file)
    }

    pub fn to_file(&self) -> TopologyFile {
        TopologyFile {
            buses: self.buses.clone(),
            lines: self.lines.clone(),
            transformers: self.transformers.clone(),
            slack: self.slack.clone(),
        }
    }

    pub fn build(file: TopologyFile) -> Result<Self, TopologyError> {
        let TopologyFile { buses, lines, transformers, slack } = file;
        let bus_index = index_of(&buses, |b| b.id, "bus")?;
        let line_index = index_of(&lines, |l| l.id, "line")?;
        let trafo_index = index_of(&transformers, |t| t.id, "transformer")?;
        if bus_index.contains_key(&slack.bus) {
            return Err(TopologyError::DuplicateId { kind: "bus", id: slack.bus });
        }

        for t in &transformers {
            t.impedance_pu(BASE_MVA)?;
            if !(t.tap > 0.0) {
                return Err(TopologyError::InvalidNameplate {
                    transformer: t.id,
                    reason: format!("tap ratio {}", t.tap),
                });
            }
        }
        for b in &buses {
            if !trafo_index.contains_key(&b.feeder) {
                return Err(TopologyError::UnknownFeeder { bus: b.id, feeder: b.feeder });
            }
        }
        for l in &lines {
            for (what, v) in
                [("resistance", l.r), ("reactance", l.x), ("length", l.len_km), ("current limit", l.imax_a)]
            {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(TopologyError::InvalidLine {
                        line: l.id,
                        reason: format!("{what} {v} must be positive"),
                    });
                }
            }
            let from = buses.get(*bus_index.get(&l.from).ok_or(TopologyError::UnknownBus { line: l.id, bus: l.from })?);
            let to = buses.get(*bus_index.get(&l.to).ok_or(TopologyError::UnknownBus { line: l.id, bus: l.to })?);
            let (from, to) = (from.expect("indexed"), to.expect("indexed"));
            if from.feeder != to.feeder {
                return Err(TopologyError::CrossFeeder { line: l.id, from_feeder: from.feeder, to_feeder: to.feeder });
            }
        }

        let mut adjacency: Vec<Vec<(u64, usize)>> = vec![Vec::new(); buses.len()];
        let mut sorted_lines: Vec<&Line> = lines.iter().collect();
        sorted_lines.sort_by_key(|l| l.id);
        for l in &sorted_lines {
            adjacency[bus_index[&l.from]].push((l.id, bus_index[&l.to]));
            adjacency[bus_index[&l.to]].push((l.id, bus_index[&l.from]));
        }

        let mut parent_line = vec![None; buses.len()];
        let mut upstream = vec![0u64; lines.len()];
        let mut depth = vec![0usize; buses.len()];
        let mut visited = vec![false; buses.len()];
        let mut feeders = Vec::with_capacity(transformers.len());
        for t in &transformers {
            let root = feeder_root(t, &buses, &lines, &bus_index)?;
            let root_idx = bus_index[&root];
            let mut order = Vec::new();
            let mut queue = VecDeque::from([root_idx]);
            visited[root_idx] = true;
            while let Some(k) = queue.pop_front() {
                order.push(buses[k].id);
                for &(line_id, m) in &adjacency[k] {
                    if parent_line[k] == Some(line_id) {
                        continue;
                    }
                    if visited[m] {
                        return Err(TopologyError::Cycle { line: line_id });
                    }
                    visited[m] = true;
                    parent_line[m] = Some(line_id);
                    upstream[line_index[&line_id]] = buses[k].id;
                    depth[m] = depth[k] + 1;
                    queue.push_back(m);
                }
            }
            feeders.push(Feeder { transformer: t.id, root, order });
        }
        if let Some(b) = buses.iter().enumerate().filter(|(i, _)| !visited[*i]).map(|(_, b)| b.id).min() {
            return Err(TopologyError::Dangling { bus: b });
        }

        let mut children = vec![Vec::new(); buses.len()];
        for l in &sorted_lines {
            let up = upstream[line_index[&l.id]];
            children[bus_index[&up]].push(l.id);
        }

        Ok(Topology {
            buses,
            lines,
            transformers,
            slack,
            base_mva: BASE_MVA,
            feeders,
            bus_index,
            line_index,
            trafo_index,
            parent_line,
            upstream,
            children,
            depth,
        })
    }

    pub fn feeders(&self) -> &[Feeder] {
        &self.feeders
    }

    pub fn feeder(&self, transformer: u64) -> Option<&Feeder> {
        self.feeders.iter().find(|f| f.transformer == transformer)
    }

    pub fn bus(&self, id: u64) -> Option<&Bus> {
        self.bus_index.get(&id).map(|&i| &self.buses[i])
    }

    pub fn bus_position(&self, id: u64) -> Option<usize> {
        self.bus_index.get(&id).copied()
    }

    pub fn line(&self, id: u64) -> Option<&Line> {
        self.line_index.get(&id).map(|&i| &self.lines[i])
    }

    pub fn line_position(&self, id: u64) -> Option<usize> {
        self.line_index.get(&id).copied()
    }

    pub fn transformer(&self, id: u64) -> Option<&Transformer> {
        self.trafo_index.get(&id).map(|&i| &self.transformers[i])
    }

    pub fn parent_line(&self, bus: u64) -> Option<u64> {
        self.parent_line[self.bus_index[&bus]]
    }

    /// Bus on the feeder side of a line.
    pub fn upstream_bus(&self, line: u64) -> u64 {
        self.upstream[self.line_index[&line]]
    }

    /// Bus on the far side of a line from the feeder.
    pub fn downstream_bus(&self, line: u64) -> u64 {
        let l = &self.lines[self.line_index[&line]];
        if l.from == self.upstream_bus(line) {
            l.to
        } else {
            l.from
        }
    }

    /// Lines leaving a bus away from the feeder, sorted by id.
    pub fn child_lines(&self, bus: u64) -> &[u64] {
        &self.children[self.bus_index[&bus]]
    }

    /// Number of lines between a bus and its transformer.
    pub fn depth(&self, bus: u64) -> usize {
        self.depth[self.bus_index[&bus]]
    }

    /// Depth of the deepest bus below (and including) `bus`.
    pub fn subtree_depth(&self, bus: u64) -> usize {
        let mut deepest = self.depth(bus);
        for &l in self.child_lines(bus) {
            deepest = deepest.max(self.subtree_depth(self.downstream_bus(l)));
        }
        deepest
    }

    pub fn feeder_of_line(&self, line: u64) -> Result<u64, TopologyError> {
        let l = self.line(line).ok_or(TopologyError::UnknownLine(line))?;
        Ok(self.bus(l.from).expect("validated").feeder)
    }

    /// Buses on the far side of `line` from the feeder, including its downstream end.
    pub fn downstream_buses(&self, line: u64) -> Result<BTreeSet<u64>, TopologyError> {
        if !self.line_index.contains_key(&line) {
            return Err(TopologyError::UnknownLine(line));
        }
        let mut out = BTreeSet::new();
        let mut stack = vec![self.downstream_bus(line)];
        while let Some(b) = stack.pop() {
            out.insert(b);
            for &l in self.child_lines(b) {
                stack.push(self.downstream_bus(l));
            }
        }
        Ok(out)
    }

    /// Base voltage of a bus (kV).
    pub fn bus_kv(&self, bus: u64) -> f64 {
        self.bus(bus).map(|b| b.kv).unwrap_or(self.slack.kv)
    }

    /// Line count and bus count per feeder.
    pub fn feeder_sizes(&self) -> BTreeMap<u64, (usize, usize)> {
        let mut sizes: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
        for b in &self.buses {
            sizes.entry(b.feeder).or_default().0 += 1;
        }
        for l in &self.lines {
            sizes.entry(self.bus(l.from).expect("validated").feeder).or_default().1 += 1;
        }
        sizes
    }
}

fn index_of<E>(items: &[E], id: impl Fn(&E) -> u64, kind: &'static str) -> Result<HashMap<u64, usize>, TopologyError> {
    let mut map = HashMap::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        if map.insert(id(item), i).is_some() {
            return Err(TopologyError::DuplicateId { kind, id: id(item) });
        }
    }
    Ok(map)
}

fn feeder_root(
    t: &Transformer,
    buses: &[Bus],
    lines: &[Line],
    bus_index: &HashMap<u64, usize>,
) -> Result<u64, TopologyError> {
    if let Some(root) = t.lv_bus {
        let bus = bus_index.get(&root).map(|&i| &buses[i]).ok_or_else(|| TopologyError::AmbiguousRoot {
            feeder: t.id,
            reason: format!("low-voltage bus {root} does not exist"),
        })?;
        if bus.feeder != t.id {
            return Err(TopologyError::AmbiguousRoot {
                feeder: t.id,
                reason: format!("bus {root} belongs to feeder {}", bus.feeder),
            });
        }
        return Ok(root);
    }
    let targets: BTreeSet<u64> = lines.iter().map(|l| l.to).collect();
    let candidates: Vec<u64> =
        buses.iter().filter(|b| b.feeder == t.id && !targets.contains(&b.id)).map(|b| b.id).collect();
    match candidates.as_slice() {
        [root] => Ok(*root),
        [] => Err(TopologyError::AmbiguousRoot { feeder: t.id, reason: "every bus is a line target".into() }),
        many => Err(TopologyError::AmbiguousRoot { feeder: t.id, reason: format!("candidate roots {many:?}") }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus() -> TopologyFile {
        TopologyFile {
            buses: vec![Bus { id: 1, feeder: 7, kv: 0.4 }, Bus { id: 2, feeder: 7, kv: 0.4 }],
            lines: vec![Line { id: 10, from: 1, to: 2, r: 0.397, x: 0.279, len_km: 0.03, imax_a: 199.0, bsh: 0.0 }],
            transformers: vec![Transformer {
                id: 7,
                hv_kv: 20.0,
                lv_kv: 0.4,
                s_mva: 0.5,
                uk_pct: 4.0,
                ur_pct: 1.0,
                tap: 1.0,
                phase_deg: 0.0,
                lv_bus: None,
            }],
            slack: Slack { bus: 0, kv: 20.0 },
        }
    }

    #[test]
    fn default_grid_shape() {
        let t = Topology::default_grid();
        assert_eq!(t.buses.len(), 41);
        assert_eq!(t.lines.len(), 38);
        assert_eq!(t.transformers.len(), 3);
        for (_, (buses, lines)) in t.feeder_sizes() {
            assert_eq!(lines, buses - 1);
        }
    }

    #[test]
    fn two_bus_minimal() {
        let t = Topology::build(two_bus()).unwrap();
        assert_eq!(t.feeders()[0].root, 1);
        assert_eq!(t.downstream_buses(10).unwrap(), BTreeSet::from([2]));
        assert_eq!(t.depth(2), 1);
    }

    #[test]
    fn cycle_names_back_edge() {
        let mut f = two_bus();
        f.buses.push(Bus { id: 3, feeder: 7, kv: 0.4 });
        let proto = f.lines[0].clone();
        f.lines.push(Line { id: 11, from: 2, to: 3, ..proto.clone() });
        f.lines.push(Line { id: 12, from: 3, to: 2, ..proto });
        f.transformers[0].lv_bus = Some(1);
        assert_eq!(Topology::build(f).unwrap_err(), TopologyError::Cycle { line: 12 });
    }

    #[test]
    fn dangling_and_duplicates() {
        let mut f = two_bus();
        f.buses.push(Bus { id: 5, feeder: 7, kv: 0.4 });
        f.transformers[0].lv_bus = Some(1);
        assert_eq!(Topology::build(f).unwrap_err(), TopologyError::Dangling { bus: 5 });

        let mut f = two_bus();
        f.buses.push(Bus { id: 2, feeder: 7, kv: 0.4 });
        assert_eq!(Topology::build(f).unwrap_err(), TopologyError::DuplicateId { kind: "bus", id: 2 });

        let mut f = two_bus();
        f.lines[0].to = 9;
        assert_eq!(Topology::build(f).unwrap_err(), TopologyError::UnknownBus { line: 10, bus: 9 });
    }

    #[test]
    fn nameplate_impedance() {
        let (r, x) = transformer_impedance(4.09f64, 0.993, 0.55, 0.55).unwrap();
        assert!((r - 0.00993).abs() < 1e-15);
        assert!((x - (0.0409f64.powi(2) - 0.00993f64.powi(2)).sqrt()).abs() < 1e-15);
        assert!((x - 0.03968).abs() < 1e-5);
        let (r0, x0) = transformer_impedance(4.0f64, 0.0, 0.5, 0.5).unwrap();
        assert_eq!(r0, 0.0);
        assert!((x0 - 0.04).abs() < 1e-15);
        let (r2, x2) = transformer_impedance(4.09, 0.993, 0.55, 1.1).unwrap();
        assert!((r2 - 2.0 * r).abs() < 1e-15 && (x2 - 2.0 * x).abs() < 1e-15);
        assert!(transformer_impedance(1.0, 1.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn per_unit_round_trip() {
        for ohm in [1e-4f64, 0.0119, 3.2, 150.0] {
            let back = pu_to_ohm(ohm_to_pu(ohm, 0.4, 0.5), 0.4, 0.5);
            assert!(((back - ohm) / ohm).abs() < 1e-12);
        }
    }

    #[test]
    fn feeder_root_line_covers_feeder() {
        let t = Topology::default_grid();
        let feeder = t.feeder(218941).unwrap();
        let below: BTreeSet<u64> =
            t.child_lines(feeder.root).iter().flat_map(|&l| t.downstream_buses(l).unwrap()).collect();
        assert_eq!(below.len() + 1, feeder.order.len());
    }
}
