//! Network data model and file ingestion.
//!
//! A network file is a JSON document:
//!
//! ```json
//! {
//!   "buses": [{"id": 1, "kind": "generator", "voltage": 1.05, "inertia": 2.0,
//!              "damping": 1.0, "injection": -0.25}],
//!   "lines": [{"from": 1, "to": 2, "susceptance": 0.739,
//!              "adjustable": true, "min": 0.37, "max": 1.11}]
//! }
//! ```
//!
//! Powers and susceptances are per-unit. Unknown keys are rejected.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest admissible `|Σ P_k|` in p.u.
pub const BALANCE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Generator,
    Load,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    pub voltage: f64,
    /// Dimensionless inertia; `None` for loads.
    pub inertia: Option<f64>,
    pub damping: f64,
    /// Mechanical power for generators, negative nominal demand for loads.
    pub injection: f64,
}

impl Bus {
    pub fn is_generator(&self) -> bool {
        self.kind == BusKind::Generator
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SusceptanceBounds {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    /// Lower bus id.
    pub from: u32,
    /// Higher bus id.
    pub to: u32,
    pub susceptance: f64,
    /// Present iff the line is adjustable.
    pub bounds: Option<SusceptanceBounds>,
}

impl Line {
    pub fn is_adjustable(&self) -> bool {
        self.bounds.is_some()
    }

    pub fn key(&self) -> (u32, u32) {
        (self.from, self.to)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct BusRecord {
    id: u32,
    kind: BusKind,
    voltage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inertia: Option<f64>,
    damping: f64,
    injection: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct LineRecord {
    from: u32,
    to: u32,
    susceptance: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    adjustable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    buses: Vec<BusRecord>,
    lines: Vec<LineRecord>,
}

/// Validated lossless network. Generators come first (by id), then loads (by
/// id); lines are ordered lexicographically by `(min id, max id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerNetwork {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    index: BTreeMap<u32, usize>,
}

impl PowerNetwork {
    pub fn new(buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self> {
        let net = Self::build(buses, lines)?;
        net.check_connected()?;
        let sum = net.total_injection();
        if sum.abs() > BALANCE_TOL {
            return Err(Error::Imbalance {
                sum,
                tolerance: BALANCE_TOL,
            });
        }
        Ok(net)
    }

    /// Validates buses and lines but not connectivity or balance; used for
    /// faulted networks, which may legitimately be islanded.
    fn build(mut buses: Vec<Bus>, mut lines: Vec<Line>) -> Result<Self> {
        if buses.is_empty() {
            return Err(Error::Schema("network has no buses".into()));
        }
        for b in &buses {
            if !(b.voltage.is_finite() && b.voltage > 0.0) {
                return Err(Error::Schema(format!("bus {}: voltage must be > 0", b.id)));
            }
            if !(b.damping.is_finite() && b.damping > 0.0) {
                return Err(Error::Schema(format!("bus {}: damping must be > 0", b.id)));
            }
            if !b.injection.is_finite() {
                return Err(Error::Schema(format!("bus {}: injection must be finite", b.id)));
            }
            match (b.kind, b.inertia) {
                (BusKind::Generator, Some(m)) if m.is_finite() && m > 0.0 => {}
                (BusKind::Generator, _) => {
                    return Err(Error::Schema(format!(
                        "generator bus {}: inertia must be present and > 0",
                        b.id
                    )))
                }
                (BusKind::Load, Some(_)) => {
                    return Err(Error::Schema(format!("load bus {}: inertia not allowed", b.id)))
                }
                (BusKind::Load, None) => {}
            }
        }
        buses.sort_by_key(|b| (b.kind == BusKind::Load, b.id));
        let mut index = BTreeMap::new();
        for (i, b) in buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(Error::Schema(format!("duplicate bus id {}", b.id)));
            }
        }

        let mut seen = BTreeSet::new();
        for l in lines.iter_mut() {
            if l.from == l.to {
                return Err(Error::Schema(format!("line {}-{} is a self-loop", l.from, l.to)));
            }
            if l.from > l.to {
                std::mem::swap(&mut l.from, &mut l.to);
            }
            for id in [l.from, l.to] {
                if !index.contains_key(&id) {
                    return Err(Error::Schema(format!(
                        "line {}-{} references unknown bus {id}",
                        l.from, l.to
                    )));
                }
            }
            if !seen.insert(l.key()) {
                return Err(Error::Schema(format!("duplicate line {}-{}", l.from, l.to)));
            }
            if !(l.susceptance.is_finite() && l.susceptance > 0.0) {
                return Err(Error::Schema(format!(
                    "line {}-{}: susceptance must be > 0",
                    l.from, l.to
                )));
            }
            if let Some(bd) = l.bounds {
                if !(bd.min > 0.0 && bd.min <= l.susceptance && l.susceptance <= bd.max) {
                    return Err(Error::Schema(format!(
                        "line {}-{}: need 0 < min <= susceptance <= max, got [{}, {}] with {}",
                        l.from, l.to, bd.min, bd.max, l.susceptance
                    )));
                }
            }
        }
        lines.sort_by_key(Line::key);
        Ok(Self {
            buses,
            lines,
            index,
        })
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for (k, j) in self.edge_endpoints() {
            adj[k].push(j);
            adj[j].push(k);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(k) = queue.pop_front() {
            for &j in &adj[k] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            let mut unreachable: Vec<u32> = (0..n).filter(|&i| !seen[i]).map(|i| self.buses[i].id).collect();
            unreachable.sort_unstable();
            Err(Error::Disconnected {
                root: self.buses[0].id,
                unreachable,
            })
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: NetworkFile =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let buses = file
            .buses
            .into_iter()
            .map(|b| Bus {
                id: b.id,
                kind: b.kind,
                voltage: b.voltage,
                inertia: b.inertia,
                damping: b.damping,
                injection: b.injection,
            })
            .collect();
        let lines = file
            .lines
            .into_iter()
            .map(|l| {
                let bounds = match (l.adjustable, l.min, l.max) {
                    (true, Some(min), Some(max)) => Some(SusceptanceBounds { min, max }),
                    (true, _, _) => {
                        return Err(Error::Schema(format!(
                            "adjustable line {}-{} needs min and max",
                            l.from, l.to
                        )))
                    }
                    (false, None, None) => None,
                    (false, _, _) => {
                        return Err(Error::Schema(format!(
                            "line {}-{}: min/max only allowed on adjustable lines",
                            l.from, l.to
                        )))
                    }
                };
                Ok(Line {
                    from: l.from,
                    to: l.to,
                    susceptance: l.susceptance,
                    bounds,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(buses, lines)
    }

    pub fn to_json_string(&self) -> String {
        let file = NetworkFile {
            buses: self
                .buses
                .iter()
                .map(|b| BusRecord {
                    id: b.id,
                    kind: b.kind,
                    voltage: b.voltage,
                    inertia: b.inertia,
                    damping: b.damping,
                    injection: b.injection,
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineRecord {
                    from: l.from,
                    to: l.to,
                    susceptance: l.susceptance,
                    adjustable: l.is_adjustable(),
                    min: l.bounds.map(|b| b.min),
                    max: l.bounds.map(|b| b.max),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("network serializes")
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn num_generators(&self) -> usize {
        self.buses.iter().filter(|b| b.is_generator()).count()
    }

    pub fn bus_position(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Position of line `{a, b}` in edge order.
    pub fn line_position(&self, a: u32, b: u32) -> Option<usize> {
        let key = (a.min(b), a.max(b));
        self.lines.binary_search_by_key(&key, Line::key).ok()
    }

    /// Bus positions `(k, j)` per edge, `k` being the lower id.
    pub fn edge_endpoints(&self) -> Vec<(usize, usize)> {
        self.lines
            .iter()
            .map(|l| (self.index[&l.from], self.index[&l.to]))
            .collect()
    }

    pub fn total_injection(&self) -> f64 {
        self.buses.iter().map(|b| b.injection).sum()
    }

    pub fn injections(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.injection).collect()
    }

    /// `a_kj = V_k V_j B_kj` in edge order.
    pub fn coupling_coefficients(&self) -> Vec<f64> {
        self.lines
            .iter()
            .map(|l| {
                let vk = self.buses[self.index[&l.from]].voltage;
                let vj = self.buses[self.index[&l.to]].voltage;
                vk * vj * l.susceptance
            })
            .collect()
    }

    /// `V_k V_j` per edge: the sensitivity of `a_kj` to `B_kj`.
    pub fn voltage_products(&self) -> Vec<f64> {
        self.lines
            .iter()
            .map(|l| self.buses[self.index[&l.from]].voltage * self.buses[self.index[&l.to]].voltage)
            .collect()
    }

    /// Copy with the listed lines (by edge position) set to new susceptances.
    pub fn with_susceptances(&self, overrides: &[(usize, f64)]) -> Result<Self> {
        let mut lines = self.lines.clone();
        for &(e, value) in overrides {
            let l = lines
                .get_mut(e)
                .ok_or_else(|| Error::InvalidInput(format!("no line at position {e}")))?;
            l.susceptance = value;
        }
        Self::build(self.buses.clone(), lines)
    }

    /// Copy with the listed lines set to new susceptances and new bounds.
    pub fn retuned(&self, overrides: &[(usize, f64, SusceptanceBounds)]) -> Result<Self> {
        let mut lines = self.lines.clone();
        for &(e, value, bounds) in overrides {
            let l = lines
                .get_mut(e)
                .ok_or_else(|| Error::InvalidInput(format!("no line at position {e}")))?;
            l.susceptance = value;
            l.bounds = Some(bounds);
        }
        Self::build(self.buses.clone(), lines)
    }

    /// Edge position of the line written `"u-v"`.
    pub fn find_line(&self, key: &str) -> Result<usize> {
        let (a, b) = parse_line_key(key)?;
        self.line_position(a, b)
            .ok_or_else(|| Error::InvalidInput(format!("no line {a}-{b} in network")))
    }

    /// Copy with injections replaced (same bus order).
    pub fn with_injections(&self, injections: &[f64]) -> Result<Self> {
        if injections.len() != self.buses.len() {
            return Err(Error::Dimension("injection vector length".into()));
        }
        let mut buses = self.buses.clone();
        for (b, &p) in buses.iter_mut().zip(injections) {
            b.injection = p;
        }
        Self::new(buses, self.lines.clone())
    }

    /// Copy without the line at edge position `e`; may be islanded.
    pub fn without_line(&self, e: usize) -> Result<Self> {
        if e >= self.lines.len() {
            return Err(Error::InvalidInput(format!("no line at position {e}")));
        }
        let mut lines = self.lines.clone();
        lines.remove(e);
        Self::build(self.buses.clone(), lines)
    }
}

/// Parses `"u-v"` into `(min, max)` bus ids.
pub fn parse_line_key(key: &str) -> Result<(u32, u32)> {
    let bad = || Error::InvalidInput(format!("line must be written u-v, got {key:?}"));
    let (a, b) = key.trim().split_once('-').ok_or_else(bad)?;
    let a: u32 = a.trim().parse().map_err(|_| bad())?;
    let b: u32 = b.trim().parse().map_err(|_| bad())?;
    Ok((a.min(b), a.max(b)))
}

pub fn format_line_key((a, b): (u32, u32)) -> String {
    format!("{a}-{b}")
}

pub fn load_network(path: impl AsRef<Path>) -> Result<PowerNetwork> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    PowerNetwork::from_json_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = r#"{
        "buses": [
            {"id": 2, "kind": "load", "voltage": 1.0, "damping": 1.0, "injection": -0.1},
            {"id": 1, "kind": "generator", "voltage": 1.0, "inertia": 1.0, "damping": 1.0, "injection": 0.1}
        ],
        "lines": [{"from": 2, "to": 1, "susceptance": 1.0}]
    }"#;

    #[test]
    fn two_bus_balanced_pair() {
        let net = PowerNetwork::from_json_str(TWO_BUS).unwrap();
        assert_eq!(net.num_buses(), 2);
        assert_eq!(net.num_generators(), 1);
        assert!(net.buses()[0].is_generator());
        assert_eq!(net.lines()[0].key(), (1, 2));
    }

    #[test]
    fn unknown_key_rejected() {
        let text = TWO_BUS.replace("\"voltage\": 1.0, \"damping\"", "\"voltage\": 1.0, \"colour\": 3, \"damping\"");
        assert!(matches!(PowerNetwork::from_json_str(&text), Err(Error::Schema(_))));
    }

    #[test]
    fn disconnected_is_distinct() {
        let text = r#"{
            "buses": [
                {"id": 1, "kind": "generator", "voltage": 1.0, "inertia": 1.0, "damping": 1.0, "injection": 0.0},
                {"id": 2, "kind": "generator", "voltage": 1.0, "inertia": 1.0, "damping": 1.0, "injection": 0.0},
                {"id": 3, "kind": "load", "voltage": 1.0, "damping": 1.0, "injection": 0.0}
            ],
            "lines": [{"from": 1, "to": 2, "susceptance": 1.0}]
        }"#;
        match PowerNetwork::from_json_str(text) {
            Err(Error::Disconnected { unreachable, .. }) => assert_eq!(unreachable, vec![3]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_and_self_loop_lines() {
        let dup = TWO_BUS.replace(
            r#"[{"from": 2, "to": 1, "susceptance": 1.0}]"#,
            r#"[{"from": 2, "to": 1, "susceptance": 1.0}, {"from": 1, "to": 2, "susceptance": 2.0}]"#,
        );
        assert!(matches!(PowerNetwork::from_json_str(&dup), Err(Error::Schema(_))));
        let self_loop = TWO_BUS.replace(r#""from": 2, "to": 1"#, r#""from": 2, "to": 2"#);
        assert!(matches!(PowerNetwork::from_json_str(&self_loop), Err(Error::Schema(_))));
    }

    #[test]
    fn adjustable_bounds_checked() {
        let bad = TWO_BUS.replace(
            r#""susceptance": 1.0}"#,
            r#""susceptance": 1.0, "adjustable": true, "min": 1.5, "max": 2.0}"#,
        );
        assert!(matches!(PowerNetwork::from_json_str(&bad), Err(Error::Schema(_))));
        let missing = TWO_BUS.replace(r#""susceptance": 1.0}"#, r#""susceptance": 1.0, "adjustable": true}"#);
        assert!(matches!(PowerNetwork::from_json_str(&missing), Err(Error::Schema(_))));
    }

    #[test]
    fn generator_needs_inertia() {
        let text = TWO_BUS.replace(r#""inertia": 1.0, "#, "");
        assert!(matches!(PowerNetwork::from_json_str(&text), Err(Error::Schema(_))));
    }

    #[test]
    fn unit_coupling() {
        let net = PowerNetwork::from_json_str(TWO_BUS).unwrap();
        assert_eq!(net.coupling_coefficients(), vec![1.0]);
    }

    #[test]
    fn json_round_trip() {
        let net = PowerNetwork::from_json_str(TWO_BUS).unwrap();
        let again = PowerNetwork::from_json_str(&net.to_json_string()).unwrap();
        assert_eq!(net, again);
    }
}
