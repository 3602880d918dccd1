//! Network data model: buses, branches, generators and their cost curves.
//!
//! Quantities are stored in engineering units (MW, MVAr, per-unit voltages,
//! radians for phase shifts). Conversion to the per-unit optimisation
//! variables happens inside [`crate::opf`].

mod json;
mod matpower;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use json::{load_case_json, save_case_json};
pub use matpower::{parse_matpower_case, write_matpower_case};

/// External bus number as it appears in case files.
pub type BusId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("semantic error: {0}")]
    Semantic(String),
    #[error("unsupported case feature: {0}")]
    Unsupported(String),
    #[error("schema error at `{pointer}`: {message}")]
    Schema { pointer: String, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    /// MW
    pub p_demand: f64,
    /// MVAr
    pub q_demand: f64,
    /// Shunt conductance, MW consumed at 1.0 pu voltage.
    #[serde(default)]
    pub g_shunt: f64,
    /// Shunt susceptance, MVAr injected at 1.0 pu voltage.
    #[serde(default)]
    pub b_shunt: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub base_kv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub r: f64,
    pub x: f64,
    pub b_charging: f64,
    /// Off-nominal turns ratio; 1.0 for lines.
    pub tap_ratio: f64,
    /// Radians.
    pub phase_shift: f64,
    /// MVA; 0 means unlimited.
    pub s_max: f64,
    #[serde(default = "default_true")]
    pub in_service: bool,
}

/// Polynomial generation cost `c2·P² + c1·P + c0` with `P` in MW, result in $/h.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyCost {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl PolyCost {
    pub fn linear(c1: f64) -> Self {
        Self { c2: 0.0, c1, c0: 0.0 }
    }

    pub fn eval(&self, p_mw: f64) -> f64 {
        (self.c2 * p_mw + self.c1) * p_mw + self.c0
    }

    pub fn marginal(&self, p_mw: f64) -> f64 {
        2.0 * self.c2 * p_mw + self.c1
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            c2: self.c2 * factor,
            c1: self.c1 * factor,
            c0: self.c0 * factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub bus: BusId,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost: PolyCost,
    #[serde(default = "default_true")]
    pub in_service: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
}

impl NetworkCase {
    /// Map from external bus id to position in `buses`.
    pub fn bus_index(&self) -> HashMap<BusId, usize> {
        self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect()
    }

    pub fn bus_position(&self, id: BusId) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// N_b
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// N_t, in-service branches only.
    pub fn n_branches(&self) -> usize {
        self.branches.iter().filter(|b| b.in_service).count()
    }

    /// N_g, in-service generators only.
    pub fn n_generators(&self) -> usize {
        self.generators.iter().filter(|g| g.in_service).count()
    }

    /// N_d: buses with positive active demand.
    pub fn n_load_buses(&self) -> usize {
        self.load_buses().len()
    }

    pub fn load_buses(&self) -> Vec<BusId> {
        self.buses
            .iter()
            .filter(|b| b.p_demand > 0.0)
            .map(|b| b.id)
            .collect()
    }

    pub fn generator_buses(&self) -> BTreeSet<BusId> {
        self.generators
            .iter()
            .filter(|g| g.in_service)
            .map(|g| g.bus)
            .collect()
    }

    pub fn total_p_demand(&self) -> f64 {
        self.buses.iter().map(|b| b.p_demand).sum()
    }

    pub fn total_q_demand(&self) -> f64 {
        self.buses.iter().map(|b| b.q_demand).sum()
    }

    pub fn total_p_max(&self) -> f64 {
        self.generators
            .iter()
            .filter(|g| g.in_service)
            .map(|g| g.p_max)
            .sum()
    }

    pub fn total_p_min(&self) -> f64 {
        self.generators
            .iter()
            .filter(|g| g.in_service)
            .map(|g| g.p_min)
            .sum()
    }

    pub fn slack_bus(&self) -> Option<BusId> {
        self.buses.iter().find(|b| b.kind == BusKind::Slack).map(|b| b.id)
    }

    /// Checks every structural invariant of the case.
    pub fn validate(&self) -> Result<(), CaseError> {
        let sem = |m: String| Err(CaseError::Semantic(m));
        if !(self.base_mva.is_finite() && self.base_mva > 0.0) {
            return sem(format!("base_mva must be positive, got {}", self.base_mva));
        }
        if self.buses.is_empty() {
            return sem("case has no buses".into());
        }
        let mut ids = BTreeMap::new();
        for (row, bus) in self.buses.iter().enumerate() {
            if bus.id == 0 {
                return sem(format!("bus row {}: bus id must be positive", row + 1));
            }
            if ids.insert(bus.id, row).is_some() {
                return sem(format!("bus row {}: duplicate bus id {}", row + 1, bus.id));
            }
            let vals = [
                bus.p_demand,
                bus.q_demand,
                bus.g_shunt,
                bus.b_shunt,
                bus.v_min,
                bus.v_max,
                bus.base_kv,
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                return sem(format!("bus row {}: non-finite value", row + 1));
            }
            if bus.v_min > bus.v_max {
                return sem(format!(
                    "bus row {}: v_min {} exceeds v_max {}",
                    row + 1,
                    bus.v_min,
                    bus.v_max
                ));
            }
            if bus.v_max <= 0.0 {
                return sem(format!("bus row {}: v_max must be positive", row + 1));
            }
        }
        let n_slack = self.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        if n_slack == 0 {
            return sem("no slack bus".into());
        }
        if n_slack > 1 {
            return sem(format!("{n_slack} slack buses; exactly one is required"));
        }
        for (row, br) in self.branches.iter().enumerate() {
            let r = row + 1;
            for end in [br.from_bus, br.to_bus] {
                if !ids.contains_key(&end) {
                    return sem(format!("branch row {r}: unknown bus {end}"));
                }
            }
            if br.from_bus == br.to_bus {
                return sem(format!("branch row {r}: from_bus equals to_bus"));
            }
            let vals = [br.r, br.x, br.b_charging, br.tap_ratio, br.phase_shift, br.s_max];
            if vals.iter().any(|v| !v.is_finite()) {
                return sem(format!("branch row {r}: non-finite value"));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return sem(format!("branch row {r}: zero impedance"));
            }
            if br.s_max < 0.0 {
                return sem(format!("branch row {r}: negative s_max"));
            }
            if br.tap_ratio <= 0.0 {
                return sem(format!("branch row {r}: tap ratio must be positive"));
            }
        }
        for (row, g) in self.generators.iter().enumerate() {
            let r = row + 1;
            if !ids.contains_key(&g.bus) {
                return sem(format!("generator row {r}: unknown bus {}", g.bus));
            }
            let vals = [
                g.p_min, g.p_max, g.q_min, g.q_max, g.cost.c2, g.cost.c1, g.cost.c0,
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                return sem(format!("generator row {r}: non-finite value"));
            }
            if g.p_min > g.p_max {
                return sem(format!("generator row {r}: p_min exceeds p_max"));
            }
            if g.q_min > g.q_max {
                return sem(format!("generator row {r}: q_min exceeds q_max"));
            }
            if g.cost.c2 < 0.0 {
                return sem(format!("generator row {r}: non-convex cost (c2 < 0)"));
            }
        }
        if !self.is_connected() {
            return sem("network graph is disconnected".into());
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let index = self.bus_index();
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for br in self.branches.iter().filter(|b| b.in_service) {
            if let (Some(&f), Some(&t)) = (index.get(&br.from_bus), index.get(&br.to_bus)) {
                adj[f].push(t);
                adj[t].push(f);
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Multiplies every generator cost curve by `factor`.
    pub fn with_scaled_costs(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for g in &mut out.generators {
            g.cost = g.cost.scaled(factor);
        }
        out
    }
}

/// Proportional load scaling at constant power factor.
pub fn scale_loads(case: &NetworkCase, factor: f64) -> Result<NetworkCase, CaseError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(CaseError::InvalidArgument(format!(
            "load scaling factor must be positive, got {factor}"
        )));
    }
    let mut out = case.clone();
    for bus in &mut out.buses {
        bus.p_demand *= factor;
        bus.q_demand *= factor;
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub const CASE14: &str = include_str!("../../fixtures/case14.m");
    pub const CASE30: &str = include_str!("../../fixtures/case30.m");
    pub const CASE24: &str = include_str!("../../fixtures/case24_ieee_rts.m");

    /// Two buses, one line, one generator, 50 MW load at bus 2.
    pub fn two_bus() -> NetworkCase {
        NetworkCase {
            name: "two_bus".into(),
            base_mva: 100.0,
            buses: vec![
                Bus {
                    id: 1,
                    kind: BusKind::Slack,
                    p_demand: 0.0,
                    q_demand: 0.0,
                    g_shunt: 0.0,
                    b_shunt: 0.0,
                    v_min: 0.9,
                    v_max: 1.1,
                    base_kv: 230.0,
                },
                Bus {
                    id: 2,
                    kind: BusKind::Pq,
                    p_demand: 50.0,
                    q_demand: 0.0,
                    g_shunt: 0.0,
                    b_shunt: 0.0,
                    v_min: 0.9,
                    v_max: 1.1,
                    base_kv: 230.0,
                },
            ],
            branches: vec![Branch {
                from_bus: 1,
                to_bus: 2,
                r: 0.0,
                x: 0.1,
                b_charging: 0.0,
                tap_ratio: 1.0,
                phase_shift: 0.0,
                s_max: 0.0,
                in_service: true,
            }],
            generators: vec![Generator {
                bus: 1,
                p_min: 0.0,
                p_max: 200.0,
                q_min: -100.0,
                q_max: 100.0,
                cost: PolyCost::linear(20.0),
                in_service: true,
            }],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn two_bus_counts() {
        let c = two_bus();
        c.validate().unwrap();
        assert_eq!(c.n_buses(), 2);
        assert_eq!(c.n_branches(), 1);
        assert_eq!(c.n_generators(), 1);
        assert_eq!(c.load_buses(), vec![2]);
    }

    #[test]
    fn scale_identity_and_linearity() {
        let c = parse_matpower_case(CASE14).unwrap();
        assert_eq!(scale_loads(&c, 1.0).unwrap(), c);
        let half = scale_loads(&c, 0.5).unwrap();
        assert!((half.total_p_demand() - 129.5).abs() < 1e-9);
        let c30 = parse_matpower_case(CASE30).unwrap();
        let up = scale_loads(&c30, 1.1).unwrap();
        assert!((up.total_p_demand() - 208.12).abs() < 1e-9);
        assert_eq!(up.generators, c30.generators);
        assert_eq!(up.branches, c30.branches);
    }

    #[test]
    fn scale_rejects_nonpositive() {
        let c = two_bus();
        assert!(matches!(scale_loads(&c, 0.0), Err(CaseError::InvalidArgument(_))));
        assert!(matches!(
            scale_loads(&c, -1.0),
            Err(CaseError::InvalidArgument(_))
        ));
        assert!(scale_loads(&c, f64::NAN).is_err());
    }

    #[test]
    fn validate_catches_bad_cases() {
        let mut c = two_bus();
        c.branches[0].to_bus = 7;
        assert!(matches!(c.validate(), Err(CaseError::Semantic(m)) if m.contains("unknown bus 7")));

        let mut c = two_bus();
        c.buses[0].kind = BusKind::Pv;
        assert!(matches!(c.validate(), Err(CaseError::Semantic(m)) if m.contains("no slack")));

        let mut c = two_bus();
        c.branches[0].in_service = false;
        assert!(matches!(c.validate(), Err(CaseError::Semantic(m)) if m.contains("disconnected")));

        let mut c = two_bus();
        c.generators[0].cost.c2 = -1.0;
        assert!(c.validate().is_err());

        let mut c = two_bus();
        c.branches[0].x = 0.0;
        assert!(c.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn scaling_composes(a in 0.05f64..5.0, b in 0.05f64..5.0) {
                let c = parse_matpower_case(CASE30).unwrap();
                let twice = scale_loads(&scale_loads(&c, a).unwrap(), b).unwrap();
                let once = scale_loads(&c, a * b).unwrap();
                for (x, y) in twice.buses.iter().zip(&once.buses) {
                    prop_assert!((x.p_demand - y.p_demand).abs() <= 1e-12 * y.p_demand.abs().max(1.0));
                    prop_assert!((x.q_demand - y.q_demand).abs() <= 1e-12 * y.q_demand.abs().max(1.0));
                }
            }
        }
    }
}
