//! DER dispatch modes, study driver and final siting plans.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::load::LoadModel;
use crate::mcs::{rank_buses, run_mcs, McsConfig, McsError, McsResult};
use crate::net::{BusId, CaseError, Generator, NetworkCase, PolyCost};
use crate::opf::validity_range;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("unknown bus {0}")]
    UnknownBus(BusId),
    #[error("invalid DER unit: {0}")]
    InvalidUnit(String),
    #[error("invalid candidate buses: {0}")]
    InvalidCandidates(String),
    #[error("no DER generator matching the unit at bus {0}")]
    NotApplied(BusId),
    #[error(transparent)]
    Case(#[from] CaseError),
}

/// How the OPF may use a DER.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerMode {
    /// Fixed (P, Q) injection, modelled as a demand offset.
    NonDispatchablePq,
    /// Fixed P, Q free within ±q_size.
    DispatchableQ,
    /// P free within [0, p_size], Q free within ±q_size.
    DispatchablePq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerUnit {
    /// MW
    pub p_size: f64,
    /// MVAr
    pub q_size: f64,
    pub mode: DerMode,
}

impl DerUnit {
    pub fn new(p_size: f64, q_size: f64, mode: DerMode) -> Self {
        Self { p_size, q_size, mode }
    }

    pub fn validate(&self) -> Result<(), PlacementError> {
        if !(self.p_size.is_finite() && self.p_size > 0.0) {
            return Err(PlacementError::InvalidUnit(format!(
                "p_size must be positive, got {}",
                self.p_size
            )));
        }
        if !(self.q_size.is_finite() && self.q_size >= 0.0) {
            return Err(PlacementError::InvalidUnit(format!(
                "q_size must be nonnegative, got {}",
                self.q_size
            )));
        }
        Ok(())
    }

    /// Same unit with active size `p` and Q at the original Q/P ratio.
    pub fn scaled_to(&self, p: f64) -> Self {
        let ratio = if self.p_size > 0.0 {
            self.q_size / self.p_size
        } else {
            0.0
        };
        Self {
            p_size: p,
            q_size: p * ratio,
            mode: self.mode,
        }
    }

    fn generator(&self, bus: BusId) -> Generator {
        let (p_min, p_max) = match self.mode {
            DerMode::DispatchablePq => (0.0, self.p_size),
            _ => (self.p_size, self.p_size),
        };
        Generator {
            bus,
            p_min,
            p_max,
            q_min: -self.q_size,
            q_max: self.q_size,
            cost: PolyCost::default(),
            in_service: true,
        }
    }
}

/// Adds `unit` at `bus`. Non-dispatchable units offset the bus demand;
/// dispatchable units become zero-cost generators appended after the
/// existing ones, so constraint indices of the original case are kept.
pub fn apply_der(case: &NetworkCase, bus: BusId, unit: &DerUnit) -> Result<NetworkCase, PlacementError> {
    let pos = case.bus_position(bus).ok_or(PlacementError::UnknownBus(bus))?;
    if unit.p_size == 0.0 && unit.q_size == 0.0 {
        return Ok(case.clone());
    }
    unit.validate()?;
    let mut out = case.clone();
    match unit.mode {
        DerMode::NonDispatchablePq => {
            out.buses[pos].p_demand -= unit.p_size;
            out.buses[pos].q_demand -= unit.q_size;
        }
        DerMode::DispatchableQ | DerMode::DispatchablePq => {
            out.generators.push(unit.generator(bus));
        }
    }
    Ok(out)
}

/// Inverse of [`apply_der`].
pub fn remove_der(case: &NetworkCase, bus: BusId, unit: &DerUnit) -> Result<NetworkCase, PlacementError> {
    let pos = case.bus_position(bus).ok_or(PlacementError::UnknownBus(bus))?;
    let mut out = case.clone();
    match unit.mode {
        DerMode::NonDispatchablePq => {
            out.buses[pos].p_demand += unit.p_size;
            out.buses[pos].q_demand += unit.q_size;
        }
        DerMode::DispatchableQ | DerMode::DispatchablePq => {
            let g = unit.generator(bus);
            let at = out
                .generators
                .iter()
                .rposition(|x| *x == g)
                .ok_or(PlacementError::NotApplied(bus))?;
            out.generators.remove(at);
        }
    }
    Ok(out)
}

/// Where trial units may go.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Candidates {
    Named(CandidateSet),
    Explicit(Vec<BusId>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSet {
    AllLoadBuses,
}

#[allow(non_upper_case_globals)]
impl Candidates {
    pub const AllLoadBuses: Candidates = Candidates::Named(CandidateSet::AllLoadBuses);
}

impl Default for Candidates {
    fn default() -> Self {
        Self::AllLoadBuses
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerSpec {
    /// Largest first.
    pub units: Vec<DerUnit>,
    pub candidates: Candidates,
    pub exclude_generator_buses: bool,
    /// Skip re-solve and penalization; store pre-placement multipliers.
    pub baseline: bool,
}

impl DerSpec {
    /// Sorts `units` by active size, largest first (stable, so equal sizes
    /// keep their listing order).
    pub fn new(mut units: Vec<DerUnit>, candidates: Candidates) -> Result<Self, PlacementError> {
        units.sort_by(|a, b| b.p_size.total_cmp(&a.p_size));
        let spec = Self {
            units,
            candidates,
            exclude_generator_buses: false,
            baseline: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PlacementError> {
        if self.units.is_empty() {
            return Err(PlacementError::InvalidUnit("no DER units given".into()));
        }
        for u in &self.units {
            u.validate()?;
        }
        if self.units.windows(2).any(|w| w[0].p_size < w[1].p_size) {
            return Err(PlacementError::InvalidUnit(
                "units must be sorted by p_size, largest first".into(),
            ));
        }
        Ok(())
    }

    /// Load buses allowed to host a unit, in bus-id order.
    pub fn resolve_candidates(&self, case: &NetworkCase) -> Result<Vec<BusId>, PlacementError> {
        let load: Vec<BusId> = case.load_buses();
        let gens = case.generator_buses();
        let mut out: Vec<BusId> = match &self.candidates {
            Candidates::Named(CandidateSet::AllLoadBuses) => load,
            Candidates::Explicit(list) => {
                for b in list {
                    if case.bus_position(*b).is_none() {
                        return Err(PlacementError::UnknownBus(*b));
                    }
                    if !load.contains(b) {
                        return Err(PlacementError::InvalidCandidates(format!(
                            "bus {b} has no active demand"
                        )));
                    }
                }
                list.clone()
            }
        };
        if self.exclude_generator_buses {
            out.retain(|b| !gens.contains(b));
        }
        out.sort_unstable();
        out.dedup();
        if out.len() < self.units.len() {
            return Err(PlacementError::InvalidCandidates(format!(
                "{} candidate buses for {} units",
                out.len(),
                self.units.len()
            )));
        }
        Ok(out)
    }

    /// Same sizes and candidates, configured for `mode`.
    pub fn for_mode(&self, mode: StudyMode) -> Self {
        let (dispatch, baseline) = mode.settings();
        Self {
            units: self
                .units
                .iter()
                .map(|u| DerUnit { mode: dispatch, ..*u })
                .collect(),
            baseline,
            ..self.clone()
        }
    }
}

/// The four case studies: baseline and full runs with fixed injections,
/// then reactive and fully dispatchable units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMode {
    Case1,
    Case2,
    Case3,
    Case4,
}

impl StudyMode {
    pub const ALL: [StudyMode; 4] = [Self::Case1, Self::Case2, Self::Case3, Self::Case4];

    pub fn settings(self) -> (DerMode, bool) {
        match self {
            Self::Case1 => (DerMode::NonDispatchablePq, true),
            Self::Case2 => (DerMode::NonDispatchablePq, false),
            Self::Case3 => (DerMode::DispatchableQ, false),
            Self::Case4 => (DerMode::DispatchablePq, false),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Case1 => "case1",
            Self::Case2 => "case2",
            Self::Case3 => "case3",
            Self::Case4 => "case4",
        }
    }
}

impl std::fmt::Display for StudyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRange {
    /// MW
    pub delta_p_max: f64,
    pub cap: f64,
    pub left: Vec<String>,
    pub entered: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedSite {
    pub bus: BusId,
    pub unit: DerUnit,
    /// $/MWh
    pub weighted_lambda: f64,
    pub penalties: u64,
    pub validity_range: Option<SiteRange>,
    /// Why the range could not be computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedBus {
    pub bus: BusId,
    pub weighted_lambda: f64,
    pub penalties: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub case_name: String,
    pub mode: StudyMode,
    pub seed: u64,
    pub sigma: f64,
    pub samples: usize,
    pub converged: bool,
    pub failures: usize,
    pub sites: Vec<PlannedSite>,
    /// Every candidate bus, best first.
    pub ranking: Vec<RankedBus>,
}

impl PlacementPlan {
    pub fn buses(&self) -> Vec<BusId> {
        self.sites.iter().map(|s| s.bus).collect()
    }

    /// Rows: bus and size, in the layout of a siting table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} / {}  (seed {}, {} samples, sigma {:.3e}{})\n",
            self.case_name,
            self.mode,
            self.seed,
            self.samples,
            self.sigma,
            if self.converged { "" } else { ", NOT converged" }
        );
        out.push_str(&format!(
            "{:>6} {:>18} {:>14} {:>10} {:>12}\n",
            "bus", "P (MW); Q (MVAr)", "avg lambda", "penalties", "range (MW)"
        ));
        for s in &self.sites {
            let range = match &s.validity_range {
                Some(r) if r.left.is_empty() && r.entered.is_empty() => format!(">= {:.1}", r.cap),
                Some(r) => format!("{:.1}", r.delta_p_max),
                None => "n/a".into(),
            };
            out.push_str(&format!(
                "{:>6} {:>18} {:>14.4} {:>10} {:>12}\n",
                s.bus,
                format!("{};{}", s.unit.p_size, s.unit.q_size),
                s.weighted_lambda,
                s.penalties,
                range
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRun {
    pub plan: PlacementPlan,
    pub mcs: McsResult,
}

/// Runs the sampling loop for one study mode and turns the averages into a
/// plan. Validity ranges are probed on `case` as given (the peak level).
pub fn run_study(
    case: &NetworkCase,
    model: &LoadModel,
    spec: &DerSpec,
    mode: StudyMode,
    config: &McsConfig,
) -> Result<StudyRun, StudyError> {
    let spec = spec.for_mode(mode);
    let candidates = spec.resolve_candidates(case)?;
    let mcs = run_mcs(case, model, &spec, config)?;
    let bus_ids: Vec<BusId> = case.buses.iter().map(|b| b.id).collect();
    let order = rank_buses(&bus_ids, &mcs.stats.mean, &candidates);
    let ranked: Vec<RankedBus> = order
        .iter()
        .map(|b| {
            let k = bus_ids.iter().position(|x| x == b).unwrap();
            RankedBus {
                bus: *b,
                weighted_lambda: mcs.stats.mean[k],
                penalties: mcs.stats.penalties[k],
            }
        })
        .collect();
    let opf = config.opf;
    let sites = spec
        .units
        .iter()
        .zip(&ranked)
        .map(|(unit, r)| {
            let (validity_range, range_error) = match validity_range(case, r.bus, unit, &opf) {
                Ok(v) => (
                    Some(SiteRange {
                        delta_p_max: v.delta_p_max,
                        cap: v.cap,
                        left: v.left.iter().map(ToString::to_string).collect(),
                        entered: v.entered.iter().map(ToString::to_string).collect(),
                    }),
                    None,
                ),
                Err(e) => (None, Some(e.to_string())),
            };
            PlannedSite {
                bus: r.bus,
                unit: *unit,
                weighted_lambda: r.weighted_lambda,
                penalties: r.penalties,
                validity_range,
                range_error,
            }
        })
        .collect();
    let plan = PlacementPlan {
        case_name: case.name.clone(),
        mode,
        seed: config.rng_seed,
        sigma: mcs.sigma,
        samples: mcs.samples,
        converged: mcs.converged,
        failures: mcs.failures,
        sites,
        ranking: ranked,
    };
    Ok(StudyRun { plan, mcs })
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Mcs(#[from] McsError),
    #[error("plans are not comparable: {0}")]
    Mismatched(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Equal,
    Differ,
}

/// A qualitative claim about two modes' site sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub a: StudyMode,
    pub b: StudyMode,
    pub relation: Relation,
    #[serde(default)]
    pub note: String,
}

/// Published sites for one mode, largest unit first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSites {
    pub mode: StudyMode,
    pub buses: Vec<BusId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDiff {
    pub a: StudyMode,
    pub b: StudyMode,
    pub same_set: bool,
    pub same_order: bool,
    pub only_a: Vec<BusId>,
    pub only_b: Vec<BusId>,
}

impl PairDiff {
    pub fn differs(&self) -> bool {
        !self.same_order
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationCheck {
    #[serde(flatten)]
    pub expectation: Expectation,
    /// None when one of the two modes was not run.
    pub holds: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub mode: StudyMode,
    pub expected: Vec<BusId>,
    pub actual: Vec<BusId>,
    pub same_set: bool,
    pub same_order: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: StudyMode,
    pub buses: Vec<BusId>,
    pub weighted_lambda: Vec<f64>,
    pub ranges_mw: Vec<Option<f64>>,
    pub penalties: Vec<u64>,
    pub converged: bool,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub case_name: String,
    pub rows: Vec<ModeRow>,
    pub pairs: Vec<PairDiff>,
    pub expectations: Vec<ExpectationCheck>,
    pub references: Vec<ReferenceCheck>,
    /// The penalization rule in force, so results can be read against it.
    pub penalty_rule: String,
}

pub const PENALTY_RULE: &str = "a placed bus is penalized when a constraint binding before placement \
is no longer binding after it and the bus price is within price_tol of the system minimum";

impl ComparisonReport {
    pub fn flagged(&self) -> usize {
        self.pairs.iter().filter(|p| p.differs()).count()
    }

    /// Expectations that were evaluated and do not hold.
    pub fn deviations(&self) -> Vec<&ExpectationCheck> {
        self.expectations
            .iter()
            .filter(|e| e.holds == Some(false))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("Comparison for {}\n\n", self.case_name);
        out.push_str(&format!(
            "{:<6} {:<16} {:<30} {:<9}\n",
            "mode", "buses", "avg lambda", "converged"
        ));
        for r in &self.rows {
            let buses = r
                .buses
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(", ");
            let lam = r
                .weighted_lambda
                .iter()
                .map(|l| format!("{l:.3}"))
                .collect::<Vec<_>>()
                .join(", ");
            out.push_str(&format!(
                "{:<6} {:<16} {:<30} {:<9}\n",
                r.mode, buses, lam, r.converged
            ));
        }
        out.push('\n');
        for p in &self.pairs {
            let what = if !p.same_set {
                format!(
                    "differ (only {}: {:?}, only {}: {:?})",
                    p.a, p.only_a, p.b, p.only_b
                )
            } else if !p.same_order {
                "same set, different order".into()
            } else {
                "unchanged".into()
            };
            out.push_str(&format!("{} vs {}: {}\n", p.a, p.b, what));
        }
        if !self.expectations.is_empty() {
            out.push_str("\nExpectations\n");
            for e in &self.expectations {
                let status = match e.holds {
                    Some(true) => "holds",
                    Some(false) => "DEVIATION",
                    None => "not evaluated",
                };
                let rel = match e.expectation.relation {
                    Relation::Equal => "equal",
                    Relation::Differ => "differ",
                };
                out.push_str(&format!(
                    "  {} vs {} site sets {}: {}{}\n",
                    e.expectation.a,
                    e.expectation.b,
                    rel,
                    status,
                    if e.expectation.note.is_empty() {
                        String::new()
                    } else {
                        format!("  ({})", e.expectation.note)
                    }
                ));
            }
        }
        if !self.references.is_empty() {
            out.push_str("\nPublished sites\n");
            for r in &self.references {
                out.push_str(&format!(
                    "  {}: expected {:?}, got {:?} (set {}, order {})\n",
                    r.mode,
                    r.expected,
                    r.actual,
                    if r.same_set { "matches" } else { "differs" },
                    if r.same_order { "matches" } else { "differs" },
                ));
            }
        }
        out.push_str(&format!("\nPenalty rule: {}\n", self.penalty_rule));
        out
    }
}

fn set_of(v: &[BusId]) -> BTreeSet<BusId> {
    v.iter().copied().collect()
}

/// Tabulates the site sets of several modes of one study.
pub fn compare_studies(
    plans: &[PlacementPlan],
    expectations: &[Expectation],
    references: &[ReferenceSites],
) -> Result<ComparisonReport, StudyError> {
    let first = plans
        .first()
        .ok_or_else(|| StudyError::Mismatched("no plans".into()))?;
    let sizes = |p: &PlacementPlan| -> Vec<(f64, f64)> {
        p.sites.iter().map(|s| (s.unit.p_size, s.unit.q_size)).collect()
    };
    for p in plans {
        if p.case_name != first.case_name {
            return Err(StudyError::Mismatched(format!(
                "cases {} and {}",
                first.case_name, p.case_name
            )));
        }
        if sizes(p) != sizes(first) {
            return Err(StudyError::Mismatched("unit sizes differ".into()));
        }
    }
    let rows: Vec<ModeRow> = plans
        .iter()
        .map(|p| ModeRow {
            mode: p.mode,
            buses: p.buses(),
            weighted_lambda: p.sites.iter().map(|s| s.weighted_lambda).collect(),
            ranges_mw: p
                .sites
                .iter()
                .map(|s| s.validity_range.as_ref().map(|r| r.delta_p_max))
                .collect(),
            penalties: p.sites.iter().map(|s| s.penalties).collect(),
            converged: p.converged,
            samples: p.samples,
        })
        .collect();
    let mut pairs = Vec::new();
    for i in 0..plans.len() {
        for j in i + 1..plans.len() {
            let (a, b) = (plans[i].buses(), plans[j].buses());
            let (sa, sb) = (set_of(&a), set_of(&b));
            pairs.push(PairDiff {
                a: plans[i].mode,
                b: plans[j].mode,
                same_set: sa == sb,
                same_order: a == b,
                only_a: sa.difference(&sb).copied().collect(),
                only_b: sb.difference(&sa).copied().collect(),
            });
        }
    }
    let find = |m: StudyMode| plans.iter().find(|p| p.mode == m);
    let expectations = expectations
        .iter()
        .map(|e| {
            let holds = match (find(e.a), find(e.b)) {
                (Some(a), Some(b)) => {
                    let same = set_of(&a.buses()) == set_of(&b.buses());
                    Some(match e.relation {
                        Relation::Equal => same,
                        Relation::Differ => !same,
                    })
                }
                _ => None,
            };
            ExpectationCheck {
                expectation: e.clone(),
                holds,
            }
        })
        .collect();
    let references = references
        .iter()
        .filter_map(|r| {
            find(r.mode).map(|p| {
                let actual = p.buses();
                ReferenceCheck {
                    mode: r.mode,
                    same_set: set_of(&actual) == set_of(&r.buses),
                    same_order: actual == r.buses,
                    expected: r.buses.clone(),
                    actual,
                }
            })
        })
        .collect();
    Ok(ComparisonReport {
        case_name: first.case_name.clone(),
        rows,
        pairs,
        expectations,
        references,
        penalty_rule: PENALTY_RULE.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcs::PenaltyMode;
    use crate::net::fixtures::*;
    use crate::net::parse_matpower_case;

    fn nd(p: f64, q: f64) -> DerUnit {
        DerUnit::new(p, q, DerMode::NonDispatchablePq)
    }

    #[test]
    fn non_dispatchable_offsets_demand() {
        let mut c = two_bus();
        c.buses[1].p_demand = 40.0;
        c.buses[1].q_demand = 15.0;
        let out = apply_der(&c, 2, &nd(30.0, 10.0)).unwrap();
        assert_eq!(out.buses[1].p_demand, 10.0);
        assert_eq!(out.buses[1].q_demand, 5.0);
        assert_eq!(out.generators.len(), c.generators.len());
        assert_eq!(remove_der(&out, 2, &nd(30.0, 10.0)).unwrap(), c);
    }

    #[test]
    fn dispatchable_units_add_generators() {
        let c = parse_matpower_case(CASE14).unwrap();
        let u = DerUnit::new(60.0, 20.0, DerMode::DispatchablePq);
        let out = apply_der(&c, 9, &u).unwrap();
        let g = out.generators.last().unwrap();
        assert_eq!(
            (g.bus, g.p_min, g.p_max, g.q_min, g.q_max),
            (9, 0.0, 60.0, -20.0, 20.0)
        );
        assert_eq!(g.cost, PolyCost::default());
        assert_eq!(out.total_p_demand(), c.total_p_demand());
        assert_eq!(remove_der(&out, 9, &u).unwrap(), c);

        let q = DerUnit::new(30.0, 10.0, DerMode::DispatchableQ);
        let out = apply_der(&c, 9, &q).unwrap();
        let g = out.generators.last().unwrap();
        assert_eq!((g.p_min, g.p_max, g.q_min, g.q_max), (30.0, 30.0, -10.0, 10.0));
        assert!(matches!(
            remove_der(&c, 9, &q),
            Err(PlacementError::NotApplied(9))
        ));
    }

    #[test]
    fn apply_rejects_unknown_bus_and_bad_units() {
        let c = two_bus();
        assert!(matches!(
            apply_der(&c, 7, &nd(1.0, 0.0)),
            Err(PlacementError::UnknownBus(7))
        ));
        assert!(apply_der(&c, 2, &nd(-1.0, 0.0)).is_err());
    }

    #[test]
    fn scaled_probe_keeps_ratio() {
        let u = DerUnit::new(30.0, 10.0, DerMode::DispatchableQ).scaled_to(15.0);
        assert_eq!((u.p_size, u.q_size), (15.0, 5.0));
    }

    #[test]
    fn spec_sorting_and_candidates() {
        let s = DerSpec::new(
            vec![nd(10.0, 3.33), nd(30.0, 10.0), nd(20.0, 6.66)],
            Candidates::AllLoadBuses,
        )
        .unwrap();
        let p: Vec<f64> = s.units.iter().map(|u| u.p_size).collect();
        assert_eq!(p, vec![30.0, 20.0, 10.0]);
        let c = parse_matpower_case(CASE14).unwrap();
        let all = s.resolve_candidates(&c).unwrap();
        assert_eq!(all.len(), 11);
        assert!(all.iter().all(|b| c.load_buses().contains(b)));
        let mut ex = s.clone();
        ex.exclude_generator_buses = true;
        let gens = c.generator_buses();
        assert!(ex
            .resolve_candidates(&c)
            .unwrap()
            .iter()
            .all(|b| !gens.contains(b)));
        ex.candidates = Candidates::Explicit(vec![1, 9, 10]);
        assert!(matches!(
            ex.resolve_candidates(&c),
            Err(PlacementError::InvalidCandidates(_))
        ));
        ex.candidates = Candidates::Explicit(vec![9, 10]);
        ex.exclude_generator_buses = false;
        assert!(matches!(
            ex.resolve_candidates(&c),
            Err(PlacementError::InvalidCandidates(_))
        ));
    }

    #[test]
    fn modes_map_to_dispatch() {
        let s = DerSpec::new(vec![nd(30.0, 10.0)], Candidates::AllLoadBuses).unwrap();
        assert!(s.for_mode(StudyMode::Case1).baseline);
        assert!(!s.for_mode(StudyMode::Case2).baseline);
        assert_eq!(s.for_mode(StudyMode::Case3).units[0].mode, DerMode::DispatchableQ);
        assert_eq!(
            s.for_mode(StudyMode::Case4).units[0].mode,
            DerMode::DispatchablePq
        );
        let toml_like: Candidates = serde_json::from_str("\"all_load_buses\"").unwrap();
        assert_eq!(toml_like, Candidates::AllLoadBuses);
        let list: Candidates = serde_json::from_str("[3, 9]").unwrap();
        assert_eq!(list, Candidates::Explicit(vec![3, 9]));
    }

    fn uniform_three_bus() -> NetworkCase {
        // lossless radial feeder, one generator: every bus has the same price
        let mut c = two_bus();
        let mut b3 = c.buses[1].clone();
        b3.id = 3;
        b3.p_demand = 20.0;
        c.buses.push(b3);
        let mut br = c.branches[0].clone();
        br.from_bus = 2;
        br.to_bus = 3;
        c.branches.push(br);
        c
    }

    #[test]
    fn uniform_prices_tie_break_by_bus_id() {
        let c = uniform_three_bus();
        let m = LoadModel::constant(1.0).unwrap();
        let s = DerSpec::new(vec![nd(5.0, 0.0)], Candidates::AllLoadBuses).unwrap();
        let cfg = McsConfig {
            min_samples: 5,
            ..McsConfig::default()
        };
        let a = run_study(&c, &m, &s, StudyMode::Case2, &cfg).unwrap();
        assert_eq!(a.plan.buses(), vec![2]);
        let b = run_study(&c, &m, &s, StudyMode::Case2, &cfg).unwrap();
        assert_eq!(a.plan, b.plan);
    }

    fn congested() -> NetworkCase {
        let mut c = two_bus();
        c.branches[0].s_max = 40.0;
        c.generators.push(Generator {
            bus: 2,
            p_min: 0.0,
            p_max: 200.0,
            q_min: -100.0,
            q_max: 100.0,
            cost: PolyCost::linear(30.0),
            in_service: true,
        });
        // a second load bus behind bus 1 so there is a choice of sites
        let mut b3 = c.buses[1].clone();
        b3.id = 3;
        b3.p_demand = 10.0;
        c.buses.push(b3);
        let mut br = c.branches[0].clone();
        br.from_bus = 1;
        br.to_bus = 3;
        br.s_max = 0.0;
        c.branches.push(br);
        c
    }

    #[test]
    fn congested_baseline_vs_full() {
        let c = congested();
        let m = LoadModel::constant(1.0).unwrap();
        let s = DerSpec::new(vec![nd(20.0, 0.0)], Candidates::AllLoadBuses).unwrap();
        let cfg = McsConfig {
            min_samples: 5,
            ..McsConfig::default()
        };
        let base = run_study(&c, &m, &s, StudyMode::Case1, &cfg).unwrap();
        assert_eq!(base.plan.buses(), vec![2]);
        assert!((base.plan.sites[0].weighted_lambda - 30.0).abs() < 1e-3);
        assert_eq!(base.plan.sites[0].penalties, 0);

        let full = run_study(&c, &m, &s, StudyMode::Case2, &cfg).unwrap();
        let rank2 = full.plan.ranking.iter().find(|r| r.bus == 2).unwrap();
        assert_eq!(rank2.penalties, 5);
        assert_eq!(rank2.weighted_lambda, 0.0);
        assert_eq!(full.plan.buses(), vec![3]);

        let pv = McsConfig {
            penalty_mode: PenaltyMode::PostValue,
            ..cfg
        };
        let full = run_study(&c, &m, &s, StudyMode::Case2, &pv).unwrap();
        let rank2 = full.plan.ranking.iter().find(|r| r.bus == 2).unwrap();
        assert!((rank2.weighted_lambda - 20.0).abs() < 1e-3);
        // the site range at bus 2 is the 10 MW of the congested line
        let r = base.plan.sites[0].validity_range.as_ref().unwrap();
        assert!((r.delta_p_max - 10.0).abs() <= cfg.opf.range_tol, "{r:?}");
        assert!(r.left.iter().any(|c| c == "flow_from branch 1"), "{r:?}");
    }

    fn plan(mode: StudyMode, buses: &[BusId]) -> PlacementPlan {
        PlacementPlan {
            case_name: "x".into(),
            mode,
            seed: 1,
            sigma: 0.0,
            samples: 10,
            converged: true,
            failures: 0,
            sites: buses
                .iter()
                .zip([30.0, 20.0, 10.0])
                .map(|(b, p)| PlannedSite {
                    bus: *b,
                    unit: nd(p, p / 3.0),
                    weighted_lambda: 1.0,
                    penalties: 0,
                    validity_range: None,
                    range_error: None,
                })
                .collect(),
            ranking: Vec::new(),
        }
    }

    #[test]
    fn comparison_flags_differences() {
        let same = [
            plan(StudyMode::Case1, &[3, 10, 9]),
            plan(StudyMode::Case2, &[3, 10, 9]),
        ];
        let r = compare_studies(&same, &[], &[]).unwrap();
        assert_eq!(r.flagged(), 0);

        let plans = [
            plan(StudyMode::Case1, &[3, 10, 9]),
            plan(StudyMode::Case2, &[10, 9, 7]),
            plan(StudyMode::Case3, &[10, 9, 7]),
        ];
        let exp = [
            Expectation {
                a: StudyMode::Case1,
                b: StudyMode::Case2,
                relation: Relation::Differ,
                note: String::new(),
            },
            Expectation {
                a: StudyMode::Case2,
                b: StudyMode::Case3,
                relation: Relation::Equal,
                note: String::new(),
            },
            Expectation {
                a: StudyMode::Case3,
                b: StudyMode::Case4,
                relation: Relation::Equal,
                note: String::new(),
            },
        ];
        let refs = [ReferenceSites {
            mode: StudyMode::Case1,
            buses: vec![3, 10, 9],
        }];
        let r = compare_studies(&plans, &exp, &refs).unwrap();
        assert_eq!(r.flagged(), 2);
        assert_eq!(r.pairs[0].only_a, vec![3]);
        assert_eq!(r.pairs[0].only_b, vec![7]);
        let holds: Vec<Option<bool>> = r.expectations.iter().map(|e| e.holds).collect();
        assert_eq!(holds, vec![Some(true), Some(true), None]);
        assert!(r.deviations().is_empty());
        assert!(r.references[0].same_order);
        assert!(r.to_text().contains("case1 vs case2: differ"));

        let mut other = plan(StudyMode::Case2, &[1, 2, 3]);
        other.case_name = "y".into();
        assert!(compare_studies(&[plans[0].clone(), other], &[], &[]).is_err());
    }
}
