//! AC optimal power flow with dual extraction.
//!
//! [`solve_opf`] minimises total generation cost subject to the AC power
//! balance at every bus and to generator, voltage and branch-flow limits.
//! The returned [`OpfSolution`] carries the nodal multipliers of the
//! power-balance equalities (`lambda_p`, `lambda_q`), one nonnegative
//! multiplier per inequality and the set of binding inequalities.

mod formulation;
mod ipm;
mod network;
mod sensitivity;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{CaseError, NetworkCase};
use formulation::{AcOpf, FlowEnd};
use ipm::{IpmSettings, IpmStatus, Nlp};

pub use network::{injections, BranchFlow, Injections};
pub use sensitivity::{finite_difference_lambda, validity_range, RangeProbe, ValidityRange};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpfError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error("case has no in-service generator")]
    NoGenerator,
    #[error("infeasible: {}", format_violations(.violations))]
    Infeasible { violations: Vec<Violation> },
    #[error("iteration limit reached after {iterations} iterations")]
    IterationLimit { iterations: usize },
    #[error("binding set changed: left {left:?}, entered {entered:?}")]
    BindingSetChanged {
        left: Vec<ConstraintId>,
        entered: Vec<ConstraintId>,
    },
    #[error("unknown bus {0}")]
    UnknownBus(u32),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn format_violations(v: &[Violation]) -> String {
    if v.is_empty() {
        return "no interior point found".into();
    }
    v.iter()
        .map(|v| format!("{} ({:.3e})", v.what, v.amount))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub what: String,
    /// Per-unit magnitude of the violation.
    pub amount: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpfOptions {
    /// Scaled primal feasibility tolerance.
    pub feas_tol: f64,
    /// Scaled stationarity tolerance.
    pub kkt_tol: f64,
    /// Scaled complementarity tolerance.
    pub comp_tol: f64,
    /// Relative objective change tolerance between iterations.
    pub cost_tol: f64,
    pub max_iter: usize,
    /// Slack (per-unit) below which an inequality counts as binding.
    pub act_tol: f64,
    /// Bisection resolution of [`validity_range`], MW.
    pub range_tol: f64,
}

impl Default for OpfOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-6,
            kkt_tol: 1e-6,
            comp_tol: 1e-11,
            cost_tol: 1e-11,
            max_iter: 150,
            act_tol: 1e-5,
            range_tol: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    PgenLo,
    PgenHi,
    QgenLo,
    QgenHi,
    VmagLo,
    VmagHi,
    FlowFrom,
    FlowTo,
}

impl ConstraintKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PgenLo => "pgen_lo",
            Self::PgenHi => "pgen_hi",
            Self::QgenLo => "qgen_lo",
            Self::QgenHi => "qgen_hi",
            Self::VmagLo => "vmag_lo",
            Self::VmagHi => "vmag_hi",
            Self::FlowFrom => "flow_from",
            Self::FlowTo => "flow_to",
        }
    }

    pub(crate) fn element(self) -> &'static str {
        match self {
            Self::PgenLo | Self::PgenHi | Self::QgenLo | Self::QgenHi => "gen",
            Self::VmagLo | Self::VmagHi => "bus",
            Self::FlowFrom | Self::FlowTo => "branch",
        }
    }
}

/// One scalar inequality of the OPF. `index` is the 0-based position of the
/// generator, bus or branch in the case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConstraintId {
    pub kind: ConstraintKind,
    pub index: usize,
}

impl fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}",
            self.kind.as_str(),
            self.kind.element(),
            self.index + 1
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpfStatus {
    Converged,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSolution {
    /// per-unit, one per bus
    pub v_mag: Vec<f64>,
    /// radians, slack bus at 0
    pub v_ang: Vec<f64>,
    /// MW, one per case generator (0 for out-of-service units)
    pub p_gen: Vec<f64>,
    /// MVAr
    pub q_gen: Vec<f64>,
    /// $/h
    pub objective: f64,
    /// $/MWh
    pub lambda_p: Vec<f64>,
    /// $/MVAr·h
    pub lambda_q: Vec<f64>,
    /// Every inequality of the problem, aligned with `mu` and `slack`.
    pub constraints: Vec<ConstraintId>,
    /// Shadow prices: $/MWh for generator P limits and flow limits (per MVA),
    /// $/MVAr·h for generator Q limits, $/h per pu for voltage limits.
    pub mu: Vec<f64>,
    /// Per-unit distance to the limit.
    pub slack: Vec<f64>,
    pub binding_set: BTreeSet<ConstraintId>,
    pub status: OpfStatus,
    pub iterations: usize,
    #[serde(default)]
    pub violations: Vec<Violation>,
}

impl OpfSolution {
    pub fn is_converged(&self) -> bool {
        self.status == OpfStatus::Converged
    }

    /// The solution itself, or the error matching its status.
    pub fn require_converged(&self) -> Result<&Self, OpfError> {
        match self.status {
            OpfStatus::Converged => Ok(self),
            OpfStatus::Infeasible => Err(OpfError::Infeasible {
                violations: self.violations.clone(),
            }),
            OpfStatus::IterationLimit => Err(OpfError::IterationLimit {
                iterations: self.iterations,
            }),
        }
    }

    pub fn mu_of(&self, id: ConstraintId) -> Option<f64> {
        self.constraints.iter().position(|c| *c == id).map(|i| self.mu[i])
    }

    /// Shadow price of the branch limit as a whole ($/MWh per MVA): the sum
    /// over both ends. On a lossless line both ends bind together and each
    /// carries part of the price.
    pub fn branch_mu(&self, branch: usize) -> f64 {
        self.constraints
            .iter()
            .zip(&self.mu)
            .filter(|(c, _)| {
                c.index == branch && matches!(c.kind, ConstraintKind::FlowFrom | ConstraintKind::FlowTo)
            })
            .map(|(_, m)| m)
            .sum()
    }
}

/// Indices of constraint bookkeeping shared by the solver and the KKT check.
struct ConstraintMap {
    ids: Vec<ConstraintId>,
    /// How to recover the internal multiplier from the reported shadow price.
    slots: Vec<Slot>,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Flow { row: usize, to_internal: f64 },
    Lower { var: usize, to_internal: f64 },
    Upper { var: usize, to_internal: f64 },
}

fn constraint_map(opf: &AcOpf) -> ConstraintMap {
    let nb = opf.nb();
    let base = opf.net.base_mva;
    let norm = opf.cost_norm;
    let (lo, hi) = opf.bounds();
    let mut ids = Vec::new();
    let mut slots = Vec::new();
    for (row, fl) in opf.flows.iter().enumerate() {
        let br = &opf.net.branches[fl.branch];
        let kind = match fl.end {
            FlowEnd::From => ConstraintKind::FlowFrom,
            FlowEnd::To => ConstraintKind::FlowTo,
        };
        ids.push(ConstraintId {
            kind,
            index: br.index,
        });
        // d cost / d Smax = mu_internal * norm * 2 Smax  ($/h per pu)
        slots.push(Slot::Flow {
            row,
            to_internal: base / (2.0 * br.s_max * norm),
        });
    }
    let mut push_bounds = |var: usize, lo_kind, hi_kind, index, to_internal: f64| {
        if lo[var].is_finite() {
            ids.push(ConstraintId { kind: lo_kind, index });
            slots.push(Slot::Lower { var, to_internal });
        }
        if hi[var].is_finite() {
            ids.push(ConstraintId { kind: hi_kind, index });
            slots.push(Slot::Upper { var, to_internal });
        }
    };
    for (g, gm) in opf.gens.iter().enumerate() {
        push_bounds(
            opf.pg_var(g),
            ConstraintKind::PgenLo,
            ConstraintKind::PgenHi,
            gm.index,
            base / norm,
        );
    }
    for (g, gm) in opf.gens.iter().enumerate() {
        push_bounds(
            opf.qg_var(g),
            ConstraintKind::QgenLo,
            ConstraintKind::QgenHi,
            gm.index,
            base / norm,
        );
    }
    for i in 0..nb {
        push_bounds(
            nb + i,
            ConstraintKind::VmagLo,
            ConstraintKind::VmagHi,
            i,
            1.0 / norm,
        );
    }
    ConstraintMap { ids, slots }
}

fn slacks(opf: &AcOpf, map: &ConstraintMap, x: &[f64]) -> Vec<f64> {
    let (lo, hi) = opf.bounds();
    map.slots
        .iter()
        .map(|s| match *s {
            Slot::Flow { row, .. } => {
                let fl = &opf.flows[row];
                let (p, q) = opf.flow_value(fl, x);
                opf.flow_limit(fl) - p.hypot(q)
            }
            Slot::Lower { var, .. } => x[var] - lo[var],
            Slot::Upper { var, .. } => hi[var] - x[var],
        })
        .collect()
}

fn ipm_settings(o: &OpfOptions) -> IpmSettings {
    IpmSettings {
        feas_tol: o.feas_tol,
        grad_tol: o.kkt_tol,
        comp_tol: o.comp_tol,
        cost_tol: o.cost_tol,
        max_iter: o.max_iter,
    }
}

fn check_options(o: &OpfOptions) -> Result<(), OpfError> {
    let positive = [
        o.feas_tol,
        o.kkt_tol,
        o.comp_tol,
        o.cost_tol,
        o.act_tol,
        o.range_tol,
    ];
    if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || o.max_iter == 0 {
        return Err(OpfError::InvalidArgument(
            "OPF tolerances must be positive and max_iter nonzero".into(),
        ));
    }
    Ok(())
}

/// Solves the AC OPF for `case`.
///
/// Returns `Err` only for malformed input; a problem the solver could not
/// certify is returned with `status` set and must not have its duals used.
pub fn solve_opf(case: &NetworkCase, options: &OpfOptions) -> Result<OpfSolution, OpfError> {
    check_options(options)?;
    case.validate()?;
    if case.n_generators() == 0 {
        return Err(OpfError::NoGenerator);
    }
    let opf = AcOpf::new(case);
    let nb = opf.nb();
    let base = opf.net.base_mva;
    let norm = opf.cost_norm;
    let map = constraint_map(&opf);

    let shortfall = case.total_p_demand() - case.total_p_max();
    if shortfall > 0.0 {
        return Ok(failed_solution(
            case,
            &opf,
            &map,
            opf.initial_point(),
            OpfStatus::Infeasible,
            0,
            vec![Violation {
                what: "total demand exceeds total generation capacity".into(),
                amount: shortfall / base,
            }],
        ));
    }

    let r = ipm::solve(&opf, &ipm_settings(options));
    if r.status != IpmStatus::Converged {
        let status = if r.status == IpmStatus::IterationLimit && r.feas < options.feas_tol {
            OpfStatus::IterationLimit
        } else {
            OpfStatus::Infeasible
        };
        let violations = worst_violations(&opf, &map, &r.x);
        return Ok(failed_solution(
            case,
            &opf,
            &map,
            r.x,
            status,
            r.iterations,
            violations,
        ));
    }

    let x = r.x;
    let slack = slacks(&opf, &map, &x);
    let mut mu = Vec::with_capacity(map.ids.len());
    let mut binding_set = BTreeSet::new();
    for ((id, s), sl) in map.ids.iter().zip(&map.slots).zip(&slack) {
        let internal = match *s {
            Slot::Flow { row, .. } => r.mu[row],
            Slot::Lower { var, .. } => r.mu_lower[var],
            Slot::Upper { var, .. } => r.mu_upper[var],
        };
        let to_internal = match *s {
            Slot::Flow { to_internal, .. }
            | Slot::Lower { to_internal, .. }
            | Slot::Upper { to_internal, .. } => to_internal,
        };
        if *sl < options.act_tol {
            binding_set.insert(*id);
            mu.push(internal / to_internal);
        } else {
            // interior-point duals of slack constraints are only asymptotically zero
            mu.push(0.0);
        }
    }

    let (va, vm) = opf.split(&x);
    let mut p_gen = vec![0.0; case.generators.len()];
    let mut q_gen = vec![0.0; case.generators.len()];
    for (g, gm) in opf.gens.iter().enumerate() {
        p_gen[gm.index] = x[opf.pg_var(g)] * base;
        q_gen[gm.index] = x[opf.qg_var(g)] * base;
    }
    let objective = case
        .generators
        .iter()
        .zip(&p_gen)
        .filter(|(g, _)| g.in_service)
        .map(|(g, p)| g.cost.eval(*p))
        .sum();
    Ok(OpfSolution {
        v_mag: vm.to_vec(),
        v_ang: va.to_vec(),
        p_gen,
        q_gen,
        objective,
        lambda_p: r.lam[..nb].iter().map(|l| l * norm / base).collect(),
        lambda_q: r.lam[nb..].iter().map(|l| l * norm / base).collect(),
        constraints: map.ids,
        mu,
        slack,
        binding_set,
        status: OpfStatus::Converged,
        iterations: r.iterations,
        violations: Vec::new(),
    })
}

fn failed_solution(
    case: &NetworkCase,
    opf: &AcOpf,
    map: &ConstraintMap,
    x: Vec<f64>,
    status: OpfStatus,
    iterations: usize,
    violations: Vec<Violation>,
) -> OpfSolution {
    let nb = opf.nb();
    let base = opf.net.base_mva;
    let (va, vm) = opf.split(&x);
    let mut p_gen = vec![0.0; case.generators.len()];
    let mut q_gen = vec![0.0; case.generators.len()];
    for (g, gm) in opf.gens.iter().enumerate() {
        p_gen[gm.index] = x[opf.pg_var(g)] * base;
        q_gen[gm.index] = x[opf.qg_var(g)] * base;
    }
    OpfSolution {
        v_mag: vm.to_vec(),
        v_ang: va.to_vec(),
        p_gen,
        q_gen,
        objective: opf.cost(&x),
        lambda_p: vec![f64::NAN; nb],
        lambda_q: vec![f64::NAN; nb],
        constraints: map.ids.clone(),
        mu: vec![f64::NAN; map.ids.len()],
        slack: slacks(opf, map, &x),
        binding_set: BTreeSet::new(),
        status,
        iterations,
        violations,
    }
}

fn worst_violations(opf: &AcOpf, map: &ConstraintMap, x: &[f64]) -> Vec<Violation> {
    let nb = opf.nb();
    let (g, _) = opf.equalities(x);
    let mut all: Vec<Violation> = g
        .iter()
        .enumerate()
        .map(|(i, v)| Violation {
            what: format!(
                "{} balance at bus {}",
                if i < nb { "active" } else { "reactive" },
                opf.net.bus_ids[i % nb]
            ),
            amount: v.abs(),
        })
        .collect();
    for (id, s) in map.ids.iter().zip(slacks(opf, map, x)) {
        if s < 0.0 {
            all.push(Violation {
                what: id.to_string(),
                amount: -s,
            });
        }
    }
    all.sort_by(|a, b| b.amount.total_cmp(&a.amount));
    all.truncate(5);
    all.retain(|v| v.amount > 0.0);
    all
}

/// Scaled KKT residual norms of a converged solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }
}

/// Re-assembles the KKT conditions at the reported point and multipliers.
///
/// All three measures use the solver's internal scaling: per-unit
/// quantities and costs normalised by the largest generator marginal cost.
/// Stationarity is `‖∇f + Jgᵀλ + Jhᵀμ‖∞ / (1 + max(‖λ‖∞, ‖μ‖∞))`, with the
/// slack-bus angle excluded (its reference constraint carries a free
/// multiplier). Feasibility and complementarity are divided by `1 + ‖x‖∞`.
pub fn kkt_residual(case: &NetworkCase, solution: &OpfSolution) -> Result<KktResidual, OpfError> {
    solution.require_converged()?;
    let opf = AcOpf::new(case);
    let nb = opf.nb();
    let base = opf.net.base_mva;
    let norm = opf.cost_norm;
    let map = constraint_map(&opf);
    if solution.v_mag.len() != nb
        || solution.p_gen.len() != case.generators.len()
        || solution.constraints != map.ids
    {
        return Err(OpfError::InvalidArgument(
            "solution does not belong to this case".into(),
        ));
    }
    let mut x = vec![0.0; opf.n_vars()];
    x[..nb].copy_from_slice(&solution.v_ang);
    x[nb..2 * nb].copy_from_slice(&solution.v_mag);
    for (g, gm) in opf.gens.iter().enumerate() {
        x[opf.pg_var(g)] = solution.p_gen[gm.index] / base;
        x[opf.qg_var(g)] = solution.q_gen[gm.index] / base;
    }
    let lam: Vec<f64> = solution
        .lambda_p
        .iter()
        .chain(&solution.lambda_q)
        .map(|l| l * base / norm)
        .collect();

    let (_, mut lx) = opf.objective(&x);
    let (g, dg) = opf.equalities(&x);
    let (h, dh) = opf.inequalities(&x);
    for (row, l) in dg.iter().zip(&lam) {
        for &(j, v) in row {
            lx[j] += l * v;
        }
    }
    let (lo, hi) = opf.bounds();
    let mut mu_max: f64 = 0.0;
    let mut comp: f64 = 0.0;
    let mut viol: f64 = g.iter().fold(0.0, |m, v| m.max(v.abs()));
    for (k, s) in map.slots.iter().enumerate() {
        match *s {
            Slot::Flow { row, to_internal } => {
                let m = solution.mu[k] * to_internal;
                for &(j, v) in &dh[row] {
                    lx[j] += m * v;
                }
                comp = comp.max((m * -h[row]).abs());
                viol = viol.max(h[row]);
                mu_max = mu_max.max(m.abs());
            }
            Slot::Lower { var, to_internal } => {
                let m = solution.mu[k] * to_internal;
                lx[var] -= m;
                comp = comp.max((m * (x[var] - lo[var])).abs());
                viol = viol.max(lo[var] - x[var]);
                mu_max = mu_max.max(m.abs());
            }
            Slot::Upper { var, to_internal } => {
                let m = solution.mu[k] * to_internal;
                lx[var] += m;
                comp = comp.max((m * (hi[var] - x[var])).abs());
                viol = viol.max(x[var] - hi[var]);
                mu_max = mu_max.max(m.abs());
            }
        }
    }
    viol = viol.max((x[opf.slack]).abs());
    lx[opf.slack] = 0.0;
    let lam_max = lam.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let x_max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let stat = lx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(KktResidual {
        stationarity: stat / (1.0 + lam_max.max(mu_max)),
        feasibility: viol.max(0.0) / (1.0 + x_max),
        complementarity: comp / (1.0 + x_max),
    })
}

#[cfg(test)]
mod tests;
