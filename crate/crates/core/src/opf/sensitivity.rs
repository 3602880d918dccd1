//! Demand sensitivities of the optimum and the injection range over which
//! the binding set (and so the meaning of the multipliers) stays fixed.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{solve_opf, ConstraintId, OpfError, OpfOptions, OpfSolution};
use crate::net::{BusId, NetworkCase};
use crate::placement::{apply_der, DerUnit};

fn diff(
    base: &BTreeSet<ConstraintId>,
    other: &BTreeSet<ConstraintId>,
) -> (Vec<ConstraintId>, Vec<ConstraintId>) {
    (
        base.difference(other).copied().collect(),
        other.difference(base).copied().collect(),
    )
}

/// Central difference of the optimal cost with respect to active demand at
/// `bus`: `[C(Pd + ε) − C(Pd − ε)] / 2ε`, in $/MWh.
///
/// Fails with [`OpfError::BindingSetChanged`] when the two perturbed
/// optima have different binding sets.
pub fn finite_difference_lambda(
    case: &NetworkCase,
    bus: BusId,
    epsilon_mw: f64,
    options: &OpfOptions,
) -> Result<f64, OpfError> {
    if !(epsilon_mw.is_finite() && epsilon_mw > 0.0) {
        return Err(OpfError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon_mw}"
        )));
    }
    let pos = case.bus_position(bus).ok_or(OpfError::UnknownBus(bus))?;
    let solve_at = |delta: f64| -> Result<OpfSolution, OpfError> {
        let mut c = case.clone();
        c.buses[pos].p_demand += delta;
        let s = solve_opf(&c, options)?;
        s.require_converged()?;
        Ok(s)
    };
    let up = solve_at(epsilon_mw)?;
    let down = solve_at(-epsilon_mw)?;
    if up.binding_set != down.binding_set {
        let (left, entered) = diff(&down.binding_set, &up.binding_set);
        return Err(OpfError::BindingSetChanged { left, entered });
    }
    Ok((up.objective - down.objective) / (2.0 * epsilon_mw))
}

/// Template for [`validity_range`]: the probe injects `t/cap` times `unit`.
pub type RangeProbe = DerUnit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityRange {
    pub bus: BusId,
    /// Largest injection (MW) that keeps the binding set unchanged.
    pub delta_p_max: f64,
    pub cap: f64,
    pub base_binding: BTreeSet<ConstraintId>,
    /// Constraints that leave / enter the binding set just beyond the range.
    /// Empty when the range reaches the cap.
    pub left: Vec<ConstraintId>,
    pub entered: Vec<ConstraintId>,
    pub solves: usize,
}

impl ValidityRange {
    pub fn reached_cap(&self) -> bool {
        self.left.is_empty() && self.entered.is_empty()
    }
}

/// Bisection on the injected active power of `probe` at `bus`, between 0 and
/// `probe.p_size`, to within `options.range_tol` MW.
pub fn validity_range(
    case: &NetworkCase,
    bus: BusId,
    probe: &RangeProbe,
    options: &OpfOptions,
) -> Result<ValidityRange, OpfError> {
    let cap = probe.p_size;
    if !(cap.is_finite() && cap > 0.0) {
        return Err(OpfError::InvalidArgument("probe cap must be positive".into()));
    }
    case.bus_position(bus).ok_or(OpfError::UnknownBus(bus))?;
    let base = solve_opf(case, options)?;
    base.require_converged()?;
    let base_set = base.binding_set.clone();
    let mut solves = 1;

    // Generators the probe appends are not part of the comparison.
    let n_gens = case.generators.len();
    let own = |set: BTreeSet<ConstraintId>| -> BTreeSet<ConstraintId> {
        set.into_iter()
            .filter(|c| c.kind.element() != "gen" || c.index < n_gens)
            .collect()
    };
    // None when the probe makes the problem unsolvable: treated as a change.
    let mut probe_at = |t: f64| -> Result<Option<BTreeSet<ConstraintId>>, OpfError> {
        solves += 1;
        let unit = probe.scaled_to(t);
        let c = apply_der(case, bus, &unit).map_err(|e| OpfError::InvalidArgument(e.to_string()))?;
        let s = solve_opf(&c, options)?;
        Ok(s.is_converged().then(|| own(s.binding_set)))
    };

    let at_cap = probe_at(cap)?;
    if at_cap.as_ref() == Some(&base_set) {
        return Ok(ValidityRange {
            bus,
            delta_p_max: cap,
            cap,
            base_binding: base_set,
            left: Vec::new(),
            entered: Vec::new(),
            solves,
        });
    }
    let mut transition = at_cap;
    let (mut lo, mut hi) = (0.0, cap);
    while hi - lo > options.range_tol {
        let mid = 0.5 * (lo + hi);
        let set = probe_at(mid)?;
        if set.as_ref() == Some(&base_set) {
            lo = mid;
        } else {
            hi = mid;
            transition = set;
        }
    }
    let (left, entered) = match &transition {
        Some(set) => diff(&base_set, set),
        None => (base_set.iter().copied().collect(), Vec::new()),
    };
    Ok(ValidityRange {
        bus,
        delta_p_max: lo,
        cap,
        base_binding: base_set,
        left,
        entered,
        solves,
    })
}
