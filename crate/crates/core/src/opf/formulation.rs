//! Polar AC-OPF as a nonlinear program for [`super::ipm`].
//!
//! Variables `x = [θ (nb), |V| (nb), Pg (ng), Qg (ng)]`, all per-unit.
//! Equalities are the bus active and reactive balances
//! `P(V,θ) + Pd - Cg·Pg = 0`, `Q(V,θ) + Qd - Cg·Qg = 0`. Inequalities are the
//! squared apparent-power limits at both ends of every limited branch.
//! Voltage and generator limits are variable bounds; the slack-bus angle is
//! fixed at zero through equal bounds.

use nalgebra::DMatrix;

use super::ipm::{Nlp, SparseRow};
use super::network::{AcNetwork, AdmTerm};
use crate::net::{BusKind, NetworkCase};

#[derive(Debug, Clone)]
pub(crate) struct GenModel {
    /// Position in `NetworkCase::generators`.
    pub index: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// cost coefficients on per-unit output, already divided by `cost_norm`
    pub c2: f64,
    pub c1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum FlowEnd {
    From,
    To,
}

#[derive(Debug, Clone)]
pub(crate) struct FlowLimit {
    /// index into `AcNetwork::branches`
    pub branch: usize,
    pub end: FlowEnd,
}

#[derive(Debug, Clone)]
pub(crate) struct AcOpf {
    pub net: AcNetwork,
    pub gens: Vec<GenModel>,
    pub pd: Vec<f64>,
    pub qd: Vec<f64>,
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    pub slack: usize,
    pub flows: Vec<FlowLimit>,
    /// Objective normaliser: scaled objective = cost / cost_norm.
    pub cost_norm: f64,
    pub cost_const: f64,
    gens_at_bus: Vec<Vec<usize>>,
}

impl AcOpf {
    pub fn new(case: &NetworkCase) -> Self {
        let net = AcNetwork::new(case);
        let nb = net.nb;
        let base = case.base_mva;
        let index = case.bus_index();

        let norm = case
            .generators
            .iter()
            .filter(|g| g.in_service)
            .map(|g| g.cost.marginal(g.p_max).abs().max(g.cost.marginal(g.p_min).abs()))
            .fold(0.0, f64::max)
            * base;
        let cost_norm = if norm > 0.0 { norm } else { 1.0 };

        let mut gens = Vec::new();
        let mut gens_at_bus = vec![Vec::new(); nb];
        let mut cost_const = 0.0;
        for (gi, g) in case.generators.iter().enumerate() {
            if !g.in_service {
                continue;
            }
            let bus = index[&g.bus];
            gens_at_bus[bus].push(gens.len());
            cost_const += g.cost.c0;
            gens.push(GenModel {
                index: gi,
                p_min: g.p_min / base,
                p_max: g.p_max / base,
                q_min: g.q_min / base,
                q_max: g.q_max / base,
                c2: g.cost.c2 * base * base / cost_norm,
                c1: g.cost.c1 * base / cost_norm,
            });
        }
        let mut flows = Vec::new();
        for (k, br) in net.branches.iter().enumerate() {
            if br.s_max > 0.0 {
                flows.push(FlowLimit {
                    branch: k,
                    end: FlowEnd::From,
                });
                flows.push(FlowLimit {
                    branch: k,
                    end: FlowEnd::To,
                });
            }
        }
        let slack = case
            .buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus");
        Self {
            pd: case.buses.iter().map(|b| b.p_demand / base).collect(),
            qd: case.buses.iter().map(|b| b.q_demand / base).collect(),
            v_min: case.buses.iter().map(|b| b.v_min).collect(),
            v_max: case.buses.iter().map(|b| b.v_max).collect(),
            net,
            gens,
            slack,
            flows,
            cost_norm,
            cost_const,
            gens_at_bus,
        }
    }

    pub fn nb(&self) -> usize {
        self.net.nb
    }

    pub fn ng(&self) -> usize {
        self.gens.len()
    }

    pub fn pg_var(&self, g: usize) -> usize {
        2 * self.nb() + g
    }

    pub fn qg_var(&self, g: usize) -> usize {
        2 * self.nb() + self.ng() + g
    }

    pub fn split<'x>(&self, x: &'x [f64]) -> (&'x [f64], &'x [f64]) {
        let nb = self.nb();
        (&x[..nb], &x[nb..2 * nb])
    }

    fn flow_terms(&self, fl: &FlowLimit) -> &[AdmTerm; 2] {
        let br = &self.net.branches[fl.branch];
        match fl.end {
            FlowEnd::From => &br.from_terms,
            FlowEnd::To => &br.to_terms,
        }
    }

    /// `(P, Q)` per-unit at the constrained end.
    pub fn flow_value(&self, fl: &FlowLimit, x: &[f64]) -> (f64, f64) {
        let (va, vm) = self.split(x);
        AcNetwork::end_flow(self.flow_terms(fl), vm, va)
    }

    pub fn flow_limit(&self, fl: &FlowLimit) -> f64 {
        self.net.branches[fl.branch].s_max
    }

    fn flow_gradients(&self, fl: &FlowLimit, x: &[f64]) -> (SparseRow, SparseRow) {
        let (va, vm) = self.split(x);
        let nb = self.nb();
        let mut dp = SparseRow::with_capacity(8);
        let mut dq = SparseRow::with_capacity(8);
        for t in self.flow_terms(fl) {
            t.gradient(vm, va, 1.0, 0.0, nb, &mut dp);
            t.gradient(vm, va, 0.0, 1.0, nb, &mut dq);
        }
        (dp, dq)
    }

    /// Cost in $/h at per-unit dispatch `pg`.
    pub fn cost(&self, x: &[f64]) -> f64 {
        let (f, _) = self.objective(x);
        f * self.cost_norm + self.cost_const
    }
}

impl Nlp for AcOpf {
    fn n_vars(&self) -> usize {
        2 * self.nb() + 2 * self.ng()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let nb = self.nb();
        let n = self.n_vars();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        lo[self.slack] = 0.0;
        hi[self.slack] = 0.0;
        lo[nb..2 * nb].copy_from_slice(&self.v_min);
        hi[nb..2 * nb].copy_from_slice(&self.v_max);
        for (g, gm) in self.gens.iter().enumerate() {
            lo[self.pg_var(g)] = gm.p_min;
            hi[self.pg_var(g)] = gm.p_max;
            lo[self.qg_var(g)] = gm.q_min;
            hi[self.qg_var(g)] = gm.q_max;
        }
        (lo, hi)
    }

    fn initial_point(&self) -> Vec<f64> {
        let (lo, hi) = self.bounds();
        lo.iter()
            .zip(&hi)
            .map(|(&l, &h)| {
                let l = if l.is_finite() { l } else { -1e10 };
                let h = if h.is_finite() { h } else { 1e10 };
                0.5 * (l + h)
            })
            .enumerate()
            .map(|(i, v)| if i < self.nb() { 0.0 } else { v })
            .collect()
    }

    fn objective(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut df = vec![0.0; x.len()];
        let mut f = 0.0;
        for (g, gm) in self.gens.iter().enumerate() {
            let j = self.pg_var(g);
            let p = x[j];
            f += (gm.c2 * p + gm.c1) * p;
            df[j] = 2.0 * gm.c2 * p + gm.c1;
        }
        (f, df)
    }

    fn equalities(&self, x: &[f64]) -> (Vec<f64>, Vec<SparseRow>) {
        let nb = self.nb();
        let (va, vm) = self.split(x);
        let mut g = vec![0.0; 2 * nb];
        let mut rows = Vec::with_capacity(2 * nb);
        for i in 0..nb {
            let mut rp = SparseRow::new();
            for t in &self.net.terms_by_bus[i] {
                g[i] += t.value(vm, va).0;
                t.gradient(vm, va, 1.0, 0.0, nb, &mut rp);
            }
            g[i] += self.pd[i];
            for &gi in &self.gens_at_bus[i] {
                g[i] -= x[self.pg_var(gi)];
                rp.push((self.pg_var(gi), -1.0));
            }
            rows.push(rp);
        }
        for i in 0..nb {
            let mut rq = SparseRow::new();
            for t in &self.net.terms_by_bus[i] {
                g[nb + i] += t.value(vm, va).1;
                t.gradient(vm, va, 0.0, 1.0, nb, &mut rq);
            }
            g[nb + i] += self.qd[i];
            for &gi in &self.gens_at_bus[i] {
                g[nb + i] -= x[self.qg_var(gi)];
                rq.push((self.qg_var(gi), -1.0));
            }
            rows.push(rq);
        }
        (g, rows)
    }

    fn inequalities(&self, x: &[f64]) -> (Vec<f64>, Vec<SparseRow>) {
        let mut h = Vec::with_capacity(self.flows.len());
        let mut rows = Vec::with_capacity(self.flows.len());
        for fl in &self.flows {
            let (p, q) = self.flow_value(fl, x);
            let smax = self.flow_limit(fl);
            h.push(p * p + q * q - smax * smax);
            let (dp, dq) = self.flow_gradients(fl, x);
            let mut row: SparseRow = dp.into_iter().map(|(j, v)| (j, 2.0 * p * v)).collect();
            row.extend(dq.into_iter().map(|(j, v)| (j, 2.0 * q * v)));
            rows.push(row);
        }
        (h, rows)
    }

    fn hessian(&self, x: &[f64], lam: &[f64], mu: &[f64], out: &mut DMatrix<f64>) {
        let nb = self.nb();
        let (va, vm) = self.split(x);
        for (g, gm) in self.gens.iter().enumerate() {
            let j = self.pg_var(g);
            out[(j, j)] += 2.0 * gm.c2;
        }
        for i in 0..nb {
            let (wp, wq) = (lam[i], lam[nb + i]);
            if wp == 0.0 && wq == 0.0 {
                continue;
            }
            for t in &self.net.terms_by_bus[i] {
                t.hessian(vm, va, wp, wq, nb, out);
            }
        }
        for (fl, &m) in self.flows.iter().zip(mu) {
            if m == 0.0 {
                continue;
            }
            let (p, q) = self.flow_value(fl, x);
            let (dp, dq) = self.flow_gradients(fl, x);
            for row in [&dp, &dq] {
                for &(a, va_) in row {
                    for &(b, vb) in row {
                        out[(a, b)] += 2.0 * m * va_ * vb;
                    }
                }
            }
            for t in self.flow_terms(fl) {
                t.hessian(vm, va, 2.0 * m * p, 2.0 * m * q, nb, out);
            }
        }
    }
}
