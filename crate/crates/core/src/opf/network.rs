//! Polar-form AC network equations.
//!
//! Every complex power quantity used by the optimiser (bus injections and
//! branch-end flows) is a sum of terms `V_i · conj(y · V_k)`. [`AdmTerm`]
//! evaluates one such term together with its first and second derivatives
//! with respect to `(θ, |V|)`; everything else is bookkeeping on top.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::ipm::SparseRow;
use crate::net::{BusId, NetworkCase};

#[derive(Debug, Clone, Copy)]
pub(crate) struct AdmTerm {
    pub i: usize,
    pub k: usize,
    pub y: Complex64,
}

impl AdmTerm {
    /// `(P, Q)` of `V_i conj(y V_k)`.
    #[inline]
    pub fn value(&self, vm: &[f64], va: &[f64]) -> (f64, f64) {
        let (s, c) = (va[self.i] - va[self.k]).sin_cos();
        let m = vm[self.i] * vm[self.k];
        let (g, b) = (self.y.re, self.y.im);
        (m * (g * c + b * s), m * (g * s - b * c))
    }

    /// Coefficients of `wp·P + wq·Q = m (A cos a + D sin a)`.
    #[inline]
    fn weighted(&self, va: &[f64], wp: f64, wq: f64) -> (f64, f64) {
        let (g, b) = (self.y.re, self.y.im);
        let a = wp * g - wq * b;
        let d = wp * b + wq * g;
        let (s, c) = (va[self.i] - va[self.k]).sin_cos();
        (a * c + d * s, -a * s + d * c)
    }

    /// Appends the gradient of `wp·P + wq·Q`. Variables are laid out as
    /// `[θ_0..θ_nb, |V|_0..|V|_nb, ...]`.
    #[inline]
    pub fn gradient(&self, vm: &[f64], va: &[f64], wp: f64, wq: f64, nb: usize, row: &mut SparseRow) {
        let (f, fp) = self.weighted(va, wp, wq);
        let (vi, vk) = (vm[self.i], vm[self.k]);
        let m = vi * vk;
        row.push((self.i, m * fp));
        row.push((self.k, -m * fp));
        row.push((nb + self.i, vk * f));
        row.push((nb + self.k, vi * f));
    }

    /// Adds the Hessian of `wp·P + wq·Q`.
    pub fn hessian(&self, vm: &[f64], va: &[f64], wp: f64, wq: f64, nb: usize, out: &mut DMatrix<f64>) {
        let (f, fp) = self.weighted(va, wp, wq);
        let (i, k) = (self.i, self.k);
        let (vi, vk) = (vm[i], vm[k]);
        let m = vi * vk;
        // second derivative of the angle factor is -F
        out[(i, i)] -= m * f;
        out[(k, k)] -= m * f;
        let mut pair = |r: usize, c: usize, v: f64| {
            out[(r, c)] += v;
            out[(c, r)] += v;
        };
        pair(i, k, m * f);
        pair(i, nb + i, vk * fp);
        pair(i, nb + k, vi * fp);
        pair(k, nb + i, -vk * fp);
        pair(k, nb + k, -vi * fp);
        pair(nb + i, nb + k, f);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BranchModel {
    /// Position in `NetworkCase::branches`.
    pub index: usize,
    pub from_terms: [AdmTerm; 2],
    pub to_terms: [AdmTerm; 2],
    /// per-unit MVA, 0 = unlimited
    pub s_max: f64,
}

/// Per-unit admittance data for a validated case.
#[derive(Debug, Clone)]
pub(crate) struct AcNetwork {
    pub nb: usize,
    pub base_mva: f64,
    pub bus_ids: Vec<BusId>,
    /// `terms_by_bus[i]` sums to the complex injection at bus `i`.
    pub terms_by_bus: Vec<Vec<AdmTerm>>,
    pub branches: Vec<BranchModel>,
}

impl AcNetwork {
    pub fn new(case: &NetworkCase) -> Self {
        let nb = case.buses.len();
        let index = case.bus_index();
        let base = case.base_mva;
        let mut ybus: BTreeMap<(usize, usize), Complex64> = BTreeMap::new();
        let mut branches = Vec::new();
        for (bi, br) in case.branches.iter().enumerate() {
            if !br.in_service {
                continue;
            }
            let f = index[&br.from_bus];
            let t = index[&br.to_bus];
            let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
            let tap = Complex64::from_polar(br.tap_ratio, br.phase_shift);
            let ytt = ys + Complex64::new(0.0, br.b_charging / 2.0);
            let yff = ytt / (tap * tap.conj());
            let yft = -ys / tap.conj();
            let ytf = -ys / tap;
            *ybus.entry((f, f)).or_default() += yff;
            *ybus.entry((f, t)).or_default() += yft;
            *ybus.entry((t, f)).or_default() += ytf;
            *ybus.entry((t, t)).or_default() += ytt;
            branches.push(BranchModel {
                index: bi,
                from_terms: [AdmTerm { i: f, k: f, y: yff }, AdmTerm { i: f, k: t, y: yft }],
                to_terms: [AdmTerm { i: t, k: t, y: ytt }, AdmTerm { i: t, k: f, y: ytf }],
                s_max: br.s_max / base,
            });
        }
        for (i, bus) in case.buses.iter().enumerate() {
            if bus.g_shunt != 0.0 || bus.b_shunt != 0.0 {
                *ybus.entry((i, i)).or_default() += Complex64::new(bus.g_shunt, bus.b_shunt) / base;
            }
        }
        let mut terms_by_bus = vec![Vec::new(); nb];
        for ((i, k), y) in ybus {
            terms_by_bus[i].push(AdmTerm { i, k, y });
        }
        Self {
            nb,
            base_mva: base,
            bus_ids: case.buses.iter().map(|b| b.id).collect(),
            terms_by_bus,
            branches,
        }
    }

    /// Per-unit bus injections.
    pub fn bus_injections(&self, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; self.nb];
        let mut q = vec![0.0; self.nb];
        for (i, terms) in self.terms_by_bus.iter().enumerate() {
            for t in terms {
                let (a, b) = t.value(vm, va);
                p[i] += a;
                q[i] += b;
            }
        }
        (p, q)
    }

    pub fn end_flow(terms: &[AdmTerm; 2], vm: &[f64], va: &[f64]) -> (f64, f64) {
        let (p0, q0) = terms[0].value(vm, va);
        let (p1, q1) = terms[1].value(vm, va);
        (p0 + p1, q0 + q1)
    }
}

/// Branch-end complex flows in MW / MVAr.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFlow {
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
}

impl BranchFlow {
    pub fn s_from(&self) -> f64 {
        self.p_from.hypot(self.q_from)
    }

    pub fn s_to(&self) -> f64 {
        self.p_to.hypot(self.q_to)
    }
}

/// Network injections at a given voltage profile.
#[derive(Debug, Clone, PartialEq)]
pub struct Injections {
    /// MW per bus
    pub p_inj: Vec<f64>,
    /// MVAr per bus
    pub q_inj: Vec<f64>,
    /// One entry per case branch (zero for out-of-service branches).
    pub flows: Vec<BranchFlow>,
}

impl Injections {
    /// `|S|` at both ends, MVA, in case branch order.
    pub fn s_flow(&self) -> Vec<(f64, f64)> {
        self.flows.iter().map(|f| (f.s_from(), f.s_to())).collect()
    }
}

/// Evaluates `P(V, δ)`, `Q(V, δ)` and branch-end flows for `case`.
///
/// # Panics
/// If `v_mag` or `v_ang` does not have one entry per bus.
pub fn injections(case: &NetworkCase, v_mag: &[f64], v_ang: &[f64]) -> Injections {
    assert_eq!(v_mag.len(), case.buses.len(), "v_mag length");
    assert_eq!(v_ang.len(), case.buses.len(), "v_ang length");
    let net = AcNetwork::new(case);
    let base = net.base_mva;
    let (p, q) = net.bus_injections(v_mag, v_ang);
    let mut flows = vec![
        BranchFlow {
            p_from: 0.0,
            q_from: 0.0,
            p_to: 0.0,
            q_to: 0.0
        };
        case.branches.len()
    ];
    for br in &net.branches {
        let (pf, qf) = AcNetwork::end_flow(&br.from_terms, v_mag, v_ang);
        let (pt, qt) = AcNetwork::end_flow(&br.to_terms, v_mag, v_ang);
        flows[br.index] = BranchFlow {
            p_from: pf * base,
            q_from: qf * base,
            p_to: pt * base,
            q_to: qt * base,
        };
    }
    Injections {
        p_inj: p.into_iter().map(|v| v * base).collect(),
        q_inj: q.into_iter().map(|v| v * base).collect(),
        flows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::fixtures::{two_bus, CASE14};
    use crate::net::parse_matpower_case;

    #[test]
    fn flat_start_lossless_has_no_flow() {
        let c = two_bus();
        let inj = injections(&c, &[1.0, 1.0], &[0.0, 0.0]);
        assert!(inj.p_inj.iter().all(|p| p.abs() < 1e-12));
        assert!(inj.flows[0].p_from.abs() < 1e-12);
    }

    #[test]
    fn two_bus_power_transfer() {
        // P_12 = V1 V2 sin(δ1 - δ2) / x
        let c = two_bus();
        let inj = injections(&c, &[1.0, 1.0], &[0.0, -0.1]);
        let expected = (0.1f64).sin() / 0.1 * 100.0;
        assert!((inj.p_inj[0] - expected).abs() < 1e-9);
        assert!((inj.p_inj[0] - 99.833_416_646_828_15).abs() < 1e-9);
        assert!((inj.p_inj[0] + inj.p_inj[1]).abs() < 1e-9);
        assert!((inj.flows[0].p_from - expected).abs() < 1e-9);
    }

    #[test]
    fn injections_match_complex_ybus_product() {
        // Independent route: build dense complex Ybus and evaluate S = V conj(Y V).
        let c = parse_matpower_case(CASE14).unwrap();
        let n = c.buses.len();
        let vm: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * (i as f64).sin()).collect();
        let va: Vec<f64> = (0..n).map(|i| -0.02 * i as f64).collect();
        let idx = c.bus_index();
        let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
        for br in &c.branches {
            let (f, t) = (idx[&br.from_bus], idx[&br.to_bus]);
            let ys = 1.0 / Complex64::new(br.r, br.x);
            let bc = Complex64::new(0.0, br.b_charging / 2.0);
            let tap = Complex64::from_polar(br.tap_ratio, br.phase_shift);
            y[f][f] += (ys + bc) / (tap * tap.conj());
            y[f][t] -= ys / tap.conj();
            y[t][f] -= ys / tap;
            y[t][t] += ys + bc;
        }
        for (i, b) in c.buses.iter().enumerate() {
            y[i][i] += Complex64::new(b.g_shunt, b.b_shunt) / c.base_mva;
        }
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let inj = injections(&c, &vm, &va);
        for i in 0..n {
            let cur: Complex64 = (0..n).map(|k| y[i][k] * v[k]).sum();
            let s = v[i] * cur.conj() * c.base_mva;
            assert!((s.re - inj.p_inj[i]).abs() < 1e-9);
            assert!((s.im - inj.q_inj[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn term_derivatives_match_finite_differences() {
        let c = parse_matpower_case(CASE14).unwrap();
        let net = AcNetwork::new(&c);
        let nb = net.nb;
        let vm: Vec<f64> = (0..nb).map(|i| 1.0 + 0.02 * (i as f64 * 0.7).cos()).collect();
        let va: Vec<f64> = (0..nb).map(|i| -0.03 * i as f64).collect();
        let (wp, wq) = (0.7, -1.3);
        let eval = |x: &[f64]| -> f64 {
            let (a, m) = x.split_at(nb);
            net.terms_by_bus[3]
                .iter()
                .map(|t| {
                    let (p, q) = t.value(m, a);
                    wp * p + wq * q
                })
                .sum()
        };
        let mut x = va.clone();
        x.extend(&vm);
        let mut row = SparseRow::new();
        for t in &net.terms_by_bus[3] {
            t.gradient(&vm, &va, wp, wq, nb, &mut row);
        }
        let mut grad = vec![0.0; 2 * nb];
        for (j, v) in row {
            grad[j] += v;
        }
        let mut hess = DMatrix::zeros(2 * nb, 2 * nb);
        for t in &net.terms_by_bus[3] {
            t.hessian(&vm, &va, wp, wq, nb, &mut hess);
        }
        let h = 1e-6;
        for j in 0..2 * nb {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-6, "grad {j}: {fd} vs {}", grad[j]);
            // Hessian column j via differences of the analytic gradient
            let g_at = |xx: &[f64]| {
                let (a, m) = xx.split_at(nb);
                let mut r = SparseRow::new();
                for t in &net.terms_by_bus[3] {
                    t.gradient(m, a, wp, wq, nb, &mut r);
                }
                let mut g = vec![0.0; 2 * nb];
                for (jj, v) in r {
                    g[jj] += v;
                }
                g
            };
            let (gp, gm) = (g_at(&xp), g_at(&xm));
            for i in 0..2 * nb {
                let fd2 = (gp[i] - gm[i]) / (2.0 * h);
                assert!(
                    (fd2 - hess[(i, j)]).abs() < 1e-5,
                    "hess ({i},{j}): {fd2} vs {}",
                    hess[(i, j)]
                );
            }
        }
    }
}
