//! Primal-dual interior-point method for smooth nonlinear programs
//!
//! ```text
//! min f(x)  s.t.  g(x) = 0,  h(x) <= 0,  xmin <= x <= xmax
//! ```
//!
//! Inequalities are converted to `h(x) + z = 0, z > 0` and the perturbed KKT
//! conditions are solved with full Newton steps on the reduced system
//!
//! ```text
//! [ Lxx + dh' (mu/z) dh   dg' ] [dx  ]   [ -(Lx + dh' (mu h + gamma)/z) ]
//! [ dg                    0   ] [dlam] = [ -g                            ]
//! ```
//!
//! followed by fraction-to-boundary step lengths for the primal and dual
//! variables separately. Variable bounds with `xmin == xmax` become linear
//! equalities; other finite bounds become linear inequalities.

use nalgebra::{DMatrix, DVector};

/// Sparse gradient row, entries may repeat (they are summed).
pub(crate) type SparseRow = Vec<(usize, f64)>;

pub(crate) trait Nlp {
    fn n_vars(&self) -> usize;
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn initial_point(&self) -> Vec<f64>;
    fn objective(&self, x: &[f64]) -> (f64, Vec<f64>);
    fn equalities(&self, x: &[f64]) -> (Vec<f64>, Vec<SparseRow>);
    fn inequalities(&self, x: &[f64]) -> (Vec<f64>, Vec<SparseRow>);
    /// Adds the Hessian of `f + lam'g + mu'h` into `out` (nonlinear parts only).
    fn hessian(&self, x: &[f64], lam: &[f64], mu: &[f64], out: &mut DMatrix<f64>);
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct IpmSettings {
    pub feas_tol: f64,
    pub grad_tol: f64,
    pub comp_tol: f64,
    pub cost_tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum IpmStatus {
    Converged,
    IterationLimit,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub(crate) struct IpmResult {
    pub x: Vec<f64>,
    pub status: IpmStatus,
    pub iterations: usize,
    /// Multipliers of the nonlinear equalities.
    pub lam: Vec<f64>,
    /// Multipliers of the nonlinear inequalities.
    pub mu: Vec<f64>,
    /// Bound multipliers, one per variable (0 where unbounded).
    pub mu_lower: Vec<f64>,
    pub mu_upper: Vec<f64>,
    pub feas: f64,
}

const XI: f64 = 0.99995;
const SIGMA: f64 = 0.1;
const Z0: f64 = 1.0;
const BIG: f64 = 1e10;

#[derive(Debug, Clone, Copy)]
enum Linear {
    /// x_i - value = 0
    Fix(usize, f64),
    /// lo - x_i <= 0
    Lower(usize, f64),
    /// x_i - hi <= 0
    Upper(usize, f64),
}

struct Eval {
    f: f64,
    df: Vec<f64>,
    g: Vec<f64>,
    dg: Vec<SparseRow>,
    h: Vec<f64>,
    dh: Vec<SparseRow>,
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn axpy_row(out: &mut [f64], row: &SparseRow, a: f64) {
    for &(j, v) in row {
        out[j] += a * v;
    }
}

fn dot_row(row: &SparseRow, x: &[f64]) -> f64 {
    row.iter().map(|&(j, v)| v * x[j]).sum()
}

fn evaluate<P: Nlp>(p: &P, linear: &[Linear], n_fix: usize, x: &[f64]) -> Eval {
    let (f, df) = p.objective(x);
    let (mut g, mut dg) = p.equalities(x);
    let (mut h, mut dh) = p.inequalities(x);
    g.reserve(n_fix);
    for l in linear {
        match *l {
            Linear::Fix(i, v) => {
                g.push(x[i] - v);
                dg.push(vec![(i, 1.0)]);
            }
            Linear::Lower(i, lo) => {
                h.push(lo - x[i]);
                dh.push(vec![(i, -1.0)]);
            }
            Linear::Upper(i, hi) => {
                h.push(x[i] - hi);
                dh.push(vec![(i, 1.0)]);
            }
        }
    }
    Eval { f, df, g, dg, h, dh }
}

fn lagrangian_gradient(e: &Eval, lam: &[f64], mu: &[f64]) -> Vec<f64> {
    let mut lx = e.df.clone();
    for (row, &l) in e.dg.iter().zip(lam) {
        axpy_row(&mut lx, row, l);
    }
    for (row, &m) in e.dh.iter().zip(mu) {
        axpy_row(&mut lx, row, m);
    }
    lx
}

pub(crate) fn solve<P: Nlp>(p: &P, s: &IpmSettings) -> IpmResult {
    let n = p.n_vars();
    let (xmin, xmax) = p.bounds();
    let mut linear = Vec::new();
    for i in 0..n {
        let (lo, hi) = (xmin[i], xmax[i]);
        if (hi - lo).abs() <= f64::EPSILON {
            linear.push(Linear::Fix(i, lo));
        }
    }
    let n_fix = linear.len();
    for i in 0..n {
        let (lo, hi) = (xmin[i], xmax[i]);
        if (hi - lo).abs() > f64::EPSILON {
            if lo > -BIG {
                linear.push(Linear::Lower(i, lo));
            }
            if hi < BIG {
                linear.push(Linear::Upper(i, hi));
            }
        }
    }

    let mut x = p.initial_point();
    let mut e = evaluate(p, &linear, n_fix, &x);
    let neq = e.g.len();
    let niq = e.h.len();
    let n_nl_eq = neq - n_fix;
    let n_nl_iq = niq - (linear.len() - n_fix);

    let mut gamma = 1.0;
    let mut lam = vec![0.0; neq];
    let mut z: Vec<f64> = e.h.iter().map(|&h| if h < -Z0 { -h } else { Z0 }).collect();
    let mut mu: Vec<f64> = z
        .iter()
        .map(|&zi| if gamma / zi > Z0 { gamma / zi } else { Z0 })
        .collect();

    let mut f0 = e.f;
    let mut lx = lagrangian_gradient(&e, &lam, &mu);
    let conds = |e: &Eval, x: &[f64], z: &[f64], lam: &[f64], mu: &[f64], lx: &[f64], f0: f64| {
        let maxh = e.h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let maxh = if niq == 0 { 0.0 } else { maxh };
        let feas = norm_inf(&e.g).max(maxh) / (1.0 + norm_inf(x).max(norm_inf(z)));
        let grad = norm_inf(lx) / (1.0 + norm_inf(lam).max(norm_inf(mu)));
        let zmu: f64 = z.iter().zip(mu).map(|(a, b)| a * b).sum();
        let comp = zmu / (1.0 + norm_inf(x));
        let cost = (e.f - f0).abs() / (1.0 + f0.abs());
        (feas, grad, comp, cost)
    };
    let (mut feas, _, _, _) = conds(&e, &x, &z, &lam, &mu, &lx, f0);

    let dim = n + neq;
    let mut status = IpmStatus::IterationLimit;
    let mut iterations = 0;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);

    let done = |feas: f64, grad: f64, comp: f64, cost: f64| {
        feas < s.feas_tol && grad < s.grad_tol && comp < s.comp_tol && cost < s.cost_tol
    };

    for it in 1..=s.max_iter {
        iterations = it;
        kkt.fill(0.0);
        {
            let mut hv = kkt.view_mut((0, 0), (n, n));
            let mut hess = DMatrix::<f64>::zeros(n, n);
            p.hessian(&x, &lam[..n_nl_eq], &mu[..n_nl_iq], &mut hess);
            hv.copy_from(&hess);
        }
        let mut rhs = DVector::<f64>::zeros(dim);
        for i in 0..n {
            rhs[i] = -lx[i];
        }
        for (j, row) in e.dh.iter().enumerate() {
            let w = mu[j] / z[j];
            for &(a, va) in row {
                for &(b, vb) in row {
                    kkt[(a, b)] += w * va * vb;
                }
            }
            let c = (mu[j] * e.h[j] + gamma) / z[j];
            for &(a, va) in row {
                rhs[a] -= c * va;
            }
        }
        for (i, row) in e.dg.iter().enumerate() {
            for &(a, va) in row {
                kkt[(a, n + i)] += va;
                kkt[(n + i, a)] += va;
            }
            rhs[n + i] = -e.g[i];
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else {
            status = IpmStatus::NumericalFailure;
            break;
        };
        if sol.iter().any(|v| !v.is_finite()) {
            status = IpmStatus::NumericalFailure;
            break;
        }
        let dx = &sol.as_slice()[..n];
        let dlam = &sol.as_slice()[n..];
        let dz: Vec<f64> = (0..niq).map(|j| -e.h[j] - z[j] - dot_row(&e.dh[j], dx)).collect();
        let dmu: Vec<f64> = (0..niq)
            .map(|j| -mu[j] + (gamma - mu[j] * dz[j]) / z[j])
            .collect();

        let step = |v: &[f64], dv: &[f64]| {
            let m = v
                .iter()
                .zip(dv)
                .filter(|(_, d)| **d < 0.0)
                .map(|(a, d)| a / -d)
                .fold(f64::INFINITY, f64::min);
            (XI * m).min(1.0)
        };
        let alpha_p = step(&z, &dz);
        let alpha_d = step(&mu, &dmu);

        for i in 0..n {
            x[i] += alpha_p * dx[i];
        }
        for j in 0..niq {
            z[j] += alpha_p * dz[j];
            mu[j] += alpha_d * dmu[j];
        }
        for i in 0..neq {
            lam[i] += alpha_d * dlam[i];
        }
        if niq > 0 {
            gamma = SIGMA * z.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>() / niq as f64;
        }

        e = evaluate(p, &linear, n_fix, &x);
        if !e.f.is_finite() || x.iter().any(|v| !v.is_finite()) || norm_inf(&x) > BIG {
            status = IpmStatus::NumericalFailure;
            break;
        }
        lx = lagrangian_gradient(&e, &lam, &mu);
        let (fe, gr, co, cost) = conds(&e, &x, &z, &lam, &mu, &lx, f0);
        feas = fe;
        f0 = e.f;
        if done(fe, gr, co, cost) {
            status = IpmStatus::Converged;
            break;
        }
    }

    let mut mu_lower = vec![0.0; n];
    let mut mu_upper = vec![0.0; n];
    let mut iq = n_nl_iq;
    let mut eq = n_nl_eq;
    for l in &linear {
        match *l {
            Linear::Fix(i, _) => {
                mu_upper[i] = lam[eq].max(0.0);
                mu_lower[i] = (-lam[eq]).max(0.0);
                eq += 1;
            }
            Linear::Lower(i, _) => {
                mu_lower[i] = mu[iq];
                iq += 1;
            }
            Linear::Upper(i, _) => {
                mu_upper[i] = mu[iq];
                iq += 1;
            }
        }
    }
    lam.truncate(n_nl_eq);
    mu.truncate(n_nl_iq);
    IpmResult {
        x,
        status,
        iterations,
        lam,
        mu,
        mu_lower,
        mu_upper,
        feas,
    }
}
