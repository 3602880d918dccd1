use super::*;
use crate::net::fixtures::*;
use crate::net::{parse_matpower_case, scale_loads, Generator, PolyCost};
use crate::placement::{DerMode, DerUnit};

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
    c
}

fn solve(c: &NetworkCase) -> OpfSolution {
    let s = solve_opf(c, &OpfOptions::default()).unwrap();
    s.require_converged().unwrap();
    s
}

fn assert_kkt(c: &NetworkCase, s: &OpfSolution) {
    let r = kkt_residual(c, s).unwrap();
    assert!(r.max() <= 1e-6, "{r:?}");
}

#[derive(serde::Deserialize)]
struct Golden {
    objective: f64,
    p_gen_mw: Vec<f64>,
    lambda_p: Vec<f64>,
}

fn golden(text: &str) -> Golden {
    serde_json::from_str(text).unwrap()
}

#[test]
fn uncongested_two_bus() {
    let c = two_bus();
    let s = solve(&c);
    assert!((s.objective - 1000.0).abs() < 1e-4, "{}", s.objective);
    for l in &s.lambda_p {
        assert!((l - 20.0).abs() < 1e-5, "{:?}", s.lambda_p);
    }
    assert!(s.binding_set.is_empty());
    assert!(s.mu.iter().all(|m| *m >= 0.0));
    assert_kkt(&c, &s);
}

#[test]
fn congested_two_bus() {
    let c = congested();
    let s = solve(&c);
    assert!((s.lambda_p[0] - 20.0).abs() < 1e-4, "{:?}", s.lambda_p);
    assert!((s.lambda_p[1] - 30.0).abs() < 1e-4, "{:?}", s.lambda_p);
    let flow = ConstraintId {
        kind: ConstraintKind::FlowFrom,
        index: 0,
    };
    assert!(s.binding_set.contains(&flow), "{:?}", s.binding_set);
    let mu = s.branch_mu(0);
    assert!((mu - 10.0).abs() < 0.2, "mu {mu}");
    assert!(s.mu_of(flow).unwrap() > 0.0);
    assert_kkt(&c, &s);
}

#[test]
fn mu_nonnegative_and_complementary() {
    let c = parse_matpower_case(CASE30).unwrap();
    let s = solve(&c);
    for ((id, m), sl) in s.constraints.iter().zip(&s.mu).zip(&s.slack) {
        assert!(*m >= 0.0, "{id} {m}");
        if *m > 1e-6 {
            assert!(s.binding_set.contains(id));
        }
        assert!(*sl > -1e-6, "{id} violated by {sl}");
    }
}

#[test]
fn kkt_detects_perturbed_lambda() {
    let c = parse_matpower_case(CASE14).unwrap();
    let mut s = solve(&c);
    let before = kkt_residual(&c, &s).unwrap();
    assert!(before.max() <= 1e-6, "{before:?}");
    s.lambda_p[8] += 1.0;
    let after = kkt_residual(&c, &s).unwrap();
    assert!(after.stationarity > before.stationarity);
    // +1 $/MWh is 1/norm in internal units, times a unit Jacobian entry
    assert!(after.stationarity > 1e-3, "{after:?}");
}

#[test]
fn case14_matches_reference() {
    let c = parse_matpower_case(CASE14).unwrap();
    let g = golden(include_str!("../../fixtures/golden_case14_opf.json"));
    let s = solve(&c);
    assert!((s.objective - g.objective).abs() / g.objective < 1e-3);
    let pmax = g.p_gen_mw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in s.p_gen.iter().zip(&g.p_gen_mw) {
        assert!((a - b).abs() / pmax < 1e-3, "{:?}", s.p_gen);
    }
    for (a, b) in s.lambda_p.iter().zip(&g.lambda_p) {
        assert!((a - b).abs() / b < 1e-3, "{a} vs {b}");
    }
    assert_kkt(&c, &s);
}

#[test]
fn case30_matches_reference() {
    let c = parse_matpower_case(CASE30).unwrap();
    let g = golden(include_str!("../../fixtures/golden_case30_opf.json"));
    let s = solve(&c);
    assert!((s.objective - g.objective).abs() / g.objective < 1e-3);
    for (a, b) in s.lambda_p.iter().zip(&g.lambda_p) {
        assert!((a - b).abs() / b < 1e-3, "{a} vs {b}");
    }
    assert_kkt(&c, &s);
}

#[test]
fn rts_solves_at_peak() {
    let c = parse_matpower_case(CASE24).unwrap();
    let s = solve(&c);
    assert_kkt(&c, &s);
    assert!(s.lambda_p.iter().all(|l| l.is_finite() && *l > 0.0));
}

#[test]
fn shortfall_reported_as_infeasible() {
    let mut c = two_bus();
    c.buses[1].p_demand = 500.0;
    let s = solve_opf(&c, &OpfOptions::default()).unwrap();
    assert_eq!(s.status, OpfStatus::Infeasible);
    assert!(s.lambda_p.iter().all(|l| l.is_nan()));
    assert!(matches!(s.require_converged(), Err(OpfError::Infeasible { .. })));
}

#[test]
fn rejects_bad_options() {
    let o = OpfOptions {
        feas_tol: 0.0,
        ..OpfOptions::default()
    };
    assert!(matches!(
        solve_opf(&two_bus(), &o),
        Err(OpfError::InvalidArgument(_))
    ));
}

#[test]
fn finite_difference_two_bus() {
    let o = OpfOptions::default();
    for bus in [1, 2] {
        let fd = finite_difference_lambda(&two_bus(), bus, 0.1, &o).unwrap();
        assert!((fd - 20.0).abs() < 1e-3, "{fd}");
    }
    let fd = finite_difference_lambda(&congested(), 2, 0.1, &o).unwrap();
    assert!((fd - 30.0).abs() < 1e-3, "{fd}");
}

#[test]
fn finite_difference_case14_load_buses() {
    let c = parse_matpower_case(CASE14).unwrap();
    let o = OpfOptions::default();
    let s = solve(&c);
    for bus in c.load_buses() {
        let pos = c.bus_position(bus).unwrap();
        let eps = 0.01 * c.buses[pos].p_demand;
        match finite_difference_lambda(&c, bus, eps, &o) {
            Ok(fd) => {
                let l = s.lambda_p[pos];
                assert!(
                    (fd - l).abs() <= (0.005 * l.abs()).max(0.01),
                    "bus {bus}: {fd} vs {l}"
                );
            }
            Err(OpfError::BindingSetChanged { .. }) => {}
            Err(e) => panic!("bus {bus}: {e}"),
        }
    }
}

#[test]
fn objective_monotone_in_demand() {
    let c = parse_matpower_case(CASE14).unwrap();
    let mut prev = f64::NEG_INFINITY;
    for f in [0.6, 0.8, 1.0] {
        let s = solve(&scale_loads(&c, f).unwrap());
        assert!(s.objective > prev);
        prev = s.objective;
    }
}

#[test]
fn validity_range_two_bus() {
    let o = OpfOptions::default();
    let probe = DerUnit::new(10.0, 0.0, DerMode::NonDispatchablePq);
    let r = validity_range(&two_bus(), 2, &probe, &o).unwrap();
    assert_eq!(r.delta_p_max, 10.0);
    assert!(r.reached_cap());

    let probe = DerUnit::new(30.0, 0.0, DerMode::NonDispatchablePq);
    let r = validity_range(&congested(), 2, &probe, &o).unwrap();
    assert!((r.delta_p_max - 10.0).abs() <= o.range_tol, "{}", r.delta_p_max);
    let flow = ConstraintId {
        kind: ConstraintKind::FlowFrom,
        index: 0,
    };
    assert!(r.left.contains(&flow), "{r:?}");
    assert_eq!(flow.to_string(), "flow_from branch 1");
}

#[test]
fn validity_range_ignores_probe_generator() {
    let o = OpfOptions::default();
    let probe = DerUnit::new(10.0, 5.0, DerMode::DispatchableQ);
    let r = validity_range(&two_bus(), 2, &probe, &o).unwrap();
    assert!(r.reached_cap(), "{r:?}");
}

#[test]
fn injections_balance_at_optimum() {
    let c = parse_matpower_case(CASE30).unwrap();
    let s = solve(&c);
    let inj = injections(&c, &s.v_mag, &s.v_ang);
    let losses: f64 = inj.p_inj.iter().sum();
    let gen: f64 = s.p_gen.iter().sum();
    assert!(losses >= 0.0);
    assert!((gen - c.total_p_demand() - losses).abs() < 1e-4);
}

#[test]
fn validity_range_matches_sweep_case14() {
    let c = parse_matpower_case(CASE14).unwrap();
    let o = OpfOptions::default();
    let s = solve(&c);
    let ids: Vec<_> = c.buses.iter().map(|b| b.id).collect();
    let top = crate::mcs::rank_buses(&ids, &s.lambda_p, &c.load_buses())[0];
    let probe = DerUnit::new(30.0, 10.0, DerMode::NonDispatchablePq);
    let r = validity_range(&c, top, &probe, &o).unwrap();

    // brute force: last 1 MW step before the binding set first changes
    let mut sweep = probe.p_size;
    for k in 1..=30 {
        let placed = crate::placement::apply_der(&c, top, &probe.scaled_to(k as f64)).unwrap();
        let p = solve_opf(&placed, &o).unwrap();
        if !p.is_converged() || p.binding_set != s.binding_set {
            sweep = (k - 1) as f64;
            break;
        }
    }
    assert!(
        (r.delta_p_max - sweep).abs() <= 1.0,
        "bus {top}: {} vs sweep {sweep}",
        r.delta_p_max
    );
}
