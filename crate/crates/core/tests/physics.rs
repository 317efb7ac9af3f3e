mod common;

use common::*;
use gridvolt::acpf::{branch_flows, bus_injections, flow_jacobian, injection_jacobian, objective_cost};
use gridvolt::oracle::{solve_opf, solve_power_flow, SolverConfig};
use gridvolt::recon::{generator_dispatch, reconstruct};
use gridvolt::{Loads, VoltageState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ybus_matches_reference_assembly() {
    for name in CASES {
        let net = case(name);
        let want = reference_ybus(&net);
        let got = net.ybus();
        for i in 0..net.n_bus() {
            for j in 0..net.n_bus() {
                assert!((got[(i, j)] - want[i][j]).norm() < 1e-12, "{name} ({i},{j})");
            }
        }
    }
}

#[test]
fn injections_match_complex_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for name in CASES {
        let net = case(name);
        let ybus = reference_ybus(&net);
        let mut worst = 0.0_f64;
        for _ in 0..200 {
            let st = random_state(&net, &mut rng);
            let inj = bus_injections(&net, &st).unwrap();
            for (i, s) in complex_injections(&ybus, &st).iter().enumerate() {
                worst = worst.max((inj.p[i] - s.re).abs()).max((inj.q[i] - s.im).abs());
            }
        }
        assert!(worst <= 1e-10, "{name}: {worst:e}");
    }
}

#[test]
fn flows_match_complex_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for name in CASES {
        let net = case(name);
        for _ in 0..50 {
            let st = random_state(&net, &mut rng);
            let fl = branch_flows(&net, &st).unwrap();
            for (k, (sf, st_)) in complex_flows(&net, &st).iter().enumerate() {
                assert!((fl.p_from[k] - sf.re).abs() < 1e-10);
                assert!((fl.q_from[k] - sf.im).abs() < 1e-10);
                assert!((fl.p_to[k] - st_.re).abs() < 1e-10);
                assert!((fl.q_to[k] - st_.im).abs() < 1e-10);
                assert!((fl.s_from[k] - sf.norm()).abs() < 1e-10);
                assert!((fl.s_to[k] - st_.norm()).abs() < 1e-10);
            }
        }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

#[test]
fn injection_jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for name in CASES {
        let net = case(name);
        let n = net.n_bus();
        for _ in 0..5 {
            let st = random_state(&net, &mut rng);
            let jac = injection_jacobian(&net, &st).unwrap();
            let fd = central_jacobian(&st, 1e-6, |s| {
                let inj = bus_injections(&net, s).unwrap();
                inj.p.into_iter().chain(inj.q).collect()
            });
            for (c, col) in fd.iter().enumerate() {
                for r in 0..2 * n {
                    assert!(rel_err(jac[(r, c)], col[r]) <= 1e-6, "{name} ({r},{c})");
                }
            }
        }
    }
}

#[test]
fn flow_jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for name in CASES {
        let net = case(name);
        let nl = net.n_branch();
        for _ in 0..5 {
            let st = random_state(&net, &mut rng);
            let fj = flow_jacobian(&net, &st).unwrap();
            let fd = central_jacobian(&st, 1e-6, |s| {
                let fl = branch_flows(&net, s).unwrap();
                fl.s_from.into_iter().chain(fl.s_to).collect()
            });
            for (c, col) in fd.iter().enumerate() {
                for r in (0..2 * nl).filter(|r| !fj.singular[*r]) {
                    assert!(rel_err(fj.matrix[(r, c)], col[r]) <= 1e-6, "{name} ({r},{c})");
                }
            }
        }
    }
}

fn balance_residual(net: &gridvolt::Network, loads: &Loads, st: &VoltageState) -> f64 {
    let pt = reconstruct(net, loads, st).unwrap();
    let inj = bus_injections(net, st).unwrap();
    (0..net.n_bus())
        .map(|i| {
            let dp = pt.pg_bus[i] - pt.pd_hat[i] + pt.mismatch_p[i] - inj.p[i];
            let dq = pt.qg_bus[i] - pt.qd_hat[i] + pt.mismatch_q[i] - inj.q[i];
            dp.abs().max(dq.abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn reconstruction_balances_every_bus() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for name in CASES {
        let net = case(name);
        let loads = net.default_loads();
        for _ in 0..100 {
            let st = random_state(&net, &mut rng);
            assert!(balance_residual(&net, &loads, &st) <= 1e-12, "{name}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reconstruction_balances_any_state(
        vm in prop::collection::vec(0.5f64..1.5, 30),
        va in prop::collection::vec(-3.0f64..3.0, 30),
        scale in 0.0f64..2.0,
    ) {
        let net = case("case30");
        let loads = net.default_loads().scaled(scale);
        let st = VoltageState { vm, va };
        prop_assert!(balance_residual(&net, &loads, &st) <= 1e-12);
    }

    #[test]
    fn given_loads_are_served_exactly_where_generation_sits(
        vm in prop::collection::vec(0.9f64..1.1, 14),
        va in prop::collection::vec(-0.3f64..0.3, 14),
    ) {
        let net = case("case14");
        let loads = net.default_loads();
        let pt = reconstruct(&net, &loads, &VoltageState { vm, va }).unwrap();
        for i in 0..net.n_bus() {
            if net.has_generator(i) {
                prop_assert_eq!(pt.pd_hat[i], loads.pd[i]);
                prop_assert_eq!(pt.qd_hat[i], loads.qd[i]);
            }
        }
    }
}

#[test]
fn opf_beats_feasible_perturbed_dispatches() {
    let net = case("case14");
    let loads = net.default_loads();
    let sol = solve_opf(&net, &loads, &SolverConfig { tol: 1e-9, max_iter: 300, ..SolverConfig::default() });
    assert!(sol.converged());
    let reference = net.reference_bus();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (mut checked, mut rejected) = (0, 0);
    for _ in 0..200 {
        let mut pg = sol.pg.clone();
        let mut vm = sol.state.vm.clone();
        for (k, g) in net.generators().iter().enumerate() {
            if net.generator_bus(k) != reference {
                pg[k] = (pg[k] + rand::Rng::gen_range(&mut rng, -0.02..0.02)).clamp(g.pmin, g.pmax);
            }
        }
        for (v, b) in vm.iter_mut().zip(net.buses()) {
            *v = (*v + rand::Rng::gen_range(&mut rng, -0.002..0.002)).clamp(b.vmin, b.vmax);
        }
        let Ok(pf) = solve_power_flow(&net, &loads, &pg, &vm, &sol.state) else {
            continue;
        };
        let pt = reconstruct(&net, &loads, &pf.state).unwrap();
        let dispatch = generator_dispatch(&net, &pt.pg_bus);
        let qdispatch = generator_dispatch(&net, &pt.qg_bus);
        let within = net.generators().iter().enumerate().all(|(k, g)| {
            (g.pmin..=g.pmax).contains(&dispatch[k]) && (g.qmin..=g.qmax).contains(&qdispatch[k])
        }) && net
            .buses()
            .iter()
            .enumerate()
            .all(|(i, b)| (b.vmin..=b.vmax).contains(&pf.state.vm[i]));
        if !within {
            rejected += 1;
            continue;
        }
        checked += 1;
        let cost = objective_cost(&net, &dispatch).unwrap();
        assert!(cost >= sol.objective * (1.0 - 1e-7), "{cost} < {}", sol.objective);
    }
    assert!(checked >= 20, "only {checked} feasible perturbations ({rejected} out of bounds)");
}
