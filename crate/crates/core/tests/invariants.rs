use hyperlb::ctmc::{build_generator, oracle_metrics, stationary};
use hyperlb::des::{run, SimConfig};
use hyperlb::fluid_async::{integrate_async, rhs_async, AsyncOptions};
use hyperlb::fluid_sync::{integrate_sync, SyncOptions};
use hyperlb::model::tri_len;
use hyperlb::{FixedPoint, FluidState, ModelParams, PolicySpec, Trajectory};
use proptest::prelude::*;

fn state(jmax: usize) -> impl Strategy<Value = FluidState> {
    proptest::collection::vec(0.0f64..1.0, tri_len(jmax)).prop_filter_map("zero mass", move |v| {
        let total: f64 = v.iter().sum();
        (total > 1e-3)
            .then(|| FluidState::from_dense(jmax, v.iter().map(|x| x / total).collect()).unwrap())
    })
}

fn policy() -> impl Strategy<Value = PolicySpec> {
    prop_oneof![
        (0.1f64..3.0).prop_map(|delta| PolicySpec::SujsqDet { delta }),
        (0.1f64..3.0).prop_map(|delta| PolicySpec::SujsqExp { delta }),
        (0.1f64..3.0).prop_map(|delta| PolicySpec::AujsqDet { delta }),
        (0.1f64..3.0).prop_map(|delta| PolicySpec::AujsqExp { delta }),
        (0.1f64..3.0).prop_map(|delta| PolicySpec::SujsqDetIdle { delta }),
        Just(PolicySpec::Jiq),
        (0.0f64..=1.0).prop_map(|p| PolicySpec::JiqP { p }),
        (1usize..4).prop_map(|d| PolicySpec::JsqD { d }),
        Just(PolicySpec::Random),
        Just(PolicySpec::RoundRobin),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn async_flow_keeps_mass_and_sign(y in state(5), lambda in 0.1f64..0.95, delta in 0.2f64..3.0) {
        let y0 = y.with_jmax(30).unwrap();
        let run = integrate_async(&y0, lambda, delta, 3.0, AsyncOptions::for_delta(delta)).unwrap();
        for s in &run.trajectory.states {
            prop_assert!((s.total() - 1.0).abs() < 1e-9);
            prop_assert!(s.as_slice().iter().all(|&x| x >= -1e-12));
        }
    }

    #[test]
    fn sync_flow_keeps_mass_and_sign(y in state(5), lambda in 0.1f64..0.95, delta in 0.2f64..3.0) {
        let y0 = y.with_jmax(30).unwrap();
        let run = integrate_sync(&y0, lambda, delta, 3.0, SyncOptions::for_delta(delta)).unwrap();
        for s in &run.trajectory.states {
            prop_assert!((s.total() - 1.0).abs() < 1e-9);
            prop_assert!(s.as_slice().iter().all(|&x| x >= -1e-12));
        }
    }

    #[test]
    fn async_rhs_sums_to_zero(y in state(6), lambda in 0.05f64..0.95, delta in 0.05f64..5.0) {
        let dy = rhs_async(&y.with_jmax(12).unwrap(), lambda, delta).unwrap();
        prop_assert!(dy.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn fixed_point_is_a_distribution(lambda in 0.05f64..0.95, delta in 0.05f64..5.0) {
        let fp = FixedPoint::compute(lambda, delta).unwrap();
        let f = fp.y_star.derive();
        prop_assert!((fp.y_star.total() - 1.0).abs() < 1e-12);
        prop_assert!((f.v(0) - (1.0 - lambda)).abs() < 1e-9);
        prop_assert!((fp.q_tilde - fp.mean_queue_from_cells()).abs() < 1e-9);
        prop_assert!(fp.y_star.support(0.0) <= fp.m_star + 1);
    }

    #[test]
    fn policy_selectors_round_trip(p in policy()) {
        let text = p.to_string();
        prop_assert_eq!(text.parse::<PolicySpec>().unwrap(), p);
        let json = serde_json::to_string(&p).unwrap();
        prop_assert_eq!(serde_json::from_str::<PolicySpec>(&json).unwrap(), p);
    }

    #[test]
    fn simulation_accounting(p in policy(), seed in 0u64..1000, n in 3usize..12) {
        let params = ModelParams::new(n, 0.6, 1.0).unwrap();
        let r = run(&SimConfig::new(params, p, 60.0, seed).with_trajectory(1.0)).unwrap();
        prop_assert!(r.mean_wait >= 0.0 && r.msgs_per_job >= 0.0);
        prop_assert!((r.queue_len_hist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&r.frac_delayed));
        let traj = r.trajectory.unwrap();
        for s in &traj.states {
            prop_assert!((s.total() - 1.0).abs() < 1e-12);
        }
        if let PolicySpec::JsqD { d } = p {
            prop_assert_eq!(r.msgs_per_job, 2.0 * d as f64);
        }
    }

    #[test]
    fn oracle_law_is_normalised(lambda in 0.1f64..0.9, delta in 0.3f64..3.0, sync in any::<bool>()) {
        let p = if sync { PolicySpec::SujsqExp { delta } } else { PolicySpec::AujsqExp { delta } };
        let chain = build_generator(&ModelParams::new(2, lambda, delta).unwrap(), &p, 4).unwrap();
        let pi = stationary(&chain).unwrap();
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let m = oracle_metrics(&chain, &pi);
        prop_assert!((m.queue_marginal.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!(m.mean_queue >= 0.0);
    }
}

#[test]
fn trajectory_csv_round_trip() {
    let fp = FixedPoint::compute(0.7, 0.3).unwrap();
    let run = integrate_async(&fp.y_star, 0.7, 0.3, 1.0, AsyncOptions::for_delta(0.3)).unwrap();
    let mut buf = Vec::new();
    run.trajectory.write_csv(&mut buf).unwrap();
    let back = Trajectory::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.times, run.trajectory.times);
    for (a, b) in back.states.iter().zip(&run.trajectory.states) {
        assert!(a.sup_distance(b) < 1e-15);
    }
}

#[test]
fn replications_are_order_independent() {
    let params = ModelParams::new(30, 0.7, 0.5).unwrap();
    let cfg = SimConfig::new(params, PolicySpec::AujsqExp { delta: 0.5 }, 200.0, 9);
    let a = hyperlb::des::run_replications(&cfg, 6).unwrap();
    let b = hyperlb::des::run_replications(&cfg, 6).unwrap();
    assert_eq!(a, b);
}
