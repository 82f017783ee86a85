use proptest::prelude::*;

use netident_core::network::{AnalyticActivation, LayeredTopology, Network, WeightMatrix};
use netident_core::series::propagate;
use netident_core::simulator::{pulse_response, run, ExcitationSignal, Pulse};

fn siso() -> impl Strategy<Value = LayeredTopology> {
    prop::collection::vec(1usize..=3, 0..=2).prop_map(|hidden| {
        let mut s = vec![1];
        s.extend(hidden);
        s.push(1);
        LayeredTopology::new(s).unwrap()
    })
}

fn weight() -> impl Strategy<Value = f64> {
    prop_oneof![-2.0f64..-0.3, 0.3f64..2.0]
}

fn activation() -> impl Strategy<Value = AnalyticActivation> {
    prop_oneof![
        Just(AnalyticActivation::Expm1),
        Just(AnalyticActivation::Tanh),
        (weight(), -1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b, c)| AnalyticActivation::polynomial(vec![a, b, c])),
    ]
}

fn net() -> impl Strategy<Value = Network> {
    (siso(), activation())
        .prop_flat_map(|(t, f)| {
            let e = t.edge_count();
            (Just(t), prop::collection::vec(weight(), e), Just(f))
        })
        .prop_map(|(t, w, f)| Network::new(WeightMatrix::from_flat(&t, w).unwrap(), f).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pulse_response_matches_truncated_series(n in net(), sign in prop::bool::ANY) {
        let x = if sign { 1e-2 } else { -1e-2 };
        let a = propagate(&n, 8).unwrap();
        let r = (pulse_response(&n, x).unwrap() - a.eval(x)).abs();
        prop_assert!(r < 1e-8, "remainder {r:e}");
    }

    #[test]
    fn sink_is_silent_until_the_signal_arrives(n in net(), amp in weight()) {
        let depth = n.topology().depth();
        let sink = n.topology().node_id(depth, 0);
        let tr = run(&n, &ExcitationSignal::pulses(&[Pulse { node: 0, k: 0, amplitude: 0.1 * amp }]), depth + 3).unwrap();
        for k in 0..=depth {
            prop_assert_eq!(tr.y(k, sink), 0.0);
        }
        prop_assert!(tr.y(depth + 1, sink) != 0.0);
    }
}

#[test]
fn nonlinear_nodes_break_superposition() {
    // two sources into one node into the sink, f(x) = x + x^2
    let t = LayeredTopology::new(vec![2, 1, 1]).unwrap();
    let n = Network::new(
        WeightMatrix::from_flat(&t, vec![0.8, -1.1, 1.4]).unwrap(),
        AnalyticActivation::polynomial(vec![1.0, 1.0]),
    )
    .unwrap();
    let sink = |u1: f64, u2: f64| {
        let exc = ExcitationSignal::pulses(&[Pulse { node: 0, k: 0, amplitude: u1 }, Pulse { node: 1, k: 0, amplitude: u2 }]);
        run(&n, &exc, 4).unwrap().y(3, 3)
    };
    for (u1, u2) in [(0.3, -0.7), (0.5, 0.5), (-0.2, 0.9)] {
        let joint = sink(u1, u2);
        let split = sink(u1, 0.0) + sink(0.0, u2);
        assert!((joint - split).abs() > 1e-3, "u = ({u1}, {u2}): {joint} vs {split}");
    }
}
