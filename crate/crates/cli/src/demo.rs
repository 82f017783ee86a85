//! Reference fixtures, recomputed and checked.

use netident_core::exp_recovery::{recover_exp, ExpRecoveryOptions, NetworkOracle};
use netident_core::identifiability::{jacobian, rank_at, DEFAULT_RANK_TOL};
use netident_core::network::{permute_hidden_layer, AnalyticActivation, LayeredTopology, Network, WeightMatrix};
use netident_core::series::{propagate, series_close};

fn net(layers: &[usize], flat: &[f64], act: AnalyticActivation) -> Network {
    let t = LayeredTopology::new(layers.to_vec()).expect("fixture topology");
    Network::new(WeightMatrix::from_flat(&t, flat.to_vec()).expect("fixture weights"), act).expect("fixture network")
}

fn check(name: &str, ok: bool, detail: String) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

/// Prints one line per fixture; true when all pass.
pub fn run() -> bool {
    let quad = AnalyticActivation::polynomial(vec![1.0, 1.0]);
    let square = AnalyticActivation::polynomial(vec![0.0, 1.0]);
    let mut all = true;

    let path3 = net(&[1, 1, 1], &[2.0, 3.0], quad.clone());
    let a = propagate(&path3, 4).map(|s| s.coeffs().to_vec()).unwrap_or_default();
    all &= check("path-3 coefficients", series_close(&a, &[6.0, 48.0, 144.0, 144.0], 1e-12, 0.0), format!("{a:?}"));

    let det = jacobian(&path3, 2).map(|j| j.determinant()).unwrap_or(f64::NAN);
    all &= check("path-3 Jacobian determinant", (det + 12.0).abs() < 1e-10, format!("{det}"));

    let diamond = net(&[1, 2, 1], &[0.7, 1.9, 1.3, 0.4], quad.clone());
    let swapped = permute_hidden_layer(&diamond, 1, &[1, 0]).expect("valid permutation");
    let (p, q) = (propagate(&diamond, 8), propagate(&swapped, 8));
    let same = matches!((&p, &q), (Ok(p), Ok(q)) if series_close(p.coeffs(), q.coeffs(), 1e-12, 0.0));
    all &= check("diamond hidden-node swap", same, format!("W' = {:?}", swapped.weights().to_blocks()));

    let degenerate = net(&[1, 2, 1], &[1.0, 1.0, 1.0, 1.0], quad);
    let r = rank_at(&degenerate, 6, DEFAULT_RANK_TOL).map(|r| r.rank).unwrap_or(usize::MAX);
    all &= check("diamond degeneracy w21 = w31", r < 4, format!("rank {r} of 4"));

    let sq = net(&[1, 1, 1], &[2.0, 3.0], square.clone());
    let r = rank_at(&sq, 4, DEFAULT_RANK_TOL).map(|r| r.rank).unwrap_or(usize::MAX);
    all &= check("path-3 with f = x^2 is rank deficient", r < 2, format!("rank {r} of 2"));

    let scaled = net(&[1, 1, 1], &[1.0, 12.0], square);
    let (p, q) = (propagate(&sq, 8), propagate(&scaled, 8));
    let same = matches!((&p, &q), (Ok(p), Ok(q)) if series_close(p.coeffs(), q.coeffs(), 1e-12, 0.0));
    all &= check("scaling witness (w21/2, 4 w32)", same, "A_1..A_8 unchanged".into());

    let exp121 = net(&[1, 2, 1], &[3.0, 1.0, 2.0, 0.5], AnalyticActivation::Expm1);
    let opts = ExpRecoveryOptions { schedule: vec![4.0, 8.0, 16.0, 32.0], ..Default::default() };
    let detail = match recover_exp(&NetworkOracle(&exp121), exp121.topology(), &opts) {
        Ok(r) => r.with_ground_truth(exp121.weights()).max_relative_error.unwrap_or(f64::INFINITY),
        Err(_) => f64::INFINITY,
    };
    all &= check("exponential recovery [1,2,1]", detail <= 1e-3, format!("max relative error {detail:.3e}"));

    all
}
