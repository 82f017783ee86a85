//! Discrete-time node dynamics
//! `y_i^k = f(sum_j w_ij y_j^{k-1}) + u_i^{k-1}` from the zero state.
//!
//! A pulse of amplitude `x` at the source at `k = 0` reaches layer `l` at
//! `k = l + 1`, so the sink reads `F(x)` exactly once, at `k = L + 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identifiability::CoefficientTarget;
use crate::network::{LayeredTopology, Network, NetworkError};
use crate::series::fmt_f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("node {node} at step {k}: argument {arg} outside the validated series radius {radius}")]
    SeriesDomainExceeded { node: usize, k: usize, arg: f64, radius: f64 },
    #[error("horizon must be at least 1")]
    BadHorizon,
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("node {0} is not in the excited set")]
    NotExcited(usize),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("fit is ill-conditioned (condition number {condition:.3e})")]
    IllConditionedFit { condition: f64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Inputs `u_i^k`; nodes outside the excited set are identically zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExcitationSignal {
    excited: BTreeSet<usize>,
    values: BTreeMap<usize, Vec<f64>>,
}

impl ExcitationSignal {
    pub fn new(excited: impl IntoIterator<Item = usize>) -> Self {
        Self { excited: excited.into_iter().collect(), values: BTreeMap::new() }
    }

    /// Declares each node excited and applies the pulses.
    pub fn pulses(pulses: &[Pulse]) -> Self {
        let mut s = Self::new(pulses.iter().map(|p| p.node));
        for p in pulses {
            s.set(p.node, p.k, p.amplitude).expect("declared above");
        }
        s
    }

    pub fn set(&mut self, node: usize, k: usize, value: f64) -> Result<(), SimError> {
        if !self.excited.contains(&node) {
            return Err(SimError::NotExcited(node));
        }
        let v = self.values.entry(node).or_default();
        if v.len() <= k {
            v.resize(k + 1, 0.0);
        }
        v[k] = value;
        Ok(())
    }

    pub fn get(&self, node: usize, k: usize) -> f64 {
        self.values.get(&node).and_then(|v| v.get(k)).copied().unwrap_or(0.0)
    }

    pub fn excited(&self) -> impl Iterator<Item = usize> + '_ {
        self.excited.iter().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub node: usize,
    #[serde(default)]
    pub k: usize,
    pub amplitude: f64,
}

/// Experiment description as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub excited: Vec<usize>,
    pub pulses: Vec<Pulse>,
    pub horizon: usize,
    /// Defaults to the last layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured: Option<Vec<usize>>,
}

impl ExperimentConfig {
    pub fn excitation(&self) -> Result<ExcitationSignal, SimError> {
        let mut s = ExcitationSignal::new(self.excited.iter().copied().chain(self.pulses.iter().map(|p| p.node)));
        for p in &self.pulses {
            s.set(p.node, p.k, p.amplitude)?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub horizon: usize,
    pub network_hash: String,
    pub excited: Vec<usize>,
    pub measured: Vec<usize>,
    /// `outputs[k][node]`, `k = 0..=horizon`.
    pub outputs: Vec<Vec<f64>>,
}

impl Trace {
    pub fn y(&self, k: usize, node: usize) -> f64 {
        self.outputs[k][node]
    }

    /// CSV `k,node_id,y`, one row per step and node.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "node_id", "y"])?;
        for (k, row) in self.outputs.iter().enumerate() {
            for (node, y) in row.iter().enumerate() {
                w.write_record([k.to_string(), node.to_string(), fmt_f64(*y)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn sinks(t: &LayeredTopology) -> Vec<usize> {
    (0..t.width(t.depth())).map(|i| t.node_id(t.depth(), i)).collect()
}

pub fn run(net: &Network, excitation: &ExcitationSignal, horizon: usize) -> Result<Trace, SimError> {
    if horizon == 0 {
        return Err(SimError::BadHorizon);
    }
    let topo = net.topology();
    let n = topo.node_count();
    if let Some(bad) = excitation.excited().find(|&id| id >= n) {
        return Err(SimError::UnknownNode(bad));
    }
    let act = net.activation();
    let mut outputs = vec![vec![0.0; n]];
    for k in 1..=horizon {
        let prev = &outputs[k - 1];
        let mut cur = vec![0.0; n];
        for l in 0..=topo.depth() {
            for i in 0..topo.width(l) {
                let id = topo.node_id(l, i);
                let fx = if l == 0 {
                    0.0
                } else {
                    let base = topo.node_id(l - 1, 0);
                    let arg: f64 = net.weights().row(l, i).iter().enumerate().map(|(j, w)| w * prev[base + j]).sum();
                    act.eval(arg)
                        .map_err(|e| SimError::SeriesDomainExceeded { node: id, k, arg: e.arg, radius: e.radius })?
                };
                cur[id] = fx + excitation.get(id, k - 1);
            }
        }
        outputs.push(cur);
    }
    Ok(Trace {
        horizon,
        network_hash: net.content_hash(),
        excited: excitation.excited().collect(),
        measured: sinks(topo),
        outputs,
    })
}

/// Sink reading `y^{L+1}` after a source pulse of amplitude `x` at `k = 0`,
/// i.e. the measured function `F(x)`.
pub fn pulse_response(net: &Network, x: f64) -> Result<f64, SimError> {
    let topo = net.topology();
    topo.require_single_io()?;
    let exc = ExcitationSignal::pulses(&[Pulse { node: 0, k: 0, amplitude: x }]);
    let depth = topo.depth();
    let trace = run(net, &exc, depth + 1)?;
    Ok(trace.y(depth + 1, topo.node_id(depth, 0)))
}

/// Symmetric grid `+-x` with magnitudes log-spaced on `[1e-3, 1e-1]`.
pub fn default_fit_grid(order: usize) -> Vec<f64> {
    let m = (2 * order).max(8);
    let mut xs = Vec::with_capacity(2 * m);
    for i in 0..m {
        let x = 10f64.powf(-3.0 + 2.0 * i as f64 / (m - 1) as f64);
        xs.push(-x);
        xs.push(x);
    }
    xs
}

/// Condition numbers above this are flagged.
pub const FIT_CONDITION_WARN: f64 = 1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFit {
    pub target: CoefficientTarget,
    /// Number of monomials fitted; the surplus absorbs truncation bias.
    pub fit_degree: usize,
    pub residual_rms: f64,
    pub condition_number: f64,
    pub ill_conditioned: bool,
}

/// Least-squares MacLaurin coefficients `c_1..c_order` from `(x, F(x))`.
///
/// The fit uses `2*order` monomials and reports the first `order`: with only
/// `order` terms, the unfitted `x^{order+1}` tail biases every coefficient by
/// roughly `A_{order+1} |x|`, far above the noise floor on the default grid.
pub fn estimate_coeffs_from_samples(samples: &[(f64, f64)], order: usize) -> Result<CoefficientFit, SimError> {
    let degree = 2 * order.max(1);
    if samples.len() < degree {
        return Err(SimError::TooFewSamples { need: degree, got: samples.len() });
    }
    let scale = samples.iter().map(|s| s.0.abs()).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(SimError::IllConditionedFit { condition: f64::INFINITY });
    }
    let v = DMatrix::from_fn(samples.len(), degree, |r, c| (samples[r].0 / scale).powi(c as i32 + 1));
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
    let svd = v.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < 1e15) {
        return Err(SimError::IllConditionedFit { condition });
    }
    let sol = svd.solve(&y, 0.0).expect("U and V were computed");
    let resid = &v * &sol - &y;
    let coeffs: Vec<f64> = (0..order).map(|k| sol[k] / scale.powi(k as i32 + 1)).collect();
    Ok(CoefficientFit {
        target: CoefficientTarget::from_coeffs(coeffs),
        fit_degree: degree,
        residual_rms: resid.norm() / (samples.len() as f64).sqrt(),
        condition_number: condition,
        ill_conditioned: condition > FIT_CONDITION_WARN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{AnalyticActivation, WeightMatrix};

    fn net(layers: Vec<usize>, w: Vec<f64>, act: AnalyticActivation) -> Network {
        let t = LayeredTopology::new(layers).unwrap();
        Network::new(WeightMatrix::from_flat(&t, w).unwrap(), act).unwrap()
    }

    #[test]
    fn pulse_examples() {
        let p = net(vec![1, 1, 1], vec![2.0, 3.0], AnalyticActivation::polynomial(vec![1.0, 1.0]));
        assert!((pulse_response(&p, 0.1).unwrap() - 1.2384).abs() < 1e-14);
        assert_eq!(pulse_response(&p, 0.0).unwrap(), 0.0);
        let lin = net(vec![1, 1, 1], vec![2.0, 3.0], AnalyticActivation::polynomial(vec![1.0]));
        assert_eq!(pulse_response(&lin, 1.0).unwrap(), 6.0);
    }

    #[test]
    fn delay_structure() {
        let p = net(vec![1, 1, 1], vec![2.0, 3.0], AnalyticActivation::polynomial(vec![1.0, 1.0]));
        let exc = ExcitationSignal::pulses(&[Pulse { node: 0, k: 0, amplitude: 0.1 }]);
        let tr = run(&p, &exc, 6).unwrap();
        let sink = 2;
        for k in 0..=6 {
            let expect = if k == 3 { 1.2384 } else { 0.0 };
            assert!((tr.y(k, sink) - expect).abs() < 1e-14, "k = {k}");
        }
    }

    #[test]
    fn zero_excitation_is_zero() {
        let p = net(vec![1, 2, 1], vec![1.0, 2.0, 3.0, 4.0], AnalyticActivation::Tanh);
        let tr = run(&p, &ExcitationSignal::new([0]), 5).unwrap();
        assert!(tr.outputs.iter().flatten().all(|&y| y == 0.0));
    }

    #[test]
    fn series_domain_is_checked() {
        let p = net(vec![1, 1, 1], vec![2.0, 3.0], AnalyticActivation::maclaurin(vec![1.0, 1.0]));
        let err = pulse_response(&p, 0.2).unwrap_err();
        assert!(matches!(err, SimError::SeriesDomainExceeded { node: 2, k: 3, .. }));
        assert!(pulse_response(&p, 0.01).is_ok());
    }

    #[test]
    fn excitation_set_is_enforced() {
        let mut e = ExcitationSignal::new([0]);
        assert_eq!(e.set(1, 0, 1.0), Err(SimError::NotExcited(1)));
        assert!(e.set(0, 2, 1.0).is_ok());
        assert_eq!(e.get(0, 2), 1.0);
        assert_eq!(e.get(0, 7), 0.0);
    }

    #[test]
    fn fit_examples() {
        let p = net(vec![1, 1, 1], vec![2.0, 3.0], AnalyticActivation::polynomial(vec![1.0, 1.0]));
        let samples: Vec<(f64, f64)> =
            default_fit_grid(2).into_iter().map(|x| (x, pulse_response(&p, x).unwrap())).collect();
        let fit = estimate_coeffs_from_samples(&samples, 2).unwrap();
        assert!((fit.target.coeffs[0] - 6.0).abs() < 1e-6);
        assert!((fit.target.coeffs[1] - 48.0).abs() < 1e-6);

        let zeros = vec![(0.0, 0.0); 8];
        assert!(matches!(estimate_coeffs_from_samples(&zeros, 2), Err(SimError::IllConditionedFit { .. })));

        let lin = net(vec![1, 1, 1], vec![2.0, 3.0], AnalyticActivation::polynomial(vec![1.0]));
        let s: Vec<(f64, f64)> = default_fit_grid(1).into_iter().map(|x| (x, pulse_response(&lin, x).unwrap())).collect();
        let fit = estimate_coeffs_from_samples(&s, 1).unwrap();
        assert!((fit.target.coeffs[0] - 6.0).abs() < 1e-12);
        assert!(fit.residual_rms < 1e-15);
    }

    #[test]
    fn trace_csv() {
        let p = net(vec![1, 1], vec![2.0], AnalyticActivation::polynomial(vec![1.0]));
        let tr = run(&p, &ExcitationSignal::pulses(&[Pulse { node: 0, k: 0, amplitude: 1.0 }]), 2).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("k,node_id,y"));
        assert!(text.contains("\n2,1,2.0\n"));
    }
}
