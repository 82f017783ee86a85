//! Constructive weight recovery for `f(x) = e^x - 1` with ordered positive
//! weights, from sink readings only.
//!
//! Node outputs are `F^l_i(x) = expm1(sum_j w^l_ij F^{l-1}_j(x))`. With every
//! column of every block strictly decreasing, one term dominates each sum as
//! `x -> inf`, and the statistic
//!
//! ```text
//! G^l_ij(x) = [ ln( ln_{L-l} F - sum_{i'<i} w^{l+1}_{1i'} F^l_i' ) - sum_{j'<j} w^l_ij' F^{l-1}_j' ] / F^{l-1}_j
//! ```
//!
//! tends to `w^l_ij`. (At `l = L` the inner correction is absent and
//! `ln_0 F = F`.) Weights are recovered in an order that makes every weight
//! the formula references available first; internal outputs are rebuilt
//! from already-recovered weights, never read from the true network.
//!
//! The limit itself converges slowly: `G - w` decays like
//! `ln(w^{l+1}_{1i}) / F_j + sum_{j'>j} w_ij' F_j' / F_j`, and subtracting
//! reconstructed internals amplifies earlier estimation errors by up to
//! `e^{gap * x}`. Each weight is therefore estimated by extrapolation: the
//! known decay terms are fitted exactly on consecutive accepted points,
//! points whose propagated uncertainty is too large are rejected, and the
//! estimate is taken where successive extrapolations agree best.

pub mod bigreal;
pub mod tower;

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bigreal::BigReal;
pub use tower::{LogDiff, Tower, TowerError, GUARD_BITS};

use crate::network::{AnalyticActivation, EdgeIndex, LayeredTopology, Network, NetworkError, WeightMatrix};
use crate::par::{map_slice, Parallelism};

pub const DEFAULT_PRECISION_BITS: usize = 512;
pub const DEFAULT_MAX_PRECISION_BITS: usize = 8192;
/// Convergence threshold on the plateau score (relative).
pub const DEFAULT_TOL: f64 = 1e-2;
/// Deepest tower any forward pass may build.
const MAX_LEVEL: u32 = 32;
/// Rejection thresholds for individual G evaluations.
const MAX_SUBTRAHEND_REL_ERR: f64 = 1e-2;
const MAX_REMAINDER_REL_ERR: f64 = 0.1;
const MAX_G_REL_ERR: f64 = 1e-2;
const CORRECTION_ITERATIONS: usize = 8;
/// Times a non-converging weight's schedule may be densified.
const MAX_REFINEMENTS: usize = 3;
/// Residual of the re-simulated sink above which the result is suspect.
const MAX_SINK_RESIDUAL: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpRecoveryError {
    #[error("precision exhausted: {needed:.0} bits needed, {available} available")]
    PrecisionExhausted { needed: f64, available: usize },
    #[error("non-positive logarithm argument in the {stage} (x = {x})")]
    NonPositiveLogArgument { stage: &'static str, x: f64 },
    #[error("weight {edge} did not converge (plateau score {score:.3e})")]
    NotConverged { edge: EdgeIndex, score: f64, trace: Box<GEstimateTrace> },
    #[error("ordering violation suspected: {reason}")]
    OrderingViolationSuspected { reason: String, report: Box<RecoveryReport> },
    #[error("weight {0} is referenced before it has been recovered")]
    MissingDependency(EdgeIndex),
    #[error("exponential recovery needs the expm1 activation, got {0}")]
    WrongActivation(&'static str),
    #[error("weight {0} is not positive")]
    NonPositiveWeight(EdgeIndex),
    #[error("x must be finite and non-negative, got {0}")]
    BadArgument(f64),
    #[error("precision must be at least 64 bits, got {0}")]
    BadPrecision(usize),
    #[error("x-schedule must be non-empty, positive and strictly increasing")]
    BadSchedule,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl ExpRecoveryError {
    fn from_tower(e: TowerError, stage: &'static str, x: f64, precision: usize) -> Self {
        match e {
            TowerError::NonPositive => Self::NonPositiveLogArgument { stage, x },
            TowerError::PrecisionExhausted { needed, available } => Self::PrecisionExhausted { needed, available },
            TowerError::Overflow => Self::PrecisionExhausted { needed: f64::INFINITY, available: precision },
        }
    }
}

fn check_precision(p: usize) -> Result<(), ExpRecoveryError> {
    if p < 64 { Err(ExpRecoveryError::BadPrecision(p)) } else { Ok(()) }
}

/// All node outputs `F^l_i(x)`, layer by layer (`[0][0]` is `x`).
pub fn forward_big(net: &Network, x: f64, precision: usize) -> Result<Vec<Vec<Tower>>, ExpRecoveryError> {
    if net.activation() != &AnalyticActivation::Expm1 {
        return Err(ExpRecoveryError::WrongActivation(net.activation().kind()));
    }
    if !(x.is_finite() && x >= 0.0) {
        return Err(ExpRecoveryError::BadArgument(x));
    }
    check_precision(precision)?;
    let topo = net.topology();
    if let Some(e) = topo.edges().into_iter().find(|e| !(net.weight(e.layer, e.row, e.col) > 0.0)) {
        return Err(ExpRecoveryError::NonPositiveWeight(e));
    }
    let mut out = vec![vec![Tower::from_f64(x, precision)]];
    for l in 1..=topo.depth() {
        let mut layer = Vec::with_capacity(topo.width(l));
        for i in 0..topo.width(l) {
            let row: Vec<BigReal> = net.weights().row(l, i).iter().map(|&w| BigReal::from_f64(w, precision)).collect();
            let f = node_output(&out[l - 1], &row, precision);
            if f.level() > MAX_LEVEL {
                return Err(ExpRecoveryError::PrecisionExhausted { needed: f64::INFINITY, available: precision });
            }
            layer.push(f);
        }
        out.push(layer);
    }
    Ok(out)
}

fn weighted_sum(inputs: &[Tower], weights: &[BigReal], precision: usize) -> Tower {
    let mut acc: Option<Tower> = None;
    for (f, w) in inputs.iter().zip(weights) {
        let term = f.scale(&w.with_precision(precision));
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    acc.unwrap_or_else(|| Tower::from_f64(0.0, precision))
}

fn node_output(inputs: &[Tower], weights: &[BigReal], precision: usize) -> Tower {
    weighted_sum(inputs, weights, precision).exp_m1()
}

/// Anything that reports the sink value `F(x)` at a requested precision.
pub trait SinkOracle: Sync {
    fn sink(&self, x: f64, precision: usize) -> Result<Tower, ExpRecoveryError>;
}

/// Synthetic oracle backed by a known network.
pub struct NetworkOracle<'a>(pub &'a Network);

impl SinkOracle for NetworkOracle<'_> {
    fn sink(&self, x: f64, precision: usize) -> Result<Tower, ExpRecoveryError> {
        let mut f = forward_big(self.0, x, precision)?;
        Ok(f.pop().expect("at least one layer").swap_remove(0))
    }
}

impl<F> SinkOracle for F
where
    F: Fn(f64, usize) -> Result<Tower, ExpRecoveryError> + Sync,
{
    fn sink(&self, x: f64, precision: usize) -> Result<Tower, ExpRecoveryError> {
        self(x, precision)
    }
}

/// Weights recovered so far, at full working precision, with their log
/// relative uncertainties.
#[derive(Debug, Clone)]
pub struct PartialWeights {
    topology: LayeredTopology,
    values: Vec<Option<BigReal>>,
    log_uncertainty: Vec<f64>,
}

impl PartialWeights {
    pub fn new(topology: &LayeredTopology) -> Self {
        let n = topology.edge_count();
        Self { topology: topology.clone(), values: vec![None; n], log_uncertainty: vec![f64::NEG_INFINITY; n] }
    }

    /// Everything known exactly.
    pub fn from_weights(w: &WeightMatrix) -> Self {
        let mut p = Self::new(w.topology());
        for (k, &v) in w.as_flat().iter().enumerate() {
            p.values[k] = Some(BigReal::from_f64(v, 64));
        }
        p
    }

    pub fn get(&self, e: EdgeIndex) -> Option<f64> {
        self.big(e).map(BigReal::to_f64)
    }

    pub fn big(&self, e: EdgeIndex) -> Option<&BigReal> {
        self.values[self.topology.edge_position(e)].as_ref()
    }

    /// Natural log of the relative uncertainty of a known weight.
    pub fn log_uncertainty(&self, e: EdgeIndex) -> f64 {
        self.log_uncertainty[self.topology.edge_position(e)]
    }

    pub fn set(&mut self, e: EdgeIndex, value: BigReal, log_uncertainty: f64) {
        let k = self.topology.edge_position(e);
        self.values[k] = Some(value);
        self.log_uncertainty[k] = log_uncertainty;
    }

    fn require(&self, e: EdgeIndex) -> Result<&BigReal, ExpRecoveryError> {
        self.big(e).ok_or(ExpRecoveryError::MissingDependency(e))
    }

    pub fn to_weight_matrix(&self) -> Option<WeightMatrix> {
        let data: Option<Vec<f64>> = self.values.iter().map(|v| v.as_ref().map(BigReal::to_f64)).collect();
        WeightMatrix::from_flat(&self.topology, data?).ok()
    }
}

/// Internal outputs rebuilt from recovered weights. Only nodes whose whole
/// incoming row is known are present; rows complete in order, so each layer
/// holds a prefix.
#[derive(Debug, Clone)]
pub struct Internals {
    pub towers: Vec<Vec<Tower>>,
    /// Log relative error of each rebuilt output, propagated from the weight
    /// uncertainties to first order.
    pub log_rel_err: Vec<Vec<f64>>,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY || m == f64::INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Hidden-layer outputs (layers `0..L-1`) at `x` from the known weights.
pub fn reconstruct_internals(partial: &PartialWeights, x: f64, precision: usize) -> Internals {
    let topo = &partial.topology;
    let mut towers = vec![vec![Tower::from_f64(x, precision)]];
    let mut errs = vec![vec![f64::NEG_INFINITY]];
    for l in 1..topo.depth() {
        let (mut lt, mut le) = (Vec::new(), Vec::new());
        if towers[l - 1].len() == topo.width(l - 1) {
            for i in 0..topo.width(l) {
                let row: Option<Vec<BigReal>> =
                    (0..topo.width(l - 1)).map(|j| partial.big(EdgeIndex::new(l, i, j)).cloned()).collect();
                let Some(row) = row else { break };
                let s = weighted_sum(&towers[l - 1], &row, precision);
                // first-order absolute error of s, then relative error of expm1(s)
                let mut abs_err = f64::NEG_INFINITY;
                for (j, w) in row.iter().enumerate() {
                    let term = towers[l - 1][j].ln_magnitude()
                        + w.to_f64().ln()
                        + log_add_exp(partial.log_uncertainty(EdgeIndex::new(l, i, j)), errs[l - 1][j]);
                    abs_err = log_add_exp(abs_err, term);
                }
                let sf = s.to_f64();
                let rel = if sf > 40.0 {
                    abs_err
                } else if sf > 0.0 {
                    abs_err - (-(-sf).exp_m1()).ln()
                } else {
                    f64::INFINITY
                };
                lt.push(s.exp_m1());
                le.push(rel);
            }
        }
        towers.push(lt);
        errs.push(le);
    }
    Internals { towers, log_rel_err: errs }
}

/// One evaluation of the G-statistic, with error diagnostics.
#[derive(Debug, Clone)]
pub struct GValue {
    pub value: BigReal,
    /// Log relative error of `G` induced by the recovered weights.
    pub log_rel_err: f64,
    /// Log relative error of the remainder after the sink-side subtraction.
    pub log_remainder_err: f64,
    /// Largest log relative uncertainty among the subtracted terms.
    pub log_subtrahend_err: f64,
    pub bits_lost: f64,
}

/// `sum_k w_k F_k` over known weights, and the largest log relative
/// uncertainty among its terms.
fn known_sum(
    partial: &PartialWeights,
    internals: &Internals,
    layer_of_f: usize,
    edges: impl Iterator<Item = (EdgeIndex, usize)>,
    precision: usize,
) -> Result<(Option<Tower>, f64), ExpRecoveryError> {
    let mut acc: Option<Tower> = None;
    let mut unc = f64::NEG_INFINITY;
    for (e, k) in edges {
        let f = internals.towers[layer_of_f].get(k).ok_or_else(|| missing_node(partial, layer_of_f))?;
        let w = partial.require(e)?;
        let term = f.scale(&w.with_precision(precision));
        unc = unc.max(log_add_exp(partial.log_uncertainty(e), internals.log_rel_err[layer_of_f][k]));
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    Ok((acc, unc))
}

/// The first unknown weight that blocks the next node of `layer`.
fn missing_node(partial: &PartialWeights, layer: usize) -> ExpRecoveryError {
    let t = &partial.topology;
    for i in 0..t.width(layer) {
        for j in 0..t.width(layer - 1) {
            let e = EdgeIndex::new(layer, i, j);
            if partial.get(e).is_none() {
                return ExpRecoveryError::MissingDependency(e);
            }
        }
    }
    ExpRecoveryError::MissingDependency(EdgeIndex::new(layer, 0, 0))
}

/// `G^l_ij(x)` from the sink value and rebuilt internals.
pub fn g_statistic(
    sink: &Tower,
    internals: &Internals,
    partial: &PartialWeights,
    target: EdgeIndex,
    x: f64,
) -> Result<GValue, ExpRecoveryError> {
    let topo = &partial.topology;
    let depth = topo.depth();
    let (l, i, j) = (target.layer, target.row, target.col);
    let p = sink.precision();
    let tower_err = |stage| move |e| ExpRecoveryError::from_tower(e, stage, x, p);

    let den = internals.towers[l - 1].get(j).ok_or_else(|| missing_node(partial, l - 1))?;
    let den_err = internals.log_rel_err[l - 1][j];

    // ln R, where R = ln_{L-l} F - sum_{i'<i} w^{l+1}_{1i'} F^l_i'
    let (ln_r, remainder_err, mut sub_err, mut lost) = if l < depth && i > 0 {
        let t = sink.iterated_ln(depth - l).map_err(tower_err("iterated logarithm"))?;
        let edges = (0..i).map(|ip| (EdgeIndex::new(l + 1, 0, ip), ip));
        let (sub, unc) = known_sum(partial, internals, l, edges, p)?;
        let d = t.log_sub(&sub.expect("i > 0")).map_err(tower_err("sink-side subtraction"))?;
        (d.log, unc + d.amplification, unc, d.bits_lost)
    } else {
        let t = if l == depth { sink.clone() } else { sink.iterated_ln(depth - l).map_err(tower_err("iterated logarithm"))? };
        (t.ln().map_err(tower_err("outer logarithm"))?, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0)
    };

    // numerator N = ln R - sum_{j'<j} w^l_ij' F^{l-1}_j'
    let edges = (0..j).map(|jp| (EdgeIndex::new(l, i, jp), jp));
    let (sub2, unc2) = known_sum(partial, internals, l - 1, edges, p)?;
    let (num, num_err) = match sub2 {
        Some(s2) => {
            let d = ln_r.log_sub(&s2).map_err(tower_err("numerator"))?;
            lost = lost.max(d.bits_lost);
            sub_err = sub_err.max(unc2);
            let ln_n = d.log.to_f64();
            let e = (remainder_err - ln_n).max(unc2 + d.amplification);
            (d.log.exp(), e)
        }
        None => {
            if !ln_r.is_positive() {
                return Err(ExpRecoveryError::NonPositiveLogArgument { stage: "numerator", x });
            }
            let e = remainder_err - ln_r.ln_magnitude();
            (ln_r, e)
        }
    };
    if lost > p as f64 - GUARD_BITS {
        return Err(ExpRecoveryError::PrecisionExhausted { needed: lost + GUARD_BITS, available: p });
    }
    let value = num.ratio(den).map_err(tower_err("denominator"))?;
    Ok(GValue {
        value,
        log_rel_err: num_err.max(den_err),
        log_remainder_err: remainder_err,
        log_subtrahend_err: sub_err,
        bits_lost: lost,
    })
}

/// Recovery order: row by row through each hidden layer, recovering
/// `w^{l+1}_{1,i}` as soon as row `i` of `W^l` is complete; the sink row last.
pub fn sweep_order(topology: &LayeredTopology) -> Vec<EdgeIndex> {
    let depth = topology.depth();
    let mut out: Vec<EdgeIndex> = Vec::with_capacity(topology.edge_count());
    let push = |e: EdgeIndex, out: &mut Vec<EdgeIndex>| {
        if !out.contains(&e) {
            out.push(e);
        }
    };
    for l in 1..depth {
        for i in 0..topology.width(l) {
            for j in 0..topology.width(l - 1) {
                push(EdgeIndex::new(l, i, j), &mut out);
            }
            push(EdgeIndex::new(l + 1, 0, i), &mut out);
        }
    }
    for j in 0..topology.width(depth - 1) {
        push(EdgeIndex::new(depth, 0, j), &mut out);
    }
    out
}

/// Geometric grid `2^{k/8}`, `x` from 1/8 to 128.
pub fn default_schedule() -> Vec<f64> {
    (-24..=56).map(|k| 2f64.powf(k as f64 / 8.0)).collect()
}

#[derive(Debug, Clone)]
pub struct ExpRecoveryOptions {
    pub schedule: Vec<f64>,
    pub precision_bits: usize,
    pub max_precision_bits: usize,
    pub tol: f64,
    pub parallelism: Parallelism,
}

impl Default for ExpRecoveryOptions {
    fn default() -> Self {
        Self {
            schedule: default_schedule(),
            precision_bits: DEFAULT_PRECISION_BITS,
            max_precision_bits: DEFAULT_MAX_PRECISION_BITS,
            tol: DEFAULT_TOL,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub x: f64,
    pub g: f64,
    /// Propagated relative uncertainty of `g`.
    pub uncertainty: f64,
    pub precision_bits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolatedPoint {
    pub x: f64,
    pub estimate: f64,
}

/// Evidence for one recovered weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GEstimateTrace {
    pub target: EdgeIndex,
    /// Accepted raw evaluations, `x` strictly increasing.
    pub points: Vec<TracePoint>,
    /// Limit estimates from fits ending at each accepted point.
    pub extrapolated: Vec<ExtrapolatedPoint>,
    /// Evaluations rejected for uncertainty or a failed logarithm.
    pub skipped: usize,
    /// First `x` at which even the maximum precision was insufficient.
    pub exhausted_at: Option<f64>,
    pub selected_x: Option<f64>,
    /// `max(successive relative change, 10 * uncertainty)` at the selection.
    pub score: f64,
    /// Estimated relative error of `estimate`, propagated to later weights.
    pub uncertainty: f64,
    pub converged: bool,
    pub estimate: f64,
}

impl GEstimateTrace {
    pub fn g_values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.g).collect()
    }
}

/// Naive limit test on a sequence: converged when the last two values differ
/// by less than `tol` relative and the successive differences shrink.
pub fn limit_extrapolate(values: &[f64], tol: f64) -> (f64, bool) {
    let n = values.len();
    let Some(&last) = values.last() else {
        return (f64::NAN, false);
    };
    if n < 2 {
        return (last, false);
    }
    let d1 = (last - values[n - 2]).abs();
    let close = d1 < tol * last.abs();
    let shrinking = n < 3 || d1 <= (values[n - 2] - values[n - 3]).abs();
    (last, close && shrinking)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub layers: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub traces: Vec<GEstimateTrace>,
    pub schedule: Vec<f64>,
    pub precision_bits: usize,
    pub max_precision_bits: usize,
    /// Highest precision any evaluation needed.
    pub precision_used: usize,
    pub tol: f64,
    /// Largest relative mismatch of `ln_L F` between oracle and the
    /// recovered network over the schedule.
    pub sink_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_relative_error: Option<f64>,
}

impl RecoveryReport {
    pub fn weight_matrix(&self) -> WeightMatrix {
        let t = LayeredTopology::new(self.layers.clone()).expect("valid stored topology");
        WeightMatrix::from_blocks(&t, &self.weights).expect("stored blocks match")
    }

    pub fn with_ground_truth(mut self, truth: &WeightMatrix) -> Self {
        self.max_relative_error = Some(self.weight_matrix().max_relative_error(truth));
        self
    }

    /// CSV `layer,row,col,x,g,uncertainty` of every accepted evaluation.
    pub fn write_traces_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "row", "col", "x", "g", "uncertainty"])?;
        for t in &self.traces {
            for p in &t.points {
                w.write_record([
                    t.target.layer.to_string(),
                    (t.target.row + 1).to_string(),
                    (t.target.col + 1).to_string(),
                    format!("{:?}", p.x),
                    format!("{:?}", p.g),
                    format!("{:?}", p.uncertainty),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Sink values shared by every weight's scan.
struct SinkCache<'a> {
    oracle: &'a dyn SinkOracle,
    cache: Mutex<HashMap<(u64, usize), Tower>>,
}

impl SinkCache<'_> {
    fn get(&self, x: f64, p: usize) -> Result<Tower, ExpRecoveryError> {
        let key = (x.to_bits(), p);
        if let Some(t) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(t.clone());
        }
        let t = self.oracle.sink(x, p)?;
        self.cache.lock().expect("cache lock").insert(key, t.clone());
        Ok(t)
    }
}

/// Data for the `ln(1 - e^{-s})` correction of one point.
#[derive(Debug, Clone)]
struct Correction {
    known: BigReal,
    f_j: BigReal,
    /// `F_j'` for each `phi` basis function, in basis order.
    f_tail: Vec<BigReal>,
}

#[derive(Debug, Clone)]
struct GPoint {
    x: f64,
    g: BigReal,
    /// `[1/F_j if l < L] ++ [F_j' / F_j for known j' > j]`
    basis: Vec<BigReal>,
    log_err: f64,
    precision: usize,
    correction: Option<Correction>,
}

#[derive(Clone)]
enum PointOutcome {
    Accepted(GPoint),
    Skipped { nonpositive: bool },
    Exhausted,
}

struct Scan<'a> {
    sinks: &'a SinkCache<'a>,
    partial: &'a PartialWeights,
    target: EdgeIndex,
    opts: &'a ExpRecoveryOptions,
}

impl Scan<'_> {
    fn evaluate(&self, x: f64) -> Result<PointOutcome, ExpRecoveryError> {
        let mut p = self.opts.precision_bits;
        loop {
            match self.try_at(x, p) {
                Err(ExpRecoveryError::PrecisionExhausted { .. }) => {
                    if p * 2 > self.opts.max_precision_bits {
                        return Ok(PointOutcome::Exhausted);
                    }
                    p *= 2;
                }
                Err(ExpRecoveryError::NonPositiveLogArgument { .. }) => {
                    return Ok(PointOutcome::Skipped { nonpositive: true })
                }
                other => return other,
            }
        }
    }

    fn try_at(&self, x: f64, p: usize) -> Result<PointOutcome, ExpRecoveryError> {
        let (l, i, j) = (self.target.layer, self.target.row, self.target.col);
        let topo = &self.partial.topology;
        let sink = self.sinks.get(x, p)?;
        let internals = reconstruct_internals(self.partial, x, p);
        let g = g_statistic(&sink, &internals, self.partial, self.target, x)?;
        let uncertain = g.log_subtrahend_err > MAX_SUBTRAHEND_REL_ERR.ln()
            || g.log_remainder_err > MAX_REMAINDER_REL_ERR.ln()
            || g.log_rel_err > MAX_G_REL_ERR.ln();
        if uncertain {
            return Ok(PointOutcome::Skipped { nonpositive: false });
        }
        let fl = &internals.towers[l - 1];
        let den = &fl[j];
        let tail: Vec<usize> = (j + 1..fl.len()).collect();
        let mut basis = Vec::with_capacity(tail.len() + 1);
        let ratio = |a: &Tower| a.ratio(den).map_err(|e| ExpRecoveryError::from_tower(e, "basis", x, p));
        if l < topo.depth() {
            basis.push(ratio(&Tower::from_f64(1.0, p))?);
        }
        for &jp in &tail {
            basis.push(ratio(&fl[jp])?);
        }
        let correction = if fl.len() == topo.width(l - 1) && fl.iter().all(|f| f.level() == 0) {
            let mut known = BigReal::zero(p);
            for jp in 0..j {
                let w = self.partial.require(EdgeIndex::new(l, i, jp))?;
                known = known + w.with_precision(p) * fl[jp].value();
            }
            Some(Correction {
                known,
                f_j: den.value().clone(),
                f_tail: tail.iter().map(|&jp| fl[jp].value().clone()).collect(),
            })
        } else {
            None
        };
        Ok(PointOutcome::Accepted(GPoint { x, g: g.value, basis, log_err: g.log_rel_err, precision: p, correction }))
    }
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_square(mut a: Vec<Vec<BigReal>>, mut b: Vec<BigReal>) -> Option<Vec<BigReal>> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&r1, &r2| a[r1][c].abs().cmp(&a[r2][c].abs()))?;
        if a[piv][c].is_zero() {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = &a[r][c] / &a[c][c];
            if f.is_zero() {
                continue;
            }
            for k in c..n {
                let v = &a[r][k] - &(&f * &a[c][k]);
                a[r][k] = v;
            }
            let v = &b[r] - &(&f * &b[c]);
            b[r] = v;
        }
    }
    let mut x = vec![BigReal::zero(b[0].precision()); n];
    for c in (0..n).rev() {
        let mut s = b[c].clone();
        for k in c + 1..n {
            s = s - &a[c][k] * &x[k];
        }
        x[c] = s / &a[c][c];
    }
    Some(x)
}

/// `ln(1 - e^{-s})`, zero once it is far below any precision.
fn log1m_exp_neg(s: &BigReal) -> BigReal {
    let p = s.precision();
    if !s.is_positive() {
        return BigReal::zero(p);
    }
    if s.to_f64() > 2.0 * p as f64 {
        return BigReal::zero(p);
    }
    (-(-s).exp_m1()).ln()
}

/// Limit estimate from the points ending at `end`: fit
/// `g = w + c_psi psi + sum c_phi phi` exactly on as many consecutive points
/// as there are unknowns, then iterate the `ln(1 - e^{-s})` correction.
fn extrapolate(points: &[GPoint], end: usize, has_psi: bool) -> Option<(BigReal, f64)> {
    let nb = points[end].basis.len();
    let mut cols: Vec<usize> = (0..nb).collect();
    let win = loop {
        let k = cols.len() + 1;
        if end + 1 < k {
            return None;
        }
        let win = &points[end + 1 - k..=end];
        let active: Vec<usize> =
            cols.iter().copied().filter(|&c| win.iter().any(|pt| !pt.basis[c].is_zero())).collect();
        if active.len() == cols.len() {
            break win;
        }
        cols = active;
    };
    let p = win.iter().map(|pt| pt.precision).max().unwrap_or(DEFAULT_PRECISION_BITS);
    let rows: Vec<Vec<BigReal>> = win
        .iter()
        .map(|pt| {
            let mut r = vec![BigReal::one(p)];
            r.extend(cols.iter().map(|&c| pt.basis[c].with_precision(p)));
            r
        })
        .collect();
    let ys: Vec<BigReal> = win.iter().map(|pt| pt.g.with_precision(p)).collect();
    let mut sol = solve_square(rows.clone(), ys.clone())?;
    if win.iter().all(|pt| pt.correction.is_some()) {
        let phi_offset = usize::from(has_psi);
        for _ in 0..CORRECTION_ITERATIONS {
            let yc: Vec<BigReal> = win
                .iter()
                .zip(&ys)
                .map(|(pt, y)| {
                    let c = pt.correction.as_ref().expect("checked");
                    let mut s = &c.known + &(&sol[0] * &c.f_j);
                    for (ci, &col) in cols.iter().enumerate() {
                        if col >= phi_offset {
                            s = s + &sol[ci + 1] * &c.f_tail[col - phi_offset];
                        }
                    }
                    y - &(log1m_exp_neg(&s) / &c.f_j)
                })
                .collect();
            let next = solve_square(rows.clone(), yc)?;
            let change = (&next[0] - &sol[0]).abs();
            let done = change.log2_magnitude() < sol[0].log2_magnitude() - (p as f64 - 32.0);
            sol = next;
            if done {
                break;
            }
        }
    }
    let err = win.iter().map(|pt| pt.log_err).fold(f64::NEG_INFINITY, f64::max);
    Some((sol[0].clone(), err))
}

/// Geometric midpoints inserted between consecutive schedule points.
fn refine_schedule(xs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * xs.len());
    for w in xs.windows(2) {
        out.push(w[0]);
        out.push((w[0] * w[1]).sqrt());
    }
    out.extend(xs.last());
    out
}

type WeightResult = (GEstimateTrace, Option<BigReal>, usize, bool);

/// Scans the schedule for one weight; if the estimates have not settled,
/// the schedule is densified and only the new points are evaluated.
fn recover_weight(
    sinks: &SinkCache,
    partial: &PartialWeights,
    target: EdgeIndex,
    opts: &ExpRecoveryOptions,
) -> Result<WeightResult, ExpRecoveryError> {
    let scan = Scan { sinks, partial, target, opts };
    let mut xs = opts.schedule.clone();
    let mut evaluated: Vec<(f64, PointOutcome)> = Vec::new();
    for round in 0..=MAX_REFINEMENTS {
        let fresh: Vec<f64> =
            xs.iter().copied().filter(|x| !evaluated.iter().any(|(y, _)| y == x)).collect();
        let outcomes = map_slice(&fresh, opts.parallelism, |&x| scan.evaluate(x));
        for (x, o) in fresh.into_iter().zip(outcomes) {
            evaluated.push((x, o?));
        }
        evaluated.sort_by(|a, b| a.0.total_cmp(&b.0));
        let result = assemble_trace(&evaluated, partial, target, opts);
        if result.0.converged || round == MAX_REFINEMENTS {
            return Ok(result);
        }
        xs = refine_schedule(&xs);
    }
    unreachable!("the last round returns")
}

fn assemble_trace(
    evaluated: &[(f64, PointOutcome)],
    partial: &PartialWeights,
    target: EdgeIndex,
    opts: &ExpRecoveryOptions,
) -> WeightResult {
    let mut points = Vec::new();
    let mut skipped = 0;
    let mut all_nonpositive = true;
    let mut exhausted_at = None;
    for (x, o) in evaluated {
        match o {
            PointOutcome::Accepted(pt) => points.push(pt.clone()),
            PointOutcome::Skipped { nonpositive } => {
                skipped += 1;
                all_nonpositive &= *nonpositive;
            }
            PointOutcome::Exhausted => {
                exhausted_at = Some(*x);
                break;
            }
        }
    }
    let has_psi = target.layer < partial.topology.depth();
    let ests: Vec<(f64, BigReal, f64)> = (0..points.len())
        .filter_map(|end| extrapolate(&points, end, has_psi).map(|(e, err)| (points[end].x, e, err)))
        .collect();

    // plateau: where consecutive extrapolations agree best, penalised by
    // the propagated uncertainty of the points used
    let rel_diffs: Vec<f64> = (1..ests.len())
        .map(|k| {
            let diff = (&ests[k].1 - &ests[k - 1].1).abs();
            if ests[k].1.is_zero() { f64::INFINITY } else { (diff / ests[k].1.abs()).to_f64() }
        })
        .collect();
    let mut best: Option<(f64, usize)> = None;
    for k in 1..ests.len() {
        let score = rel_diffs[k - 1].max(10.0 * ests[k].2.exp());
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, k));
        }
    }
    let precision_used = points.iter().map(|p| p.precision).max().unwrap_or(opts.precision_bits);
    let (score, selected, estimate, uncertainty) = match best {
        Some((s, k)) => {
            // the change d_k bounds the error of the previous estimate; errors
            // decay like e^{-a x}, so fit a from the last two changes and
            // carry the decay across the final step
            let d = rel_diffs[k - 1];
            let decay = if k >= 2 && rel_diffs[k - 2] > d && d > 0.0 {
                let a = (rel_diffs[k - 2] / d).ln() / (ests[k - 1].0 - ests[k - 2].0);
                (-a * (ests[k].0 - ests[k - 1].0)).exp()
            } else {
                1.0
            };
            let u = (d * decay).max(10.0 * ests[k].2.exp());
            (s, Some(ests[k].0), Some(ests[k].1.clone()), u)
        }
        None => (f64::INFINITY, None, ests.last().map(|e| e.1.clone()), f64::INFINITY),
    };
    let big_estimate = estimate;
    let estimate = big_estimate.as_ref().map_or(f64::NAN, BigReal::to_f64);
    let trace = GEstimateTrace {
        target,
        points: points
            .iter()
            .map(|p| TracePoint { x: p.x, g: p.g.to_f64(), uncertainty: p.log_err.exp(), precision_bits: p.precision })
            .collect(),
        extrapolated: ests.iter().map(|(x, e, _)| ExtrapolatedPoint { x: *x, estimate: e.to_f64() }).collect(),
        skipped,
        exhausted_at,
        selected_x: selected,
        score: if score.is_finite() { score } else { f64::MAX },
        uncertainty: if uncertainty.is_finite() { uncertainty } else { f64::MAX },
        converged: score < opts.tol && estimate.is_finite() && estimate > 0.0,
        estimate,
    };
    (trace, big_estimate, precision_used, points.is_empty() && skipped > 0 && all_nonpositive)
}

/// Recovers every weight of a fully-connected expm1 network with ordered
/// positive weights from its sink values.
pub fn recover_exp(
    oracle: &dyn SinkOracle,
    topology: &LayeredTopology,
    opts: &ExpRecoveryOptions,
) -> Result<RecoveryReport, ExpRecoveryError> {
    topology.require_single_io()?;
    check_precision(opts.precision_bits)?;
    let sched = &opts.schedule;
    if sched.is_empty() || sched.iter().any(|&x| !(x.is_finite() && x > 0.0)) || sched.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ExpRecoveryError::BadSchedule);
    }
    let sinks = SinkCache { oracle, cache: Mutex::new(HashMap::new()) };
    let mut partial = PartialWeights::new(topology);
    let mut traces = Vec::new();
    let mut precision_used = opts.precision_bits;
    for target in sweep_order(topology) {
        let (trace, estimate, used, nonpositive) = recover_weight(&sinks, &partial, target, opts)?;
        precision_used = precision_used.max(used);
        if nonpositive {
            return Err(ExpRecoveryError::NonPositiveLogArgument { stage: "every evaluation", x: sched[0] });
        }
        if !trace.converged {
            return Err(ExpRecoveryError::NotConverged { edge: target, score: trace.score, trace: Box::new(trace) });
        }
        partial.set(target, estimate.expect("converged"), trace.uncertainty.ln());
        traces.push(trace);
    }
    let w = partial.to_weight_matrix().expect("every weight recovered");
    let residual = sink_residual(&sinks, &w, sched, opts.precision_bits);
    let report = RecoveryReport {
        layers: topology.sizes().to_vec(),
        weights: w.to_blocks(),
        traces,
        schedule: sched.clone(),
        precision_bits: opts.precision_bits,
        max_precision_bits: opts.max_precision_bits,
        precision_used,
        tol: opts.tol,
        sink_residual: residual,
        max_relative_error: None,
    };
    if !w.is_ordered_positive() {
        return Err(ExpRecoveryError::OrderingViolationSuspected {
            reason: "recovered weights are not ordered-positive".into(),
            report: Box::new(report),
        });
    }
    if let Some(r) = residual.filter(|&r| !(r <= MAX_SINK_RESIDUAL)) {
        return Err(ExpRecoveryError::OrderingViolationSuspected {
            reason: format!("re-simulated sink deviates from the oracle (relative residual {r:.3e})"),
            report: Box::new(report),
        });
    }
    Ok(report)
}

/// Largest relative difference of `ln_L F` between oracle and `w` over the
/// schedule points where both are resolvable.
fn sink_residual(sinks: &SinkCache, w: &WeightMatrix, sched: &[f64], p: usize) -> Option<f64> {
    let net = Network::new(w.clone(), AnalyticActivation::Expm1).ok()?;
    let depth = w.topology().depth();
    let mut worst: Option<f64> = None;
    for &x in sched {
        let (Ok(s), Ok(f)) = (sinks.get(x, p), forward_big(&net, x, p)) else { continue };
        let s_hat = &f[depth][0];
        let (Ok(a), Ok(b)) = (s.iterated_ln(depth), s_hat.iterated_ln(depth)) else { continue };
        if a.level() != 0 || b.level() != 0 || !(a.to_f64() > 1.0) {
            continue;
        }
        let m = a.value().log2_magnitude();
        if m > p as f64 - GUARD_BITS {
            continue;
        }
        let r = ((a.value() - b.value()).abs() / a.value()).to_f64();
        worst = Some(worst.map_or(r, |w: f64| w.max(r)));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_net(layers: Vec<usize>, blocks: &[Vec<Vec<f64>>]) -> Network {
        let t = LayeredTopology::new(layers).unwrap();
        Network::new(WeightMatrix::from_blocks(&t, blocks).unwrap(), AnalyticActivation::Expm1).unwrap()
    }

    #[test]
    fn forward_examples() {
        let net = exp_net(vec![1, 1, 1], &[vec![vec![1.0]], vec![vec![1.0]]]);
        let f = forward_big(&net, 1.0, 128).unwrap();
        let e1 = 1f64.exp_m1();
        assert!((f[1][0].to_f64() - e1).abs() < 1e-15);
        assert!((f[2][0].to_f64() - e1.exp_m1()).abs() < 1e-14);
        let z = forward_big(&net, 0.0, 128).unwrap();
        assert!(z.iter().flatten().all(|t| t.to_f64() == 0.0));
        assert!(matches!(forward_big(&net, 1.0, 32), Err(ExpRecoveryError::BadPrecision(32))));
    }

    #[test]
    fn forward_rejects_other_activations() {
        let t = LayeredTopology::new(vec![1, 1]).unwrap();
        let net = Network::new(WeightMatrix::from_flat(&t, vec![1.0]).unwrap(), AnalyticActivation::Tanh).unwrap();
        assert_eq!(forward_big(&net, 1.0, 128).unwrap_err(), ExpRecoveryError::WrongActivation("tanh"));
    }

    #[test]
    fn sweep_order_examples() {
        let e = |l, i, j| EdgeIndex::new(l, i, j);
        let t = LayeredTopology::new(vec![1, 2, 2, 1]).unwrap();
        assert_eq!(
            sweep_order(&t),
            vec![e(1, 0, 0), e(2, 0, 0), e(1, 1, 0), e(2, 0, 1), e(3, 0, 0), e(2, 1, 0), e(2, 1, 1), e(3, 0, 1)]
        );
        let t = LayeredTopology::new(vec![1, 1]).unwrap();
        assert_eq!(sweep_order(&t), vec![e(1, 0, 0)]);
    }

    #[test]
    fn limit_extrapolate_examples() {
        assert_eq!(limit_extrapolate(&[1.9, 1.99, 1.999, 1.9999], 1e-3), (1.9999, true));
        assert!(!limit_extrapolate(&[2.0, 2.5], 1e-3).1);
        assert_eq!(limit_extrapolate(&[2.0], 1e-3), (2.0, false));
        assert!(!limit_extrapolate(&[], 1e-3).1);
    }

    #[test]
    fn g_statistic_requires_dependencies() {
        let net = exp_net(vec![1, 2, 1], &[vec![vec![3.0], vec![1.0]], vec![vec![2.0, 0.5]]]);
        let sink = NetworkOracle(&net).sink(4.0, 256).unwrap();
        let partial = PartialWeights::new(net.topology());
        let int = reconstruct_internals(&partial, 4.0, 256);
        let err = g_statistic(&sink, &int, &partial, EdgeIndex::new(1, 1, 0), 4.0).unwrap_err();
        assert_eq!(err, ExpRecoveryError::MissingDependency(EdgeIndex::new(1, 0, 0)));
    }

    #[test]
    fn g_statistic_tends_to_weight() {
        let net = exp_net(vec![1, 1, 1], &[vec![vec![2.0]], vec![vec![3.0]]]);
        let partial = PartialWeights::new(net.topology());
        let mut prev = f64::INFINITY;
        for x in [5.0, 10.0, 20.0, 40.0] {
            let sink = NetworkOracle(&net).sink(x, 512).unwrap();
            let int = reconstruct_internals(&partial, x, 512);
            let g = g_statistic(&sink, &int, &partial, EdgeIndex::new(1, 0, 0), x).unwrap().value.to_f64();
            let gap = (g - 2.0).abs();
            assert!(gap < prev);
            prev = gap;
        }
        assert!(prev < 0.05);
    }

    #[test]
    fn sink_row_uses_no_outer_correction() {
        // with exact internals, G at l = L is (ln F - known) / F_j
        let net = exp_net(vec![1, 2, 1], &[vec![vec![3.0], vec![1.0]], vec![vec![2.0, 0.5]]]);
        let partial = PartialWeights::from_weights(net.weights());
        let x = 8.0;
        let sink = NetworkOracle(&net).sink(x, 512).unwrap();
        let int = reconstruct_internals(&partial, x, 512);
        let g = g_statistic(&sink, &int, &partial, EdgeIndex::new(2, 0, 1), x).unwrap().value.to_f64();
        let f = forward_big(&net, x, 512).unwrap();
        let (f1, f2) = (f[1][0].to_f64(), f[1][1].to_f64());
        let s = 2.0 * f1 + 0.5 * f2;
        let expect = 0.5 + (-(-s).exp_m1()).ln() / f2;
        assert!((g - expect).abs() < 1e-12 * expect, "{g} vs {expect}");
    }

    #[test]
    fn recovers_path3() {
        let net = exp_net(vec![1, 1, 1], &[vec![vec![2.0]], vec![vec![3.0]]]);
        let opts = ExpRecoveryOptions::default();
        let rep = recover_exp(&NetworkOracle(&net), net.topology(), &opts).unwrap().with_ground_truth(net.weights());
        assert!(rep.max_relative_error.unwrap() < 1e-4, "{rep:?}");
    }
}
