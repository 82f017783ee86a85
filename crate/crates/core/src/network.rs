//! Layered topologies, weight matrices, analytic activations and the network
//! JSON format.
//!
//! Index convention: `w^l_ij` is the weight of the edge from node `j` of layer
//! `l-1` into node `i` of layer `l`, so block `W^l` has `n_l` rows and
//! `n_{l-1}` columns. Layers are numbered from 0 (source layer); rows and
//! columns are 0-based in code. Edges are enumerated layer-major, then
//! row-major inside a block; every gradient and Jacobian column follows that
//! order.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("weight {0} is zero; absent edges are not representable")]
    ZeroWeight(EdgeIndex),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("activation has nonzero constant term a0 = {0}; f(0) = 0 is required")]
    NonzeroConstantTerm(f64),
    #[error("layer {0} is empty")]
    EmptyLayer(usize),
    #[error("a network needs at least two layers (got {0})")]
    TooShallow(usize),
    #[error("non-finite value {value} in {what}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("sampling range ({lo}, {hi}) contains zero")]
    RangeContainsZero { lo: f64, hi: f64 },
    #[error("invalid sampling range ({lo}, {hi}): {reason}")]
    InvalidRange { lo: f64, hi: f64, reason: &'static str },
    #[error("cannot fit {rows} rows with gaps >= {margin} inside ({lo}, {hi})")]
    InfeasibleOrdering { rows: usize, margin: f64, lo: f64, hi: f64 },
    #[error("layer {layer} is not a hidden layer (valid: 1..={max})")]
    BadLayer { layer: usize, max: usize },
    #[error("not a permutation of 0..{0}")]
    BadPermutation(usize),
    #[error("activation provides {available} coefficients, order {requested} requested")]
    InsufficientOrder { available: usize, requested: usize },
    #[error("activation needs at least one coefficient")]
    EmptyActivation,
    #[error("expected one source and one sink, got layers {0:?}")]
    NotSingleInputOutput(Vec<usize>),
    #[error("sparsity masks are not supported; every edge must be present")]
    SparseMask,
    #[error("cannot parse layer list {0:?}")]
    BadLayerList(String),
}

/// Edge `w^layer_{row,col}`; `layer` is 1-based, `row`/`col` 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeIndex {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
}

impl EdgeIndex {
    pub fn new(layer: usize, row: usize, col: usize) -> Self {
        Self { layer, row, col }
    }
}

impl fmt::Display for EdgeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // 1-based row/col in the paper's notation
        write!(f, "w^{}_({},{})", self.layer, self.row + 1, self.col + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LayeredTopology {
    sizes: Vec<usize>,
}

impl TryFrom<Vec<usize>> for LayeredTopology {
    type Error = NetworkError;
    fn try_from(v: Vec<usize>) -> Result<Self, NetworkError> {
        Self::new(v)
    }
}

impl From<LayeredTopology> for Vec<usize> {
    fn from(t: LayeredTopology) -> Self {
        t.sizes
    }
}

impl LayeredTopology {
    pub fn new(sizes: Vec<usize>) -> Result<Self, NetworkError> {
        if sizes.len() < 2 {
            return Err(NetworkError::TooShallow(sizes.len()));
        }
        if let Some(l) = sizes.iter().position(|&n| n == 0) {
            return Err(NetworkError::EmptyLayer(l));
        }
        Ok(Self { sizes })
    }

    /// Parses `"1,2,2,1"`.
    pub fn parse(csv: &str) -> Result<Self, NetworkError> {
        let sizes = csv
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| NetworkError::BadLayerList(csv.to_string()))?;
        Self::new(sizes)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Depth `L`: number of weight blocks.
    pub fn depth(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn width(&self, layer: usize) -> usize {
        self.sizes[layer]
    }

    pub fn edge_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn node_count(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn is_single_io(&self) -> bool {
        self.sizes[0] == 1 && self.sizes[self.depth()] == 1
    }

    pub fn require_single_io(&self) -> Result<(), NetworkError> {
        if self.is_single_io() {
            Ok(())
        } else {
            Err(NetworkError::NotSingleInputOutput(self.sizes.clone()))
        }
    }

    /// Position of the first entry of block `W^layer` in canonical edge order.
    pub fn block_offset(&self, layer: usize) -> usize {
        self.sizes[..layer].windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn edge_position(&self, e: EdgeIndex) -> usize {
        self.block_offset(e.layer) + e.row * self.sizes[e.layer - 1] + e.col
    }

    /// All edges in canonical order.
    pub fn edges(&self) -> Vec<EdgeIndex> {
        let mut out = Vec::with_capacity(self.edge_count());
        for l in 1..=self.depth() {
            for i in 0..self.sizes[l] {
                for j in 0..self.sizes[l - 1] {
                    out.push(EdgeIndex::new(l, i, j));
                }
            }
        }
        out
    }

    /// Global node id (layer-major, 0-based).
    pub fn node_id(&self, layer: usize, index: usize) -> usize {
        self.sizes[..layer].iter().sum::<usize>() + index
    }

    pub fn node_at(&self, id: usize) -> Option<(usize, usize)> {
        let mut rest = id;
        for (l, &n) in self.sizes.iter().enumerate() {
            if rest < n {
                return Some((l, rest));
            }
            rest -= n;
        }
        None
    }
}

impl fmt::Display for LayeredTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.sizes.iter().map(|n| n.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Dense weight blocks stored flat in canonical edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    topology: LayeredTopology,
    data: Vec<f64>,
}

impl WeightMatrix {
    /// From blocks `W^1..W^L`, each a list of rows.
    pub fn from_blocks(
        topology: &LayeredTopology,
        blocks: &[Vec<Vec<f64>>],
    ) -> Result<Self, NetworkError> {
        if blocks.len() != topology.depth() {
            return Err(NetworkError::ShapeMismatch(format!(
                "{} weight blocks for depth {}",
                blocks.len(),
                topology.depth()
            )));
        }
        let mut data = Vec::with_capacity(topology.edge_count());
        for (b, block) in blocks.iter().enumerate() {
            let (rows, cols) = (topology.width(b + 1), topology.width(b));
            if block.len() != rows || block.iter().any(|r| r.len() != cols) {
                return Err(NetworkError::ShapeMismatch(format!(
                    "block W^{} must be {}x{}",
                    b + 1,
                    rows,
                    cols
                )));
            }
            data.extend(block.iter().flatten());
        }
        Ok(Self { topology: topology.clone(), data })
    }

    /// From a vector in canonical edge order.
    pub fn from_flat(topology: &LayeredTopology, data: Vec<f64>) -> Result<Self, NetworkError> {
        if data.len() != topology.edge_count() {
            return Err(NetworkError::ShapeMismatch(format!(
                "{} weights for {} edges",
                data.len(),
                topology.edge_count()
            )));
        }
        Ok(Self { topology: topology.clone(), data })
    }

    pub fn topology(&self) -> &LayeredTopology {
        &self.topology
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, layer: usize, row: usize, col: usize) -> f64 {
        self.data[self.topology.edge_position(EdgeIndex::new(layer, row, col))]
    }

    pub fn set(&mut self, layer: usize, row: usize, col: usize, value: f64) {
        let p = self.topology.edge_position(EdgeIndex::new(layer, row, col));
        self.data[p] = value;
    }

    /// Row `row` of block `W^layer`.
    pub fn row(&self, layer: usize, row: usize) -> &[f64] {
        let cols = self.topology.width(layer - 1);
        let start = self.topology.block_offset(layer) + row * cols;
        &self.data[start..start + cols]
    }

    pub fn to_blocks(&self) -> Vec<Vec<Vec<f64>>> {
        (1..=self.topology.depth())
            .map(|l| (0..self.topology.width(l)).map(|i| self.row(l, i).to_vec()).collect())
            .collect()
    }

    /// Membership in the ordered-positive class: all entries positive and every
    /// column strictly decreasing down the rows.
    pub fn is_ordered_positive(&self) -> bool {
        if self.data.iter().any(|&w| !(w > 0.0)) {
            return false;
        }
        (1..=self.topology.depth()).all(|l| {
            (0..self.topology.width(l - 1)).all(|j| {
                (1..self.topology.width(l)).all(|i| self.get(l, i - 1, j) > self.get(l, i, j))
            })
        })
    }

    /// Largest `|a - b| / |b|` over all entries (`b` = reference).
    pub fn max_relative_error(&self, reference: &WeightMatrix) -> f64 {
        self.data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max)
    }

    fn check_entries(&self) -> Result<(), NetworkError> {
        for (e, &w) in self.topology.edges().into_iter().zip(&self.data) {
            if !w.is_finite() {
                return Err(NetworkError::NonFinite { what: "weights", value: w });
            }
            if w == 0.0 {
                return Err(NetworkError::ZeroWeight(e));
            }
        }
        Ok(())
    }
}

fn check_range(lo: f64, hi: f64) -> Result<(), NetworkError> {
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(NetworkError::InvalidRange { lo, hi, reason: "need finite lo < hi" });
    }
    if lo <= 0.0 && hi >= 0.0 {
        return Err(NetworkError::RangeContainsZero { lo, hi });
    }
    Ok(())
}

/// I.i.d. uniform weights on `(lo, hi)`, deterministic in `seed`.
pub fn random_weights(
    topology: &LayeredTopology,
    seed: u64,
    range: (f64, f64),
) -> Result<WeightMatrix, NetworkError> {
    let (lo, hi) = range;
    check_range(lo, hi)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..topology.edge_count()).map(|_| sample_open(&mut rng, lo, hi)).collect();
    WeightMatrix::from_flat(topology, data)
}

/// Uniform on the open interval (the half-open `gen_range` can return `lo`,
/// which would be zero-adjacent only at `lo = 0`, excluded above, but keep
/// the interval open anyway).
fn sample_open<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    loop {
        let v = rng.gen_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

/// Positive weights with every column strictly decreasing and consecutive
/// entries at least `margin` apart. Each column is uniform over the feasible
/// set (order statistics of a shrunken interval, re-spread by the margin).
pub fn random_ordered_weights(
    topology: &LayeredTopology,
    seed: u64,
    range: (f64, f64),
    margin: f64,
) -> Result<WeightMatrix, NetworkError> {
    let (lo, hi) = range;
    check_range(lo, hi)?;
    if lo < 0.0 {
        return Err(NetworkError::InvalidRange { lo, hi, reason: "ordered weights must be positive" });
    }
    if !(margin > 0.0) || !margin.is_finite() {
        return Err(NetworkError::InvalidRange { lo, hi, reason: "margin must be positive" });
    }
    let max_rows = (1..=topology.depth()).map(|l| topology.width(l)).max().unwrap_or(1);
    let span = hi - lo - (max_rows - 1) as f64 * margin;
    if !(span > 0.0) {
        return Err(NetworkError::InfeasibleOrdering { rows: max_rows, margin, lo, hi });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = WeightMatrix::from_flat(topology, vec![1.0; topology.edge_count()])?;
    for l in 1..=topology.depth() {
        let rows = topology.width(l);
        let top = hi - (rows - 1) as f64 * margin;
        for j in 0..topology.width(l - 1) {
            let mut u: Vec<f64> = (0..rows).map(|_| sample_open(&mut rng, lo, top)).collect();
            u.sort_by(|a, b| a.total_cmp(b));
            for (k, v) in u.iter().enumerate() {
                // k-th smallest goes to the bottom row
                w.set(l, rows - 1 - k, j, v + k as f64 * margin);
            }
        }
    }
    Ok(w)
}

/// Node nonlinearity with `f(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticActivation {
    /// Truncated MacLaurin series `a_1..a_M`; evaluation only within `radius`.
    Maclaurin { coeffs: Vec<f64>, radius: f64 },
    /// Exact polynomial `a_1 x + ... + a_d x^d`.
    Polynomial { coeffs: Vec<f64> },
    Expm1,
    Tanh,
}

pub const DEFAULT_SERIES_RADIUS: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("argument {arg} outside the validated radius {radius} of the truncated series")]
pub struct DomainError {
    pub arg: f64,
    pub radius: f64,
}

impl AnalyticActivation {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Maclaurin { .. } => "maclaurin",
            Self::Polynomial { .. } => "polynomial",
            Self::Expm1 => "expm1",
            Self::Tanh => "tanh",
        }
    }

    pub fn maclaurin(coeffs: Vec<f64>) -> Self {
        Self::Maclaurin { coeffs, radius: DEFAULT_SERIES_RADIUS }
    }

    pub fn polynomial(coeffs: Vec<f64>) -> Self {
        Self::Polynomial { coeffs }
    }

    /// Highest order with known coefficients (`None`: unlimited).
    pub fn available_order(&self) -> Option<usize> {
        match self {
            Self::Maclaurin { coeffs, .. } => Some(coeffs.len()),
            _ => None,
        }
    }

    /// `a_1..a_order`. Polynomials are zero-padded; a truncated series cannot
    /// be extended.
    pub fn coeffs(&self, order: usize) -> Result<Vec<f64>, NetworkError> {
        match self {
            Self::Maclaurin { coeffs, .. } => {
                if coeffs.len() < order {
                    return Err(NetworkError::InsufficientOrder {
                        available: coeffs.len(),
                        requested: order,
                    });
                }
                Ok(coeffs[..order].to_vec())
            }
            Self::Polynomial { coeffs } => {
                let mut out = vec![0.0; order];
                let n = coeffs.len().min(order);
                out[..n].copy_from_slice(&coeffs[..n]);
                Ok(out)
            }
            Self::Expm1 => {
                let mut out = Vec::with_capacity(order);
                let mut c = 1.0;
                for k in 1..=order {
                    c /= k as f64;
                    out.push(c);
                }
                Ok(out)
            }
            Self::Tanh => Ok(tanh_coeffs(order)),
        }
    }

    pub fn eval(&self, x: f64) -> Result<f64, DomainError> {
        match self {
            Self::Maclaurin { coeffs, radius } => {
                if x.abs() > *radius {
                    return Err(DomainError { arg: x, radius: *radius });
                }
                Ok(horner(coeffs, x))
            }
            Self::Polynomial { coeffs } => Ok(horner(coeffs, x)),
            Self::Expm1 => Ok(x.exp_m1()),
            Self::Tanh => Ok(x.tanh()),
        }
    }

    fn validate(&self) -> Result<(), NetworkError> {
        match self {
            Self::Maclaurin { coeffs, radius } => {
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(NetworkError::NonFinite { what: "series radius", value: *radius });
                }
                check_coeffs(coeffs)
            }
            Self::Polynomial { coeffs } => check_coeffs(coeffs),
            Self::Expm1 | Self::Tanh => Ok(()),
        }
    }
}

fn check_coeffs(c: &[f64]) -> Result<(), NetworkError> {
    if c.is_empty() {
        return Err(NetworkError::EmptyActivation);
    }
    match c.iter().find(|v| !v.is_finite()) {
        Some(&v) => Err(NetworkError::NonFinite { what: "activation coefficients", value: v }),
        None => Ok(()),
    }
}

/// `sum_k c[k-1] x^k`
fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| (acc + a) * x)
}

/// MacLaurin coefficients of tanh from `t' = 1 - t^2`:
/// `(k+1) t_{k+1} = [k == 0] - sum_{i+j=k} t_i t_j`.
fn tanh_coeffs(order: usize) -> Vec<f64> {
    let mut t = vec![0.0; order + 1];
    for k in 0..order {
        let conv: f64 = (1..k).map(|i| t[i] * t[k - i]).sum();
        let rhs = if k == 0 { 1.0 } else { -conv };
        t[k + 1] = rhs / (k + 1) as f64;
    }
    t.remove(0);
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    topology: LayeredTopology,
    weights: WeightMatrix,
    activation: AnalyticActivation,
}

impl Network {
    pub fn new(
        weights: WeightMatrix,
        activation: AnalyticActivation,
    ) -> Result<Self, NetworkError> {
        weights.check_entries()?;
        activation.validate()?;
        Ok(Self { topology: weights.topology().clone(), weights, activation })
    }

    pub fn topology(&self) -> &LayeredTopology {
        &self.topology
    }

    pub fn weights(&self) -> &WeightMatrix {
        &self.weights
    }

    pub fn activation(&self) -> &AnalyticActivation {
        &self.activation
    }

    pub fn weight(&self, layer: usize, row: usize, col: usize) -> f64 {
        self.weights.get(layer, row, col)
    }

    pub fn with_weights(&self, weights: WeightMatrix) -> Result<Self, NetworkError> {
        if weights.topology() != &self.topology {
            return Err(NetworkError::ShapeMismatch("weights for a different topology".into()));
        }
        Self::new(weights, self.activation.clone())
    }

    pub fn with_activation(&self, activation: AnalyticActivation) -> Result<Self, NetworkError> {
        Self::new(self.weights.clone(), activation)
    }

    pub fn to_file(&self) -> NetworkFile {
        NetworkFile {
            layers: self.topology.sizes().to_vec(),
            activation: ActivationFile::from(&self.activation),
            weights: self.weights.to_blocks(),
            mask: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NetworkFileError> {
        let file: NetworkFile = serde_json::from_str(s)?;
        Ok(validate_network(&file)?)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(&self.to_file()).expect("serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Swaps hidden nodes of layer `l`: new node `r` is old node `perm[r]`.
/// Rows of `W^l` and columns of `W^{l+1}` move together, so the measured
/// function is unchanged.
pub fn permute_hidden_layer(net: &Network, l: usize, perm: &[usize]) -> Result<Network, NetworkError> {
    let topo = net.topology();
    let depth = topo.depth();
    if l == 0 || l >= depth {
        return Err(NetworkError::BadLayer { layer: l, max: depth.saturating_sub(1) });
    }
    let n = topo.width(l);
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(NetworkError::BadPermutation(n));
    }
    let old = net.weights();
    let mut w = old.clone();
    for (r, &p) in perm.iter().enumerate() {
        for j in 0..topo.width(l - 1) {
            w.set(l, r, j, old.get(l, p, j));
        }
        for i in 0..topo.width(l + 1) {
            w.set(l + 1, i, r, old.get(l + 1, i, p));
        }
    }
    net.with_weights(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActivationFile {
    Maclaurin {
        coeffs: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        a0: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        radius: Option<f64>,
    },
    Polynomial {
        coeffs: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        a0: Option<f64>,
    },
    Expm1,
    Tanh,
}

impl From<&AnalyticActivation> for ActivationFile {
    fn from(a: &AnalyticActivation) -> Self {
        match a {
            AnalyticActivation::Maclaurin { coeffs, radius } => Self::Maclaurin {
                coeffs: coeffs.clone(),
                a0: None,
                radius: (*radius != DEFAULT_SERIES_RADIUS).then_some(*radius),
            },
            AnalyticActivation::Polynomial { coeffs } => {
                Self::Polynomial { coeffs: coeffs.clone(), a0: None }
            }
            AnalyticActivation::Expm1 => Self::Expm1,
            AnalyticActivation::Tanh => Self::Tanh,
        }
    }
}

impl ActivationFile {
    pub fn to_activation(&self) -> Result<AnalyticActivation, NetworkError> {
        let check_a0 = |a0: &Option<f64>| match a0 {
            Some(v) if *v != 0.0 => Err(NetworkError::NonzeroConstantTerm(*v)),
            _ => Ok(()),
        };
        let act = match self {
            Self::Maclaurin { coeffs, a0, radius } => {
                check_a0(a0)?;
                AnalyticActivation::Maclaurin {
                    coeffs: coeffs.clone(),
                    radius: radius.unwrap_or(DEFAULT_SERIES_RADIUS),
                }
            }
            Self::Polynomial { coeffs, a0 } => {
                check_a0(a0)?;
                AnalyticActivation::Polynomial { coeffs: coeffs.clone() }
            }
            Self::Expm1 => AnalyticActivation::Expm1,
            Self::Tanh => AnalyticActivation::Tanh,
        };
        act.validate()?;
        Ok(act)
    }
}

/// On-disk network description, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub layers: Vec<usize>,
    pub activation: ActivationFile,
    /// `weights[l-1]` is block `W^l`, row-major.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// Reserved; only an all-true mask (or none) is accepted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<Vec<Vec<bool>>>>,
}

#[derive(Debug, Error)]
pub enum NetworkFileError {
    #[error("malformed network JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] NetworkError),
}

pub fn validate_network(file: &NetworkFile) -> Result<Network, NetworkError> {
    let topology = LayeredTopology::new(file.layers.clone())?;
    if let Some(mask) = &file.mask {
        if mask.iter().flatten().flatten().any(|&m| !m) {
            return Err(NetworkError::SparseMask);
        }
    }
    let activation = file.activation.to_activation()?;
    let weights = WeightMatrix::from_blocks(&topology, &file.weights)?;
    Network::new(weights, activation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3_file(w32: f64) -> NetworkFile {
        NetworkFile {
            layers: vec![1, 1, 1],
            activation: ActivationFile::Maclaurin { coeffs: vec![1.0, 1.0], a0: None, radius: None },
            weights: vec![vec![vec![2.0]], vec![vec![w32]]],
            mask: None,
        }
    }

    #[test]
    fn validates_path3() {
        let net = validate_network(&path3_file(3.0)).unwrap();
        assert_eq!(net.topology().edge_count(), 2);
        assert_eq!(net.weight(2, 0, 0), 3.0);
    }

    #[test]
    fn rejects_zero_weight() {
        let err = validate_network(&path3_file(0.0)).unwrap_err();
        assert_eq!(err, NetworkError::ZeroWeight(EdgeIndex::new(2, 0, 0)));
    }

    #[test]
    fn rejects_constant_term() {
        let mut f = path3_file(3.0);
        f.activation = ActivationFile::Maclaurin { coeffs: vec![1.0, 1.0], a0: Some(0.5), radius: None };
        assert_eq!(validate_network(&f).unwrap_err(), NetworkError::NonzeroConstantTerm(0.5));
    }

    #[test]
    fn rejects_shapes_and_empty_layers() {
        let mut f = path3_file(3.0);
        f.weights[1] = vec![vec![3.0, 1.0]];
        assert!(matches!(validate_network(&f), Err(NetworkError::ShapeMismatch(_))));
        f.layers = vec![1, 0, 1];
        assert_eq!(validate_network(&f).unwrap_err(), NetworkError::EmptyLayer(1));
    }

    #[test]
    fn edge_enumeration() {
        let t = LayeredTopology::new(vec![1, 2, 3, 1]).unwrap();
        assert_eq!(t.edge_count(), 2 + 6 + 3);
        let edges = t.edges();
        assert_eq!(edges[2], EdgeIndex::new(2, 0, 0));
        assert_eq!(edges[3], EdgeIndex::new(2, 0, 1));
        for (k, e) in edges.iter().enumerate() {
            assert_eq!(t.edge_position(*e), k);
        }
        assert_eq!(t.node_at(t.node_id(2, 1)), Some((2, 1)));
    }

    #[test]
    fn random_weights_contract() {
        let t = LayeredTopology::new(vec![1, 2, 1]).unwrap();
        let a = random_weights(&t, 7, (0.5, 3.0)).unwrap();
        let b = random_weights(&t, 7, (0.5, 3.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.as_flat().len(), 4);
        assert!(a.as_flat().iter().all(|&w| w > 0.5 && w < 3.0));
        assert!(matches!(random_weights(&t, 7, (-1.0, 1.0)), Err(NetworkError::RangeContainsZero { .. })));
        let neg = random_weights(&t, 7, (-3.0, -0.5)).unwrap();
        assert!(neg.as_flat().iter().all(|&w| w < 0.0));
    }

    #[test]
    fn ordered_weights_contract() {
        let t = LayeredTopology::new(vec![1, 2, 1]).unwrap();
        let w = random_ordered_weights(&t, 1, (0.5, 3.0), 0.1).unwrap();
        assert!(w.get(1, 0, 0) > w.get(1, 1, 0));
        assert!(w.is_ordered_positive());
        let t5 = LayeredTopology::new(vec![1, 5, 1]).unwrap();
        assert!(matches!(
            random_ordered_weights(&t5, 1, (1.0, 1.1), 0.5),
            Err(NetworkError::InfeasibleOrdering { .. })
        ));
    }

    #[test]
    fn permutation_rules() {
        let t = LayeredTopology::new(vec![1, 2, 1]).unwrap();
        let w = WeightMatrix::from_blocks(&t, &[vec![vec![1.0], vec![2.0]], vec![vec![3.0, 4.0]]]).unwrap();
        let net = Network::new(w, AnalyticActivation::polynomial(vec![1.0, 1.0])).unwrap();
        let p = permute_hidden_layer(&net, 1, &[1, 0]).unwrap();
        assert_eq!(p.weights().to_blocks(), vec![vec![vec![2.0], vec![1.0]], vec![vec![4.0, 3.0]]]);
        assert_eq!(permute_hidden_layer(&net, 1, &[0, 1]).unwrap(), net);
        assert!(matches!(permute_hidden_layer(&net, 0, &[0]), Err(NetworkError::BadLayer { .. })));
        assert!(matches!(permute_hidden_layer(&net, 2, &[0]), Err(NetworkError::BadLayer { .. })));
        assert!(matches!(permute_hidden_layer(&net, 1, &[0, 0]), Err(NetworkError::BadPermutation(2))));
    }

    #[test]
    fn builtin_coefficients() {
        let e = AnalyticActivation::Expm1.coeffs(5).unwrap();
        assert_eq!(e[0], 1.0);
        assert!((e[4] - 1.0 / 120.0).abs() < 1e-18);
        let t = AnalyticActivation::Tanh.coeffs(7).unwrap();
        let expect = [1.0, 0.0, -1.0 / 3.0, 0.0, 2.0 / 15.0, 0.0, -17.0 / 315.0];
        for (a, b) in t.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let m = AnalyticActivation::maclaurin(vec![1.0, 1.0]);
        assert!(matches!(m.coeffs(3), Err(NetworkError::InsufficientOrder { .. })));
        assert!(m.eval(0.6).is_err());
        assert_eq!(AnalyticActivation::polynomial(vec![1.0, 1.0]).coeffs(4).unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let t = LayeredTopology::new(vec![1, 3, 2, 1]).unwrap();
        let w = random_weights(&t, 11, (0.5, 3.0)).unwrap();
        let net = Network::new(w, AnalyticActivation::maclaurin(vec![0.1, -1.0 / 3.0, 1e-300])).unwrap();
        let back = Network::from_json(&net.to_json()).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.content_hash(), net.content_hash());
    }

    #[test]
    fn spec_json_shape() {
        let s = r#"{"layers":[1,2,1],"activation":{"kind":"expm1"},"weights":[[[3],[1]],[[2,0.5]]]}"#;
        let net = Network::from_json(s).unwrap();
        assert_eq!(net.weight(2, 0, 1), 0.5);
        assert_eq!(net.activation(), &AnalyticActivation::Expm1);
    }
}
