//! Truncated MacLaurin series without constant term, and their propagation
//! through a network.
//!
//! The sink output `F(x) = sum_k A_k x^k` is built layer by layer: the source
//! series is `x`, every node takes a weighted sum of its parents' series and
//! composes it with `f`. [`propagate_jet`] carries `dA_k/dw_e` for every edge
//! alongside (forward mode), giving the Jacobian whose rank decides local
//! identifiability.

use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::network::{AnalyticActivation, Network, NetworkError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("series orders differ: {0} vs {1}")]
    OrderMismatch(usize, usize),
    #[error("series order must be at least 1")]
    ZeroOrder,
    #[error("intermediate degree {degree} exceeds the cap {cap}")]
    DegreeOverflow { degree: usize, cap: usize },
    #[error("the expansion oracle needs a polynomial activation, got {0}")]
    NotPolynomial(&'static str),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// `c_1 x + ... + c_M x^M`; the constant term is structurally zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSeries {
    coeffs: Vec<f64>,
}

impl TruncatedSeries {
    pub fn new(coeffs: Vec<f64>) -> Result<Self, SeriesError> {
        if coeffs.is_empty() {
            return Err(SeriesError::ZeroOrder);
        }
        Ok(Self { coeffs })
    }

    /// A polynomial without constant term, zero-padded or cut to `order`.
    pub fn from_poly(coeffs: &[f64], order: usize) -> Result<Self, SeriesError> {
        let mut c = vec![0.0; order];
        let n = coeffs.len().min(order);
        c[..n].copy_from_slice(&coeffs[..n]);
        Self::new(c)
    }

    /// The series `x`.
    pub fn identity(order: usize) -> Result<Self, SeriesError> {
        Self::from_poly(&[1.0], order)
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    /// `c_1..c_M`
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Coefficient of `x^k`, `k >= 1`.
    pub fn coeff(&self, k: usize) -> f64 {
        self.coeffs[k - 1]
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| (acc + c) * x)
    }
}

/// Dense truncated polynomial with constant term at index 0 (the ring the
/// Horner scheme works in).
fn mul_trunc(a: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m + 1];
    for (i, &ai) in a.iter().enumerate().take(m + 1) {
        if ai == 0.0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate().take(m + 1 - i) {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// Horner evaluation of `sum_k a_k g^k` in the ring truncated at `x^m`;
/// `g` has index 0 equal to zero.
fn horner_compose(a: &[f64], g: &[f64], m: usize) -> Vec<f64> {
    let Some((&last, rest)) = a.split_last() else {
        return vec![0.0; m + 1];
    };
    let mut r = vec![0.0; m + 1];
    r[0] = last;
    for &ak in rest.iter().rev() {
        r = mul_trunc(g, &r, m);
        r[0] += ak;
    }
    mul_trunc(g, &r, m)
}

/// Series of `f(g(x))` truncated at the common order.
pub fn compose(outer: &TruncatedSeries, inner: &TruncatedSeries) -> Result<TruncatedSeries, SeriesError> {
    let m = inner.order();
    if outer.order() != m {
        return Err(SeriesError::OrderMismatch(outer.order(), m));
    }
    let mut g = vec![0.0];
    g.extend_from_slice(&inner.coeffs);
    let mut out = horner_compose(&outer.coeffs, &g, m);
    out.remove(0);
    TruncatedSeries::new(out)
}

fn activation_series(act: &AnalyticActivation, order: usize) -> Result<Vec<f64>, SeriesError> {
    if order == 0 {
        return Err(SeriesError::ZeroOrder);
    }
    Ok(act.coeffs(order)?)
}

/// `A_1..A_M` of the sink's measured function.
pub fn propagate(net: &Network, order: usize) -> Result<TruncatedSeries, SeriesError> {
    let topo = net.topology();
    topo.require_single_io()?;
    let a = activation_series(net.activation(), order)?;
    let w = net.weights();
    let mut prev = vec![TruncatedSeries::identity(order)?.coeffs];
    for l in 1..=topo.depth() {
        let cur = (0..topo.width(l))
            .map(|i| {
                let mut lin = vec![0.0; order + 1];
                for (s, &wij) in prev.iter().zip(w.row(l, i)) {
                    for k in 0..order {
                        lin[k + 1] += wij * s[k];
                    }
                }
                let mut out = horner_compose(&a, &lin, order);
                out.remove(0);
                out
            })
            .collect();
        prev = cur;
    }
    TruncatedSeries::new(prev.swap_remove(0))
}

/// Coefficients `A_k` together with `dA_k/dw_e` for every edge.
#[derive(Debug, Clone, PartialEq)]
pub struct JetSeries {
    order: usize,
    edges: usize,
    values: Vec<f64>,
    /// `order x edges`, row-major.
    grads: Vec<f64>,
}

impl JetSeries {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn edge_count(&self) -> usize {
        self.edges
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, k: usize) -> f64 {
        self.values[k - 1]
    }

    /// Gradient of `A_k` in canonical edge order.
    pub fn grad(&self, k: usize) -> &[f64] {
        &self.grads[(k - 1) * self.edges..k * self.edges]
    }

    pub fn to_series(&self) -> TruncatedSeries {
        TruncatedSeries { coeffs: self.values.clone() }
    }

    /// Rows `A_1..A_rows` of the Jacobian.
    pub fn jacobian(&self, rows: usize) -> DMatrix<f64> {
        let rows = rows.min(self.order);
        DMatrix::from_row_slice(rows, self.edges, &self.grads[..rows * self.edges])
    }
}

/// Truncated polynomial whose coefficients carry gradients.
#[derive(Clone)]
struct JetPoly {
    v: Vec<f64>,
    g: Vec<f64>,
}

impl JetPoly {
    fn zero(m: usize, e: usize) -> Self {
        Self { v: vec![0.0; m + 1], g: vec![0.0; (m + 1) * e] }
    }

    fn mul(&self, other: &Self, m: usize, e: usize) -> Self {
        let mut out = Self::zero(m, e);
        for i in 0..=m {
            let (ai, gai) = (self.v[i], &self.g[i * e..(i + 1) * e]);
            let a_zero = ai == 0.0 && gai.iter().all(|&x| x == 0.0);
            if a_zero {
                continue;
            }
            for j in 0..=m - i {
                let bj = other.v[j];
                let gbj = &other.g[j * e..(j + 1) * e];
                let n = i + j;
                out.v[n] += ai * bj;
                let go = &mut out.g[n * e..(n + 1) * e];
                for ((o, &ga), &gb) in go.iter_mut().zip(gai).zip(gbj) {
                    *o += ga * bj + ai * gb;
                }
            }
        }
        out
    }
}

pub fn propagate_jet(net: &Network, order: usize) -> Result<JetSeries, SeriesError> {
    let topo = net.topology();
    topo.require_single_io()?;
    let a = activation_series(net.activation(), order)?;
    let (m, e) = (order, topo.edge_count());
    let w = net.weights();
    let mut src = JetPoly::zero(m, e);
    if m >= 1 {
        src.v[1] = 1.0;
    }
    let mut prev = vec![src];
    for l in 1..=topo.depth() {
        let mut cur = Vec::with_capacity(topo.width(l));
        for i in 0..topo.width(l) {
            let mut lin = JetPoly::zero(m, e);
            for (j, (s, &wij)) in prev.iter().zip(w.row(l, i)).enumerate() {
                let edge = topo.block_offset(l) + i * topo.width(l - 1) + j;
                for k in 0..=m {
                    lin.v[k] += wij * s.v[k];
                    lin.g[k * e + edge] += s.v[k];
                    for (o, &gs) in lin.g[k * e..(k + 1) * e].iter_mut().zip(&s.g[k * e..(k + 1) * e]) {
                        *o += wij * gs;
                    }
                }
            }
            // Horner with constant outer coefficients
            let mut r = JetPoly::zero(m, e);
            if let Some(&last) = a.last() {
                r.v[0] = last;
                for &ak in a[..a.len() - 1].iter().rev() {
                    r = lin.mul(&r, m, e);
                    r.v[0] += ak;
                }
                r = lin.mul(&r, m, e);
            }
            cur.push(r);
        }
        prev = cur;
    }
    let sink = prev.swap_remove(0);
    Ok(JetSeries {
        order: m,
        edges: e,
        values: sink.v[1..].to_vec(),
        grads: sink.g[e..].to_vec(),
    })
}

/// Degree cap for [`oracle_expand`].
pub const DEFAULT_DEGREE_CAP: usize = 4096;

/// Brute-force reference: expands the nested polynomial `F` completely with
/// naive products, then keeps `x^1..x^order`.
pub fn oracle_expand(net: &Network, order: usize, degree_cap: usize) -> Result<TruncatedSeries, SeriesError> {
    let topo = net.topology();
    topo.require_single_io()?;
    let a = match net.activation() {
        AnalyticActivation::Polynomial { coeffs } => coeffs.clone(),
        other => return Err(SeriesError::NotPolynomial(other.kind())),
    };
    let w = net.weights();
    let mut prev: Vec<Vec<f64>> = vec![vec![0.0, 1.0]];
    for l in 1..=topo.depth() {
        let mut cur = Vec::new();
        for i in 0..topo.width(l) {
            let deg = prev.iter().map(|p| p.len() - 1).max().unwrap_or(0);
            let mut lin = vec![0.0; deg + 1];
            for (p, &wij) in prev.iter().zip(w.row(l, i)) {
                for (k, &c) in p.iter().enumerate() {
                    lin[k] += wij * c;
                }
            }
            let out_deg = deg * a.len();
            if out_deg > degree_cap {
                return Err(SeriesError::DegreeOverflow { degree: out_deg, cap: degree_cap });
            }
            let mut out = vec![0.0; out_deg + 1];
            let mut power = vec![1.0];
            for &ak in &a {
                power = poly_mul(&power, &lin);
                for (k, &c) in power.iter().enumerate() {
                    out[k] += ak * c;
                }
            }
            cur.push(out);
        }
        prev = cur;
    }
    let sink = &prev[0];
    TruncatedSeries::new((1..=order).map(|k| sink.get(k).copied().unwrap_or(0.0)).collect())
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `|a - b| <= rel * max(|a|, |b|) + abs` elementwise.
pub fn series_close(a: &[f64], b: &[f64], rel: f64, abs: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= rel * x.abs().max(y.abs()) + abs)
}

/// CSV dump `k,value`, one row per order.
pub fn write_series_csv<W: Write>(out: W, s: &TruncatedSeries) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "value"])?;
    for (k, c) in s.coeffs().iter().enumerate() {
        w.write_record([(k + 1).to_string(), fmt_f64(*c)])?;
    }
    w.flush()?;
    Ok(())
}

/// CSV dump `k,value,grad_e1,...,grad_eE`.
pub fn write_jet_csv<W: Write>(out: W, s: &JetSeries) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k".to_string(), "value".to_string()];
    header.extend((1..=s.edge_count()).map(|e| format!("grad_e{e}")));
    w.write_record(&header)?;
    for k in 1..=s.order() {
        let mut row = vec![k.to_string(), fmt_f64(s.value(k))];
        row.extend(s.grad(k).iter().map(|g| fmt_f64(*g)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same double.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
