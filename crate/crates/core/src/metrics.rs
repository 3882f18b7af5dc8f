//! Mixture-of-RBF kernels and unbiased MMD² estimators.
//!
//! Two estimators are provided:
//!
//! * [`mmd2_quadratic_unbiased`]: the full U-statistic over all pairs,
//!   O((n+m)²) kernel evaluations, with a two-sample jackknife standard error.
//! * [`mmd2_linear`]: the linear-time statistic over disjoint consecutive
//!   pairs, O(n) kernel evaluations.
//!
//! The quadratic estimator is the reference the linear one is checked
//! against. Both accumulate in `f64`, and the quadratic sums are partitioned
//! into fixed row blocks so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("bandwidth must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("kernel spec needs at least one bandwidth")]
    EmptySpec,
    #[error("{what} needs at least {need} samples, got {got}")]
    TooFewSamples {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("sample matrix: {0}")]
    BadMatrix(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Bandwidths of a sum-of-Gaussians kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    sigmas: Vec<f64>,
    /// `1 / (2σ²)` in ascending order, i.e. widest kernel first.
    #[serde(skip)]
    inv_two_sigma_sq: Vec<f64>,
}

/// `exp(-x)` is exactly zero in f64 past this point.
const EXP_CUTOFF: f64 = 746.0;

/// Below this argument a degree-4 Taylor polynomial of `exp(-x)` is exact to
/// double rounding (remainder < x⁵/120 < 1e-17).
const TAYLOR_LIMIT: f64 = 1e-3;

#[inline]
fn exp_neg(x: f64) -> f64 {
    if x < TAYLOR_LIMIT {
        1.0 - x * (1.0 - x * 0.5 * (1.0 - x / 3.0 * (1.0 - x * 0.25)))
    } else {
        (-x).exp()
    }
}

impl KernelSpec {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(MetricsError::EmptySpec);
        }
        if let Some(&s) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(MetricsError::BadSigma(s));
        }
        let mut inv: Vec<f64> = sigmas.iter().map(|s| 1.0 / (2.0 * s * s)).collect();
        inv.sort_by(f64::total_cmp);
        Ok(Self {
            sigmas,
            inv_two_sigma_sq: inv,
        })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Kernel value for a squared distance.
    #[inline]
    pub fn eval_sq(&self, d2: f64) -> f64 {
        let mut acc = 0.0;
        for &c in &self.inv_two_sigma_sq {
            let e = d2 * c;
            if e > EXP_CUTOFF {
                break;
            }
            acc += exp_neg(e);
        }
        acc
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        default_kernel_spec()
    }
}

/// Sixteen log-uniform bandwidths from 1e-6 to 1e6 inclusive:
/// `σ_j = 10^(-6 + 12 j / 15)`.
pub fn default_kernel_spec() -> KernelSpec {
    let sigmas = (0..16)
        .map(|j| 10f64.powf(-6.0 + 12.0 * j as f64 / 15.0))
        .collect();
    KernelSpec::new(sigmas).expect("static bandwidths are valid")
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(MetricsError::DimMismatch(x.len(), y.len()));
    }
    Ok(())
}

/// `exp(-‖x−y‖² / (2σ²))`
pub fn rbf_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    check_dims(x, y)?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(MetricsError::BadSigma(sigma));
    }
    Ok((-sq_dist(x, y) / (2.0 * sigma * sigma)).exp())
}

/// Sum of [`rbf_kernel`] over every bandwidth of `spec`.
pub fn mixture_kernel(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_dims(x, y)?;
    Ok(spec.eval_sq(sq_dist(x, y)))
}

/// `n` feature vectors of dimension `d`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(MetricsError::BadMatrix(format!(
                "{n}x{d} needs {} values, got {}",
                n * d,
                data.len()
            )));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(MetricsError::DimMismatch(d, r.len()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d.max(1)).take(self.n)
    }

    /// Rows in the given order.
    pub fn select(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(order.len() * self.d);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n: order.len(),
            d: self.d,
            data,
        }
    }

    pub fn concat(parts: &[&SampleMatrix]) -> Result<Self> {
        let d = parts.first().map_or(0, |p| p.d);
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.d != d {
                return Err(MetricsError::DimMismatch(d, p.d));
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Self::new(n, d, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    QuadraticUnbiased,
    LinearUnbiased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    pub kind: EstimatorKind,
    /// Unbiased MMD²; may be negative.
    pub mmd2: f64,
    /// `sqrt(max(0, mmd2))`
    pub mmd: f64,
    pub stderr: f64,
    /// Linear: number of disjoint sample pairs. Quadratic: number of
    /// distinct kernel evaluations.
    pub pairs_used: usize,
}

impl MmdEstimate {
    fn new(kind: EstimatorKind, mmd2: f64, stderr: f64, pairs_used: usize) -> Self {
        Self {
            kind,
            mmd2,
            mmd: mmd2.max(0.0).sqrt(),
            stderr,
            pairs_used,
        }
    }
}

fn check_pair(x: &SampleMatrix, y: &SampleMatrix, what: &'static str) -> Result<()> {
    if x.d != y.d {
        return Err(MetricsError::DimMismatch(x.d, y.d));
    }
    for n in [x.n, y.n] {
        if n < 2 {
            return Err(MetricsError::TooFewSamples { what, need: 2, got: n });
        }
    }
    Ok(())
}

const BLOCK_ROWS: usize = 64;

/// `out[i] = Σ_{j≠i} k(a_i, a_j)`, using each unordered pair once.
fn within_row_sums(a: &SampleMatrix, spec: &KernelSpec) -> Vec<f64> {
    let n = a.n;
    let blocks = n.div_ceil(BLOCK_ROWS);
    let partials: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut local = vec![0.0; n];
            for i in b * BLOCK_ROWS..((b + 1) * BLOCK_ROWS).min(n) {
                let xi = a.row(i);
                let mut row = 0.0;
                for j in i + 1..n {
                    let k = spec.eval_sq(sq_dist(xi, a.row(j)));
                    row += k;
                    local[j] += k;
                }
                local[i] += row;
            }
            local
        })
        .collect();
    sum_partials(partials, n)
}

/// Row sums of the cross kernel matrix: `(Σ_j k(x_i, y_j), Σ_i k(x_i, y_j))`.
fn cross_sums(x: &SampleMatrix, y: &SampleMatrix, spec: &KernelSpec) -> (Vec<f64>, Vec<f64>) {
    let blocks = x.n.div_ceil(BLOCK_ROWS);
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let rows = b * BLOCK_ROWS..((b + 1) * BLOCK_ROWS).min(x.n);
            let mut cx = Vec::with_capacity(rows.len());
            let mut cy = vec![0.0; y.n];
            for i in rows {
                let xi = x.row(i);
                let mut s = 0.0;
                for (j, slot) in cy.iter_mut().enumerate() {
                    let k = spec.eval_sq(sq_dist(xi, y.row(j)));
                    s += k;
                    *slot += k;
                }
                cx.push(s);
            }
            (cx, cy)
        })
        .collect();
    let mut cx = Vec::with_capacity(x.n);
    let mut cy_parts = Vec::with_capacity(partials.len());
    for (a, b) in partials {
        cx.extend(a);
        cy_parts.push(b);
    }
    (cx, sum_partials(cy_parts, y.n))
}

fn sum_partials(parts: Vec<Vec<f64>>, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

fn u_statistic(a: f64, n: f64, b: f64, m: f64, c: f64) -> f64 {
    a / (n * (n - 1.0)) + b / (m * (m - 1.0)) - 2.0 * c / (n * m)
}

/// Full unbiased MMD² U-statistic.
///
/// The standard error is a two-sample delete-one jackknife (each sample set
/// contributes its own jackknife variance). A set with fewer than three
/// samples cannot be jackknifed and contributes zero.
pub fn mmd2_quadratic_unbiased(
    x: &SampleMatrix,
    y: &SampleMatrix,
    spec: &KernelSpec,
) -> Result<MmdEstimate> {
    check_pair(x, y, "quadratic MMD")?;
    let rxx = within_row_sums(x, spec);
    let ryy = within_row_sums(y, spec);
    let (cx, cy) = cross_sums(x, y, spec);
    let a: f64 = rxx.iter().sum();
    let b: f64 = ryy.iter().sum();
    let c: f64 = cx.iter().sum();
    let (n, m) = (x.n as f64, y.n as f64);
    let mmd2 = u_statistic(a, n, b, m, c);

    let jackknife = |count: usize, leave_out: &dyn Fn(usize) -> f64| -> f64 {
        if count < 3 {
            return 0.0;
        }
        let vals: Vec<f64> = (0..count).map(leave_out).collect();
        let mean = vals.iter().sum::<f64>() / count as f64;
        let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
        ss * (count as f64 - 1.0) / count as f64
    };
    let var_x = jackknife(x.n, &|i| u_statistic(a - 2.0 * rxx[i], n - 1.0, b, m, c - cx[i]));
    let var_y = jackknife(y.n, &|j| u_statistic(a, n, b - 2.0 * ryy[j], m - 1.0, c - cy[j]));

    let pairs = x.n * (x.n - 1) / 2 + y.n * (y.n - 1) / 2 + x.n * y.n;
    Ok(MmdEstimate::new(
        EstimatorKind::QuadraticUnbiased,
        mmd2,
        (var_x + var_y).sqrt(),
        pairs,
    ))
}

/// Linear-time unbiased MMD² over disjoint consecutive pairs.
///
/// Uses the first `t = 2⌊min(n, m)/2⌋` rows of each set in the given order;
/// `h_i = k(x₁,x₂) + k(y₁,y₂) − k(x₁,y₂) − k(x₂,y₁)` for the i-th pair and the
/// estimate is the mean of `h`, with standard error `std(h) / √(t/2)`.
pub fn mmd2_linear(x: &SampleMatrix, y: &SampleMatrix, spec: &KernelSpec) -> Result<MmdEstimate> {
    check_pair(x, y, "linear MMD")?;
    let pairs = x.n.min(y.n) / 2;
    let k = |a: &[f64], b: &[f64]| spec.eval_sq(sq_dist(a, b));
    let h: Vec<f64> = (0..pairs)
        .map(|i| {
            let (x1, x2) = (x.row(2 * i), x.row(2 * i + 1));
            let (y1, y2) = (y.row(2 * i), y.row(2 * i + 1));
            k(x1, x2) + k(y1, y2) - k(x1, y2) - k(x2, y1)
        })
        .collect();
    let count = pairs as f64;
    let mean = h.iter().sum::<f64>() / count;
    let stderr = if pairs > 1 {
        let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0);
        (var / count).sqrt()
    } else {
        0.0
    };
    Ok(MmdEstimate::new(EstimatorKind::LinearUnbiased, mean, stderr, pairs))
}
