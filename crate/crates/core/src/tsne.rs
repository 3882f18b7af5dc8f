//! Exact t-SNE with perplexity calibration, early exaggeration and momentum.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::SampleMatrix;
use crate::rng::SeededRng;
use crate::trainer::Role;

#[derive(Debug, Error, PartialEq)]
pub enum TsneError {
    #[error("perplexity {perplexity} needs more than {n} points (1 < perplexity < n)")]
    Perplexity { perplexity: f64, n: usize },
    #[error("t-SNE needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("{0} labels for {1} points")]
    LabelCount(usize, usize),
    #[error("no point carries label {0:?}")]
    MissingLabel(Role),
    #[error("invalid t-SNE config: {0}")]
    Config(String),
}

pub type Result<T, E = TsneError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub out_dims: usize,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    /// Per-coordinate adaptive gains as in the reference implementation.
    pub adaptive_gains: bool,
    pub init_std: f64,
    /// Project onto this many principal components first.
    pub pca: Option<usize>,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            out_dims: 2,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
            momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            adaptive_gains: true,
            init_std: 1e-4,
            pca: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// Row-major `n × dims`.
    pub points: Vec<f64>,
    pub dims: usize,
    pub labels: Vec<Role>,
    pub kl_history: Vec<f64>,
}

impl Embedding {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dims..(i + 1) * self.dims]
    }
}

pub const PERPLEXITY_TOL: f64 = 1e-5;
pub const MAX_SEARCH_STEPS: usize = 64;

/// Row-major squared Euclidean distances.
pub fn squared_distances(x: &SampleMatrix) -> Vec<f64> {
    let n = x.n();
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a = x.row(i);
        for (j, slot) in row.iter_mut().enumerate() {
            if j != i {
                *slot = a.iter().zip(x.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
            }
        }
    });
    out
}

/// Conditional distribution `P_{j|i}` for one row at precision `beta`, and
/// its Shannon entropy in nats.
pub fn row_distribution(d2: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let min = d2
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = d2
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == i { 0.0 } else { (-(v - min) * beta).exp() })
        .collect();
    let z: f64 = p.iter().sum();
    let mut h = 0.0;
    for v in &mut p {
        *v /= z;
        if *v > 0.0 {
            h -= *v * v.ln();
        }
    }
    (p, h)
}

/// Per-row binary search on `β_i` so that `2^H(P_i)` hits `perplexity`.
/// Returns the row-major conditional matrix and the precisions.
pub fn perplexity_calibrate(d2: &[f64], n: usize, perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(perplexity > 1.0 && perplexity < n as f64) {
        return Err(TsneError::Perplexity { perplexity, n });
    }
    if d2.iter().any(|v| !v.is_finite()) {
        return Err(TsneError::NonFinite);
    }
    let target = perplexity.ln();
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = &d2[i * n..(i + 1) * n];
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            let mut beta = 1.0;
            let (mut p, mut h) = row_distribution(row, i, beta);
            for _ in 0..MAX_SEARCH_STEPS {
                if (h - target).abs() < PERPLEXITY_TOL {
                    break;
                }
                if h > target {
                    lo = beta;
                    beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
                (p, h) = row_distribution(row, i, beta);
            }
            (p, beta)
        })
        .collect();
    let mut p = Vec::with_capacity(n * n);
    let mut betas = Vec::with_capacity(n);
    for (row, b) in rows {
        p.extend(row);
        betas.push(b);
    }
    Ok((p, betas))
}

/// `p_ij = (p_{j|i} + p_{i|j}) / 2n`.
pub fn symmetrize(cond: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    p
}

/// Unnormalized Student-t affinities `(1 + ‖y_i − y_j‖²)⁻¹` (zero diagonal)
/// and their sum.
fn student_t(y: &[f64], n: usize, dims: usize) -> (Vec<f64>, f64) {
    let mut num = vec![0.0; n * n];
    num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let yi = &y[i * dims..(i + 1) * dims];
        for (j, slot) in row.iter_mut().enumerate() {
            if j != i {
                let d2: f64 = yi.iter().zip(&y[j * dims..(j + 1) * dims]).map(|(a, b)| (a - b) * (a - b)).sum();
                *slot = 1.0 / (1.0 + d2);
            }
        }
    });
    let z = num.par_chunks(n).map(|r| r.iter().sum::<f64>()).collect::<Vec<_>>().iter().sum();
    (num, z)
}

/// `KL(P ‖ Q)` at embedding `y`.
pub fn kl_divergence(p: &[f64], y: &[f64], n: usize, dims: usize) -> f64 {
    let (num, z) = student_t(y, n, dims);
    kl_from(p, &num, z)
}

fn kl_from(p: &[f64], num: &[f64], z: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &nv)| pv * (pv / (nv / z).max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// `∂KL/∂y_i = 4 Σ_j (p_ij − q_ij)(y_i − y_j)(1 + ‖y_i − y_j‖²)⁻¹`.
pub fn kl_gradient(p: &[f64], y: &[f64], n: usize, dims: usize) -> Vec<f64> {
    let (num, z) = student_t(y, n, dims);
    gradient_from(p, y, &num, z, n, dims)
}

fn gradient_from(p: &[f64], y: &[f64], num: &[f64], z: f64, n: usize, dims: usize) -> Vec<f64> {
    let mut grad = vec![0.0; n * dims];
    grad.par_chunks_mut(dims).enumerate().for_each(|(i, g)| {
        let yi = &y[i * dims..(i + 1) * dims];
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = num[i * n + j];
            let coeff = 4.0 * (p[i * n + j] - w / z) * w;
            for k in 0..dims {
                g[k] += coeff * (yi[k] - y[j * dims + k]);
            }
        }
    });
    grad
}

/// Projects rows onto the top `k` principal components. Component signs are
/// fixed so each component's largest-magnitude loading is positive.
pub fn pca(x: &SampleMatrix, k: usize) -> Result<SampleMatrix> {
    let (n, d) = (x.n(), x.d());
    if k == 0 || k > d {
        return Err(TsneError::Config(format!("pca dimension {k} must lie in 1..={d}")));
    }
    let mut mean = vec![0.0; d];
    for row in x.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] - mean[j]);
    let cov = centered.transpose() * &centered;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut data = vec![0.0; n * k];
    for (c, &idx) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        let peak = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if peak < 0.0 {
            v = -v;
        }
        let proj = &centered * v;
        for i in 0..n {
            data[i * k + c] = proj[i];
        }
    }
    SampleMatrix::new(n, k, data).map_err(|e| TsneError::Config(e.to_string()))
}

/// Seeded `N(0, std²)` starting layout.
pub fn initial_layout(n: usize, dims: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n * dims).map(|_| normal.sample(&mut rng)).collect()
}

/// Embeds all rows jointly.
pub fn tsne_run(features: &SampleMatrix, labels: &[Role], cfg: &TsneConfig) -> Result<Embedding> {
    let init = initial_layout(features.n(), cfg.out_dims, cfg.init_std, cfg.seed);
    tsne_run_from(features, labels, cfg, init)
}

/// As [`tsne_run`] but starting from a caller-supplied layout.
pub fn tsne_run_from(
    features: &SampleMatrix,
    labels: &[Role],
    cfg: &TsneConfig,
    init: Vec<f64>,
) -> Result<Embedding> {
    let n = features.n();
    if n < 4 {
        return Err(TsneError::TooFewPoints(n));
    }
    if labels.len() != n {
        return Err(TsneError::LabelCount(labels.len(), n));
    }
    if !features.is_finite() {
        return Err(TsneError::NonFinite);
    }
    if cfg.iterations == 0 || cfg.out_dims == 0 || !(cfg.learning_rate > 0.0) {
        return Err(TsneError::Config("iterations, out_dims and learning_rate must be positive".into()));
    }
    let dims = cfg.out_dims;
    if init.len() != n * dims {
        return Err(TsneError::Config("initial layout has the wrong size".into()));
    }
    let reduced;
    let x = match cfg.pca {
        Some(k) if k < features.d() => {
            reduced = pca(features, k)?;
            &reduced
        }
        _ => features,
    };
    let d2 = squared_distances(x);
    let (cond, _) = perplexity_calibrate(&d2, n, cfg.perplexity)?;
    let p = symmetrize(&cond, n);
    let exaggerated: Vec<f64> = p.iter().map(|v| v * cfg.early_exaggeration).collect();

    let mut y = init;
    let mut velocity = vec![0.0; n * dims];
    let mut gains = vec![1.0f64; n * dims];
    let mut kl_history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let target = if it < cfg.exaggeration_iters { &exaggerated } else { &p };
        let momentum = if it < cfg.momentum_switch { cfg.momentum } else { cfg.final_momentum };
        let (num, z) = student_t(&y, n, dims);
        // the affinities also give the KL of the previous iteration's layout
        if it > 0 {
            kl_history.push(kl_from(&p, &num, z));
        }
        let grad = gradient_from(target, &y, &num, z, n, dims);
        for k in 0..n * dims {
            if cfg.adaptive_gains {
                gains[k] = if (grad[k] > 0.0) != (velocity[k] > 0.0) {
                    gains[k] + 0.2
                } else {
                    (gains[k] * 0.8).max(0.01)
                };
            }
            velocity[k] = momentum * velocity[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += velocity[k];
        }
        // keep the layout centred
        for c in 0..dims {
            let mean = (0..n).map(|i| y[i * dims + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[i * dims + c] -= mean);
        }
    }
    kl_history.push(kl_divergence(&p, &y, n, dims));
    if y.iter().any(|v| !v.is_finite()) {
        return Err(TsneError::NonFinite);
    }
    Ok(Embedding {
        points: y,
        dims,
        labels: labels.to_vec(),
        kl_history,
    })
}

/// Mean embedded point of every row labelled `role`.
pub fn set_mean(emb: &Embedding, role: Role) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; emb.dims];
    let mut count = 0usize;
    for (i, &l) in emb.labels.iter().enumerate() {
        if l == role {
            count += 1;
            for (a, v) in acc.iter_mut().zip(emb.point(i)) {
                *a += v;
            }
        }
    }
    if count == 0 {
        return Err(TsneError::MissingLabel(role));
    }
    Ok(acc.into_iter().map(|a| a / count as f64).collect())
}

pub fn set_means(emb: &Embedding, roles: &[Role]) -> Result<Vec<(Role, Vec<f64>)>> {
    roles.iter().map(|&r| Ok((r, set_mean(emb, r)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> SampleMatrix {
        let mut rng = crate::rng::seeded(seed);
        SampleMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn equidistant_triple() {
        let d2 = vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let (p, _) = perplexity_calibrate(&d2, 3, 2.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 0.5 };
                assert!((p[i * 3 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_are_normalized_and_hit_perplexity() {
        let x = random_points(60, 5, 1);
        let d2 = squared_distances(&x);
        let (p, _) = perplexity_calibrate(&d2, 60, 10.0).unwrap();
        for i in 0..60 {
            let row = &p[i * 60..(i + 1) * 60];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row[i], 0.0);
            let h: f64 = row.iter().filter(|&&v| v > 0.0).map(|v| -v * v.log2()).sum();
            assert!((h.exp2() - 10.0).abs() / 10.0 < 1e-4);
        }
        let sym = symmetrize(&p, 60);
        assert!((sym.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn perplexity_must_be_below_n() {
        let d2 = vec![0.0; 9];
        assert!(matches!(perplexity_calibrate(&d2, 3, 3.0), Err(TsneError::Perplexity { .. })));
        assert!(matches!(perplexity_calibrate(&d2, 3, 1.0), Err(TsneError::Perplexity { .. })));
    }

    #[test]
    fn fixed_point_has_zero_gradient() {
        let y = vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 1.5, 1.5];
        let n = 4;
        let (num, z) = student_t(&y, n, 2);
        let q: Vec<f64> = num.iter().map(|v| v / z).collect();
        let g = kl_gradient(&q, &y, n, 2);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        assert!(kl_divergence(&q, &y, n, 2).abs() < 1e-15);
    }

    #[test]
    fn set_means_examples() {
        let emb = Embedding {
            points: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            dims: 2,
            labels: vec![Role::Synthetic, Role::Refined, Role::Refined],
            kl_history: vec![],
        };
        assert_eq!(set_mean(&emb, Role::Synthetic).unwrap(), vec![1.0, 2.0]);
        assert_eq!(set_mean(&emb, Role::Refined).unwrap(), vec![4.0, 5.0]);
        assert_eq!(set_mean(&emb, Role::Real), Err(TsneError::MissingLabel(Role::Real)));
    }

    #[test]
    fn set_means_match_brute_force() {
        let mut rng = crate::rng::seeded(3);
        let roles = [Role::Synthetic, Role::Refined, Role::RealSubsample];
        let labels: Vec<Role> = (0..100).map(|i| roles[i % 3]).collect();
        let points: Vec<f64> = (0..200).map(|_| rng.random_range(-50.0..50.0)).collect();
        let emb = Embedding {
            points: points.clone(),
            dims: 2,
            labels: labels.clone(),
            kl_history: vec![],
        };
        for (role, mean) in set_means(&emb, &roles).unwrap() {
            let idx: Vec<usize> = (0..100).filter(|&i| labels[i] == role).collect();
            for c in 0..2 {
                let brute = idx.iter().map(|&i| points[i * 2 + c]).sum::<f64>() / idx.len() as f64;
                assert!((mean[c] - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pca_keeps_the_dominant_direction() {
        let mut rng = crate::rng::seeded(2);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let t: f64 = rng.random_range(-5.0..5.0);
                vec![t, 2.0 * t + rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)]
            })
            .collect();
        let x = SampleMatrix::from_rows(&rows).unwrap();
        let p = pca(&x, 1).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let expect = (r[0] + 2.0 * r[1]) / 5f64.sqrt();
            let mean_shift = rows.iter().map(|r| (r[0] + 2.0 * r[1]) / 5f64.sqrt()).sum::<f64>() / 50.0;
            assert!((p.row(i)[0] - (expect - mean_shift)).abs() < 0.05);
        }
    }

    #[test]
    fn run_is_deterministic_and_validates() {
        let x = random_points(30, 4, 8);
        let labels = vec![Role::Synthetic; 30];
        let cfg = TsneConfig {
            perplexity: 5.0,
            iterations: 60,
            seed: 4,
            ..TsneConfig::default()
        };
        let a = tsne_run(&x, &labels, &cfg).unwrap();
        let b = tsne_run(&x, &labels, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kl_history.len(), 60);
        assert!(a.kl_history.iter().all(|&k| k >= 0.0));
        assert!(matches!(
            tsne_run(&random_points(3, 2, 0), &[Role::Real; 3], &cfg),
            Err(TsneError::TooFewPoints(3))
        ));
        let mut bad = x.data().to_vec();
        bad[5] = f64::NAN;
        let bad = SampleMatrix::new(30, 4, bad).unwrap();
        assert_eq!(tsne_run(&bad, &labels, &cfg), Err(TsneError::NonFinite));
    }
}
