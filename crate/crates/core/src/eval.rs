//! Sample-quality metrics computed directly in data space.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::{nearest_row, LabeledDataset};
use crate::denoiser::LatentDenoiser;
use crate::error::{Error, Result};
use crate::numerics::DenseArray;
use crate::sampler::{balanced_labels, sample_batch_parallel, SamplerConfig};
use crate::tokenizer::LatentDecoder;

/// Mean and covariance of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSummary {
    /// Sample mean and unbiased covariance of the rows of `x`.
    pub fn fit(x: &DenseArray) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if n < 2 {
            return Err(Error::Contract(format!("need at least 2 samples for a covariance, got {n}")));
        }
        let m = DMatrix::from_row_iterator(n, d, x.values().iter().map(|&v| f64::from(v)));
        let mean = m.row_mean().transpose();
        let mut centered = m;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Rebuilds a summary from stored arrays (mean `[d]`, covariance `[d, d]`).
    pub fn from_arrays(mean: &DenseArray, cov: &DenseArray) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != [d, d] {
            return Err(Error::Shape(format!(
                "covariance {:?} does not match mean of {d}",
                cov.shape()
            )));
        }
        Ok(Self {
            mean: DVector::from_iterator(d, mean.values().iter().map(|&v| f64::from(v))),
            cov: DMatrix::from_row_iterator(d, d, cov.values().iter().map(|&v| f64::from(v))),
        })
    }

    pub fn to_arrays(&self) -> Result<(DenseArray, DenseArray)> {
        let d = self.dim();
        let mean = DenseArray::vector(self.mean.iter().map(|&v| v as f32).collect())?;
        let cov = DenseArray::new(
            vec![d, d],
            self.cov.transpose().iter().map(|&v| v as f32).collect(),
        )?;
        Ok((mean, cov))
    }
}

/// Eigenvalues below this (scaled by the largest magnitude) mean the matrix
/// was never positive semidefinite.
const NEGATIVE_EIGEN_TOLERANCE: f64 = 1e-8;

fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(bad) = eig.eigenvalues.iter().find(|&&l| l < -NEGATIVE_EIGEN_TOLERANCE * scale) {
        return Err(Error::Numeric(format!("{what} has eigenvalue {bad:e}")));
    }
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, what)?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^½)`, with the trace of the square root
/// taken from the symmetric product `Σa^½ Σb Σa^½`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov, "first covariance")?;
    psd_eigen(&b.cov, "second covariance")?;
    let inner = &ra * &b.cov * &ra;
    let cross: f64 = psd_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    // rounding can leave identical distributions a hair below zero
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x - y).powi(2)).sum()
}

/// Unbiased squared maximum mean discrepancy under the Gaussian kernel
/// `exp(−‖x − y‖² / 2h²)`.
pub fn mmd_rbf(a: &DenseArray, b: &DenseArray, bandwidth: f64) -> Result<f64> {
    let (n, m) = (a.rows(), b.rows());
    if n < 2 || m < 2 {
        return Err(Error::Contract(format!("MMD needs at least 2 samples per set, got {n} and {m}")));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("dimensions {} and {}", a.cols(), b.cols())));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Contract(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let within = |x: &DenseArray| {
        let k = x.rows();
        let mut s = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                s += (-gamma * sq_dist(x.row(i), x.row(j))).exp();
            }
        }
        2.0 * s / (k as f64 * (k as f64 - 1.0))
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += (-gamma * sq_dist(a.row(i), b.row(j))).exp();
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross / (n as f64 * m as f64))
}

/// Evenly spaced rows, at most `limit` of them.
pub fn stride_subsample(x: &DenseArray, limit: usize) -> Result<DenseArray> {
    let n = x.rows();
    if n <= limit {
        return Ok(x.clone());
    }
    let idx: Vec<usize> = (0..limit).map(|i| i * n / limit).collect();
    x.select_rows(&idx)
}

const BANDWIDTH_POINTS: usize = 1000;

/// Median pairwise distance over the pooled sample (evenly thinned to a
/// thousand points).
pub fn median_bandwidth(a: &DenseArray, b: &DenseArray) -> Result<f64> {
    let pooled = DenseArray::new(
        vec![a.rows() + b.rows(), a.cols()],
        a.values().iter().chain(b.values()).copied().collect(),
    )?;
    let p = stride_subsample(&pooled, BANDWIDTH_POINTS)?;
    let mut d = Vec::with_capacity(p.rows() * p.rows() / 2);
    for i in 0..p.rows() {
        for j in (i + 1)..p.rows() {
            d.push(sq_dist(p.row(i), p.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return Err(Error::Contract("bandwidth needs at least two points".into()));
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if med > 0.0 {
        Ok(med)
    } else {
        Err(Error::Degenerate("all points coincide".into()))
    }
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut worst) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        worst = worst.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    worst
}

/// Fraction of samples whose nearest class mean is their conditioning label.
pub fn class_accuracy(samples: &DenseArray, labels: &[usize], means: &DenseArray) -> Result<f64> {
    if samples.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "{} samples for {} labels",
            samples.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("no samples to classify".into()));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| nearest_row(means, samples.row(i)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Everything an evaluation compares against.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSet {
    pub stats: GaussianSummary,
    /// Evenly thinned training points for the kernel metric.
    pub points: DenseArray,
    pub means: DenseArray,
    pub classes: usize,
}

/// Points kept for the kernel metric.
pub const REFERENCE_POINTS: usize = 2000;

impl ReferenceSet {
    pub fn from_dataset(data: &LabeledDataset) -> Result<Self> {
        Ok(Self {
            stats: GaussianSummary::fit(&data.x)?,
            points: stride_subsample(&data.x, REFERENCE_POINTS)?,
            means: data.means.clone(),
            classes: data.classes,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub toy_fid: f64,
    pub mmd2: f64,
    pub class_acc: f64,
}

/// Scores an arbitrary labelled sample against the reference.
pub fn score(samples: &DenseArray, labels: &[usize], reference: &ReferenceSet) -> Result<Metrics> {
    let stats = GaussianSummary::fit(samples)?;
    let toy_fid = frechet_distance(&stats, &reference.stats)?;
    let thinned = stride_subsample(samples, REFERENCE_POINTS)?;
    let h = median_bandwidth(&thinned, &reference.points)?;
    let mmd2 = mmd_rbf(&thinned, &reference.points, h)?;
    let class_acc = class_accuracy(samples, labels, &reference.means)?;
    Ok(Metrics {
        toy_fid,
        mmd2,
        class_acc,
    })
}

/// Draws `n_samples / K` samples per class on up to `threads` threads (0 for
/// all cores) and scores them.
pub fn evaluate(
    denoiser: &(impl LatentDenoiser + Sync),
    decoder: &(impl LatentDecoder + Sync),
    cfg: &SamplerConfig,
    reference: &ReferenceSet,
    n_samples: usize,
    threads: usize,
) -> Result<Metrics> {
    let k = reference.classes;
    if n_samples == 0 || n_samples % k != 0 {
        return Err(Error::Contract(format!(
            "n_samples = {n_samples} must be a positive multiple of the {k} classes"
        )));
    }
    let labels = balanced_labels(k, n_samples / k)?;
    let samples = sample_batch_parallel(&labels, denoiser, decoder, cfg, threads)?;
    let plain: Vec<usize> = labels.iter().map(|y| y.value()).collect();
    score(&samples, &plain, reference)
}

/// One row of `eval.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub run_id: String,
    pub steps: usize,
    pub omega: f32,
    pub gamma: f64,
    pub metrics: Metrics,
}

pub const EVAL_HEADER: &str = "run_id,steps,omega,gamma,toy_fid,mmd2,class_acc";

impl MetricRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.run_id,
            self.steps,
            self.omega,
            self.gamma,
            self.metrics.toy_fid,
            self.metrics.mmd2,
            self.metrics.class_acc
        )
    }
}
