//! Seeded Gaussian-mixture datasets and their latent encodings.

use serde::{Deserialize, Serialize};

use crate::denoiser::Label;
use crate::error::{Error, Result};
use crate::numerics::DenseArray;
use crate::rng::substream;
use crate::tokenizer::LinearTokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureDatasetConfig {
    pub classes: usize,
    pub data_dim: usize,
    pub n_per_class: usize,
    pub spread: f32,
    pub mean_radius: f32,
    pub seed: u64,
}

impl Default for MixtureDatasetConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            data_dim: 32,
            n_per_class: 2000,
            spread: 0.5,
            mean_radius: 4.0,
            seed: 0,
        }
    }
}

impl MixtureDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.data_dim < 2 || self.n_per_class == 0 {
            return Err(Error::Config(format!(
                "mixture needs classes >= 2, data_dim >= 2, n_per_class >= 1: {self:?}"
            )));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) || !(self.mean_radius >= 0.0) {
            return Err(Error::Config(format!(
                "mixture spread must be > 0 and radius >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Data points with class labels, plus the generating class means.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub x: DenseArray,
    pub labels: Vec<usize>,
    pub means: DenseArray,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Index of the class mean closest to `point`.
    pub fn nearest_class(&self, point: &[f32]) -> usize {
        nearest_row(&self.means, point)
    }
}

pub(crate) fn nearest_row(rows: &DenseArray, point: &[f32]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for k in 0..rows.rows() {
        let d: f64 = rows
            .row(k)
            .iter()
            .zip(point)
            .map(|(&a, &b)| f64::from(a - b).powi(2))
            .sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Class `k` has mean `radius · u_k` for a seeded random unit vector `u_k` and
/// isotropic spread. Rows are stored class by class.
pub fn make_mixture(cfg: &MixtureDatasetConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let (k, d) = (cfg.classes, cfg.data_dim);
    let mut rng = substream(cfg.seed, 0);
    let mut means = DenseArray::randn(&[k, d], &mut rng);
    for c in 0..k {
        let row = means.row_mut(c);
        let norm = row.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v = (f64::from(*v) / norm * f64::from(cfg.mean_radius)) as f32;
        }
    }

    let n = cfg.n_per_class;
    let mut x = Vec::with_capacity(k * n * d);
    let mut labels = Vec::with_capacity(k * n);
    for c in 0..k {
        let noise = DenseArray::randn(&[n, d], &mut substream(cfg.seed, 1 + c as u64));
        for i in 0..n {
            x.extend(means.row(c).iter().zip(noise.row(i)).map(|(m, e)| m + cfg.spread * e));
            labels.push(c);
        }
    }
    Ok(LabeledDataset {
        x: DenseArray::new(vec![k * n, d], x)?,
        labels,
        means,
        classes: k,
    })
}

/// Clean latents and their labels, the denoiser's training set.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDataset {
    pub z: DenseArray,
    pub labels: Vec<Label>,
    pub classes: usize,
}

impl LatentDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.z.cols()
    }
}

/// Returns `tok` rescaled so that the encoded dataset has unit pooled mean
/// square.
pub fn calibrate_tokenizer(data: &LabeledDataset, tok: &LinearTokenizer) -> Result<LinearTokenizer> {
    let z = tok.encode(&data.x)?;
    let factor = LinearTokenizer::calibrate_scale(&z)?;
    tok.with_scale(tok.scale() * factor)
}

/// Encodes every data point with `tok` as it is.
pub fn precompute_latents(data: &LabeledDataset, tok: &LinearTokenizer) -> Result<LatentDataset> {
    let z = tok.encode(&data.x)?;
    let labels = data
        .labels
        .iter()
        .map(|&y| Label::new(y, data.classes))
        .collect::<Result<_>>()?;
    Ok(LatentDataset {
        z,
        labels,
        classes: data.classes,
    })
}
