//! Fixed linear encoder/decoder between data space and latent space.
//!
//! The encoder is a matrix with orthonormal rows, so the decoder is simply its
//! transpose. Nothing in training ever writes to a tokenizer.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{matmul, DenseArray};
use crate::rng::seeded;

/// Anything that can turn latents back into data; the sampler only needs this.
pub trait LatentDecoder {
    fn latent_dim(&self) -> usize;
    fn data_dim(&self) -> usize;
    /// Decodes each row of `z`.
    fn decode(&self, z: &DenseArray) -> Result<DenseArray>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearTokenizer {
    weights: DenseArray,
    transposed: DenseArray,
    scale: f32,
}

impl LinearTokenizer {
    /// Orthonormal rows from the QR factorisation of a seeded Gaussian matrix.
    pub fn new(data_dim: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 || latent_dim > data_dim {
            return Err(Error::Config(format!(
                "latent dim {latent_dim} must be in 1..={data_dim}"
            )));
        }
        let mut rng = seeded(seed);
        let g = DMatrix::<f64>::from_fn(data_dim, latent_dim, |_, _| rng.sample(StandardNormal));
        let q = g.qr().q();
        let mut rows = Vec::with_capacity(latent_dim * data_dim);
        for r in 0..latent_dim {
            for c in 0..data_dim {
                rows.push(q[(c, r)] as f32);
            }
        }
        Self::from_weights(DenseArray::new(vec![latent_dim, data_dim], rows)?, 1.0)
    }

    pub fn identity(dim: usize) -> Result<Self> {
        let mut w = DenseArray::zeros(&[dim, dim]);
        for i in 0..dim {
            w.values_mut()[i * dim + i] = 1.0;
        }
        Self::from_weights(w, 1.0)
    }

    /// Rebuilds a tokenizer from stored weights; rows must be orthonormal.
    pub fn from_weights(weights: DenseArray, scale: f32) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "tokenizer weights must be 2-D, got {:?}",
                weights.shape()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("tokenizer scale must be > 0, got {scale}")));
        }
        let (l, d) = (weights.shape()[0], weights.shape()[1]);
        let mut t = vec![0.0f32; l * d];
        for r in 0..l {
            for c in 0..d {
                t[c * l + r] = weights.values()[r * d + c];
            }
        }
        let transposed = DenseArray::new(vec![d, l], t)?;
        let tok = Self {
            weights,
            transposed,
            scale,
        };
        let err = tok.orthonormality_error();
        if err > 1e-4 {
            return Err(Error::Config(format!(
                "tokenizer rows are not orthonormal (max |W·Wᵀ − I| = {err:e})"
            )));
        }
        Ok(tok)
    }

    pub fn with_scale(&self, scale: f32) -> Result<Self> {
        Self::from_weights(self.weights.clone(), scale)
    }

    pub fn weights(&self) -> &DenseArray {
        &self.weights
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    /// Largest entry of `|W·Wᵀ − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let (l, d) = (self.weights.shape()[0], self.weights.shape()[1]);
        let w = self.weights.values();
        let mut worst = 0.0f64;
        for i in 0..l {
            for j in 0..l {
                let dot: f64 = (0..d)
                    .map(|c| f64::from(w[i * d + c]) * f64::from(w[j * d + c]))
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    /// `z = scale · W·x` for each row of `x`.
    pub fn encode(&self, x: &DenseArray) -> Result<DenseArray> {
        let (l, d) = (self.latent_dim(), self.data_dim());
        if x.cols() != d {
            return Err(Error::Contract(format!(
                "encode expects {d} data values per row, got {}",
                x.cols()
            )));
        }
        let n = x.rows();
        let mut z = matmul(x.values(), self.transposed.values(), n, d, l);
        for v in &mut z {
            *v *= self.scale;
        }
        let shape = if x.shape().len() == 1 { vec![l] } else { vec![n, l] };
        DenseArray::new(shape, z)
    }

    /// Scale factor that brings the pooled mean square of `latents` to one.
    pub fn calibrate_scale(latents: &DenseArray) -> Result<f32> {
        if latents.is_empty() {
            return Err(Error::Contract("cannot calibrate on an empty sample".into()));
        }
        let ms = latents.mean_square();
        if !(ms > 0.0) {
            return Err(Error::Degenerate("calibration latents are all zero".into()));
        }
        Ok((1.0 / ms.sqrt()) as f32)
    }
}

impl LatentDecoder for LinearTokenizer {
    fn latent_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    fn data_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// `x̂ = Wᵀ·(z / scale)` for each row of `z`.
    fn decode(&self, z: &DenseArray) -> Result<DenseArray> {
        let (l, d) = (self.latent_dim(), self.data_dim());
        if z.cols() != l {
            return Err(Error::Contract(format!(
                "decode expects {l} latent values per row, got {}",
                z.cols()
            )));
        }
        let n = z.rows();
        let unscaled: Vec<f32> = z.values().iter().map(|v| v / self.scale).collect();
        let x = matmul(&unscaled, self.weights.values(), n, l, d);
        let shape = if z.shape().len() == 1 { vec![d] } else { vec![n, d] };
        DenseArray::new(shape, x)
    }
}
