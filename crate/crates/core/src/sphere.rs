//! Spherification, noise injection, the `(σ, σ_sub)` samplers and the
//! sampling-time noise decay.
//!
//! A latent is *spherified* by flattening it and dividing by its root mean
//! square, which places it on the hypersphere of L2 radius `sqrt(D)`. Noise is
//! always added before re-projecting, so a perturbed latent stays on the
//! sphere.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mean_square, DenseArray, RMS_EPS};

/// Inputs whose mean square falls below this are refused by [`spherify`].
pub const DEGENERATE_MEAN_SQUARE: f64 = 1e-12;

/// How latents are mapped before entering the denoiser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// RMS normalisation onto the hypersphere.
    #[default]
    Sphere,
    /// No projection at all; used only to ablate the sphere.
    Identity,
}

impl Projection {
    /// Projects every row of `z` independently.
    pub fn apply_rows(self, z: &DenseArray) -> Result<DenseArray> {
        match self {
            Projection::Sphere => spherify_rows(z),
            Projection::Identity => Ok(z.clone()),
        }
    }
}

/// A flattened latent with unit mean square.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereLatent(DenseArray);

impl SphereLatent {
    pub fn as_array(&self) -> &DenseArray {
        &self.0
    }

    pub fn into_array(self) -> DenseArray {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Flattens `z` and RMS-normalises it.
pub fn spherify(z: &DenseArray) -> Result<SphereLatent> {
    let mut flat = z.clone().flatten();
    project_slice(flat.values_mut(), 0)?;
    Ok(SphereLatent(flat))
}

/// [`spherify`] applied to each row of a batch.
pub fn spherify_rows(z: &DenseArray) -> Result<DenseArray> {
    let mut out = z.clone();
    for i in 0..out.rows() {
        project_slice(out.row_mut(i), i)?;
    }
    Ok(out)
}

fn project_slice(row: &mut [f32], index: usize) -> Result<()> {
    let ms = mean_square(row);
    if !(ms >= DEGENERATE_MEAN_SQUARE) {
        return Err(Error::Degenerate(format!(
            "cannot spherify row {index}: mean square {ms:e}"
        )));
    }
    let inv = 1.0 / (ms + f64::from(RMS_EPS)).sqrt();
    for v in row.iter_mut() {
        *v = (f64::from(*v) * inv) as f32;
    }
    Ok(())
}

/// `spherify(v + σ·ε)`.
pub fn perturb(v: &SphereLatent, sigma: f32, noise: &DenseArray) -> Result<SphereLatent> {
    if noise.len() != v.dim() {
        return Err(Error::Contract(format!(
            "noise has {} entries, latent has {}",
            noise.len(),
            v.dim()
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Contract(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut out = v.0.clone();
    add_scaled(out.values_mut(), sigma, noise.values());
    project_slice(out.values_mut(), 0)?;
    Ok(SphereLatent(out))
}

/// Row-wise `project(z_i + σ_i·ε_i)`.
pub fn perturb_rows(
    z: &DenseArray,
    sigmas: &[f32],
    noise: &DenseArray,
    projection: Projection,
) -> Result<DenseArray> {
    z.ensure_same_shape(noise, "perturbation noise")?;
    if sigmas.len() != z.rows() {
        return Err(Error::Contract(format!(
            "{} noise levels for {} rows",
            sigmas.len(),
            z.rows()
        )));
    }
    let mut out = z.clone();
    for (i, &s) in sigmas.iter().enumerate() {
        add_scaled(out.row_mut(i), s, noise.row(i));
    }
    projection.apply_rows(&out)
}

fn add_scaled(dst: &mut [f32], s: f32, src: &[f32]) {
    for (d, &e) in dst.iter_mut().zip(src) {
        *d += s * e;
    }
}

/// Training noise magnitudes, `sigma ≥ sigma_sub ≥ 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevelPair {
    pub sigma: f32,
    pub sigma_sub: f32,
}

impl NoiseLevelPair {
    pub fn new(sigma: f32, sigma_sub: f32) -> Result<Self> {
        if !(sigma_sub >= 0.0 && sigma >= sigma_sub) {
            return Err(Error::Contract(format!(
                "noise pair needs sigma >= sigma_sub >= 0, got ({sigma}, {sigma_sub})"
            )));
        }
        Ok(Self { sigma, sigma_sub })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// `σ ~ U(0, σ_max)`, `σ_sub ~ U(0, σ/2)`.
    UniformBaseline,
    /// Two logit-normal draws mapped onto `sigma_range`, larger one is `σ`.
    LogitNormal,
}

/// Parameters of the training-time `(σ, σ_sub)` sampler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseDistConfig {
    pub kind: NoiseKind,
    pub mu: f64,
    pub s: f64,
    pub sigma_range: [f64; 2],
    pub mix_range: [f64; 2],
    pub mix_probability: f64,
    pub sigma_max: f64,
}

impl Default for NoiseDistConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::LogitNormal,
            mu: 0.4,
            s: 1.0,
            sigma_range: [0.0, 85.0],
            mix_range: [85.0, 89.0],
            mix_probability: 0.2,
            sigma_max: 85.0,
        }
    }
}

impl NoiseDistConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.sigma_range;
        let [lo2, hi2] = self.mix_range;
        let ordered = 0.0 <= lo && lo <= hi && hi <= lo2 && lo2 <= hi2;
        if !ordered || !hi2.is_finite() {
            return Err(Error::Config(format!(
                "noise ranges must satisfy 0 <= lo <= hi <= mix_lo <= mix_hi, got {:?} and {:?}",
                self.sigma_range, self.mix_range
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_probability) {
            return Err(Error::Config(format!(
                "mix probability {} outside [0, 1]",
                self.mix_probability
            )));
        }
        if !(self.s > 0.0 && self.s.is_finite() && self.mu.is_finite()) {
            return Err(Error::Config(format!(
                "logit-normal needs finite mu and s > 0, got ({}, {})",
                self.mu, self.s
            )));
        }
        if self.kind == NoiseKind::UniformBaseline && !(self.sigma_max >= 0.0 && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!("sigma_max must be >= 0, got {}", self.sigma_max)));
        }
        Ok(())
    }

    /// Upper end of every σ this sampler can produce.
    pub fn support_max(&self) -> f64 {
        match self.kind {
            NoiseKind::UniformBaseline => self.sigma_max,
            NoiseKind::LogitNormal if self.mix_probability > 0.0 => self.mix_range[1],
            NoiseKind::LogitNormal => self.sigma_range[1],
        }
    }
}

/// `logistic(z)` with `z ~ N(mu, s²)`; lies in `(0, 1)`.
pub fn sample_logit_normal_unit<R: Rng + ?Sized>(mu: f64, s: f64, rng: &mut R) -> f64 {
    let z = Normal::new(mu, s).expect("s validated").sample(rng);
    1.0 / (1.0 + (-z).exp())
}

/// Draws one `(σ, σ_sub)` pair.
pub fn sample_noise_pair<R: Rng + ?Sized>(cfg: &NoiseDistConfig, rng: &mut R) -> Result<NoiseLevelPair> {
    cfg.validate()?;
    let (a, b) = match cfg.kind {
        NoiseKind::UniformBaseline => {
            let sigma = rng.random::<f64>() * cfg.sigma_max;
            let sub = rng.random::<f64>() * 0.5 * sigma;
            (sigma, sub)
        }
        NoiseKind::LogitNormal => {
            let [lo, hi] = cfg.sigma_range;
            let u1 = sample_logit_normal_unit(cfg.mu, cfg.s, rng);
            let u2 = sample_logit_normal_unit(cfg.mu, cfg.s, rng);
            let mut first = lo + u1 * (hi - lo);
            let second = lo + u2 * (hi - lo);
            if rng.random::<f64>() < cfg.mix_probability {
                let [lo2, hi2] = cfg.mix_range;
                first = lo2 + rng.random::<f64>() * (hi2 - lo2);
            }
            (first, second)
        }
    };
    let (sigma, sub) = if a >= b { (a, b) } else { (b, a) };
    NoiseLevelPair::new(sigma as f32, sub as f32)
}

/// Re-noising multiplier `(1 − (t+1)/T)^γ` for step `t` of `T`.
pub fn decay_factor(t: usize, steps: usize, gamma: f64) -> Result<f64> {
    if t >= steps {
        return Err(Error::Contract(format!("step {t} out of {steps}")));
    }
    if !(gamma > 0.0) {
        return Err(Error::Contract(format!("gamma must be > 0, got {gamma}")));
    }
    Ok((1.0 - (t + 1) as f64 / steps as f64).powf(gamma))
}
