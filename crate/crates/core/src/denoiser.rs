//! Class-conditional denoiser operating on spherical latents.
//!
//! Desk-scale stand-in for a latent transformer: an input projection, a learned
//! class embedding added to the first hidden state, `B` residual SiLU blocks
//! and an output projection. There is deliberately no noise-level or timestep
//! input anywhere.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Graph, Var, RMS_EPS};
use crate::rng::seeded;
use crate::sphere::SphereLatent;

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Fixed architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserArch {
    pub latent_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Number of real classes `K`; label `K` is the null label.
    pub classes: usize,
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(Error::Config(format!("degenerate denoiser architecture {self:?}")));
        }
        Ok(())
    }

    pub fn null_label(&self) -> Label {
        Label(self.classes)
    }

    pub fn label(&self, value: usize) -> Result<Label> {
        Label::new(value, self.classes)
    }

    /// Shapes of every parameter array, in storage order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let (d, h) = (self.latent_dim, self.hidden);
        let mut s = vec![vec![d, h], vec![h], vec![self.classes + 1, h]];
        for _ in 0..self.blocks {
            s.extend([vec![h, h], vec![h], vec![h, h], vec![h]]);
        }
        s.extend([vec![h, d], vec![d]]);
        s
    }

    /// Names matching [`DenoiserArch::shapes`].
    pub fn names(&self) -> Vec<String> {
        let mut n: Vec<String> = ["input.weight", "input.bias", "class_embedding"]
            .map(String::from)
            .to_vec();
        for b in 0..self.blocks {
            for part in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"] {
                n.push(format!("block{b}.{part}"));
            }
        }
        n.extend(["output.weight".to_string(), "output.bias".to_string()]);
        n
    }

    pub fn embedding_index(&self) -> usize {
        2
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Class index in `0..=K`, where `K` is the null label used for unconditional
/// passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(usize);

impl Label {
    pub fn new(value: usize, classes: usize) -> Result<Self> {
        if value > classes {
            return Err(Error::Contract(format!(
                "label {value} outside 0..={classes}"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> usize {
        self.0
    }
}

/// Something that maps a batch of projected latents and labels to clean-latent
/// predictions. The sampler is written against this so it can be
/// instrumented.
pub trait LatentDenoiser {
    fn arch(&self) -> DenoiserArch;
    fn denoise_batch(&self, v: &DenseArray, labels: &[Label]) -> Result<DenseArray>;
}

/// Weights of the denoiser, in the order given by [`DenoiserArch::shapes`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParameters {
    arch: DenoiserArch,
    tensors: Vec<DenseArray>,
}

impl DenoiserParameters {
    /// Gaussian weights with std [`INIT_STD`], zero biases.
    pub fn init(arch: DenoiserArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seeded(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("constant std");
        let tensors = arch
            .shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let values = if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
                };
                DenseArray::new(shape, values)
            })
            .collect::<Result<_>>()?;
        Ok(Self { arch, tensors })
    }

    pub fn zeros(arch: DenoiserArch) -> Result<Self> {
        arch.validate()?;
        let tensors = arch.shapes().iter().map(|s| DenseArray::zeros(s)).collect();
        Ok(Self { arch, tensors })
    }

    pub fn from_tensors(arch: DenoiserArch, tensors: Vec<DenseArray>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter arrays, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(arch.names()) {
            if t.shape() != s.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {s:?}, got {:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("{name} holds non-finite values")));
            }
        }
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> DenoiserArch {
        self.arch
    }

    pub fn tensors(&self) -> &[DenseArray] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [DenseArray] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<DenseArray> {
        self.tensors
    }

    /// Places every array on `g` as a trainable leaf indexed by position.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.parameter(i, t.clone()))
            .collect()
    }

    /// Places every array on `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Records the forward pass for a batch `v` of `[n × D]` latents.
    pub fn forward(&self, g: &mut Graph, bound: &[Var], v: Var, labels: &[Label]) -> Result<Var> {
        let a = self.arch;
        if g.value(v).cols() != a.latent_dim {
            return Err(Error::Shape(format!(
                "denoiser expects {} latent values per row, got {}",
                a.latent_dim,
                g.value(v).cols()
            )));
        }
        if labels.len() != g.value(v).rows() {
            return Err(Error::Contract(format!(
                "{} labels for {} latents",
                labels.len(),
                g.value(v).rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| l.0 > a.classes) {
            return Err(Error::Contract(format!("label {} outside 0..={}", bad.0, a.classes)));
        }
        let idx: Vec<usize> = labels.iter().map(|l| l.0).collect();

        let h = g.matmul(v, bound[0])?;
        let h = g.add_row_bias(h, bound[1])?;
        let emb = g.gather_rows(bound[2], &idx)?;
        let mut h = g.add(h, emb)?;
        for b in 0..a.blocks {
            let base = 3 + 4 * b;
            let u = g.matmul(h, bound[base])?;
            let u = g.add_row_bias(u, bound[base + 1])?;
            let u = g.silu(u);
            let u = g.matmul(u, bound[base + 2])?;
            let u = g.add_row_bias(u, bound[base + 3])?;
            h = g.add(h, u)?;
        }
        let n = bound.len();
        let out = g.matmul(h, bound[n - 2])?;
        g.add_row_bias(out, bound[n - 1])
    }

    /// Single-latent prediction of the clean latent.
    pub fn denoise(&self, v: &SphereLatent, y: Label) -> Result<DenseArray> {
        let batch = v.as_array().clone().reshape(vec![1, v.dim()])?;
        Ok(self.denoise_batch(&batch, &[y])?.flatten())
    }

    /// Random perturbation of every array, used to build untrained baselines
    /// and robustness checks.
    pub fn jitter<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).expect("finite std");
        for t in &mut self.tensors {
            for v in t.values_mut() {
                *v += normal.sample(rng) as f32;
            }
        }
    }
}

impl LatentDenoiser for DenoiserParameters {
    fn arch(&self) -> DenoiserArch {
        self.arch
    }

    fn denoise_batch(&self, v: &DenseArray, labels: &[Label]) -> Result<DenseArray> {
        let mut g = Graph::new(RMS_EPS);
        let bound = self.bind_frozen(&mut g);
        let input = g.constant(v.clone());
        let out = self.forward(&mut g, &bound, input, labels)?;
        Ok(g.value(out).clone())
    }
}

/// Classifier-free guidance: `uncond + ω·(cond − uncond)`.
pub fn cfg_combine(uncond: &DenseArray, cond: &DenseArray, omega: f32) -> Result<DenseArray> {
    uncond.ensure_same_shape(cond, "guidance operands")?;
    if omega == 1.0 {
        return Ok(cond.clone());
    }
    if omega == 0.0 {
        return Ok(uncond.clone());
    }
    uncond.zip_map(cond, |u, c| u + omega * (c - u))
}
