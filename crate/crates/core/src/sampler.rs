//! Iterative latent sampling with classifier-free guidance.
//!
//! Each step projects the current latent, denoises it (twice under guidance),
//! projects the guided prediction and re-injects a shrinking multiple of one
//! fixed noise draw. The decoder runs once, after the last step.

use serde::{Deserialize, Serialize};

use crate::denoiser::{cfg_combine, Label, LatentDenoiser};
use crate::error::{Error, Result};
use crate::numerics::DenseArray;
use crate::rng::{substream, SleRng};
use crate::sphere::{decay_factor, Projection};
use crate::tokenizer::LatentDecoder;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub sigma_max: f64,
    pub omega: f32,
    pub gamma: f64,
    /// Draw a new ε at every step instead of reusing the first one.
    #[serde(default)]
    pub fresh_eps_per_step: bool,
    pub seed: u64,
    #[serde(default)]
    pub projection: Projection,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            sigma_max: 24.0,
            omega: 1.0,
            gamma: 0.5,
            fresh_eps_per_step: false,
            seed: 0,
            projection: Projection::Sphere,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.sigma_max >= 0.0 && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!("sigma_max must be >= 0, got {}", self.sigma_max)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !self.omega.is_finite() {
            return Err(Error::Config(format!("omega must be finite, got {}", self.omega)));
        }
        Ok(())
    }

    /// Noise multiplier `σ_max · r_t` applied after step `t`.
    pub fn noise_scale(&self, t: usize) -> Result<f64> {
        Ok(self.sigma_max * decay_factor(t, self.steps, self.gamma)?)
    }

    fn guided(&self) -> bool {
        self.omega != 1.0
    }
}

/// What happened at one step of a traced run.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    /// Projected input to the denoiser.
    pub v: DenseArray,
    /// Projected guided prediction.
    pub v_next: DenseArray,
    pub noise_scale: f64,
}

/// The RNG stream for the `occurrence`-th sample of label `y` in a batch.
pub fn sample_stream(seed: u64, y: Label, occurrence: usize) -> SleRng {
    substream(seed, ((y.value() as u64) << 32) | occurrence as u64)
}

/// Draws one latent sample and decodes it. `rng` supplies the initial latent,
/// then ε, then (with `fresh_eps_per_step`) one ε per later step.
pub fn sample_one(
    y: Label,
    denoiser: &impl LatentDenoiser,
    decoder: &impl LatentDecoder,
    cfg: &SamplerConfig,
    rng: &mut SleRng,
) -> Result<DenseArray> {
    let rows = run(&[y], denoiser, decoder, cfg, &mut [rng], None)?;
    Ok(rows.flatten())
}

/// Samples one output row per label. Sample streams are keyed by label and by
/// how many times that label occurred earlier in the list, so reordering the
/// labels reorders the outputs and nothing else.
pub fn sample_batch(
    labels: &[Label],
    denoiser: &impl LatentDenoiser,
    decoder: &impl LatentDecoder,
    cfg: &SamplerConfig,
) -> Result<DenseArray> {
    let mut streams = batch_streams(labels, cfg.seed);
    let mut refs: Vec<&mut SleRng> = streams.iter_mut().collect();
    run(labels, denoiser, decoder, cfg, &mut refs, None)
}

/// [`sample_batch`] split across up to `threads` worker threads (0 means one
/// per available core). Rows are computed independently, so the result is
/// bit-identical to the single-threaded one.
pub fn sample_batch_parallel<D, C>(
    labels: &[Label],
    denoiser: &D,
    decoder: &C,
    cfg: &SamplerConfig,
    threads: usize,
) -> Result<DenseArray>
where
    D: LatentDenoiser + Sync,
    C: LatentDecoder + Sync,
{
    let workers = match threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(labels.len().max(1));
    if workers <= 1 {
        return sample_batch(labels, denoiser, decoder, cfg);
    }
    let mut streams = batch_streams(labels, cfg.seed);
    let chunk = labels.len().div_ceil(workers);
    let parts: Vec<Result<DenseArray>> = std::thread::scope(|scope| {
        let handles: Vec<_> = labels
            .chunks(chunk)
            .zip(streams.chunks_mut(chunk))
            .map(|(ys, rngs)| {
                scope.spawn(move || {
                    let mut refs: Vec<&mut SleRng> = rngs.iter_mut().collect();
                    run(ys, denoiser, decoder, cfg, &mut refs, None)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampling worker panicked"))
            .collect()
    });
    let mut values = Vec::with_capacity(labels.len() * decoder.data_dim());
    for part in parts {
        values.extend(part?.into_values());
    }
    DenseArray::new(vec![labels.len(), decoder.data_dim()], values)
}

/// [`sample_batch`], also returning every step's intermediate latents.
pub fn sample_batch_traced(
    labels: &[Label],
    denoiser: &impl LatentDenoiser,
    decoder: &impl LatentDecoder,
    cfg: &SamplerConfig,
) -> Result<(DenseArray, Vec<StepTrace>)> {
    let mut streams = batch_streams(labels, cfg.seed);
    let mut refs: Vec<&mut SleRng> = streams.iter_mut().collect();
    let mut trace = Vec::with_capacity(cfg.steps);
    let out = run(labels, denoiser, decoder, cfg, &mut refs, Some(&mut trace))?;
    Ok((out, trace))
}

fn batch_streams(labels: &[Label], seed: u64) -> Vec<SleRng> {
    let mut seen = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&y| {
            let k = seen.entry(y.value()).or_insert(0usize);
            let rng = sample_stream(seed, y, *k);
            *k += 1;
            rng
        })
        .collect()
}

fn draw_rows(rngs: &mut [&mut SleRng], dim: usize) -> Result<DenseArray> {
    let mut values = Vec::with_capacity(rngs.len() * dim);
    for rng in rngs.iter_mut() {
        values.extend(DenseArray::randn(&[dim], &mut **rng).into_values());
    }
    DenseArray::new(vec![rngs.len(), dim], values)
}

fn run(
    labels: &[Label],
    denoiser: &impl LatentDenoiser,
    decoder: &impl LatentDecoder,
    cfg: &SamplerConfig,
    rngs: &mut [&mut SleRng],
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<DenseArray> {
    cfg.validate()?;
    let arch = denoiser.arch();
    if decoder.latent_dim() != arch.latent_dim {
        return Err(Error::Contract(format!(
            "decoder takes {} latent values, denoiser produces {}",
            decoder.latent_dim(),
            arch.latent_dim
        )));
    }
    let null = arch.null_label();
    if cfg.guided() && labels.contains(&null) {
        return Err(Error::Contract(format!(
            "guidance ω = {} needs a class label, got the null label",
            cfg.omega
        )));
    }
    if labels.is_empty() {
        return Ok(DenseArray::zeros(&[0, decoder.data_dim()]));
    }
    let dim = arch.latent_dim;
    let nulls = vec![null; labels.len()];

    let mut z = draw_rows(rngs, dim)?;
    let mut eps = draw_rows(rngs, dim)?;
    for t in 0..cfg.steps {
        let at_step = |source: Error| Error::Sampling {
            step: t,
            source: Box::new(source),
        };
        if t > 0 && cfg.fresh_eps_per_step {
            eps = draw_rows(rngs, dim)?;
        }
        let v = cfg.projection.apply_rows(&z).map_err(at_step)?;
        let cond = denoiser.denoise_batch(&v, labels).map_err(at_step)?;
        let guided = if cfg.guided() {
            let uncond = denoiser.denoise_batch(&v, &nulls).map_err(at_step)?;
            cfg_combine(&uncond, &cond, cfg.omega)?
        } else {
            cond
        };
        let scale = cfg.noise_scale(t)?;
        let v_next = cfg.projection.apply_rows(&guided).map_err(at_step)?;
        z = if scale == 0.0 {
            v_next.clone()
        } else {
            let s = scale as f32;
            v_next.zip_map(&eps, |a, e| a + e * s)?
        };
        if !z.is_finite() {
            return Err(at_step(Error::Numeric("non-finite latent".into())));
        }
        if let Some(trace) = trace.as_deref_mut() {
            trace.push(StepTrace {
                v,
                v_next,
                noise_scale: scale,
            });
        }
    }
    decoder.decode(&z)
}

/// `per_class` labels for each of `classes` classes, class by class.
pub fn balanced_labels(classes: usize, per_class: usize) -> Result<Vec<Label>> {
    let mut out = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let y = Label::new(c, classes)?;
        out.extend(std::iter::repeat_n(y, per_class));
    }
    Ok(out)
}
