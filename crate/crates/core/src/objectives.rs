//! Latent-space training losses.
//!
//! Each example is noised twice with the same `ε`: a lightly noised latent
//! `v_noisy` (level `σ_sub`) and a heavily noised one `v_NOISY` (level `σ`).
//! The reconstruction term pulls `G(v_noisy)` towards the clean latent, the
//! consistency term pulls `G(v_NOISY)` towards a stop-gradient copy of
//! `G(v_noisy)`. The optional latent-consistency term re-noises the model's
//! own prediction and asks for a matching second prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParameters, Label};
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Graph, Var, RMS_EPS};
use crate::rng::{seeded, SleRng};
use crate::sphere::{perturb_rows, sample_noise_pair, NoiseDistConfig, NoiseLevelPair, Projection, SphereLatent};

/// Loss weights and label-dropout probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub l1_recon: f32,
    pub l1_cons: f32,
    pub cos_recon: f32,
    pub cos_cons: f32,
    /// Zero disables the latent-consistency term.
    pub latent_cons: f32,
    pub cls_drop_prob: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1_recon: 50.0,
            l1_cons: 25.0,
            cos_recon: 1.0,
            cos_cons: 1.0,
            latent_cons: 0.0,
            cls_drop_prob: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.l1_recon, self.l1_cons, self.cos_recon, self.cos_cons, self.latent_cons];
        if ws.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.cls_drop_prob) {
            return Err(Error::Config(format!(
                "class drop probability {} outside [0, 1]",
                self.cls_drop_prob
            )));
        }
        Ok(())
    }

    fn uses_consistency(&self) -> bool {
        self.l1_cons > 0.0 || self.cos_cons > 0.0
    }
}

/// Unweighted loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon_l1: f64,
    pub recon_cos: f64,
    pub cons_l1: f64,
    pub cons_cos: f64,
    pub latent_cons: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        f64::from(w.l1_recon) * self.recon_l1
            + f64::from(w.cos_recon) * self.recon_cos
            + f64::from(w.l1_cons) * self.cons_l1
            + f64::from(w.cos_cons) * self.cons_cos
            + f64::from(w.latent_cons) * self.latent_cons
    }

    /// Component-wise mean of several breakdowns.
    pub fn mean(rows: &[LossBreakdown]) -> LossBreakdown {
        let n = rows.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for r in rows {
            m.recon_l1 += r.recon_l1 / n;
            m.recon_cos += r.recon_cos / n;
            m.cons_l1 += r.cons_l1 / n;
            m.cons_cos += r.cons_cos / n;
            m.latent_cons += r.latent_cons / n;
            m.total += r.total / n;
        }
        m
    }
}

/// `1 − cos(a, b)` for two flattened arrays.
pub fn cosine_loss(a: &DenseArray, b: &DenseArray) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("cosine of {} vs {} values", a.len(), b.len())));
    }
    let (mut dot, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Degenerate("cosine loss of a zero vector".into()));
    }
    Ok(1.0 - dot / (aa.sqrt() * bb.sqrt()))
}

fn l1_mean(a: &DenseArray, b: &DenseArray) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("l1 of {} vs {} values", a.len(), b.len())));
    }
    let s: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f64::from((x - y).abs()))
        .sum();
    Ok(s / a.len() as f64)
}

/// `w.l1_recon·mean|pred − z| + w.cos_recon·(1 − cos(pred, z))`.
pub fn recon_loss(pred: &DenseArray, z: &DenseArray, w: &LossWeights) -> Result<f64> {
    pred.ensure_same_shape(z, "reconstruction operands")
        .map_err(|e| Error::Contract(e.to_string()))?;
    let l1 = l1_mean(pred, z)?;
    if l1 == 0.0 {
        return Ok(0.0);
    }
    Ok(f64::from(w.l1_recon) * l1 + f64::from(w.cos_recon) * cosine_loss(pred, z)?)
}

/// Recorded loss terms for a pair of predictions.
#[derive(Clone, Copy, Debug)]
pub struct PairTerms {
    pub l1: Var,
    pub cos: Var,
    pub weighted: Var,
}

/// Consistency loss between `pred_big` and a stop-gradient copy of
/// `pred_small`; nothing flows back into `pred_small`.
pub fn consistency_loss(g: &mut Graph, pred_big: Var, pred_small: Var, w: &LossWeights) -> Result<PairTerms> {
    if g.value(pred_big).shape() != g.value(pred_small).shape() {
        return Err(Error::Contract(format!(
            "consistency operands {:?} vs {:?}",
            g.value(pred_big).shape(),
            g.value(pred_small).shape()
        )));
    }
    let target = g.stop_gradient(pred_small);
    pair_terms(g, pred_big, target, w.l1_cons, w.cos_cons)
}

/// Reconstruction loss recorded on the graph.
pub fn recon_loss_terms(g: &mut Graph, pred: Var, z: Var, w: &LossWeights) -> Result<PairTerms> {
    pair_terms(g, pred, z, w.l1_recon, w.cos_recon)
}

fn pair_terms(g: &mut Graph, a: Var, b: Var, wl1: f32, wcos: f32) -> Result<PairTerms> {
    let l1 = g.l1_mean(a, b)?;
    let cos = g.cosine_loss_rows(a, b)?;
    let weighted = g.weighted_sum(&[(wl1, l1), (wcos, cos)])?;
    Ok(PairTerms { l1, cos, weighted })
}

/// Everything random about one training step, drawn up front so that the loss
/// is a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct TrainingDraws {
    pub eps: DenseArray,
    pub pairs: Vec<NoiseLevelPair>,
    /// Conditioning labels after classifier-free dropout.
    pub labels: Vec<Label>,
    /// Fresh noise for the latent-consistency re-noising.
    pub latent_eps: Option<DenseArray>,
}

/// Options that shape the objective but are not loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveOptions {
    pub weights: LossWeights,
    pub projection: Projection,
    /// Compute the latent-consistency term even when its weight is zero.
    pub force_latent_path: bool,
}

impl ObjectiveOptions {
    pub fn new(weights: LossWeights) -> Self {
        Self {
            weights,
            projection: Projection::Sphere,
            force_latent_path: false,
        }
    }

    fn latent_path(&self) -> bool {
        self.weights.latent_cons > 0.0 || self.force_latent_path
    }
}

/// Draws `(σ, σ_sub)`, `ε` and the dropped labels for a batch.
///
/// The latent-consistency noise comes from its own stream, seeded by one
/// draw that is always taken, so switching that path on or off never shifts
/// the main stream.
pub fn draw_training_noise(
    latent_dim: usize,
    labels: &[Label],
    null: Label,
    noise: &NoiseDistConfig,
    opts: &ObjectiveOptions,
    rng: &mut SleRng,
) -> Result<TrainingDraws> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Contract("empty training batch".into()));
    }
    let mut pairs = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n * latent_dim);
    let mut dropped = Vec::with_capacity(n);
    for &y in labels {
        pairs.push(sample_noise_pair(noise, rng)?);
        eps.extend_from_slice(DenseArray::randn(&[latent_dim], rng).values());
        let drop = rng.random::<f64>() < opts.weights.cls_drop_prob;
        dropped.push(if drop { null } else { y });
    }
    let side_seed: u64 = rng.random();
    let latent_eps = if opts.latent_path() {
        Some(DenseArray::randn(&[n, latent_dim], &mut seeded(side_seed)))
    } else {
        None
    };
    Ok(TrainingDraws {
        eps: DenseArray::new(vec![n, latent_dim], eps)?,
        pairs,
        labels: dropped,
        latent_eps,
    })
}

/// Recorded objective: the scalar to differentiate and the breakdown.
#[derive(Debug)]
pub struct RecordedLoss {
    pub root: Var,
    pub breakdown: LossBreakdown,
}

/// Builds the full training objective for a batch of clean latents `z`.
pub fn training_losses(
    g: &mut Graph,
    params: &DenoiserParameters,
    bound: &[Var],
    z: &DenseArray,
    draws: &TrainingDraws,
    opts: &ObjectiveOptions,
) -> Result<RecordedLoss> {
    let n = z.rows();
    if n == 0 || draws.pairs.len() != n || draws.labels.len() != n {
        return Err(Error::Contract(format!(
            "batch of {n} latents with {} noise pairs and {} labels",
            draws.pairs.len(),
            draws.labels.len()
        )));
    }
    let w = &opts.weights;
    let sig: Vec<f32> = draws.pairs.iter().map(|p| p.sigma).collect();
    let sub: Vec<f32> = draws.pairs.iter().map(|p| p.sigma_sub).collect();
    let v_noisy = perturb_rows(z, &sub, &draws.eps, opts.projection)?;

    let z_var = g.constant(z.clone());
    let v_small = g.constant(v_noisy);
    let pred_small = params.forward(g, bound, v_small, &draws.labels)?;
    let recon = recon_loss_terms(g, pred_small, z_var, w)?;

    let mut breakdown = LossBreakdown {
        recon_l1: f64::from(g.scalar(recon.l1)),
        recon_cos: f64::from(g.scalar(recon.cos)),
        ..Default::default()
    };
    let mut terms = vec![(1.0, recon.weighted)];

    if w.uses_consistency() || opts.latent_path() {
        let v_big = g.constant(perturb_rows(z, &sig, &draws.eps, opts.projection)?);
        let pred_big = params.forward(g, bound, v_big, &draws.labels)?;
        let cons = consistency_loss(g, pred_big, pred_small, w)?;
        breakdown.cons_l1 = f64::from(g.scalar(cons.l1));
        breakdown.cons_cos = f64::from(g.scalar(cons.cos));
        terms.push((1.0, cons.weighted));

        if opts.latent_path() {
            let eps2 = draws
                .latent_eps
                .as_ref()
                .ok_or_else(|| Error::Contract("latent-consistency noise was not drawn".into()))?;
            let lat = latent_consistency_terms(g, params, bound, pred_big, &sig, eps2, &draws.labels, opts.projection)?;
            breakdown.latent_cons = f64::from(g.scalar(lat));
            terms.push((w.latent_cons, lat));
        }
    }

    let root = g.weighted_sum(&terms)?;
    breakdown.total = breakdown.weighted_total(w);
    Ok(RecordedLoss { root, breakdown })
}

#[allow(clippy::too_many_arguments)]
fn latent_consistency_terms(
    g: &mut Graph,
    params: &DenoiserParameters,
    bound: &[Var],
    z_refined: Var,
    sigmas: &[f32],
    eps: &DenseArray,
    labels: &[Label],
    projection: Projection,
) -> Result<Var> {
    let v_refined = project_var(g, z_refined, projection);
    let mut offset = eps.clone();
    for (i, &s) in sigmas.iter().enumerate() {
        for e in offset.row_mut(i) {
            *e *= s;
        }
    }
    let offset = g.constant(offset);
    let renoised = g.add(v_refined, offset)?;
    let v_renoisy = project_var(g, renoised, projection);
    let z_rerefined = params.forward(g, bound, v_renoisy, labels)?;
    g.cosine_loss_rows(z_rerefined, z_refined)
}

fn project_var(g: &mut Graph, x: Var, projection: Projection) -> Var {
    match projection {
        Projection::Sphere => g.rms_normalize_rows(x),
        Projection::Identity => x,
    }
}

/// Stand-alone latent-consistency loss for one latent, drawing fresh noise
/// from `rng`.
pub fn latent_consistency_loss(
    v_noisy_big: &SphereLatent,
    sigma: f32,
    params: &DenoiserParameters,
    label: Label,
    rng: &mut SleRng,
) -> Result<f64> {
    let d = v_noisy_big.dim();
    let eps = DenseArray::randn(&[1, d], rng);
    let mut g = Graph::new(RMS_EPS);
    let bound = params.bind_frozen(&mut g);
    let v = g.constant(v_noisy_big.as_array().clone().reshape(vec![1, d])?);
    let z_refined = params.forward(&mut g, &bound, v, &[label])?;
    let out = latent_consistency_terms(&mut g, params, &bound, z_refined, &[sigma], &eps, &[label], Projection::Sphere)?;
    Ok(f64::from(g.scalar(out)))
}

/// Evaluates the breakdown without keeping gradients; handy for monitoring.
pub fn evaluate_losses(
    params: &DenoiserParameters,
    z: &DenseArray,
    draws: &TrainingDraws,
    opts: &ObjectiveOptions,
) -> Result<LossBreakdown> {
    let mut g = Graph::new(RMS_EPS);
    let bound = params.bind_frozen(&mut g);
    Ok(training_losses(&mut g, params, &bound, z, draws, opts)?.breakdown)
}
