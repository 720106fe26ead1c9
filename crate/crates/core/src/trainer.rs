//! Deterministic training loop: seeded shuffling, objective, AdamW, EMA.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LatentDataset;
use crate::denoiser::{DenoiserArch, DenoiserParameters, Label};
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, ema_update, AdamWConfig, EmaState, Graph, OptimizerState, RMS_EPS};
use crate::objectives::{draw_training_noise, training_losses, LossBreakdown, LossWeights, ObjectiveOptions};
use crate::rng::{substream, SleRng};
use crate::sphere::{NoiseDistConfig, Projection};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub betas: [f32; 2],
    pub ema_decay: f32,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub projection: Projection,
    pub noise: NoiseDistConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 256,
            lr: 1e-4,
            weight_decay: 0.0,
            betas: [0.9, 0.95],
            ema_decay: 0.9995,
            seed: 0,
            checkpoint_every: 0,
            projection: Projection::Sphere,
            noise: NoiseDistConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be >= 0".into()));
        }
        self.noise.validate()?;
        self.weights.validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            weight_decay: self.weight_decay,
            eps: 1e-8,
        }
    }

    pub fn objective(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            projection: self.projection,
            ..ObjectiveOptions::new(self.weights)
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: DenoiserParameters,
    pub optimizer: OptimizerState,
    pub ema: EmaState,
    pub rng: SleRng,
    pub epoch: usize,
}

impl TrainState {
    /// Fresh parameters and moments; initialisation and the training stream
    /// are separate substreams of `cfg.seed`.
    pub fn initial(arch: DenoiserArch, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = DenoiserParameters::init(arch, cfg.seed)?;
        let optimizer = OptimizerState::new(cfg.optimizer(), params.tensors());
        let ema = EmaState::new(cfg.ema_decay, params.tensors())?;
        Ok(Self {
            params,
            optimizer,
            ema,
            rng: substream(cfg.seed, 1),
            epoch: 0,
        })
    }

    /// EMA weights as a parameter set.
    pub fn ema_params(&self) -> Result<DenoiserParameters> {
        DenoiserParameters::from_tensors(self.params.arch(), self.ema.shadow.clone())
    }
}

/// Per-epoch mean of the step breakdowns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub losses: LossBreakdown,
}

pub const METRICS_HEADER: &str = "epoch,recon_l1,recon_cos,cons_l1,cons_cos,latent_cons,total";

impl EpochRow {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, l.recon_l1, l.recon_cos, l.cons_l1, l.cons_cos, l.latent_cons, l.total
        )
    }
}

/// One forward/backward pass, one AdamW update and one EMA update.
pub fn train_step(
    state: &mut TrainState,
    z: &crate::numerics::DenseArray,
    labels: &[Label],
    opts: &ObjectiveOptions,
    noise: &NoiseDistConfig,
) -> Result<LossBreakdown> {
    let arch = state.params.arch();
    let draws = draw_training_noise(arch.latent_dim, labels, arch.null_label(), noise, opts, &mut state.rng)?;
    let mut g = Graph::new(RMS_EPS);
    let bound = state.params.bind(&mut g);
    let rec = training_losses(&mut g, &state.params, &bound, z, &draws, opts)?;
    let step = state.optimizer.step + 1;
    if !rec.breakdown.total.is_finite() {
        return Err(Error::Divergence {
            step,
            loss: rec.breakdown.total,
        });
    }
    let grads = g.backward(rec.root)?.into_map();
    let grad_refs: Vec<_> = (0..bound.len())
        .map(|i| grads.get(&i).ok_or_else(|| Error::Contract(format!("no gradient for parameter {i}"))))
        .collect::<Result<_>>()?;
    adamw_step(state.params.tensors_mut(), &grad_refs, &mut state.optimizer)?;
    if state.params.tensors().iter().any(|t| !t.is_finite()) {
        return Err(Error::Divergence {
            step,
            loss: f64::NAN,
        });
    }
    ema_update(&mut state.ema, state.params.tensors())?;
    Ok(rec.breakdown)
}

/// Runs one epoch over a seeded permutation of the dataset.
pub fn train_epoch(state: &mut TrainState, data: &LatentDataset, cfg: &TrainConfig) -> Result<EpochRow> {
    if data.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let opts = cfg.objective();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);
    let mut rows = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let z = data.z.select_rows(chunk)?;
        let labels: Vec<Label> = chunk.iter().map(|&i| data.labels[i]).collect();
        rows.push(train_step(state, &z, &labels, &opts, &cfg.noise)?);
    }
    state.epoch += 1;
    Ok(EpochRow {
        epoch: state.epoch,
        losses: LossBreakdown::mean(&rows),
    })
}

/// Trains from `state` until `cfg.epochs` epochs have run in total, calling
/// `on_epoch` after each one (for logging and checkpointing).
pub fn train_from(
    state: &mut TrainState,
    data: &LatentDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState, &EpochRow) -> Result<()>,
) -> Result<Vec<EpochRow>> {
    cfg.validate()?;
    if data.classes != state.params.arch().classes {
        return Err(Error::Contract(format!(
            "dataset has {} classes, denoiser expects {}",
            data.classes,
            state.params.arch().classes
        )));
    }
    if data.latent_dim() != state.params.arch().latent_dim {
        return Err(Error::Contract(format!(
            "dataset latents have {} values, denoiser expects {}",
            data.latent_dim(),
            state.params.arch().latent_dim
        )));
    }
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let row = train_epoch(state, data, cfg)?;
        on_epoch(state, &row)?;
        log.push(row);
    }
    Ok(log)
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EpochRow>,
}

/// Initialises and trains a denoiser for `cfg.epochs` epochs.
pub fn train(data: &LatentDataset, arch: DenoiserArch, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut state = TrainState::initial(arch, cfg)?;
    let log = train_from(&mut state, data, cfg, |_, _| Ok(()))?;
    Ok(TrainOutcome { state, log })
}
