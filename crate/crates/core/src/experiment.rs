//! End-to-end pipeline (data → latents → training → evaluation) and the
//! controlled ablation runs built on it.

use crate::config::{RunConfig, SampleWeights};
use crate::data::{calibrate_tokenizer, make_mixture, precompute_latents, LabeledDataset, LatentDataset};
use crate::denoiser::DenoiserParameters;
use crate::error::Result;
use crate::eval::{evaluate, Metrics, ReferenceSet};
use crate::sampler::SamplerConfig;
use crate::sphere::{NoiseKind, Projection};
use crate::tokenizer::LinearTokenizer;
use crate::trainer::{train_from, EpochRow, TrainConfig, TrainState};

/// Dataset, calibrated tokenizer, encoded latents and reference statistics.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: LabeledDataset,
    pub tokenizer: LinearTokenizer,
    pub latents: LatentDataset,
    pub reference: ReferenceSet,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let dataset = make_mixture(&cfg.data)?;
    let raw = LinearTokenizer::new(cfg.data.data_dim, cfg.tokenizer.latent_dim, cfg.tokenizer.seed)?;
    let tokenizer = calibrate_tokenizer(&dataset, &raw)?;
    let latents = precompute_latents(&dataset, &tokenizer)?;
    let reference = ReferenceSet::from_dataset(&dataset)?;
    Ok(Prepared {
        dataset,
        tokenizer,
        latents,
        reference,
    })
}

/// Trains with `train` on the prepared latents, starting from scratch.
pub fn train_with(
    cfg: &RunConfig,
    train: &TrainConfig,
    prepared: &Prepared,
    on_epoch: impl FnMut(&TrainState, &EpochRow) -> Result<()>,
) -> Result<(TrainState, Vec<EpochRow>)> {
    let mut state = TrainState::initial(cfg.arch(), train)?;
    let log = train_from(&mut state, &prepared.latents, train, on_epoch)?;
    Ok((state, log))
}

/// The weights `cfg.model.sample_weights` selects.
pub fn sampling_params(cfg: &RunConfig, state: &TrainState) -> Result<DenoiserParameters> {
    match cfg.model.sample_weights {
        SampleWeights::Ema => state.ema_params(),
        SampleWeights::Raw => Ok(state.params.clone()),
    }
}

pub fn evaluate_params(
    params: &DenoiserParameters,
    prepared: &Prepared,
    sampler: &SamplerConfig,
    n_samples: usize,
    threads: usize,
) -> Result<Metrics> {
    evaluate(params, &prepared.tokenizer, sampler, &prepared.reference, n_samples, threads)
}

/// One controlled variant: everything but the ablated factor matches the
/// base configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub axis: &'static str,
    pub name: String,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

/// Noise-distribution, loss, projection and step-count variants of `cfg`.
pub fn ablation_arms(cfg: &RunConfig) -> Vec<Arm> {
    let base = Arm {
        axis: "",
        name: String::new(),
        train: cfg.train,
        sampler: cfg.sample,
    };
    let arm = |axis: &'static str, name: &str, f: &dyn Fn(&mut Arm)| {
        let mut a = Arm {
            axis,
            name: name.into(),
            ..base.clone()
        };
        f(&mut a);
        a
    };
    let mut arms = vec![
        arm("noise", "uniform_baseline", &|a| {
            a.train.noise.kind = NoiseKind::UniformBaseline;
            a.train.noise.sigma_max = a.train.noise.sigma_range[1];
        }),
        arm("noise", "logit_normal(-0.4,1)", &|a| {
            a.train.noise.kind = NoiseKind::LogitNormal;
            a.train.noise.mu = -0.4;
            a.train.noise.s = 1.0;
        }),
        arm("noise", "logit_normal(+0.4,1)", &|a| {
            a.train.noise.kind = NoiseKind::LogitNormal;
            a.train.noise.mu = 0.4;
            a.train.noise.s = 1.0;
        }),
        arm("losses", "R", &|a| {
            a.train.weights.l1_cons = 0.0;
            a.train.weights.cos_cons = 0.0;
            a.train.weights.latent_cons = 0.0;
        }),
        arm("losses", "R+C", &|a| {
            a.train.weights.latent_cons = 0.0;
        }),
        arm("losses", "R+C+L", &|a| {
            if a.train.weights.latent_cons == 0.0 {
                a.train.weights.latent_cons = 1.0;
            }
        }),
        arm("spherify", "on", &|a| {
            a.train.projection = Projection::Sphere;
            a.sampler.projection = Projection::Sphere;
        }),
        arm("spherify", "off", &|a| {
            a.train.projection = Projection::Identity;
            a.sampler.projection = Projection::Identity;
        }),
    ];
    for &t in &cfg.eval.steps {
        arms.push(arm("steps", &t.to_string(), &|a| a.sampler.steps = t));
    }
    arms
}

/// Toy-FID and friends for one arm and one training seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: &'static str,
    pub arm: String,
    pub seed: u64,
    pub metrics: Metrics,
}

pub const ABLATE_HEADER: &str = "axis,arm,seed,toy_fid,mmd2,class_acc";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.axis, self.arm, self.seed, self.metrics.toy_fid, self.metrics.mmd2, self.metrics.class_acc
        )
    }
}

/// Trains every distinct arm of [`ablation_arms`] once per seed in
/// `cfg.ablate.seeds` and evaluates each arm. `progress` is told about every
/// finished row; `threads` is passed on to sampling.
pub fn run_ablation(
    cfg: &RunConfig,
    threads: usize,
    progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let prepared = prepare(cfg)?;
    run_arms(cfg, &prepared, &ablation_arms(cfg), &cfg.ablate.seeds, threads, progress)
}

/// Evaluates `arms` for each training seed. Arms whose training settings
/// coincide for a seed share one trained model.
pub fn run_arms(
    cfg: &RunConfig,
    prepared: &Prepared,
    arms: &[Arm],
    seeds: &[u64],
    threads: usize,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut trained: Vec<(TrainConfig, DenoiserParameters)> = Vec::new();
        for arm in arms {
            let train = TrainConfig { seed, ..arm.train };
            let params = match trained.iter().find(|(t, _)| *t == train) {
                Some((_, p)) => p.clone(),
                None => {
                    let (state, _) = train_with(cfg, &train, prepared, |_, _| Ok(()))?;
                    let p = sampling_params(cfg, &state)?;
                    trained.push((train, p.clone()));
                    p
                }
            };
            let metrics = evaluate_params(&params, prepared, &arm.sampler, cfg.eval.n_samples, threads)?;
            let row = AblationRow {
                axis: arm.axis,
                arm: arm.name.clone(),
                seed,
                metrics,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}
