//! Trains the bundled reference configuration and prints sample quality for
//! the trained and an untrained denoiser.
//!
//! `cargo run --release --example reference [config.toml]`

use std::time::Instant;

use sphere_latent::config::RunConfig;
use sphere_latent::denoiser::DenoiserParameters;
use sphere_latent::experiment::{evaluate_params, prepare, sampling_params, train_with};
use sphere_latent::sampler::SamplerConfig;

fn main() -> sphere_latent::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => RunConfig::reference(),
    };
    let prepared = prepare(&cfg)?;
    let start = Instant::now();
    let (state, _) = train_with(&cfg, &cfg.train, &prepared, |_, row| {
        if row.epoch % 25 == 0 || row.epoch == 1 {
            println!("epoch {:4}  total {:.4}  ({:.1?})", row.epoch, row.losses.total, start.elapsed());
        }
        Ok(())
    })?;
    let trained = sampling_params(&cfg, &state)?;
    let untrained = DenoiserParameters::init(cfg.arch(), cfg.train.seed)?;
    let n = cfg.eval.n_samples;
    for &steps in &cfg.eval.steps {
        let s = SamplerConfig { steps, ..cfg.sample };
        let m = evaluate_params(&trained, &prepared, &s, n, 1)?;
        println!("T={steps}  toy_fid {:.4}  mmd2 {:.5}  acc {:.3}", m.toy_fid, m.mmd2, m.class_acc);
    }
    let m = evaluate_params(&untrained, &prepared, &cfg.sample, n, 1)?;
    println!("untrained T={}  toy_fid {:.4}  acc {:.3}", cfg.sample.steps, m.toy_fid, m.class_acc);
    Ok(())
}
