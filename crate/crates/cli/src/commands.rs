use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sphere_latent::checkpoint::{load_reference, save_latent_cache, save_reference, Checkpoint};
use sphere_latent::config::RunConfig;
use sphere_latent::cost::{
    flops_latent_pipeline, flops_pixel_loop_pipeline, flops_toy_model, paper_checks, PaperCheck, LATENT_METHOD,
    PIXEL_METHOD,
};
use sphere_latent::data::make_mixture;
use sphere_latent::denoiser::Label;
use sphere_latent::eval::{evaluate, score, MetricRecord, ReferenceSet, EVAL_HEADER};
use sphere_latent::experiment::{prepare, run_ablation, ABLATE_HEADER};
use sphere_latent::sampler::{sample_batch_parallel, SamplerConfig};
use sphere_latent::tokenizer::LatentDecoder;
use sphere_latent::trainer::{train_from, TrainState, METRICS_HEADER};

use crate::{AblateArgs, CostArgs, CostMode, EvalArgs, SampleArgs, TableFormat, TrainArgs, UsageError};

/// Worker cap from `SLE_THREADS`; unset or 0 means every core.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("SLE_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| UsageError(format!("SLE_THREADS must be a non-negative integer, got {v:?}")).into()),
        Err(e) => Err(UsageError(format!("SLE_THREADS: {e}")).into()),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Opens `path` for appending, writing `header` first if the file is new or
/// empty.
fn append_csv(path: &Path, header: &str) -> Result<File> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if f.metadata()?.len() == 0 {
        writeln!(f, "{header}")?;
    }
    Ok(f)
}

fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    let prepared = prepare(&cfg)?;
    save_latent_cache(&out.join("latents.sle"), &prepared.latents, &prepared.tokenizer)?;
    save_reference(&reference_path(&out, cfg.data.seed), &prepared.reference, cfg.data.seed)?;

    let metrics_path = out.join("train.csv");
    let mut state = match &args.resume {
        None => {
            fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;
            TrainState::initial(cfg.arch(), &cfg.train)?
        }
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config.train != cfg.train || ck.config.arch() != cfg.arch() || ck.config.data != cfg.data {
                bail!(usage(format!("{} was written for a different configuration", path.display())));
            }
            if ck.tokenizer != prepared.tokenizer {
                bail!("{} holds a different tokenizer", path.display());
            }
            keep_rows_up_to(&metrics_path, ck.state.epoch)?;
            ck.state
        }
    };

    let mut metrics = append_csv(&metrics_path, METRICS_HEADER)?;
    let every = cfg.train.checkpoint_every;
    let snapshot = |state: &TrainState| Checkpoint {
        config: cfg.clone(),
        tokenizer: prepared.tokenizer.clone(),
        state: state.clone(),
    };
    train_from(&mut state, &prepared.latents, &cfg.train, |state, row| {
        writeln!(metrics, "{}", row.csv_line()).map_err(|e| sphere_latent::Error::Io {
            path: metrics_path.clone(),
            source: e,
        })?;
        if args.log_every > 0 && row.epoch % args.log_every == 0 {
            eprintln!("epoch {:5}  loss {:.5}", row.epoch, row.losses.total);
        }
        if every > 0 && row.epoch % every == 0 {
            snapshot(state).save(&out.join(checkpoint_name(row.epoch)))?;
        }
        Ok(())
    })?;
    let final_path = out.join("final.ckpt");
    snapshot(&state).save(&final_path)?;
    eprintln!("wrote {}", final_path.display());
    Ok(())
}

/// Drops metric rows past `epoch` so a resumed run continues the log.
fn keep_rows_up_to(path: &Path, epoch: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = vec![METRICS_HEADER.to_string()];
    for line in text.lines().skip(1) {
        let e: usize = line.split(',').next().and_then(|e| e.parse().ok()).unwrap_or(usize::MAX);
        if e <= epoch {
            kept.push(line.to_string());
        }
    }
    fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}

fn reference_path(dir: &Path, data_seed: u64) -> PathBuf {
    dir.join(format!("reference-seed{data_seed}.sle"))
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn sample(args: SampleArgs, threads: usize) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let classes = ck.config.data.classes;
    let labels: Vec<Label> = match args.label {
        Some(y) if y >= classes => {
            return Err(usage(format!("--label {y} is out of range for {classes} classes")));
        }
        Some(y) => vec![Label::new(y, classes)?; args.n],
        None => (0..args.n).map(|i| Label::new(i % classes, classes)).collect::<Result<_, _>>()?,
    };
    let cfg = SamplerConfig {
        steps: args.steps,
        sigma_max: args.sigma_max,
        omega: args.omega,
        gamma: args.gamma,
        fresh_eps_per_step: args.fresh_eps,
        seed: args.seed,
        projection: ck.config.sample.projection,
    };
    cfg.validate()?;
    let params = ck.sampling_params()?;
    let samples = sample_batch_parallel(&labels, &params, &ck.tokenizer, &cfg, threads)?;

    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "# checkpoint={} steps={} omega={} gamma={} sigma_max={} label={} n={} seed={} fresh_eps={}",
        args.checkpoint.display(),
        args.steps,
        args.omega,
        args.gamma,
        args.sigma_max,
        args.label.map_or("all".to_string(), |y| y.to_string()),
        args.n,
        args.seed,
        args.fresh_eps
    )?;
    let dims: Vec<String> = (0..ck.tokenizer.data_dim()).map(|i| format!("x{i}")).collect();
    writeln!(w, "label,{}", dims.join(","))?;
    for (i, y) in labels.iter().enumerate() {
        let row: Vec<String> = samples.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{}", y.value(), row.join(","))?;
    }
    w.flush()?;
    eprintln!("wrote {} samples to {}", labels.len(), args.out.display());
    Ok(())
}

/// Cached statistics of the training data, recomputed (and cached) when
/// missing or written for another dataset seed.
fn reference_for(ck: &Checkpoint, dir: &Path) -> Result<ReferenceSet> {
    let path = reference_path(dir, ck.config.data.seed);
    if let Ok((r, seed)) = load_reference(&path) {
        if seed == ck.config.data.seed && r.classes == ck.config.data.classes {
            return Ok(r);
        }
    }
    let reference = ReferenceSet::from_dataset(&make_mixture(&ck.config.data)?)?;
    save_reference(&path, &reference, ck.config.data.seed)?;
    Ok(reference)
}

pub fn eval(args: EvalArgs, threads: usize) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let dir = checkpoint_dir(&args.checkpoint);
    let k = ck.config.data.classes;
    let n = args.n.unwrap_or(ck.config.eval.n_samples);
    if n == 0 || n % k != 0 {
        return Err(usage(format!("--n {n} must be a positive multiple of the {k} classes")));
    }
    if args.steps.is_empty() || args.steps.contains(&0) {
        return Err(usage("--steps needs one or more positive step counts"));
    }
    let reference = reference_for(&ck, &dir)?;
    let out = args.out.clone().unwrap_or_else(|| dir.join("eval.csv"));
    let mut csv = append_csv(&out, EVAL_HEADER)?;

    if args.reference_self {
        let data = make_mixture(&ck.config.data)?;
        let metrics = score(&data.x, &data.labels, &reference)?;
        let record = MetricRecord {
            run_id: format!("{}-reference", ck.config.run_id),
            steps: 0,
            omega: 0.0,
            gamma: 0.0,
            metrics,
        };
        writeln!(csv, "{}", record.csv_line())?;
        println!("{}", record.csv_line());
        return Ok(());
    }

    let params = ck.sampling_params()?;
    let base = SamplerConfig {
        omega: args.omega.unwrap_or(ck.config.sample.omega),
        gamma: args.gamma.unwrap_or(ck.config.sample.gamma),
        sigma_max: args.sigma_max.unwrap_or(ck.config.sample.sigma_max),
        ..ck.config.sample
    };
    for &steps in &args.steps {
        let cfg = SamplerConfig { steps, ..base };
        cfg.validate()?;
        let metrics = evaluate(&params, &ck.tokenizer, &cfg, &reference, n, threads)?;
        let record = MetricRecord {
            run_id: ck.config.run_id.clone(),
            steps,
            omega: cfg.omega,
            gamma: cfg.gamma,
            metrics,
        };
        writeln!(csv, "{}", record.csv_line())?;
        println!("{}", record.csv_line());
    }
    Ok(())
}

struct CostRow {
    setting: String,
    method: String,
    steps: usize,
    cfg: bool,
    gflops: f64,
    published: Option<f64>,
}

const COST_TOLERANCE: f64 = 0.01;

fn print_cost_rows(rows: &[CostRow], format: TableFormat, unit: &str) {
    let verdict = |r: &CostRow| {
        r.published.map(|p| {
            let rel = (r.gflops - p).abs() / p;
            (p, rel, if rel <= COST_TOLERANCE { "PASS" } else { "FAIL" })
        })
    };
    match format {
        TableFormat::Csv => {
            println!("setting,method,steps,cfg,{unit},published,rel_error,check");
            for r in rows {
                let (p, rel, v) = verdict(r).map_or((String::new(), String::new(), ""), |(p, rel, v)| {
                    (p.to_string(), format!("{rel:.6}"), v)
                });
                println!("{},{},{},{},{},{},{},{}", r.setting, r.method, r.steps, r.cfg, r.gflops, p, rel, v);
            }
        }
        TableFormat::Text => {
            println!(
                "{:<16} {:<22} {:>5} {:>5} {:>14} {:>10} {:>9}  check",
                "setting", "method", "steps", "cfg", unit, "published", "rel.err"
            );
            for r in rows {
                let (p, rel, v) = verdict(r).map_or(("-".to_string(), "-".to_string(), "-"), |(p, rel, v)| {
                    (format!("{p:.0}"), format!("{:.3}%", 100.0 * rel), v)
                });
                println!(
                    "{:<16} {:<22} {:>5} {:>5} {:>14.1} {:>10} {:>9}  {}",
                    r.setting, r.method, r.steps, r.cfg, r.gflops, p, rel, v
                );
            }
        }
    }
}

pub fn cost(args: CostArgs) -> Result<()> {
    if args.steps == 0 {
        return Err(usage("--steps must be >= 1"));
    }
    match args.mode {
        CostMode::Paper => {
            let components = match &args.config {
                Some(path) => RunConfig::load(path)?.cost.components(),
                None => sphere_latent::config::CostConfig::default().components(),
            };
            let [enc, pdec, den, ldec] = components;
            let checks: Vec<PaperCheck> = paper_checks()?;
            let published_for = |setting: &str, method: &str| {
                checks
                    .iter()
                    .find(|c| c.setting == setting && c.method == method && c.steps == args.steps && c.cfg_enabled == args.cfg)
                    .map(|c| (c.computed, c.published))
            };
            let mut rows = vec![
                CostRow {
                    setting: "ImageNet-1K".into(),
                    method: PIXEL_METHOD.into(),
                    steps: args.steps,
                    cfg: args.cfg,
                    gflops: flops_pixel_loop_pipeline(args.steps, args.cfg, &enc, &pdec)?.total,
                    published: published_for("ImageNet-1K", PIXEL_METHOD).map(|c| c.1),
                },
                CostRow {
                    setting: "ImageNet-1K".into(),
                    method: LATENT_METHOD.into(),
                    steps: args.steps,
                    cfg: args.cfg,
                    gflops: flops_latent_pipeline(args.steps, args.cfg, &den, &ldec)?.total,
                    published: published_for("ImageNet-1K", LATENT_METHOD).map(|c| c.1),
                },
            ];
            for c in checks
                .iter()
                .filter(|c| c.setting != "ImageNet-1K" && c.steps == args.steps && c.cfg_enabled == args.cfg)
            {
                rows.push(CostRow {
                    setting: c.setting.clone(),
                    method: c.method.into(),
                    steps: c.steps,
                    cfg: c.cfg_enabled,
                    gflops: c.computed,
                    published: Some(c.published),
                });
            }
            print_cost_rows(&rows, args.format, "GFLOPs");
        }
        CostMode::Toy => {
            let (arch, tokenizer) = match (&args.checkpoint, &args.config) {
                (Some(path), _) => {
                    let ck = Checkpoint::load(path)?;
                    (ck.config.arch(), ck.tokenizer)
                }
                (None, Some(path)) => {
                    let cfg = RunConfig::load(path)?;
                    (cfg.arch(), prepare(&cfg)?.tokenizer)
                }
                (None, None) => return Err(usage("--mode toy needs --checkpoint or --config")),
            };
            let den = flops_toy_model(&arch);
            let dec = flops_toy_model(&tokenizer);
            let report = flops_latent_pipeline(args.steps, args.cfg, &den, &dec)?;
            let mut rows: Vec<CostRow> = report
                .subtotals
                .iter()
                .map(|(name, passes, flops)| CostRow {
                    setting: "toy".into(),
                    method: format!("{name} x{passes}"),
                    steps: args.steps,
                    cfg: args.cfg,
                    gflops: *flops,
                    published: None,
                })
                .collect();
            rows.push(CostRow {
                setting: "toy".into(),
                method: "total".into(),
                steps: args.steps,
                cfg: args.cfg,
                gflops: report.total,
                published: None,
            });
            print_cost_rows(&rows, args.format, "FLOPs");
        }
    }
    Ok(())
}

pub fn ablate(args: AblateArgs, threads: usize) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let out = match args.out {
        Some(p) => p,
        None => {
            create_dir(&cfg.output_dir)?;
            cfg.output_dir.join("ablate.csv")
        }
    };
    let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    writeln!(w, "{ABLATE_HEADER}")?;
    let mut write_err = None;
    let rows = run_ablation(&cfg, threads, |row| {
        eprintln!("{:<9} {:<22} seed {:<3} toy_fid {:.4}", row.axis, row.arm, row.seed, row.metrics.toy_fid);
        if let Err(e) = writeln!(w, "{}", row.csv_line()).and_then(|_| w.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", out.display()));
    }
    eprintln!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}
