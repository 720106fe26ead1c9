//! Oracles and instrumented wrappers shared by the integration tests and the
//! acceptance report. Every reference computation here is written from the
//! definitions in f64 and never calls back into the code it checks.

#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sphere_latent::denoiser::{DenoiserArch, DenoiserParameters, Label, LatentDenoiser};
use sphere_latent::numerics::{DenseArray, Graph, Var, RMS_EPS};
use sphere_latent::objectives::{training_losses, LossWeights, ObjectiveOptions, TrainingDraws};
use sphere_latent::rng::{seeded, SleRng};
use sphere_latent::sphere::{NoiseDistConfig, NoiseKind, NoiseLevelPair, Projection};
use sphere_latent::tokenizer::LatentDecoder;
use sphere_latent::Result;

/// Row-major f64 matrix.
#[derive(Clone, Debug)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl M {
    pub fn of(a: &DenseArray) -> M {
        let (r, c) = match a.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("unsupported shape {s:?}"),
        };
        M {
            r,
            c,
            v: a.values().iter().map(|&x| f64::from(x)).collect(),
        }
    }

    fn zeros(r: usize, c: usize) -> M {
        M { r, c, v: vec![0.0; r * c] }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.c..(i + 1) * self.c]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M {
            r: self.r,
            c: self.c,
            v: self.v.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, o: &M, f: impl Fn(f64, f64) -> f64) -> M {
        assert_eq!((self.r, self.c), (o.r, o.c));
        M {
            r: self.r,
            c: self.c,
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

pub mod oracle {
    use super::M;

    pub fn matmul(a: &M, b: &M) -> M {
        assert_eq!(a.c, b.r);
        let mut out = M::zeros(a.r, b.c);
        for i in 0..a.r {
            for j in 0..b.c {
                out.v[i * b.c + j] = (0..a.c).map(|k| a.at(i, k) * b.at(k, j)).sum();
            }
        }
        out
    }

    pub fn add_row_bias(x: &M, b: &[f64]) -> M {
        let mut out = x.clone();
        for i in 0..x.r {
            for j in 0..x.c {
                out.v[i * x.c + j] += b[j];
            }
        }
        out
    }

    pub fn add(a: &M, b: &M) -> M {
        a.zip(b, |x, y| x + y)
    }

    pub fn sub(a: &M, b: &M) -> M {
        a.zip(b, |x, y| x - y)
    }

    pub fn scale(a: &M, c: f64) -> M {
        a.map(|x| x * c)
    }

    pub fn silu(a: &M) -> M {
        a.map(|x| x / (1.0 + (-x).exp()))
    }

    pub fn rms_rows(a: &M, eps: f64) -> M {
        let mut out = a.clone();
        for i in 0..a.r {
            let ms = a.row(i).iter().map(|x| x * x).sum::<f64>() / a.c as f64;
            let s = 1.0 / (ms + eps).sqrt();
            for j in 0..a.c {
                out.v[i * a.c + j] *= s;
            }
        }
        out
    }

    pub fn gather(table: &M, idx: &[usize]) -> M {
        let mut out = M::zeros(idx.len(), table.c);
        for (i, &k) in idx.iter().enumerate() {
            out.v[i * table.c..(i + 1) * table.c].copy_from_slice(table.row(k));
        }
        out
    }

    pub fn l1_mean(a: &M, b: &M) -> f64 {
        a.v.iter().zip(&b.v).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.v.len() as f64
    }

    pub fn cosine_rows(a: &M, b: &M) -> f64 {
        let mut total = 0.0;
        for i in 0..a.r {
            let (x, y) = (a.row(i), b.row(i));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
            let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
            total += 1.0 - dot / (nx * ny);
        }
        total / a.r as f64
    }

    pub fn sum(a: &M) -> f64 {
        a.v.iter().sum()
    }
}

fn randn(shape: &[usize], rng: &mut SleRng) -> DenseArray {
    DenseArray::randn(shape, rng)
}

/// Outcome of one family of gradient checks.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub instances: usize,
    /// Largest `‖g − g_fd‖₂ / max(‖g_fd‖₂, 1e-3)` seen.
    pub worst_grad: f64,
    /// Largest relative disagreement of the forward value with the oracle.
    pub worst_value: f64,
}

/// Central differences of `f` with respect to every entry of `params`.
fn central_differences(params: &[M], f: &dyn Fn(&[M]) -> f64) -> Vec<Vec<f64>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Vec::with_capacity(params[p].v.len());
        for k in 0..params[p].v.len() {
            let x = params[p].v[k];
            let h = 1e-6 * x.abs().max(1.0);
            work[p].v[k] = x + h;
            let up = f(&work);
            work[p].v[k] = x - h;
            let down = f(&work);
            work[p].v[k] = x;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// Compares graph gradients for the parameters `values` (bound as parameters
/// `0..n`) with central differences of the f64 oracle.
fn check_instance(
    values: &[DenseArray],
    build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
    reference: &dyn Fn(&[M]) -> f64,
) -> (f64, f64) {
    let mut g = Graph::new(RMS_EPS);
    let vars: Vec<Var> = values
        .iter()
        .enumerate()
        .map(|(i, v)| g.parameter(i, v.clone()))
        .collect();
    let root = build(&mut g, &vars).expect("graph builds");
    let grads = g.backward(root).expect("backward");
    let params: Vec<M> = values.iter().map(M::of).collect();
    let want_value = reference(&params);
    let got_value = f64::from(g.scalar(root));
    let value_err = (got_value - want_value).abs() / want_value.abs().max(1.0);

    let fd = central_differences(&params, reference);
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (i, fd_i) in fd.iter().enumerate() {
        let got = grads.get(i).expect("every parameter has a gradient");
        for (&a, &b) in got.values().iter().zip(fd_i) {
            diff += (f64::from(a) - b).powi(2);
            norm += b * b;
        }
    }
    (diff.sqrt() / norm.sqrt().max(1e-3), value_err)
}

/// Reduction applied to matrix-valued ops so every output entry matters:
/// a column-weighted sum plus a row-wise cosine loss against a fixed target.
fn head(g: &mut Graph, out: Var, r: &DenseArray, t: &DenseArray) -> Result<Var> {
    let rv = g.constant(r.clone());
    let proj = g.matmul(out, rv)?;
    let s = g.sum(proj);
    let tv = g.constant(t.clone());
    let c = g.cosine_loss_rows(out, tv)?;
    g.weighted_sum(&[(1.0, s), (1.0, c)])
}

fn head_ref(out: &M, r: &DenseArray, t: &DenseArray) -> f64 {
    oracle::sum(&oracle::matmul(out, &M::of(r))) + oracle::cosine_rows(out, &M::of(t))
}

fn run_case(
    name: &'static str,
    instances: usize,
    rng: &mut SleRng,
    mut one: impl FnMut(&mut SleRng) -> (f64, f64),
) -> GradCase {
    let mut case = GradCase {
        name,
        instances,
        worst_grad: 0.0,
        worst_value: 0.0,
    };
    for _ in 0..instances {
        let (g, v) = one(rng);
        case.worst_grad = case.worst_grad.max(g);
        case.worst_value = case.worst_value.max(v);
    }
    case
}

/// An op whose output is a matrix of shape `out_shape`, checked through
/// [`head`].
fn matrix_op(
    values: Vec<DenseArray>,
    out_shape: [usize; 2],
    rng: &mut SleRng,
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    op_ref: impl Fn(&[M]) -> M,
) -> (f64, f64) {
    let r = randn(&[out_shape[1], 1], rng);
    let t = randn(&out_shape, rng);
    check_instance(
        &values,
        &|g, v| {
            let out = op(g, v)?;
            head(g, out, &r, &t)
        },
        &|p| head_ref(&op_ref(p), &r, &t),
    )
}

fn dims(rng: &mut SleRng) -> (usize, usize, usize) {
    (rng.random_range(1..=5), rng.random_range(2..=6), rng.random_range(2..=6))
}

/// Gradient checks of every differentiable graph op and of the composed
/// training objective, `instances` random cases each.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<GradCase> {
    let mut rng = seeded(seed);
    let rng = &mut rng;
    let mut cases = vec![
        run_case("matmul", instances, rng, |rng| {
            let (n, k, m) = dims(rng);
            let vals = vec![randn(&[n, k], rng), randn(&[k, m], rng)];
            matrix_op(vals, [n, m], rng, |g, v| g.matmul(v[0], v[1]), |p| oracle::matmul(&p[0], &p[1]))
        }),
        run_case("add_row_bias", instances, rng, |rng| {
            let (n, m, _) = dims(rng);
            let vals = vec![randn(&[n, m], rng), randn(&[m], rng)];
            matrix_op(vals, [n, m], rng, |g, v| g.add_row_bias(v[0], v[1]), |p| {
                oracle::add_row_bias(&p[0], &p[1].v)
            })
        }),
        run_case("add", instances, rng, |rng| {
            let (n, m, _) = dims(rng);
            let vals = vec![randn(&[n, m], rng), randn(&[n, m], rng)];
            matrix_op(vals, [n, m], rng, |g, v| g.add(v[0], v[1]), |p| oracle::add(&p[0], &p[1]))
        }),
        run_case("sub", instances, rng, |rng| {
            let (n, m, _) = dims(rng);
            let vals = vec![randn(&[n, m], rng), randn(&[n, m], rng)];
            matrix_op(vals, [n, m], rng, |g, v| g.sub(v[0], v[1]), |p| oracle::sub(&p[0], &p[1]))
        }),
        run_case("scale", instances, rng, |rng| {
            let (n, m, _) = dims(rng);
            let c: f32 = rng.random_range(-3.0..3.0);
            let vals = vec![randn(&[n, m], rng)];
            matrix_op(vals, [n, m], rng, move |g, v| Ok(g.scale(v[0], c)), move |p| {
                oracle::scale(&p[0], f64::from(c))
            })
        }),
        run_case("silu", instances, rng, |rng| {
            let (n, m, _) = dims(rng);
            let vals = vec![randn(&[n, m], rng).scale(2.0)];
            matrix_op(vals, [n, m], rng, |g, v| Ok(g.silu(v[0])), |p| oracle::silu(&p[0]))
        }),
        run_case("rms_normalize_rows", instances, rng, |rng| {
            let (n, m, _) = dims(rng);
            let vals = vec![randn(&[n, m], rng)];
            matrix_op(vals, [n, m], rng, |g, v| Ok(g.rms_normalize_rows(v[0])), |p| {
                oracle::rms_rows(&p[0], f64::from(RMS_EPS))
            })
        }),
        run_case("gather_rows", instances, rng, |rng| {
            let (n, m, rows) = dims(rng);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..rows)).collect();
            let vals = vec![randn(&[rows, m], rng)];
            let i2 = idx.clone();
            matrix_op(vals, [n, m], rng, move |g, v| g.gather_rows(v[0], &idx), move |p| {
                oracle::gather(&p[0], &i2)
            })
        }),
    ];
    cases.push(run_case("l1_mean", instances, rng, |rng| {
        let (n, m, _) = dims(rng);
        let vals = vec![randn(&[n, m], rng), randn(&[n, m], rng)];
        check_instance(&vals, &|g, v| g.l1_mean(v[0], v[1]), &|p| oracle::l1_mean(&p[0], &p[1]))
    }));
    cases.push(run_case("cosine_loss_rows", instances, rng, |rng| {
        let (n, m, _) = dims(rng);
        let vals = vec![randn(&[n, m], rng), randn(&[n, m], rng)];
        check_instance(&vals, &|g, v| g.cosine_loss_rows(v[0], v[1]), &|p| {
            oracle::cosine_rows(&p[0], &p[1])
        })
    }));
    cases.push(run_case("sum", instances, rng, |rng| {
        let (n, m, _) = dims(rng);
        let vals = vec![randn(&[n, m], rng)];
        check_instance(
            &vals,
            &|g, v| {
                let s = g.silu(v[0]);
                Ok(g.sum(s))
            },
            &|p| oracle::sum(&oracle::silu(&p[0])),
        )
    }));
    cases.push(run_case("weighted_sum", instances, rng, |rng| {
        let (n, m, _) = dims(rng);
        let w: [f32; 3] = [rng.random_range(-2.0..2.0), 0.0, rng.random_range(-2.0..2.0)];
        let vals = vec![randn(&[n, m], rng), randn(&[n, m], rng)];
        check_instance(
            &vals,
            &|g, v| {
                let s = g.silu(v[0]);
                let a = g.sum(s);
                let b = g.l1_mean(v[0], v[1])?;
                let c = g.cosine_loss_rows(v[0], v[1])?;
                g.weighted_sum(&[(w[0], a), (w[1], b), (w[2], c)])
            },
            &|p| {
                f64::from(w[0]) * oracle::sum(&oracle::silu(&p[0]))
                    + f64::from(w[2]) * oracle::cosine_rows(&p[0], &p[1])
            },
        )
    }));
    cases.push(run_case("training_objective", instances, rng, composed_loss_instance));
    cases
}

/// f64 forward pass of the residual MLP denoiser.
pub fn denoiser_ref(arch: DenoiserArch, p: &[M], v: &M, labels: &[usize]) -> M {
    let mut h = oracle::add(&oracle::add_row_bias(&oracle::matmul(v, &p[0]), &p[1].v), &oracle::gather(&p[2], labels));
    for b in 0..arch.blocks {
        let base = 3 + 4 * b;
        let u = oracle::silu(&oracle::add_row_bias(&oracle::matmul(&h, &p[base]), &p[base + 1].v));
        let u = oracle::add_row_bias(&oracle::matmul(&u, &p[base + 2]), &p[base + 3].v);
        h = oracle::add(&h, &u);
    }
    let n = p.len();
    oracle::add_row_bias(&oracle::matmul(&h, &p[n - 2]), &p[n - 1].v)
}

fn project_ref(x: &M, projection: Projection) -> M {
    match projection {
        Projection::Sphere => oracle::rms_rows(x, f64::from(RMS_EPS)),
        Projection::Identity => x.clone(),
    }
}

fn perturb_ref(z: &M, sigmas: &[f64], eps: &M, projection: Projection) -> M {
    let mut x = z.clone();
    for i in 0..z.r {
        for j in 0..z.c {
            x.v[i * z.c + j] += sigmas[i] * eps.at(i, j);
        }
    }
    project_ref(&x, projection)
}

/// Training objective written out from its definition. `target` stands in
/// for the stop-gradient prediction at low noise.
#[allow(clippy::too_many_arguments)]
fn objective_ref(
    arch: DenoiserArch,
    p: &[M],
    target: &M,
    z: &M,
    draws: &TrainingDraws,
    w: &LossWeights,
    projection: Projection,
) -> f64 {
    let sig: Vec<f64> = draws.pairs.iter().map(|q| f64::from(q.sigma)).collect();
    let sub: Vec<f64> = draws.pairs.iter().map(|q| f64::from(q.sigma_sub)).collect();
    let eps = M::of(&draws.eps);
    let labels: Vec<usize> = draws.labels.iter().map(|l| l.value()).collect();
    let small = denoiser_ref(arch, p, &perturb_ref(z, &sub, &eps, projection), &labels);
    let big = denoiser_ref(arch, p, &perturb_ref(z, &sig, &eps, projection), &labels);
    let recon = f64::from(w.l1_recon) * oracle::l1_mean(&small, z) + f64::from(w.cos_recon) * oracle::cosine_rows(&small, z);
    let cons = f64::from(w.l1_cons) * oracle::l1_mean(&big, target) + f64::from(w.cos_cons) * oracle::cosine_rows(&big, target);
    let e2 = M::of(draws.latent_eps.as_ref().expect("latent noise drawn"));
    let renoised = perturb_ref(&project_ref(&big, projection), &sig, &e2, projection);
    let again = denoiser_ref(arch, p, &renoised, &labels);
    recon + cons + f64::from(w.latent_cons) * oracle::cosine_rows(&again, &big)
}

/// Random small architecture, parameters and batch.
pub fn random_setup(rng: &mut SleRng) -> (DenoiserParameters, DenseArray, Vec<Label>) {
    let arch = DenoiserArch {
        latent_dim: rng.random_range(2..=5),
        hidden: rng.random_range(2..=6),
        blocks: rng.random_range(0..=2),
        classes: rng.random_range(1..=3),
    };
    let mut params = DenoiserParameters::init(arch, rng.random()).expect("valid arch");
    params.jitter(0.4, rng);
    let n = rng.random_range(1..=4);
    let z = randn(&[n, arch.latent_dim], rng);
    let labels = (0..n).map(|_| Label::new(rng.random_range(0..=arch.classes), arch.classes).unwrap()).collect();
    (params, z, labels)
}

pub fn random_draws(n: usize, d: usize, labels: Vec<Label>, rng: &mut SleRng) -> TrainingDraws {
    let pairs = (0..n)
        .map(|_| {
            let a: f32 = rng.random_range(0.0..2.0);
            let b: f32 = rng.random_range(0.0..2.0);
            NoiseLevelPair::new(a.max(b), a.min(b)).unwrap()
        })
        .collect();
    TrainingDraws {
        eps: randn(&[n, d], rng),
        pairs,
        labels,
        latent_eps: Some(randn(&[n, d], rng)),
    }
}

fn composed_loss_instance(rng: &mut SleRng) -> (f64, f64) {
    let (params, z, labels) = random_setup(rng);
    let arch = params.arch();
    let draws = random_draws(z.rows(), arch.latent_dim, labels, rng);
    let weights = LossWeights {
        l1_recon: rng.random_range(0.0..50.0),
        l1_cons: rng.random_range(0.0..25.0),
        cos_recon: rng.random_range(0.0..2.0),
        cos_cons: rng.random_range(0.0..2.0),
        latent_cons: rng.random_range(0.1..2.0),
        cls_drop_prob: 0.1,
    };
    let projection = if rng.random_bool(0.8) { Projection::Sphere } else { Projection::Identity };
    let opts = ObjectiveOptions {
        weights,
        projection,
        force_latent_path: false,
    };
    let values = params.tensors().to_vec();
    let p0: Vec<M> = values.iter().map(M::of).collect();
    let labels: Vec<usize> = draws.labels.iter().map(|l| l.value()).collect();
    let sub: Vec<f64> = draws.pairs.iter().map(|q| f64::from(q.sigma_sub)).collect();
    let zm = M::of(&z);
    let target = denoiser_ref(arch, &p0, &perturb_ref(&zm, &sub, &M::of(&draws.eps), projection), &labels);
    check_instance(
        &values,
        &|g, vars| Ok(training_losses(g, &params, vars, &z, &draws, &opts)?.root),
        &|p| objective_ref(arch, p, &target, &zm, &draws, &weights, projection),
    )
}

/// Stop-gradient checks over `graphs` random denoisers. Returns the number of
/// target-branch gradient entries inspected and how many were not `+0.0`
/// bit for bit, and how many trainer gradients differed from those of the
/// same loss against a precomputed constant target.
pub fn stop_gradient_suite(graphs: usize, seed: u64) -> StopGradReport {
    use sphere_latent::objectives::consistency_loss;
    let mut rng = seeded(seed);
    let mut report = StopGradReport::default();
    for _ in 0..graphs {
        let (params, z, labels) = random_setup(&mut rng);
        let arch = params.arch();
        let draws = random_draws(z.rows(), arch.latent_dim, labels, &mut rng);
        let w = LossWeights::default();
        let sig: Vec<f32> = draws.pairs.iter().map(|q| q.sigma).collect();
        let sub: Vec<f32> = draws.pairs.iter().map(|q| q.sigma_sub).collect();
        let v_big = sphere_latent::sphere::perturb_rows(&z, &sig, &draws.eps, Projection::Sphere).unwrap();
        let v_small = sphere_latent::sphere::perturb_rows(&z, &sub, &draws.eps, Projection::Sphere).unwrap();

        // Same weights bound twice: the target branch under indices n..2n.
        let n = params.tensors().len();
        let mut g = Graph::new(RMS_EPS);
        let online = params.bind(&mut g);
        let target: Vec<Var> = params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| g.parameter(n + i, t.clone()))
            .collect();
        let vb = g.constant(v_big.clone());
        let vs = g.constant(v_small.clone());
        let pred_big = params.forward(&mut g, &online, vb, &draws.labels).unwrap();
        let pred_small = params.forward(&mut g, &target, vs, &draws.labels).unwrap();
        let terms = consistency_loss(&mut g, pred_big, pred_small, &w).unwrap();
        let grads = g.backward(terms.weighted).unwrap();
        for i in n..2 * n {
            let gi = grads.get(i).expect("target parameters are on the tape");
            report.entries += gi.len();
            report.nonzero += gi.values().iter().filter(|v| v.to_bits() != 0).count();
        }
        report.online_nonzero += (0..n)
            .filter(|&i| grads.get(i).unwrap().values().iter().any(|&v| v != 0.0))
            .count();

        // The trainer's objective with reconstruction switched off must match
        // the same loss against a constant copy of the target.
        let cons_only = ObjectiveOptions::new(LossWeights {
            l1_recon: 0.0,
            cos_recon: 0.0,
            latent_cons: 0.0,
            ..w
        });
        let mut g = Graph::new(RMS_EPS);
        let bound = params.bind(&mut g);
        let root = training_losses(&mut g, &params, &bound, &z, &draws, &cons_only).unwrap().root;
        let trainer = g.backward(root).unwrap();

        let fixed = params.denoise_batch(&v_small, &draws.labels).unwrap();
        let mut g = Graph::new(RMS_EPS);
        let bound = params.bind(&mut g);
        let vb = g.constant(v_big);
        let pred_big = params.forward(&mut g, &bound, vb, &draws.labels).unwrap();
        let t = g.constant(fixed);
        let terms = consistency_loss(&mut g, pred_big, t, &w).unwrap();
        let direct = g.backward(terms.weighted).unwrap();
        for i in 0..n {
            let (a, b) = (trainer.get(i).unwrap(), direct.get(i).unwrap());
            if a.values().iter().zip(b.values()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                report.trainer_mismatches += 1;
            }
        }
        report.graphs += 1;
    }
    report
}

#[derive(Clone, Debug, Default)]
pub struct StopGradReport {
    pub graphs: usize,
    pub entries: usize,
    pub nonzero: usize,
    pub online_nonzero: usize,
    pub trainer_mismatches: usize,
}

/// `calls` random spherify/perturb calls at the latent sizes the model uses;
/// returns the largest `|mean square − 1|`.
pub fn sphere_invariant_worst(calls: usize, seed: u64) -> f64 {
    use sphere_latent::sphere::{perturb, spherify};
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for i in 0..calls {
        let d = rng.random_range(16..=256);
        let raw = randn(&[d], &mut rng);
        // inputs with RMS between 0.5 and 100; the stabiliser alone moves a
        // mean square of 0.01 off by 1e-4
        let target = 10f64.powf(rng.random_range(-0.3..2.0));
        let rms = raw.mean_square().sqrt();
        let x = raw.scale((target / rms) as f32);
        let out = if i % 2 == 0 {
            spherify(&x).unwrap()
        } else {
            let v = spherify(&x).unwrap();
            let sigma: f32 = rng.random_range(0.0..100.0);
            perturb(&v, sigma, &randn(&[d], &mut rng)).unwrap()
        };
        worst = worst.max((out.as_array().mean_square() - 1.0).abs());
    }
    worst
}

/// Independent Monte-Carlo draw of `(σ, σ_sub)`.
pub fn noise_pair_oracle(cfg: &NoiseDistConfig, rng: &mut SleRng) -> (f64, f64) {
    let u = |rng: &mut SleRng| rng.random::<f64>();
    match cfg.kind {
        NoiseKind::UniformBaseline => {
            let s = cfg.sigma_max * u(rng);
            (s, s * 0.5 * u(rng))
        }
        NoiseKind::LogitNormal => {
            let normal = Normal::new(cfg.mu, cfg.s).unwrap();
            let ln = |rng: &mut SleRng| {
                let x: f64 = normal.sample(rng);
                x.exp() / (1.0 + x.exp())
            };
            let [lo, hi] = cfg.sigma_range;
            let a = if u(rng) < cfg.mix_probability {
                cfg.mix_range[0] + (cfg.mix_range[1] - cfg.mix_range[0]) * u(rng)
            } else {
                lo + (hi - lo) * ln(rng)
            };
            let b = lo + (hi - lo) * ln(rng);
            (a.max(b), a.min(b))
        }
    }
}

/// Worst two-sample KS statistic between the library sampler and the oracle
/// over σ, σ_sub and their gap, for each configuration in `configs`.
pub fn noise_pair_ks(configs: &[NoiseDistConfig], n: usize, seed: u64) -> f64 {
    use sphere_latent::eval::ks_statistic;
    use sphere_latent::sphere::sample_noise_pair;
    let mut worst = 0.0f64;
    for (k, cfg) in configs.iter().enumerate() {
        let mut lib = seeded(seed + 2 * k as u64);
        let mut orc = seeded(seed + 2 * k as u64 + 1_000_003);
        let mut cols = vec![Vec::with_capacity(n); 6];
        for _ in 0..n {
            let p = sample_noise_pair(cfg, &mut lib).unwrap();
            let (s, ss) = (f64::from(p.sigma), f64::from(p.sigma_sub));
            cols[0].push(s);
            cols[1].push(ss);
            cols[2].push(s - ss);
            let (a, b) = noise_pair_oracle(cfg, &mut orc);
            cols[3].push(a);
            cols[4].push(b);
            cols[5].push(a - b);
        }
        for j in 0..3 {
            worst = worst.max(ks_statistic(&cols[j], &cols[j + 3]));
        }
    }
    worst
}

/// Largest gap between the decay schedule and `(1 − (t+1)/T)^γ`.
pub fn decay_worst() -> f64 {
    let mut worst = 0.0f64;
    for steps in 1..=64usize {
        for gamma in [0.5, 0.75, 1.0] {
            for t in 0..steps {
                let want = ((steps - t - 1) as f64 / steps as f64).powf(gamma);
                let got = sphere_latent::sphere::decay_factor(t, steps, gamma).unwrap();
                worst = worst.max((got - want).abs());
            }
        }
    }
    worst
}

/// Denoiser wrapper that counts calls and rows.
pub struct CountingDenoiser<'a, D> {
    pub inner: &'a D,
    pub calls: AtomicUsize,
    pub rows: AtomicUsize,
}

impl<'a, D> CountingDenoiser<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            rows: AtomicUsize::new(0),
        }
    }
}

impl<D: LatentDenoiser> LatentDenoiser for CountingDenoiser<'_, D> {
    fn arch(&self) -> DenoiserArch {
        self.inner.arch()
    }

    fn denoise_batch(&self, v: &DenseArray, labels: &[Label]) -> Result<DenseArray> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.rows.fetch_add(v.rows(), Ordering::SeqCst);
        self.inner.denoise_batch(v, labels)
    }
}

pub struct CountingDecoder<'a, C> {
    pub inner: &'a C,
    pub calls: AtomicUsize,
    pub rows: AtomicUsize,
}

impl<'a, C> CountingDecoder<'a, C> {
    pub fn new(inner: &'a C) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            rows: AtomicUsize::new(0),
        }
    }
}

impl<C: LatentDecoder> LatentDecoder for CountingDecoder<'_, C> {
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }

    fn decode(&self, z: &DenseArray) -> Result<DenseArray> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.rows.fetch_add(z.rows(), Ordering::SeqCst);
        self.inner.decode(z)
    }
}

pub fn count(c: &AtomicUsize) -> usize {
    c.load(Ordering::SeqCst)
}

pub fn bits(a: &DenseArray) -> Vec<u32> {
    a.values().iter().map(|v| v.to_bits()).collect()
}

/// The reference configuration shrunk to run in well under a second.
pub fn tiny_config(output_dir: &std::path::Path) -> sphere_latent::config::RunConfig {
    let mut cfg = sphere_latent::config::RunConfig::reference();
    cfg.run_id = "tiny".into();
    cfg.output_dir = output_dir.to_path_buf();
    cfg.data.n_per_class = 12;
    cfg.model.hidden = 16;
    cfg.train.epochs = 4;
    cfg.train.batch_size = 20;
    cfg.eval.n_samples = 64;
    cfg
}

#[derive(Clone, Copy, Debug)]
pub struct PersistenceReport {
    /// save → load → save gives the same bytes.
    pub round_trip_identical: bool,
    /// Training interrupted at half time and resumed from disk ends in the
    /// same checkpoint bytes as uninterrupted training.
    pub resume_identical: bool,
}

pub fn persistence_check(dir: &std::path::Path) -> PersistenceReport {
    use sphere_latent::checkpoint::Checkpoint;
    use sphere_latent::experiment::prepare;
    use sphere_latent::trainer::{train_from, TrainState};

    let cfg = tiny_config(dir);
    let prepared = prepare(&cfg).unwrap();
    let snapshot = |state: &TrainState| Checkpoint {
        config: cfg.clone(),
        tokenizer: prepared.tokenizer.clone(),
        state: state.clone(),
    };

    let mut full = TrainState::initial(cfg.arch(), &cfg.train).unwrap();
    train_from(&mut full, &prepared.latents, &cfg.train, |_, _| Ok(())).unwrap();
    let a = dir.join("full.ckpt");
    snapshot(&full).save(&a).unwrap();
    let b = dir.join("reloaded.ckpt");
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    let round_trip_identical = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();

    let half = sphere_latent::trainer::TrainConfig {
        epochs: cfg.train.epochs / 2,
        ..cfg.train
    };
    let mut part = TrainState::initial(cfg.arch(), &cfg.train).unwrap();
    train_from(&mut part, &prepared.latents, &half, |_, _| Ok(())).unwrap();
    let mid = dir.join("mid.ckpt");
    snapshot(&part).save(&mid).unwrap();
    drop(part);
    let mut resumed = Checkpoint::load(&mid).unwrap().state;
    train_from(&mut resumed, &prepared.latents, &cfg.train, |_, _| Ok(())).unwrap();
    let c = dir.join("resumed.ckpt");
    snapshot(&resumed).save(&c).unwrap();
    let resume_identical = std::fs::read(&a).unwrap() == std::fs::read(&c).unwrap();

    PersistenceReport {
        round_trip_identical,
        resume_identical,
    }
}
