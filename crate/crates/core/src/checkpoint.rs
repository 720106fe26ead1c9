//! Binary array files: training checkpoints, latent caches and reference
//! statistics all share one layout.
//!
//! ```text
//! "SLE1"  u32 version
//! u32 len, UTF-8 configuration text
//! u8 has_cursor [32-byte seed, u64 stream, u128 word position]
//! u32 count, then (u32 len, name, u64 value) metadata entries
//! u32 count, then (u32 len, name, u32 ndim, u64 dims…, f32 values…) arrays
//! ```
//!
//! Every integer and float is little-endian.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::LatentDataset;
use crate::denoiser::{DenoiserParameters, Label};
use crate::error::{Error, Result};
use crate::eval::{GaussianSummary, ReferenceSet};
use crate::numerics::{DenseArray, EmaState, OptimizerState};
use crate::rng::RngCursor;
use crate::tokenizer::LinearTokenizer;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 4] = b"SLE1";
pub const VERSION: u32 = 1;

/// The raw contents of an array file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayFile {
    pub config: String,
    pub cursor: Option<RngCursor>,
    pub meta: BTreeMap<String, u64>,
    pub arrays: Vec<(String, DenseArray)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: format!("{} (at byte {})", reason.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| self.fail("string is not UTF-8"))
    }
}

impl ArrayFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        put_str(&mut out, &self.config);
        match &self.cursor {
            None => out.push(0),
            Some(c) => {
                out.push(1);
                out.extend_from_slice(&c.seed);
                out.extend_from_slice(&c.stream.to_le_bytes());
                out.extend_from_slice(&c.word_pos.to_le_bytes());
            }
        }
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, self.arrays.len());
        for (name, a) in &self.arrays {
            put_str(&mut out, name);
            put_u32(&mut out, a.shape().len());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in a.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses `bytes`; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.fail("not an SLE1 file"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(r.fail(format!("unsupported format version {version}")));
        }
        let config = r.string()?;
        let cursor = match r.take(1)?[0] {
            0 => None,
            1 => Some(RngCursor {
                seed: r.array()?,
                stream: r.u64()?,
                word_pos: u128::from_le_bytes(r.array()?),
            }),
            other => return Err(r.fail(format!("bad cursor flag {other}"))),
        };
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.u64()?;
            if meta.insert(k.clone(), v).is_some() {
                return Err(r.fail(format!("duplicate metadata key {k}")));
            }
        }
        let count = r.u32()?;
        let mut arrays: Vec<(String, DenseArray)> = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            if arrays.iter().any(|(n, _)| *n == name) {
                return Err(r.fail(format!("duplicate array {name}")));
            }
            let ndim = r.u32()?;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| r.fail(format!("array {name} has an impossible shape {shape:?}")))?;
            let raw = r.take(4 * n)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            let a = DenseArray::new(shape, values).map_err(|e| r.fail(e.to_string()))?;
            arrays.push((name, a));
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(Self {
            config,
            cursor,
            meta,
            arrays,
        })
    }

    /// Writes to a temporary sibling and renames it into place, so a failed
    /// write never clobbers an existing file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let file_name = path.file_name().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: "not a file path".into(),
        })?;
        let tmp: PathBuf = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Takes the arrays out by name, failing on any missing or extra name.
    fn into_named(self, path: &Path, expected: &[String]) -> Result<Vec<DenseArray>> {
        let mut by_name: BTreeMap<String, DenseArray> = self.arrays.into_iter().collect();
        let mut out = Vec::with_capacity(expected.len());
        for name in expected {
            out.push(by_name.remove(name).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("missing array {name}"),
            })?);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unknown array {extra}"),
            });
        }
        Ok(out)
    }

    fn meta(&self, path: &Path, key: &str) -> Result<u64> {
        self.meta.get(key).copied().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing metadata {key}"),
        })
    }
}

fn format_err(path: &Path, e: Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn tokenizer_arrays(tok: &LinearTokenizer) -> [(String, DenseArray); 2] {
    [
        ("tokenizer.weights".into(), tok.weights().clone()),
        ("tokenizer.scale".into(), DenseArray::scalar(tok.scale())),
    ]
}

fn tokenizer_from(weights: DenseArray, scale: &DenseArray) -> Result<LinearTokenizer> {
    if scale.len() != 1 {
        return Err(Error::Shape("tokenizer.scale must hold one value".into()));
    }
    LinearTokenizer::from_weights(weights, scale.values()[0])
}

/// Everything needed to sample from, evaluate, or keep training a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub tokenizer: LinearTokenizer,
    pub state: TrainState,
}

impl Checkpoint {
    fn array_names(config: &RunConfig) -> Vec<String> {
        let names = config.arch().names();
        let mut out = Vec::with_capacity(4 * names.len() + 2);
        for prefix in ["denoiser.", "ema.", "adam.m.", "adam.v."] {
            out.extend(names.iter().map(|n| format!("{prefix}{n}")));
        }
        out.push("tokenizer.weights".into());
        out.push("tokenizer.scale".into());
        out
    }

    pub fn to_file(&self) -> Result<ArrayFile> {
        let s = &self.state;
        let names = self.config.arch().names();
        let mut arrays = Vec::new();
        for (prefix, set) in [
            ("denoiser.", s.params.tensors()),
            ("ema.", s.ema.shadow.as_slice()),
            ("adam.m.", s.optimizer.first.as_slice()),
            ("adam.v.", s.optimizer.second.as_slice()),
        ] {
            arrays.extend(names.iter().zip(set).map(|(n, a)| (format!("{prefix}{n}"), a.clone())));
        }
        arrays.extend(tokenizer_arrays(&self.tokenizer));
        Ok(ArrayFile {
            config: self.config.to_toml_string()?,
            cursor: Some(RngCursor::capture(&s.rng)),
            meta: BTreeMap::from([
                ("epoch".to_string(), s.epoch as u64),
                ("step".to_string(), s.optimizer.step),
            ]),
            arrays,
        })
    }

    pub fn from_file(file: ArrayFile, path: &Path) -> Result<Self> {
        let config = RunConfig::from_toml_str(&file.config).map_err(|e| format_err(path, e))?;
        let epoch = file.meta(path, "epoch")? as usize;
        let step = file.meta(path, "step")?;
        if let Some(extra) = file.meta.keys().find(|k| !matches!(k.as_str(), "epoch" | "step")) {
            return Err(format_err(path, Error::Contract(format!("unknown metadata {extra}"))));
        }
        let cursor = file.cursor.ok_or_else(|| format_err(path, Error::Contract("missing rng cursor".into())))?;
        let arch = config.arch();
        let n = arch.names().len();
        let mut arrays = file.into_named(path, &Self::array_names(&config))?;
        let scale = arrays.pop().expect("scale listed");
        let weights = arrays.pop().expect("weights listed");
        let second = arrays.split_off(3 * n);
        let first = arrays.split_off(2 * n);
        let shadow = arrays.split_off(n);
        let build = || -> Result<Checkpoint> {
            let params = DenoiserParameters::from_tensors(arch, arrays)?;
            let ema = DenoiserParameters::from_tensors(arch, shadow)?.into_tensors();
            let first = DenoiserParameters::from_tensors(arch, first)?.into_tensors();
            let second = DenoiserParameters::from_tensors(arch, second)?.into_tensors();
            let tokenizer = tokenizer_from(weights, &scale)?;
            if tokenizer.weights().shape() != [config.tokenizer.latent_dim, config.data.data_dim] {
                return Err(Error::Shape("tokenizer does not match the configuration".into()));
            }
            let state = TrainState {
                params,
                optimizer: OptimizerState {
                    config: config.train.optimizer(),
                    first,
                    second,
                    step,
                },
                ema: EmaState {
                    decay: config.train.ema_decay,
                    shadow: ema,
                },
                rng: cursor.restore(),
                epoch,
            };
            Ok(Checkpoint {
                config,
                tokenizer,
                state,
            })
        };
        build().map_err(|e| format_err(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(ArrayFile::load(path)?, path)
    }

    /// The weights sampling should use, as chosen by `model.sample_weights`.
    pub fn sampling_params(&self) -> Result<DenoiserParameters> {
        crate::experiment::sampling_params(&self.config, &self.state)
    }
}

/// Stores encoded latents together with the tokenizer that produced them.
pub fn save_latent_cache(path: &Path, latents: &LatentDataset, tok: &LinearTokenizer) -> Result<()> {
    let labels = DenseArray::vector(latents.labels.iter().map(|y| y.value() as f32).collect())?;
    let mut arrays = vec![("latents.z".to_string(), latents.z.clone()), ("latents.labels".to_string(), labels)];
    arrays.extend(tokenizer_arrays(tok));
    ArrayFile {
        meta: BTreeMap::from([("classes".to_string(), latents.classes as u64)]),
        arrays,
        ..Default::default()
    }
    .save(path)
}

pub fn load_latent_cache(path: &Path) -> Result<(LatentDataset, LinearTokenizer)> {
    let file = ArrayFile::load(path)?;
    let classes = file.meta(path, "classes")? as usize;
    let names = ["latents.z", "latents.labels", "tokenizer.weights", "tokenizer.scale"].map(String::from);
    let [z, labels, weights, scale]: [DenseArray; 4] = file
        .into_named(path, &names)?
        .try_into()
        .expect("four names requested");
    let build = || -> Result<(LatentDataset, LinearTokenizer)> {
        let labels = labels
            .values()
            .iter()
            .map(|&v| Label::new(v as usize, classes))
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != z.rows() {
            return Err(Error::Shape("label count differs from latent count".into()));
        }
        Ok((LatentDataset { z, labels, classes }, tokenizer_from(weights, &scale)?))
    };
    build().map_err(|e| format_err(path, e))
}

/// Stores reference statistics keyed by the dataset seed they came from. The
/// mean and covariance are rounded to f32 on disk.
pub fn save_reference(path: &Path, reference: &ReferenceSet, data_seed: u64) -> Result<()> {
    let (mean, cov) = reference.stats.to_arrays()?;
    ArrayFile {
        meta: BTreeMap::from([
            ("classes".to_string(), reference.classes as u64),
            ("data_seed".to_string(), data_seed),
        ]),
        arrays: vec![
            ("reference.mean".into(), mean),
            ("reference.cov".into(), cov),
            ("reference.points".into(), reference.points.clone()),
            ("reference.class_means".into(), reference.means.clone()),
        ],
        ..Default::default()
    }
    .save(path)
}

/// Loads reference statistics, returning them with their dataset seed.
pub fn load_reference(path: &Path) -> Result<(ReferenceSet, u64)> {
    let file = ArrayFile::load(path)?;
    let classes = file.meta(path, "classes")? as usize;
    let seed = file.meta(path, "data_seed")?;
    let names = ["reference.mean", "reference.cov", "reference.points", "reference.class_means"].map(String::from);
    let [mean, cov, points, means]: [DenseArray; 4] = file
        .into_named(path, &names)?
        .try_into()
        .expect("four names requested");
    let stats = GaussianSummary::from_arrays(&mean, &cov).map_err(|e| format_err(path, e))?;
    Ok((
        ReferenceSet {
            stats,
            points,
            means,
            classes,
        },
        seed,
    ))
}
