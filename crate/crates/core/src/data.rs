//! Synthetic paired visual/caption data with a known generating map.
//!
//! Each sample draws `raw ~ N(0, I_{d_raw})`. Caption token `t` is the
//! equal-probability bucket of the projection `z_t = ⟨w_t, raw⟩` onto a
//! fixed unit direction `w_t`:
//!
//! ```text
//! token_t = min(floor(Φ(z_t) · vocab), vocab - 1)
//! ```
//!
//! where `Φ` is the standard normal CDF, evaluated as
//! `0.5 · erfc(-z / √2)` with the rational `erfc` approximation from
//! `statrs`. When `T ≤ d_raw` the directions are orthonormal, which makes
//! the caption tokens mutually independent: a predictor that cannot see the
//! visual input is limited to chance accuracy `1 / vocab`.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::linalg;
use crate::numerics::Tensor;
use crate::rng::SplitMix64;

const DIRECTION_STREAM: u64 = 1;
const VISUAL_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub size: usize,
    pub d_raw: usize,
    /// Caption length `T`.
    pub caption_len: usize,
    pub vocab: usize,
    pub seed: u64,
    /// Std of Gaussian noise added to every raw visual vector after its
    /// caption has been derived. Zero gives clean data.
    #[serde(default)]
    pub noise_sigma: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::contract("dataset size must be at least 2 so both splits are nonempty"));
        }
        if self.d_raw == 0 || self.caption_len == 0 || self.vocab == 0 {
            return Err(Error::contract("d_raw, caption_len and vocab must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::contract(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn held_out_len(&self) -> usize {
        (self.size / 10).max(1)
    }

    pub fn train_len(&self) -> usize {
        self.size - self.held_out_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    HeldOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub raw_visual: Tensor,
    pub tokens: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Unit projection directions, one per caption position.
    pub directions: Vec<Vec<f64>>,
    pub samples: Vec<SyntheticSample>,
}

pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn quantize(z: f64, vocab: usize) -> usize {
    let bucket = (standard_normal_cdf(z) * vocab as f64).floor() as usize;
    bucket.min(vocab - 1)
}

fn caption_directions(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let mut rng = SplitMix64::derive(spec.seed, DIRECTION_STREAM);
    if spec.caption_len <= spec.d_raw {
        return linalg::orthonormal_rows(spec.caption_len, spec.d_raw, &mut rng);
    }
    (0..spec.caption_len)
        .map(|_| {
            let mut v = rng.normal_vec(spec.d_raw, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect()
}

/// Caption tokens determined by a clean raw visual vector.
pub fn caption_for(directions: &[Vec<f64>], raw: &[f64], vocab: usize) -> Vec<usize> {
    directions
        .iter()
        .map(|w| quantize(w.iter().zip(raw).map(|(a, b)| a * b).sum(), vocab))
        .collect()
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let directions = caption_directions(spec);
    let mut visual_rng = SplitMix64::derive(spec.seed, VISUAL_STREAM);
    let mut noise_rng = SplitMix64::derive(spec.seed, NOISE_STREAM);
    let train_len = spec.train_len();
    let samples = (0..spec.size)
        .map(|i| {
            let raw = visual_rng.normal_vec(spec.d_raw, 1.0);
            let tokens = caption_for(&directions, &raw, spec.vocab);
            let raw = if spec.noise_sigma > 0.0 {
                raw.iter().map(|x| x + spec.noise_sigma * noise_rng.normal()).collect()
            } else {
                raw
            };
            SyntheticSample {
                raw_visual: Tensor::from_parts(vec![spec.d_raw], raw),
                tokens,
                split: if i < train_len { Split::Train } else { Split::HeldOut },
            }
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        directions,
        samples,
    })
}

/// Adds `sigma · N(0, 1)` to every raw visual entry; tokens are untouched.
pub fn add_noise(sample: &SyntheticSample, sigma: f64, seed: u64) -> Result<SyntheticSample> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::contract(format!("noise sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(sample.clone());
    }
    let mut rng = SplitMix64::new(seed);
    let raw = sample.raw_visual.data().iter().map(|x| x + sigma * rng.normal()).collect();
    Ok(SyntheticSample {
        raw_visual: Tensor::from_parts(sample.raw_visual.shape().to_vec(), raw),
        tokens: sample.tokens.clone(),
        split: sample.split,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SyntheticSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn train(&self) -> Vec<&SyntheticSample> {
        self.split(Split::Train)
    }

    pub fn held_out(&self) -> Vec<&SyntheticSample> {
        self.split(Split::HeldOut)
    }

    /// Exports as an [`Archive`] with tensors `raw_visual [N×d_raw]`,
    /// `tokens [N×T]` (ids stored as f64), `split [N]` (0 train, 1 held out)
    /// and `directions [T×d_raw]`.
    pub fn to_archive(&self) -> Result<Archive> {
        let n = self.samples.len();
        let t = self.spec.caption_len;
        let raw: Vec<f64> = self.samples.iter().flat_map(|s| s.raw_visual.data().iter().copied()).collect();
        let tokens: Vec<f64> = self.samples.iter().flat_map(|s| s.tokens.iter().map(|&x| x as f64)).collect();
        let split: Vec<f64> = self
            .samples
            .iter()
            .map(|s| if s.split == Split::Train { 0.0 } else { 1.0 })
            .collect();
        let meta = serde_json::to_string(&self.spec).expect("spec serialises");
        Ok(Archive {
            meta,
            tensors: vec![
                ("raw_visual".into(), Tensor::new(&[n, self.spec.d_raw], raw)?),
                ("tokens".into(), Tensor::new(&[n, t], tokens)?),
                ("split".into(), Tensor::new(&[n], split)?),
                ("directions".into(), Tensor::new(&[t, self.spec.d_raw], self.directions.concat())?),
            ],
        })
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let spec: DatasetSpec = serde_json::from_str(&archive.meta)
            .map_err(|e| Error::Format { check: format!("dataset metadata: {e}"), offset: 0 })?;
        spec.validate()?;
        let get = |name: &str| {
            archive.get(name).ok_or_else(|| Error::Format {
                check: format!("missing tensor {name}"),
                offset: 0,
            })
        };
        let raw = get("raw_visual")?;
        let tokens = get("tokens")?;
        let split = get("split")?;
        let directions = get("directions")?;
        let (n, t, d) = (spec.size, spec.caption_len, spec.d_raw);
        if raw.shape() != [n, d] || tokens.shape() != [n, t] || split.shape() != [n] || directions.shape() != [t, d] {
            return Err(Error::Format {
                check: "dataset tensor shapes disagree with metadata".into(),
                offset: 0,
            });
        }
        let samples = (0..n)
            .map(|i| {
                let ids = tokens.row(i).iter().map(|&x| x as usize).collect::<Vec<_>>();
                if ids.iter().any(|&id| id >= spec.vocab) {
                    return Err(Error::Index {
                        what: "vocabulary",
                        index: *ids.iter().max().unwrap(),
                        bound: spec.vocab,
                    });
                }
                Ok(SyntheticSample {
                    raw_visual: Tensor::new(&[d], raw.row(i).to_vec())?,
                    tokens: ids,
                    split: if split.data()[i] == 0.0 { Split::Train } else { Split::HeldOut },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            directions: (0..t).map(|r| directions.row(r).to_vec()).collect(),
            spec,
            samples,
        })
    }
}

/// Seeded minibatch order over a fixed pool of sample indices. The order of
/// epoch `e` is a Fisher-Yates shuffle driven by `SplitMix64::derive(seed ^ SHUFFLE, e)`.
#[derive(Debug, Clone)]
pub struct Batcher {
    pool: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(pool: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if pool.is_empty() {
            return Err(Error::contract("cannot batch an empty split"));
        }
        Ok(Self { pool, batch_size, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len().div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order = self.pool.clone();
        SplitMix64::derive(self.seed ^ SHUFFLE_STREAM, epoch).shuffle(&mut order);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Batch consumed at a global step, cycling through epochs.
    pub fn batch_at(&self, step: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let mut e = self.epoch((step / per) as u64);
        e.swap_remove(step % per)
    }
}

/// Iterator over one epoch of batches from the training split.
pub fn batches<'a>(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Result<impl Iterator<Item = Vec<&'a SyntheticSample>> + 'a> {
    let pool: Vec<usize> = (0..dataset.samples.len())
        .filter(|&i| dataset.samples[i].split == Split::Train)
        .collect();
    let batcher = Batcher::new(pool, batch_size, seed)?;
    Ok(batcher
        .epoch(0)
        .into_iter()
        .map(move |idx| idx.into_iter().map(|i| &dataset.samples[i]).collect()))
}
