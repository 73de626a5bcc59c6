//! Synthetic clean / low-light image pairs.
//!
//! A scene is a linear luminance ramp with a few coloured rectangles and
//! faint texture. Its low-light version is `clamp(clean^γ · s + n)` with
//! `γ ~ U[2, 3]`, `s ~ U[0.1, 0.3]` and Gaussian noise of standard deviation
//! `σ ~ U[0.01, 0.05]`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{read_store, write_store};
use crate::error::{Error, Result};
use crate::numerics::{child_seed, Rng, Tensor};

pub const TEXTURE_AMPLITUDE: f64 = 0.02;
pub const DEFAULT_TRAIN: usize = 64;
pub const DEFAULT_VAL: usize = 16;
pub const DEFAULT_SIZE: usize = 32;

/// Drawn degradation parameters; replaying them reproduces the low image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Degradation {
    pub gamma: f64,
    pub scale: f64,
    pub sigma: f64,
    pub noise_seed: u64,
}

impl Degradation {
    pub const IDENTITY: Degradation = Degradation {
        gamma: 1.0,
        scale: 1.0,
        sigma: 0.0,
        noise_seed: 0,
    };

    pub fn apply(&self, clean: &Tensor) -> Tensor {
        let mut noise = Rng::new(self.noise_seed);
        clean.map(|v| {
            let n = self.sigma * noise.normal();
            (v.powf(self.gamma) * self.scale + n).clamp(0.0, 1.0)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub clean: Tensor,
    pub low: Tensor,
    pub seed: u64,
    pub degradation: Degradation,
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Random clean scene `[3, h, w]` in `[0, 1]`.
pub fn make_scene(rng: &mut Rng, h: usize, w: usize) -> Result<Tensor> {
    if h < 8 || w < 8 {
        return Err(Error::Contract(format!("scene must be at least 8x8, got {h}x{w}")));
    }
    let angle = rng.uniform(0.0, std::f64::consts::TAU);
    let (lo, hi) = (rng.uniform(0.0, 0.5), rng.uniform(0.5, 1.0));
    let (dx, dy) = (angle.cos(), angle.sin());
    let proj = |y: usize, x: usize| dx * x as f64 / (w - 1) as f64 + dy * y as f64 / (h - 1) as f64;
    let corners = [proj(0, 0), proj(0, w - 1), proj(h - 1, 0), proj(h - 1, w - 1)];
    let pmin = corners.iter().copied().fold(f64::INFINITY, f64::min);
    let pmax = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (pmax - pmin).max(1e-12);

    let mut img = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let t = (proj(y, x) - pmin) / span;
            let lum = lo + (hi - lo) * t;
            for c in 0..3 {
                img.set(&[c, y, x], lum);
            }
        }
    }

    let rects = rng.int_inclusive(2, 5);
    for _ in 0..rects {
        let color = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
        let (mut y0, mut y1) = (rng.int_inclusive(0, h - 1), rng.int_inclusive(0, h - 1));
        let (mut x0, mut x1) = (rng.int_inclusive(0, w - 1), rng.int_inclusive(0, w - 1));
        if y0 > y1 {
            std::mem::swap(&mut y0, &mut y1);
        }
        if x0 > x1 {
            std::mem::swap(&mut x0, &mut x1);
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                for (c, &v) in color.iter().enumerate() {
                    img.set(&[c, y, x], v);
                }
            }
        }
    }

    for v in img.data_mut() {
        *v = clamp01(*v + TEXTURE_AMPLITUDE * rng.uniform(-1.0, 1.0));
    }
    Ok(img)
}

/// Draw degradation parameters and apply them.
pub fn degrade(clean: &Tensor, rng: &mut Rng) -> (Tensor, Degradation) {
    let record = Degradation {
        gamma: rng.uniform(2.0, 3.0),
        scale: rng.uniform(0.1, 0.3),
        sigma: rng.uniform(0.01, 0.05),
        noise_seed: rng.next_u64(),
    };
    (record.apply(clean), record)
}

pub fn make_pair(seed: u64, h: usize, w: usize) -> Result<ScenePair> {
    let mut rng = Rng::new(seed);
    let clean = make_scene(&mut rng, h, w)?;
    let (low, degradation) = degrade(&clean, &mut rng);
    Ok(ScenePair {
        clean,
        low,
        seed,
        degradation,
    })
}

/// Pairs `first..first + count` of the corpus rooted at `seed`; pair `i`
/// uses `child_seed(seed, i)`.
pub fn make_pairs(seed: u64, first: usize, count: usize, h: usize, w: usize) -> Result<Vec<ScenePair>> {
    (first..first + count)
        .map(|i| make_pair(child_seed(seed, i as u64), h, w))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub train: Vec<ScenePair>,
    pub val: Vec<ScenePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairIndex {
    seed: u64,
    degradation: Degradation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusIndex {
    kind: String,
    seed: u64,
    height: usize,
    width: usize,
    train: Vec<PairIndex>,
    val: Vec<PairIndex>,
}

const CORPUS_KIND: &str = "paired-corpus";

impl Corpus {
    /// Training pairs take indices `0..train`, validation pairs follow.
    pub fn generate(seed: u64, train: usize, val: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            seed,
            height: h,
            width: w,
            train: make_pairs(seed, 0, train, h, w)?,
            val: make_pairs(seed, train, val, h, w)?,
        })
    }

    pub fn train_pairs(&self) -> Vec<(Tensor, Tensor)> {
        self.train.iter().map(|p| (p.low.clone(), p.clean.clone())).collect()
    }

    pub fn val_pairs(&self) -> Vec<(Tensor, Tensor)> {
        self.val.iter().map(|p| (p.low.clone(), p.clean.clone())).collect()
    }

    /// Export as a tensor store with a JSON index in the manifest meta.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (split, pairs) in [("train", &self.train), ("val", &self.val)] {
            for (i, p) in pairs.iter().enumerate() {
                tensors.push((format!("{split}.{i}.low"), p.low.clone()));
                tensors.push((format!("{split}.{i}.clean"), p.clean.clone()));
            }
        }
        let index = |pairs: &[ScenePair]| -> Vec<PairIndex> {
            pairs
                .iter()
                .map(|p| PairIndex {
                    seed: p.seed,
                    degradation: p.degradation,
                })
                .collect()
        };
        let meta = CorpusIndex {
            kind: CORPUS_KIND.to_string(),
            seed: self.seed,
            height: self.height,
            width: self.width,
            train: index(&self.train),
            val: index(&self.val),
        };
        write_store(dir, &tensors, json!(meta))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (tensors, meta) = read_store(dir)?;
        let index: CorpusIndex = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("not a corpus directory: {e}")))?;
        if index.kind != CORPUS_KIND {
            return Err(Error::Checkpoint(format!("unexpected store kind '{}'", index.kind)));
        }
        let mut iter = tensors.into_iter();
        let mut take = |split: &str, entries: &[PairIndex]| -> Result<Vec<ScenePair>> {
            let mut out = Vec::with_capacity(entries.len());
            for (i, e) in entries.iter().enumerate() {
                let mut next = |what: &str| -> Result<Tensor> {
                    let expected = format!("{split}.{i}.{what}");
                    match iter.next() {
                        Some((name, t)) if name == expected => Ok(t),
                        _ => Err(Error::Checkpoint(format!("missing tensor {expected}"))),
                    }
                };
                let low = next("low")?;
                let clean = next("clean")?;
                out.push(ScenePair {
                    clean,
                    low,
                    seed: e.seed,
                    degradation: e.degradation,
                });
            }
            Ok(out)
        };
        let train = take("train", &index.train)?;
        let val = take("val", &index.val)?;
        Ok(Self {
            seed: index.seed,
            height: index.height,
            width: index.width,
            train,
            val,
        })
    }
}
