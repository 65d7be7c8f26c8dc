//! Synthetic segmentation data and client partitioning.
//!
//! Each sample is a noisy grayscale image containing one filled, rotated
//! ellipse per foreground class. Samples carry a `domain` index; domains shift
//! intensity and noise level so clients can be made non-IID.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f32>,
    /// Row-major class indices.
    pub mask: Vec<u8>,
    pub domain: u32,
}

impl SegSample {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m != 0).count() as f64 / self.mask.len() as f64
    }

    pub fn mean_intensity(&self) -> f64 {
        self.image.iter().map(|&v| v as f64).sum::<f64>() / self.image.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    /// Number of classes including background.
    pub classes: usize,
    /// Allowed range of the foreground area fraction of each sample.
    pub fg_fraction_min: f64,
    pub fg_fraction_max: f64,
    pub background: f64,
    pub foreground: f64,
    pub noise_std: f64,
    /// Sample `i` belongs to domain `i % domains`.
    pub domains: usize,
    /// Added to both intensities per domain index.
    pub intensity_shift: f64,
    /// Added to the noise level per domain index.
    pub noise_shift: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            samples: 60,
            height: 64,
            width: 64,
            classes: 2,
            fg_fraction_min: 0.08,
            fg_fraction_max: 0.30,
            background: 0.25,
            foreground: 0.65,
            noise_std: 0.05,
            domains: 1,
            intensity_shift: 0.0,
            noise_shift: 0.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: &str| Err(Error::config(format!("dataset.{field}: {msg}")));
        if self.samples == 0 {
            return err("samples", "must be >= 1");
        }
        if self.height < 8 || self.width < 8 {
            return err("height", "images must be at least 8x8");
        }
        if self.classes < 2 || self.classes > 255 {
            return err("classes", "must be in [2, 255]");
        }
        if !(0.0 < self.fg_fraction_min && self.fg_fraction_min <= self.fg_fraction_max && self.fg_fraction_max < 0.6) {
            return err("fg_fraction_min", "need 0 < fg_fraction_min <= fg_fraction_max < 0.6");
        }
        if self.domains == 0 {
            return err("domains", "must be >= 1");
        }
        if self.noise_std < 0.0 || self.noise_shift < 0.0 {
            return err("noise_std", "noise levels must be non-negative");
        }
        let top = self.domains.saturating_sub(1) as f64 * self.intensity_shift;
        for (name, v) in [("background", self.background), ("foreground", self.foreground)] {
            if !(0.0..=1.0).contains(&v) || !(0.0..=1.0).contains(&(v + top)) {
                return err(name, "intensity leaves [0, 1] for some domain");
            }
        }
        Ok(())
    }
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Rasterizes a filled ellipse; returns covered pixel indices.
fn ellipse(h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64, angle: f64) -> Vec<usize> {
    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                out.push(y * w + x);
            }
        }
    }
    out
}

fn generate_mask(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let fg_classes = spec.classes - 1;
    loop {
        let target = rng.random_range(spec.fg_fraction_min..=spec.fg_fraction_max);
        let mut mask = vec![0u8; h * w];
        for class in 1..=fg_classes {
            let area = target / fg_classes as f64 * (h * w) as f64;
            let aspect: f64 = rng.random_range(0.6..1.6);
            let rx = (area / (std::f64::consts::PI * aspect)).sqrt();
            let ry = rx * aspect;
            let reach = rx.max(ry) + 1.0;
            let lo_y = reach.min(h as f64 / 2.0);
            let lo_x = reach.min(w as f64 / 2.0);
            let cy = rng.random_range(lo_y..=(h as f64 - lo_y));
            let cx = rng.random_range(lo_x..=(w as f64 - lo_x));
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            for p in ellipse(h, w, cy, cx, ry, rx, angle) {
                mask[p] = class as u8;
            }
        }
        let frac = mask.iter().filter(|&&m| m != 0).count() as f64 / (h * w) as f64;
        if (spec.fg_fraction_min..=spec.fg_fraction_max).contains(&frac) {
            return mask;
        }
    }
}

fn generate_sample(spec: &DatasetSpec, seed: u64, index: usize) -> SegSample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, index));
    let domain = index % spec.domains;
    let shift = domain as f64 * spec.intensity_shift;
    let sigma = spec.noise_std + domain as f64 * spec.noise_shift;
    let mask = generate_mask(spec, &mut rng);
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).unwrap());
    let fg_classes = (spec.classes - 1) as f64;
    let image = mask
        .iter()
        .map(|&m| {
            // Extra foreground classes get evenly spaced brighter levels.
            let base = if m == 0 {
                spec.background
            } else {
                spec.background + (spec.foreground - spec.background) * m as f64 / fg_classes
            };
            let n = noise.map_or(0.0, |d| d.sample(&mut rng));
            (base + shift + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    SegSample { height: spec.height, width: spec.width, image, mask, domain: domain as u32 }
}

/// Deterministic per `(spec, seed)`; sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<SegSample>> {
    spec.validate()?;
    Ok((0..spec.samples).map(|i| generate_sample(spec, seed, i)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    /// Random split; shard sizes differ by at most one.
    #[default]
    Uniform,
    /// Client `c` receives the training samples whose `domain % n_clients == c`.
    ByDomain,
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<Vec<SegSample>>,
    pub test: Vec<SegSample>,
}

/// Splits off a held-out test set (`test_fraction` of the samples, rounded),
/// then distributes the rest over `n_clients` disjoint shards.
pub fn partition(
    dataset: &[SegSample],
    n_clients: usize,
    strategy: PartitionStrategy,
    test_fraction: f64,
    seed: u64,
) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::config("protocol.clients must be >= 1"));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("dataset.test_fraction must be in [0, 1)"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5A17));
    let n_test = (dataset.len() as f64 * test_fraction).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);
    if train_idx.len() < n_clients {
        return Err(Error::config(format!(
            "{} training samples cannot cover {n_clients} clients",
            train_idx.len()
        )));
    }

    let mut shards = vec![Vec::new(); n_clients];
    match strategy {
        PartitionStrategy::Uniform => {
            for (k, &i) in train_idx.iter().enumerate() {
                shards[k % n_clients].push(dataset[i].clone());
            }
        }
        PartitionStrategy::ByDomain => {
            for &i in train_idx {
                shards[dataset[i].domain as usize % n_clients].push(dataset[i].clone());
            }
            if let Some(c) = shards.iter().position(|s| s.is_empty()) {
                return Err(Error::config(format!("client {c} received no samples under by_domain partitioning")));
            }
        }
    }
    let test = test_idx.iter().map(|&i| dataset[i].clone()).collect();
    Ok(Partition { shards, test })
}

const CACHE_MAGIC: &[u8; 4] = b"FNDS";
const CACHE_VERSION: u16 = 1;

/// Writes one split.
///
/// Layout (little-endian): magic `FNDS`, version u16, sample count u32,
/// height u32, width u32; then per sample: domain u32, `height·width` f32
/// image values, `height·width` u8 mask values.
pub fn write_split<W: Write>(mut w: W, samples: &[SegSample]) -> Result<()> {
    let (h, wd) = samples.first().map_or((0, 0), |s| (s.height, s.width));
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    w.write_all(&(h as u32).to_le_bytes())?;
    w.write_all(&(wd as u32).to_le_bytes())?;
    for s in samples {
        if (s.height, s.width) != (h, wd) {
            return Err(Error::precondition("all samples of a split must share dimensions"));
        }
        w.write_all(&s.domain.to_le_bytes())?;
        for v in &s.image {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&s.mask)?;
    }
    Ok(())
}

pub fn read_split<R: Read>(mut r: R) -> Result<Vec<SegSample>> {
    let mut head = [0u8; 18];
    r.read_exact(&mut head).map_err(|_| Error::format("dataset cache header truncated"))?;
    if &head[..4] != CACHE_MAGIC {
        return Err(Error::format("not a dataset cache file"));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != CACHE_VERSION {
        return Err(Error::format(format!("unsupported dataset cache version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap()) as usize;
    let (count, h, w) = (u32_at(6), u32_at(10), u32_at(14));
    let mut out = Vec::with_capacity(count);
    let mut img_bytes = vec![0u8; 4 * h * w];
    for _ in 0..count {
        let mut dom = [0u8; 4];
        r.read_exact(&mut dom).map_err(|_| Error::format("dataset cache truncated"))?;
        r.read_exact(&mut img_bytes).map_err(|_| Error::format("dataset cache truncated"))?;
        let mut mask = vec![0u8; h * w];
        r.read_exact(&mut mask).map_err(|_| Error::format("dataset cache truncated"))?;
        let image = img_bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(SegSample { height: h, width: w, image, mask, domain: u32::from_le_bytes(dom) });
    }
    Ok(out)
}

pub fn save_split(path: &Path, samples: &[SegSample]) -> Result<()> {
    let mut buf = Vec::new();
    write_split(&mut buf, samples)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<Vec<SegSample>> {
    read_split(std::fs::read(path)?.as_slice())
}
