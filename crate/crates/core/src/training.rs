//! Local optimisation loop shared by clients and tests.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::metrics::{foreground_dice, DiceSummary};
use crate::nca::{
    argmax_mask, backward_bptt, cross_entropy_loss, forward, sgd_step, Gradients, Image, Real,
    TwoStageModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub local_epochs: usize,
    /// Samples whose gradients are averaged before one SGD step.
    pub batch_size: usize,
    /// Fire every cell on every step (no stochastic updates).
    pub deterministic: bool,
    /// Rescale each batch gradient so its global L2 norm (θ and ω together)
    /// does not exceed this value. `None` applies the raw gradient.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { local_epochs: 1, batch_size: 1, deterministic: false, grad_clip: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("train.grad_clip must be a positive number"));
            }
        }
        Ok(())
    }
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

pub fn sample_image<T: Real>(sample: &SegSample) -> Result<Image<T>> {
    Image::from_gray(sample.height, sample.width, &sample.image)
}

/// Loss and gradients of one sample.
pub fn sample_gradients<T: Real>(
    model: &TwoStageModel<T>,
    sample: &SegSample,
    seed: u64,
    deterministic: bool,
) -> Result<(T, Gradients<T>)> {
    let image = sample_image(sample)?;
    let (logits, tape) = forward(model, &image, seed, deterministic)?;
    let (loss, dlogits) = cross_entropy_loss(&logits, &sample.mask)?;
    let grads = backward_bptt(model, &tape, &dlogits)?;
    Ok((loss, grads))
}

/// Runs `local_epochs` of mini-batch SGD over `shard`. Returns the mean loss
/// of the last epoch (NaN when no epoch ran).
///
/// Sample order and fire masks depend only on `seed`.
pub fn train_local<T: Real>(
    model: &mut TwoStageModel<T>,
    shard: &[SegSample],
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    config.validate()?;
    let eta = T::from_f64_lossy(model.config.eta);
    let mut last_loss = f64::NAN;
    for epoch in 0..config.local_epochs {
        let mut order: Vec<usize> = (0..shard.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64])));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc = Gradients::zeros(&model.config);
            for &i in batch {
                let sample_seed = mix_seed(&[seed, epoch as u64, i as u64]);
                let (loss, grads) = sample_gradients(model, &shard[i], sample_seed, config.deterministic)?;
                total += loss.to_f64_lossy();
                acc.accumulate(&grads);
            }
            if batch.len() > 1 {
                acc.scale(T::one() / T::from_usize(batch.len()).unwrap());
            }
            if let Some(limit) = config.grad_clip {
                let norm = acc.l2_norm().to_f64_lossy();
                if norm > limit {
                    acc.scale(T::from_f64_lossy(limit / norm));
                }
            }
            model.theta = sgd_step(&model.theta, &acc.theta, eta);
            model.omega = sgd_step(&model.omega, &acc.omega, eta);
        }
        last_loss = total / shard.len().max(1) as f64;
    }
    Ok(last_loss)
}

/// Mean foreground Dice over `samples` (per-class values averaged over samples).
pub fn evaluate<T: Real>(
    model: &TwoStageModel<T>,
    samples: &[SegSample],
    seed: u64,
    deterministic: bool,
) -> Result<DiceSummary> {
    let classes = model.config.c_out;
    let mut per_class = vec![0.0; classes.saturating_sub(1)];
    for (i, sample) in samples.iter().enumerate() {
        let image = sample_image(sample)?;
        let (logits, _) = forward(model, &image, mix_seed(&[seed, i as u64]), deterministic)?;
        let pred = argmax_mask(&logits);
        let d = foreground_dice(&pred, &sample.mask, classes)?;
        for (acc, v) in per_class.iter_mut().zip(d.per_class) {
            *acc += v;
        }
    }
    let n = samples.len().max(1) as f64;
    per_class.iter_mut().for_each(|v| *v /= n);
    let mean_foreground = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
    Ok(DiceSummary { per_class, mean_foreground })
}
