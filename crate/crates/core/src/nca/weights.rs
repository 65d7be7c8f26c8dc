use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Real};
use crate::error::{Error, Result};

/// Parameters of one cell rule: `update = w2 · relu(w1 · p + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct NcaWeights<T> {
    /// `[hidden_units × 3·channels]`
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    /// `[channels × hidden_units]`
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Real> NcaWeights<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (h, c) = (config.hidden_units, config.channels);
        Self {
            w1: Array2::zeros((h, 3 * c)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((c, h)),
            b2: Array1::zeros(c),
        }
    }

    /// `w1 ~ U(±1/sqrt(fan_in))`, everything else zero, so a fresh rule is the
    /// identity map.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut w = Self::zeros(config);
        let bound = 1.0 / (config.perception_channels() as f64).sqrt();
        w.w1.mapv_inplace(|_| T::from_f64_lossy(rng.random_range(-bound..bound)));
        w
    }

    pub fn channels(&self) -> usize {
        self.w2.nrows()
    }

    pub fn hidden_units(&self) -> usize {
        self.w1.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn check_shape(&self, config: &ModelConfig) -> Result<()> {
        let (h, c) = (config.hidden_units, config.channels);
        if self.w1.dim() != (h, 3 * c)
            || self.b1.len() != h
            || self.w2.dim() != (c, h)
            || self.b2.len() != c
        {
            return Err(Error::config(format!(
                "weights (w1 {:?}, w2 {:?}) do not match config (hidden {h}, channels {c})",
                self.w1.dim(),
                self.w2.dim()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> NcaWeights<U> {
        let f = |v: &T| U::from_f64_lossy(v.to_f64_lossy());
        NcaWeights {
            w1: self.w1.map(f),
            b1: self.b1.map(f),
            w2: self.w2.map(f),
            b2: self.b2.map(f),
        }
    }

    fn scaled(&self, k: T) -> Self {
        Self {
            w1: self.w1.mapv(|v| v * k),
            b1: self.b1.mapv(|v| v * k),
            w2: self.w2.mapv(|v| v * k),
            b2: self.b2.mapv(|v| v * k),
        }
    }

    pub(crate) fn scale_in_place(&mut self, k: T) {
        *self = self.scaled(k);
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    /// Row-major `w1`, `b1`, row-major `w2`, `b2`.
    fn extend_flat(&self, out: &mut Vec<T>) {
        out.extend(self.w1.iter().copied());
        out.extend(self.b1.iter().copied());
        out.extend(self.w2.iter().copied());
        out.extend(self.b2.iter().copied());
    }

    fn from_flat(config: &ModelConfig, flat: &[T]) -> Self {
        let (h, c) = (config.hidden_units, config.channels);
        let mut at = 0;
        let mut take = |n: usize| {
            let part = &flat[at..at + n];
            at += n;
            part.to_vec()
        };
        let w1 = Array2::from_shape_vec((h, 3 * c), take(h * 3 * c)).unwrap();
        let b1 = Array1::from_vec(take(h));
        let w2 = Array2::from_shape_vec((c, h), take(c * h)).unwrap();
        let b2 = Array1::from_vec(take(c));
        Self { w1, b1, w2, b2 }
    }

    pub fn sum_squares(&self) -> T {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .map(|&v| v * v)
            .sum()
    }

    pub fn max_abs(&self) -> T {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// The coarse (θ) and fine (ω) cell rules of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageModel<T> {
    pub theta: NcaWeights<T>,
    pub omega: NcaWeights<T>,
    pub config: ModelConfig,
}

impl<T: Real> TwoStageModel<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = NcaWeights::init(&config, &mut rng);
        let omega = NcaWeights::init(&config, &mut rng);
        Self { theta, omega, config }
    }

    pub fn param_count(&self) -> usize {
        self.theta.param_count() + self.omega.param_count()
    }

    pub fn cast<U: Real>(&self) -> TwoStageModel<U> {
        TwoStageModel {
            theta: self.theta.cast(),
            omega: self.omega.cast(),
            config: self.config.clone(),
        }
    }
}

/// Tensor boundaries inside a flattened weight vector, in flatten order
/// (`θ.w1, θ.b1, θ.w2, θ.b2, ω.w1, …`). Used by per-tensor codecs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLayout {
    lengths: Vec<usize>,
}

impl SegmentLayout {
    pub fn new(lengths: Vec<usize>) -> Self {
        Self { lengths }
    }

    pub fn single(len: usize) -> Self {
        Self { lengths: vec![len] }
    }

    pub fn for_model(config: &ModelConfig) -> Self {
        let (h, c) = (config.hidden_units, config.channels);
        let stage = [h * 3 * c, h, c * h, c];
        Self { lengths: stage.iter().chain(stage.iter()).copied().collect() }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Concatenates θ then ω; within each, `w1` row-major, `b1`, `w2` row-major, `b2`.
pub fn flatten<T: Real>(model: &TwoStageModel<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(model.param_count());
    model.theta.extend_flat(&mut out);
    model.omega.extend_flat(&mut out);
    out
}

pub fn unflatten<T: Real>(vec: &[T], config: &ModelConfig) -> Result<TwoStageModel<T>> {
    let stage = config.stage_param_count();
    if vec.len() != 2 * stage {
        return Err(Error::precondition(format!(
            "weight vector has {} entries, config expects {}",
            vec.len(),
            2 * stage
        )));
    }
    Ok(TwoStageModel {
        theta: NcaWeights::from_flat(config, &vec[..stage]),
        omega: NcaWeights::from_flat(config, &vec[stage..]),
        config: config.clone(),
    })
}

/// Plain gradient descent: `w − eta·g`.
pub fn sgd_step<T: Real>(weights: &NcaWeights<T>, grads: &NcaWeights<T>, eta: T) -> NcaWeights<T> {
    NcaWeights {
        w1: &weights.w1 - &grads.w1.mapv(|g| g * eta),
        b1: &weights.b1 - &grads.b1.mapv(|g| g * eta),
        w2: &weights.w2 - &grads.w2.mapv(|g| g * eta),
        b2: &weights.b2 - &grads.b2.mapv(|g| g * eta),
    }
}
