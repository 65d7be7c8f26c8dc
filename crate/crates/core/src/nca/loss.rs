use ndarray::Array2;

use super::Real;
use crate::error::{Error, Result};

/// Per-pixel class scores, pixel-major (`[pixels × c_out]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub height: usize,
    pub width: usize,
    pub data: Array2<T>,
}

/// Mean pixel-wise softmax cross-entropy and its gradient
/// `(softmax − onehot) / pixels`.
pub fn cross_entropy_loss<T: Real>(logits: &Logits<T>, target: &[u8]) -> Result<(T, Array2<T>)> {
    let (pixels, classes) = logits.data.dim();
    if target.len() != pixels {
        return Err(Error::precondition(format!(
            "target has {} pixels, logits {}",
            target.len(),
            pixels
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= classes) {
        return Err(Error::Data(format!("class index {bad} >= c_out {classes}")));
    }
    let n = T::from_usize(pixels).unwrap();
    let mut grad = Array2::<T>::zeros((pixels, classes));
    let mut total = T::zero();
    for (p, row) in logits.data.outer_iter().enumerate() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_denom = denom.ln() + max;
        let t = target[p] as usize;
        total += log_denom - row[t];
        for c in 0..classes {
            let prob = (row[c] - log_denom).exp();
            let onehot = if c == t { T::one() } else { T::zero() };
            grad[[p, c]] = (prob - onehot) / n;
        }
    }
    Ok((total / n, grad))
}

/// Predicted class per pixel; ties resolve to the lower class index.
pub fn argmax_mask<T: Real>(logits: &Logits<T>) -> Vec<u8> {
    logits
        .data
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
