use crate::error::{Error, Result};

/// Dice overlap `2|P∩T| / (|P| + |T|)` of one class; 1.0 when the class is
/// absent from both masks.
pub fn dice(pred: &[u8], truth: &[u8], class_id: u8) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::precondition(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (in_p, in_t) = (a == class_id, b == class_id);
        p += in_p as usize;
        t += in_t as usize;
        both += (in_p && in_t) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Per-class Dice for classes `1..classes` and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceSummary {
    pub per_class: Vec<f64>,
    pub mean_foreground: f64,
}

pub fn foreground_dice(pred: &[u8], truth: &[u8], classes: usize) -> Result<DiceSummary> {
    let per_class = (1..classes)
        .map(|c| dice(pred, truth, c as u8))
        .collect::<Result<Vec<_>>>()?;
    let mean_foreground = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
    Ok(DiceSummary { per_class, mean_foreground })
}
