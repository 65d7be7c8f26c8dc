use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-step weight-gradient contributions are combined during BPTT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradReduction {
    /// Exact gradient of the unrolled loss.
    #[default]
    Sum,
    /// Sum divided by the number of steps of the owning stage.
    MeanOverSteps,
}

impl GradReduction {
    pub(crate) fn code(self) -> u8 {
        match self {
            GradReduction::Sum => 0,
            GradReduction::MeanOverSteps => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(GradReduction::Sum),
            1 => Ok(GradReduction::MeanOverSteps),
            other => Err(Error::format(format!("unknown gradient reduction code {other}"))),
        }
    }
}

/// Shape and schedule of the two-stage NCA.
///
/// Channel layout of every state grid is `[input | output | hidden]`: the
/// first `c_in` channels hold the conditioning image, the next `c_out` are the
/// per-class logits and the remainder are free hidden channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub hidden_units: usize,
    pub t0: usize,
    pub t1: usize,
    pub fire_rate: f64,
    pub downscale_factor: usize,
    pub eta: f64,
    pub grad_reduction: GradReduction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            c_in: 1,
            c_out: 2,
            hidden_units: 64,
            t0: 20,
            t1: 40,
            fire_rate: 0.5,
            downscale_factor: 4,
            eta: 1e-3,
            grad_reduction: GradReduction::Sum,
        }
    }
}

impl ModelConfig {
    pub fn c_hidden(&self) -> usize {
        self.channels.saturating_sub(self.c_in + self.c_out)
    }

    pub fn perception_channels(&self) -> usize {
        3 * self.channels
    }

    /// Parameters of one cell rule (θ or ω).
    pub fn stage_param_count(&self) -> usize {
        let h = self.hidden_units;
        let c = self.channels;
        h * 3 * c + h + c * h + c
    }

    /// Parameters of the full two-stage model.
    pub fn param_count(&self) -> usize {
        2 * self.stage_param_count()
    }

    /// Checks structural invariants. `t0`/`t1` may be zero only when
    /// `allow_empty_stages` is set (used by tests that bypass a stage).
    pub fn validate(&self) -> Result<()> {
        self.validate_inner(false)
    }

    pub fn validate_allowing_empty_stages(&self) -> Result<()> {
        self.validate_inner(true)
    }

    fn validate_inner(&self, allow_empty_stages: bool) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::config("model.c_in and model.c_out must be >= 1"));
        }
        if self.c_in + self.c_out >= self.channels {
            return Err(Error::config(format!(
                "model.channels: {} leaves no hidden channel after c_in={} and c_out={}",
                self.channels, self.c_in, self.c_out
            )));
        }
        if self.hidden_units == 0 {
            return Err(Error::config("model.hidden_units must be >= 1"));
        }
        if !allow_empty_stages && (self.t0 == 0 || self.t1 == 0) {
            return Err(Error::config("model.t0 and model.t1 must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.fire_rate) {
            return Err(Error::config(format!(
                "model.fire_rate: {} is not a probability",
                self.fire_rate
            )));
        }
        if self.downscale_factor < 2 {
            return Err(Error::config("model.downscale_factor must be >= 2"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("model.eta must be a positive finite number"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count_matches_layer_arithmetic() {
        let cfg = ModelConfig::default();
        let per_stage = 64 * 48 + 64 + 16 * 64 + 16;
        assert_eq!(cfg.stage_param_count(), per_stage);
        assert_eq!(cfg.param_count(), 2 * per_stage);
        assert!(cfg.param_count() < 80_000);
    }

    #[test]
    fn rejects_channel_overflow() {
        let cfg = ModelConfig { channels: 3, ..ModelConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_steps_only_with_override() {
        let cfg = ModelConfig { t0: 0, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(cfg.validate_allowing_empty_stages().is_ok());
    }
}
