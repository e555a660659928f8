use serde::{Deserialize, Serialize};

use super::{EncoderParams, Layer};
use crate::error::{Error, Result};

/// Target decay rate and online learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    pub tau: f64,
    pub eta: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { tau: 0.99, eta: 1e-3 }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Move the target parameters toward the online ones:
/// `xi' = tau * xi + (1 - tau) * theta`, elementwise.
///
/// `tau` may be any value in `[0, 1]`; the endpoints return the target or a
/// copy of the online weights respectively.
pub fn ema_update(target: &EncoderParams, online: &EncoderParams, tau: f64) -> Result<EncoderParams> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must lie in [0, 1], got {tau}")));
    }
    if !target.same_shape(online) {
        return Err(Error::shape("target and online encoders have different shapes"));
    }
    let blend = |xi: &f64, theta: &f64| tau * xi + (1.0 - tau) * theta;
    let layers = target
        .layers
        .iter()
        .zip(&online.layers)
        .map(|(t, o)| {
            let mut weight = t.weight.clone();
            weight.zip_mut_with(&o.weight, |xi, theta| *xi = blend(xi, theta));
            let mut bias = t.bias.clone();
            bias.zip_mut_with(&o.bias, |xi, theta| *xi = blend(xi, theta));
            Layer { weight, bias, activation: t.activation }
        })
        .collect();
    Ok(EncoderParams { layers, param_version: target.param_version + 1 })
}
