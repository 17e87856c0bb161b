use std::sync::Arc;

use crate::error::{Error, Result};
use crate::latent::LatentGrid;

/// Dimension of text condition vectors.
pub const TEXT_DIM: usize = 8;

/// Structural (joint) condition.
#[derive(Debug, Clone, PartialEq)]
pub enum Structural {
    /// A guidance map shaped like the frame it conditions. Shared, since
    /// guidance clones conditions on every evaluation.
    Map(Arc<LatentGrid>),
    /// Non-negative per-component multipliers for mixture denoisers.
    Reweight(Vec<f64>),
}

/// The `(c_T, c_J)` pair fed to a denoiser. `None` on either side is the
/// null condition `∅`; a null text condition behaves as the all-zeros vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Condition {
    pub text: Option<Vec<f64>>,
    pub structural: Option<Structural>,
}

impl Condition {
    pub fn null() -> Self {
        Self::default()
    }

    pub fn text(text: Vec<f64>) -> Self {
        Self {
            text: Some(text),
            structural: None,
        }
    }

    pub fn with_structural(mut self, structural: Structural) -> Self {
        self.structural = Some(structural);
        self
    }

    pub fn without_text(&self) -> Self {
        Self {
            text: None,
            structural: self.structural.clone(),
        }
    }

    pub fn without_structural(&self) -> Self {
        Self {
            text: self.text.clone(),
            structural: None,
        }
    }

    /// The text vector, with `∅` realized as zeros.
    pub fn text_vector(&self) -> Result<Vec<f64>> {
        match &self.text {
            None => Ok(vec![0.0; TEXT_DIM]),
            Some(v) if v.len() == TEXT_DIM && v.iter().all(|x| x.is_finite()) => Ok(v.clone()),
            Some(v) => Err(Error::contract(format!(
                "text condition must have {TEXT_DIM} finite entries, got {}",
                v.len()
            ))),
        }
    }

    pub fn has_text(&self) -> bool {
        self.text
            .as_ref()
            .is_some_and(|v| v.iter().any(|x| *x != 0.0))
    }
}

/// Scales `s_T` and `s_J` of the multi-conditional guidance rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub s_text: f64,
    pub s_joint: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s_text: 6.0,
            s_joint: 0.8,
        }
    }
}

impl GuidanceConfig {
    pub fn new(s_text: f64, s_joint: f64) -> Result<Self> {
        let cfg = Self { s_text, s_joint };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s_T", self.s_text), ("s_J", self.s_joint)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}
