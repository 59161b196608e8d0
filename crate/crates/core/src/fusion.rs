//! Fusion of classifier features with pooled diffusion features, and the
//! class head on top.
//!
//! The fused feature is `W [l_f ; pool(l_d)] + b`. With the default
//! identity initialization and `l_d = 0` it reproduces `l_f`, which is the
//! backbone-only path.

use serde::{Deserialize, Serialize};

use crate::backend::DiffusionFeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Linear, LinearGrad};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierFeatures(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures(pub Vec<f64>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Width of the backbone features.
    pub classifier_dim: usize,
    /// Channel count of the diffusion feature map.
    pub diffusion_dim: usize,
    pub projection_dim: usize,
}

impl FusionConfig {
    /// Projection width equal to the backbone width.
    pub fn new(classifier_dim: usize, diffusion_dim: usize) -> Self {
        Self {
            classifier_dim,
            diffusion_dim,
            projection_dim: classifier_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.projection_dim == 0 || self.classifier_dim == 0 {
            return Err(Error::InvalidArgument("fusion dims must be positive".into()));
        }
        Ok(())
    }
}

/// Per-channel spatial mean.
pub fn pool_features(fm: &DiffusionFeatureMap) -> Vec<f64> {
    let n = (fm.height() * fm.width()) as f64;
    (0..fm.channels())
        .map(|c| fm.channel(c).iter().map(|&v| f64::from(v)).sum::<f64>() / n)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionHead {
    pub config: FusionConfig,
    pub projection: Linear,
}

impl FusionHead {
    pub fn identity(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            projection: Linear::identity(config.classifier_dim + config.diffusion_dim, config.projection_dim),
        })
    }

    fn concat(&self, lf: &[f64], ld: &[f64]) -> Result<Vec<f64>> {
        if lf.len() != self.config.classifier_dim || ld.len() != self.config.diffusion_dim {
            return Err(Error::DimMismatch(format!(
                "fusion expects ({}, {}) features, got ({}, {})",
                self.config.classifier_dim,
                self.config.diffusion_dim,
                lf.len(),
                ld.len()
            )));
        }
        Ok(lf.iter().chain(ld).copied().collect())
    }

    /// Returns `dL/dl_f`. The diffusion input is a constant of the frozen
    /// backend, so no gradient is returned for it.
    pub fn backward(&self, lf: &[f64], ld: &[f64], grad_out: &[f64], grad: &mut LinearGrad) -> Result<Vec<f64>> {
        let x = self.concat(lf, ld)?;
        let mut g = self.projection.backward(&x, grad_out, grad);
        g.truncate(self.config.classifier_dim);
        Ok(g)
    }
}

pub fn fuse(lf: &ClassifierFeatures, ld_pooled: &[f64], head: &FusionHead) -> Result<FusedFeatures> {
    let x = head.concat(&lf.0, ld_pooled)?;
    head.projection.forward(&x).map(FusedFeatures)
}

/// Affine map from features to class logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassHead {
    pub linear: Linear,
}

impl ClassHead {
    pub fn new(feature_dim: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            linear: Linear::random_with_std(feature_dim, num_classes, 0.01, seed),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.linear.out_dim
    }

    pub fn backward(&self, la: &[f64], grad_logits: &[f64], grad: &mut LinearGrad) -> Vec<f64> {
        self.linear.backward(la, grad_logits, grad)
    }
}

pub fn classify(la: &FusedFeatures, head: &ClassHead) -> Result<Vec<f64>> {
    head.linear.forward(&la.0)
}
