//! Pipeline configuration, read from JSON. Missing keys take their defaults.

use serde::{Deserialize, Serialize};

use crate::error::{DsmError, Result};
use crate::features::{FeatureCaps, FeatureParams, PoolMode};
use crate::global::Pooling;
use crate::matcher::MatchParams;
use crate::mser::DetectorParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Mac,
    Gem,
}

/// How the index chooses its whitening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WhiteningMode {
    /// Supervised with a pairs file, else PCA when `n > k`, else none.
    Auto,
    None,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pooling: PoolingKind,
    pub gem_p: f64,
    pub budget: usize,
    pub caps: FeatureCaps,
    pub delta_fraction: f64,
    pub nms_iou: f64,
    pub rerank_top: usize,
    pub err_px: f64,
    pub scale_max: f64,
    pub knn_k: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub seeds_pool: usize,
    pub seeds_top: usize,
    pub whitening: WhiteningMode,
    /// Build the k-NN graph at index time.
    pub diffusion: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            pooling: PoolingKind::Gem,
            gem_p: 3.0,
            budget: 512,
            caps: FeatureCaps::default(),
            delta_fraction: 0.6,
            nms_iou: 0.2,
            rerank_top: 100,
            err_px: 2.0,
            scale_max: 3.0,
            knn_k: 50,
            alpha: 0.99,
            gamma: 3.0,
            seeds_pool: 10,
            seeds_top: 5,
            whitening: WhiteningMode::Auto,
            diffusion: true,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Config = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(DsmError::invalid(format!("config: {what}")));
        if self.pooling == PoolingKind::Gem && !(self.gem_p >= 1.0 && self.gem_p.is_finite()) {
            return bad("gem_p must be >= 1");
        }
        if self.budget == 0 {
            return bad("budget must be positive");
        }
        if !(self.delta_fraction > 0.0 && self.delta_fraction < 1.0) {
            return bad("delta_fraction must lie in (0, 1)");
        }
        if !(self.nms_iou >= 0.0 && self.nms_iou <= 1.0) {
            return bad("nms_iou must lie in [0, 1]");
        }
        if !(self.err_px > 0.0) || !(self.scale_max >= 1.0) {
            return bad("err_px must be positive and scale_max at least 1");
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        Ok(())
    }

    pub fn global_pooling(&self) -> Pooling {
        match self.pooling {
            PoolingKind::Mac => Pooling::Mac,
            PoolingKind::Gem => Pooling::Gem(self.gem_p),
        }
    }

    pub fn feature_params(&self) -> FeatureParams {
        FeatureParams { caps: self.caps, budget: self.budget, nms_iou: self.nms_iou, pool: PoolMode::Max }
    }

    pub fn detector_params(&self, delta: f64) -> DetectorParams {
        DetectorParams { delta, ..Default::default() }
    }

    pub fn match_params(&self) -> MatchParams {
        MatchParams { err_px: self.err_px, scale_max: self.scale_max, ..Default::default() }
    }
}
