//! Ellipse features from MSER regions, grouped per channel.
//!
//! Every channel of the activation tensor acts as a visual word: a feature
//! only ever matches features detected in the same channel.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mser::{detect_msers, DetectorParams, MapView, Region};
use crate::tensor::TensorSet;

/// Variance of a uniform distribution on a unit interval.
pub const PIXEL_VARIANCE: f64 = 1.0 / 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Database,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "p")]
pub enum PoolMode {
    Max,
    Mean,
    Gem(f64),
}

/// Per-(channel, scale) limits on the number of detected regions; maps with
/// more detections than the cap are dropped entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureCaps {
    pub query: usize,
    pub database: usize,
}

impl Default for FeatureCaps {
    fn default() -> Self {
        FeatureCaps { query: 20, database: 10 }
    }
}

impl FeatureCaps {
    pub fn for_role(&self, role: Role) -> usize {
        match role {
            Role::Query => self.query,
            Role::Database => self.database,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureParams {
    pub caps: FeatureCaps,
    pub budget: usize,
    pub nms_iou: f64,
    pub pool: PoolMode,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams { caps: FeatureCaps::default(), budget: 512, nms_iou: 0.2, pool: PoolMode::Max }
    }
}

/// An ellipse feature `(mu, sigma, strength)` found in one channel at one scale.
///
/// Coordinates are (col, row) in the activation grid of its own scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFeature {
    pub mu: [f64; 2],
    /// Upper triangle of the covariance: (cc, cr, rr).
    pub sigma: [f64; 3],
    pub strength: f64,
    pub channel: u32,
    pub scale_index: u8,
}

impl LocalFeature {
    pub fn det_sigma(&self) -> f64 {
        self.sigma[0] * self.sigma[2] - self.sigma[1] * self.sigma[1]
    }

    /// Axis-aligned box `[x0, y0, x1, y1]` enclosing the ellipse at two standard deviations.
    pub fn bbox(&self) -> [f64; 4] {
        let hx = 2.0 * self.sigma[0].sqrt();
        let hy = 2.0 * self.sigma[2].sqrt();
        [self.mu[0] - hx, self.mu[1] - hy, self.mu[0] + hx, self.mu[1] + hy]
    }

    /// Rounds every field through `f32`, the precision features are stored at.
    pub fn to_storage_precision(self) -> Self {
        let r = |v: f64| v as f32 as f64;
        LocalFeature {
            mu: [r(self.mu[0]), r(self.mu[1])],
            sigma: [r(self.sigma[0]), r(self.sigma[1]), r(self.sigma[2])],
            strength: r(self.strength),
            ..self
        }
    }
}

/// Strength descending, then scale, channel, position and shape ascending.
pub fn canonical_order(a: &LocalFeature, b: &LocalFeature) -> Ordering {
    b.strength
        .total_cmp(&a.strength)
        .then(a.scale_index.cmp(&b.scale_index))
        .then(a.channel.cmp(&b.channel))
        .then(a.mu[0].total_cmp(&b.mu[0]))
        .then(a.mu[1].total_cmp(&b.mu[1]))
        .then(a.sigma[0].total_cmp(&b.sigma[0]))
        .then(a.sigma[1].total_cmp(&b.sigma[1]))
        .then(a.sigma[2].total_cmp(&b.sigma[2]))
}

/// Features of one image, one list per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCollection {
    pub image_id: String,
    pub role: Role,
    pub per_channel: Vec<Vec<LocalFeature>>,
}

impl FeatureCollection {
    pub fn empty(image_id: impl Into<String>, role: Role, channels: usize) -> Self {
        FeatureCollection { image_id: image_id.into(), role, per_channel: vec![Vec::new(); channels] }
    }

    /// Groups `features` by channel; order inside a channel is canonical.
    pub fn from_features(
        image_id: impl Into<String>,
        role: Role,
        channels: usize,
        features: impl IntoIterator<Item = LocalFeature>,
    ) -> Self {
        let mut c = Self::empty(image_id, role, channels);
        for f in features {
            c.per_channel[f.channel as usize].push(f);
        }
        for list in &mut c.per_channel {
            list.sort_by(canonical_order);
        }
        c
    }

    pub fn channels(&self) -> usize {
        self.per_channel.len()
    }

    pub fn len(&self) -> usize {
        self.per_channel.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &LocalFeature> {
        self.per_channel.iter().flatten()
    }

    /// Number of scales referenced by features (max scale index + 1).
    pub fn scale_count(&self) -> usize {
        self.iter().map(|f| f.scale_index as usize + 1).max().unwrap_or(0)
    }

    /// The subset of features detected at one scale.
    pub fn for_scale(&self, scale: usize) -> FeatureCollection {
        FeatureCollection {
            image_id: self.image_id.clone(),
            role: self.role,
            per_channel: self
                .per_channel
                .iter()
                .map(|l| l.iter().filter(|f| f.scale_index as usize == scale).copied().collect())
                .collect(),
        }
    }

    /// Splits into `scales` single-scale collections.
    pub fn split_scales(&self, scales: usize) -> Vec<FeatureCollection> {
        (0..scales).map(|s| self.for_scale(s)).collect()
    }
}

fn pool_values(values: impl Iterator<Item = f64>, mode: PoolMode) -> f64 {
    match mode {
        PoolMode::Max => values.fold(f64::MIN, f64::max),
        PoolMode::Mean => {
            let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            s / n as f64
        }
        PoolMode::Gem(p) => {
            let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v.powf(p), n + 1));
            (s / n as f64).powf(1.0 / p)
        }
    }
}

/// Moment-matched ellipse of a region: `(mu, sigma, strength)`.
///
/// `sigma` is the population covariance of member pixel centers plus
/// `PIXEL_VARIANCE * I`.
pub fn fit_ellipse(region: &Region, map: MapView<'_>, pool: PoolMode) -> ([f64; 2], [f64; 3], f64) {
    let n = region.pixels.len() as f64;
    let (mx, my) = region.centroid();
    let (mut cxx, mut cxy, mut cyy) = (0.0, 0.0, 0.0);
    for &(c, r) in &region.pixels {
        let (dx, dy) = (c as f64 - mx, r as f64 - my);
        cxx += dx * dx;
        cxy += dx * dy;
        cyy += dy * dy;
    }
    let sigma = [cxx / n + PIXEL_VARIANCE, cxy / n, cyy / n + PIXEL_VARIANCE];
    let strength =
        pool_values(region.pixels.iter().map(|&(c, r)| map.values[r as usize * map.width + c as usize] as f64), pool);
    ([mx, my], sigma, strength)
}

fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

/// IoU of the 2-sigma bounding boxes of two features.
pub fn feature_iou(a: &LocalFeature, b: &LocalFeature) -> f64 {
    box_iou(&a.bbox(), &b.bbox())
}

/// Greedy non-maximum suppression over all channels. Features are visited by
/// decreasing strength; one is dropped when its IoU with an already kept
/// feature exceeds `iou_threshold`.
pub fn nms_cross_channel(mut features: Vec<LocalFeature>, iou_threshold: f64) -> Vec<LocalFeature> {
    features.sort_by(canonical_order);
    let mut kept: Vec<LocalFeature> = Vec::with_capacity(features.len());
    let mut boxes: Vec<[f64; 4]> = Vec::with_capacity(features.len());
    for f in features {
        let b = f.bbox();
        if boxes.iter().all(|k| box_iou(k, &b) <= iou_threshold) {
            kept.push(f);
            boxes.push(b);
        }
    }
    kept
}

/// Keeps the `budget` strongest features in canonical order.
pub fn select_budget(mut features: Vec<LocalFeature>, budget: usize) -> Vec<LocalFeature> {
    features.sort_by(canonical_order);
    features.truncate(budget);
    features
}

/// Detects features on every (scale, channel) map of `set`.
pub fn detect_features(
    set: &TensorSet,
    det_params: &DetectorParams,
    role: Role,
    params: &FeatureParams,
) -> Result<FeatureCollection> {
    set.validate()?;
    det_params.validate()?;
    let k = set.channels();
    let cap = params.caps.for_role(role);
    let jobs: Vec<(usize, usize)> = (0..set.scales.len()).flat_map(|s| (0..k).map(move |j| (s, j))).collect();

    let per_map: Vec<Vec<LocalFeature>> = jobs
        .par_iter()
        .map(|&(s, j)| {
            let t = &set.scales[s].tensor;
            let map = MapView::new(t.width(), t.height(), t.channel(j));
            let regions = detect_msers(map, det_params);
            if regions.len() > cap {
                return Vec::new();
            }
            regions
                .iter()
                .map(|r| {
                    let (mu, sigma, strength) = fit_ellipse(r, map, params.pool);
                    LocalFeature { mu, sigma, strength, channel: j as u32, scale_index: s as u8 }
                })
                .filter(|f| f.strength > 0.0)
                .collect()
        })
        .collect();

    let mut all: Vec<LocalFeature> = Vec::new();
    for (s, chunk) in per_map.chunks(k.max(1)).enumerate().take(set.scales.len()) {
        let scale_features: Vec<LocalFeature> = chunk.iter().flatten().copied().collect();
        debug_assert!(scale_features.iter().all(|f| f.scale_index as usize == s));
        match role {
            Role::Database => all.extend(nms_cross_channel(scale_features, params.nms_iou)),
            Role::Query => all.extend(scale_features),
        }
    }
    let selected = select_budget(all, params.budget);
    Ok(FeatureCollection::from_features(set.image_id.clone(), role, k, selected))
}
