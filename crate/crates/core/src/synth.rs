//! Synthetic activation tensors with known geometry.
//!
//! A landmark is a list of Gaussian blobs: the part the query shows plus
//! surrounding context. Positives are upright-affine warps of the whole
//! landmark with a few clutter blobs of their own; hard negatives keep every
//! query blob but scatter the positions, so their pooled descriptors look like
//! the query while their geometry does not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::eval::{GroundTruth, QueryTruth};
use crate::matcher::Transform5;
use crate::tensor::{default_scale_factors, synth_tensor, Blob, ScaledTensor, TensorSet};

/// Covariance with eigenvalues drawn from `[lo, hi)` and a random orientation.
pub fn random_cov(rng: &mut impl Rng, lo: f64, hi: f64) -> [[f64; 2]; 2] {
    let (l1, l2) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (c, s) = (th.cos(), th.sin());
    let off = (l1 - l2) * c * s;
    [[l1 * c * c + l2 * s * s, off], [off, l1 * s * s + l2 * c * c]]
}

/// Blob mapped through `t`: center `T(mu)`, covariance `M C M^T`.
pub fn warp_blob(t: &Transform5, b: &Blob) -> Blob {
    let [[sxx, sxy], [_, syy]] = b.cov;
    let m = [[t.a, 0.0], [t.b, t.c]];
    let mc = [
        [m[0][0] * sxx + m[0][1] * sxy, m[0][0] * sxy + m[0][1] * syy],
        [m[1][0] * sxx + m[1][1] * sxy, m[1][0] * sxy + m[1][1] * syy],
    ];
    let xx = mc[0][0] * m[0][0] + mc[0][1] * m[0][1];
    let xy = mc[0][0] * m[1][0] + mc[0][1] * m[1][1];
    let yy = mc[1][0] * m[1][0] + mc[1][1] * m[1][1];
    Blob { center: t.apply(b.center), cov: [[xx, xy], [xy, yy]], ..*b }
}

fn inside(center: [f64; 2], w: usize, h: usize, margin: f64) -> bool {
    center[0] >= margin
        && center[1] >= margin
        && center[0] <= w as f64 - 1.0 - margin
        && center[1] <= h as f64 - 1.0 - margin
}

fn far_from_same_channel(blobs: &[Blob], channel: usize, center: [f64; 2], min_sep: f64) -> bool {
    blobs
        .iter()
        .filter(|b| b.channel == channel)
        .all(|b| (b.center[0] - center[0]).hypot(b.center[1] - center[1]) >= min_sep)
}

/// Places `n` blobs with random channels, keeping blobs of one channel at
/// least `min_sep` apart and centers at least `margin` inside the grid.
#[allow(clippy::too_many_arguments)]
pub fn random_blobs(
    rng: &mut impl Rng,
    n: usize,
    channels: &[usize],
    w: usize,
    h: usize,
    margin: f64,
    min_sep: f64,
    cov_range: (f64, f64),
    amp_range: (f64, f64),
) -> Vec<Blob> {
    let mut blobs: Vec<Blob> = Vec::with_capacity(n);
    let xs = Uniform::new(margin, w as f64 - 1.0 - margin).unwrap();
    let ys = Uniform::new(margin, h as f64 - 1.0 - margin).unwrap();
    let mut attempts = 0;
    while blobs.len() < n && attempts < 200 * n {
        attempts += 1;
        let channel = channels[rng.random_range(0..channels.len())];
        let center = [xs.sample(rng), ys.sample(rng)];
        if !far_from_same_channel(&blobs, channel, center, min_sep) {
            continue;
        }
        blobs.push(Blob {
            channel,
            center,
            cov: random_cov(rng, cov_range.0, cov_range.1),
            amplitude: rng.random_range(amp_range.0..amp_range.1),
        });
    }
    blobs
}

/// Renders blobs at every scale factor (coordinates scale by `f`, covariances by `f^2`);
/// blobs whose scaled center leaves the grid are skipped at that scale.
pub fn render_multiscale(id: &str, blobs: &[Blob], k: usize, w: usize, h: usize, factors: &[f64]) -> Result<TensorSet> {
    let scales = factors
        .iter()
        .map(|&f| {
            let (sw, sh) = (((w as f64) * f).round().max(1.0) as usize, ((h as f64) * f).round().max(1.0) as usize);
            let scaled: Vec<Blob> = blobs
                .iter()
                .map(|b| Blob {
                    center: [b.center[0] * f, b.center[1] * f],
                    cov: [[b.cov[0][0] * f * f, b.cov[0][1] * f * f], [b.cov[1][0] * f * f, b.cov[1][1] * f * f]],
                    ..*b
                })
                .filter(|b| inside(b.center, sw, sh, 0.0))
                .collect();
            Ok(ScaledTensor { factor: f, tensor: synth_tensor(&scaled, k, sh, sw)? })
        })
        .collect::<Result<Vec<_>>>()?;
    TensorSet::new(id, "synthetic", scales)
}

/// Two single-scale sets related by `t`: `blobs` rendered on a `w1 x h1`
/// grid and their warps on a `w2 x h2` grid. Returns the warped blobs kept.
pub fn planted_pair(
    blobs: &[Blob],
    t: &Transform5,
    k: usize,
    (w1, h1): (usize, usize),
    (w2, h2): (usize, usize),
) -> Result<(TensorSet, TensorSet, Vec<Blob>)> {
    let warped: Vec<Blob> = blobs.iter().map(|b| warp_blob(t, b)).filter(|b| inside(b.center, w2, h2, 0.0)).collect();
    let a = TensorSet::new(
        "planted_a",
        "synthetic",
        vec![ScaledTensor { factor: 1.0, tensor: synth_tensor(blobs, k, h1, w1)? }],
    )?;
    let b = TensorSet::new(
        "planted_b",
        "synthetic",
        vec![ScaledTensor { factor: 1.0, tensor: synth_tensor(&warped, k, h2, w2)? }],
    )?;
    Ok((a, b, warped))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub queries: usize,
    pub positives: usize,
    /// Scattered-position copies of each query scene in the database.
    pub hard_negatives: usize,
    /// Unrelated landmarks added to the database.
    pub distractors: usize,
    /// Blobs visible in the query.
    pub scene_blobs: usize,
    /// Landmark blobs outside the query, shared by all its positives.
    pub context_blobs: usize,
    /// Blobs unique to each positive.
    pub clutter_blobs: usize,
    pub multiscale: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            channels: 64,
            width: 40,
            height: 40,
            queries: 10,
            positives: 4,
            hard_negatives: 1,
            distractors: 0,
            scene_blobs: 24,
            context_blobs: 12,
            clutter_blobs: 4,
            multiscale: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub database: Vec<TensorSet>,
    pub queries: Vec<TensorSet>,
    pub ground_truth: GroundTruth,
    /// Planted transform of every positive, by image id.
    pub transforms: Vec<(String, Transform5)>,
}

const MIN_SEP: f64 = 10.0;
const COV: (f64, f64) = (1.2, 3.0);
const AMP: (f64, f64) = (0.5, 1.0);

fn random_upright(rng: &mut impl Rng) -> Transform5 {
    Transform5 {
        a: rng.random_range(0.8..1.25),
        b: rng.random_range(-0.15..0.15),
        c: rng.random_range(0.8..1.25),
        tx: 0.0,
        ty: 0.0,
    }
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h, k) = (cfg.width, cfg.height, cfg.channels);
    let factors: Vec<f64> = if cfg.multiscale { default_scale_factors().to_vec() } else { vec![1.0] };
    let all_channels: Vec<usize> = (0..k).collect();
    let margin = 4.0;

    let mut database = Vec::new();
    let mut queries = Vec::new();
    let mut truths = Vec::new();
    let mut transforms = Vec::new();
    for q in 0..cfg.queries {
        let qid = format!("q{q:03}");
        let scene = random_blobs(&mut rng, cfg.scene_blobs, &all_channels, w, h, margin, MIN_SEP, COV, AMP);
        queries.push(render_multiscale(&qid, &scene, k, w, h, &factors)?);
        let mut landmark = scene.clone();
        let context = random_blobs(&mut rng, cfg.context_blobs * 4, &all_channels, w, h, margin, MIN_SEP, COV, AMP);
        for b in context {
            if landmark.len() < cfg.scene_blobs + cfg.context_blobs
                && far_from_same_channel(&landmark, b.channel, b.center, MIN_SEP)
            {
                landmark.push(b);
            }
        }

        let mut easy = std::collections::BTreeSet::new();
        for p in 0..cfg.positives {
            let id = format!("{qid}_pos{p}");
            let mut t = random_upright(&mut rng);
            // map the grid center onto itself, then jitter
            let c = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0];
            let mc = t.apply(c);
            t.tx = c[0] - mc[0] + rng.random_range(-2.0..2.0);
            t.ty = c[1] - mc[1] + rng.random_range(-2.0..2.0);
            let mut blobs: Vec<Blob> = landmark
                .iter()
                .filter(|_| rng.random_bool(0.9))
                .map(|b| warp_blob(&t, b))
                .filter(|b| inside(b.center, w, h, 1.0))
                .collect();
            let mut clutter =
                random_blobs(&mut rng, cfg.clutter_blobs * 4, &all_channels, w, h, margin, MIN_SEP, COV, AMP);
            clutter.retain(|b| far_from_same_channel(&blobs, b.channel, b.center, MIN_SEP));
            blobs.extend(clutter.into_iter().take(cfg.clutter_blobs));
            database.push(render_multiscale(&id, &blobs, k, w, h, &factors)?);
            transforms.push((id.clone(), t));
            easy.insert(id);
        }
        for n in 0..cfg.hard_negatives {
            let id = format!("{qid}_neg{n}");
            let mut scattered: Vec<Blob> = Vec::new();
            for b in &scene {
                for _ in 0..200 {
                    let center = [
                        rng.random_range(margin..w as f64 - 1.0 - margin),
                        rng.random_range(margin..h as f64 - 1.0 - margin),
                    ];
                    if far_from_same_channel(&scattered, b.channel, center, MIN_SEP) {
                        scattered.push(Blob { center, ..*b });
                        break;
                    }
                }
            }
            database.push(render_multiscale(&id, &scattered, k, w, h, &factors)?);
        }
        truths.push(QueryTruth { query: qid, easy, ..Default::default() });
    }
    for d in 0..cfg.distractors {
        let blobs = random_blobs(&mut rng, cfg.scene_blobs, &all_channels, w, h, margin, MIN_SEP, COV, AMP);
        database.push(render_multiscale(&format!("d{d:04}"), &blobs, k, w, h, &factors)?);
    }
    let images = database.iter().map(|s| s.image_id.clone()).collect();
    Ok(SynthDataset {
        database,
        queries,
        ground_truth: GroundTruth { images: Some(images), queries: truths },
        transforms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warp_matches_covariance_transform() {
        let t = Transform5 { a: 1.4, b: 0.2, c: 0.8, tx: 3.0, ty: -2.0 };
        let b = Blob { channel: 0, center: [5.0, 7.0], cov: [[2.0, 0.4], [0.4, 1.5]], amplitude: 1.0 };
        let w = warp_blob(&t, &b);
        let s = t.transform_covariance([2.0, 0.4, 1.5]);
        assert!(
            (w.cov[0][0] - s[0]).abs() < 1e-12
                && (w.cov[0][1] - s[1]).abs() < 1e-12
                && (w.cov[1][1] - s[2]).abs() < 1e-12
        );
        assert_eq!(w.center, t.apply([5.0, 7.0]));
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let cfg = SynthConfig {
            queries: 2,
            positives: 2,
            channels: 16,
            scene_blobs: 8,
            context_blobs: 4,
            clutter_blobs: 2,
            ..Default::default()
        };
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(a.database, b.database);
        assert_eq!(a.database.len(), 2 * (2 + 1));
        assert_eq!(a.queries.len(), 2);
        assert_eq!(a.queries[0].scales.len(), 3);
        assert_eq!(a.ground_truth.queries[1].easy.len(), 2);
    }
}
