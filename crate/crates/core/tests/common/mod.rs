//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, VecDeque};

use dsm::mser::DetectorParams;

// ---------------------------------------------------------------------------
// MSER: threshold at every level, flood-fill components, apply the tests.
// ---------------------------------------------------------------------------

fn flood(bins: &[u32], w: usize, h: usize, t: u32, seed: usize, within: Option<&BTreeSet<usize>>) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([seed]);
    seen.insert(seed);
    while let Some(p) = queue.pop_front() {
        let (c, r) = (p % w, p / w);
        let mut nb = Vec::new();
        if c > 0 {
            nb.push(p - 1);
        }
        if c + 1 < w {
            nb.push(p + 1);
        }
        if r > 0 {
            nb.push(p - w);
        }
        if r + 1 < h {
            nb.push(p + w);
        }
        for q in nb {
            if bins[q] >= t && within.is_none_or(|s| s.contains(&q)) && seen.insert(q) {
                queue.push_back(q);
            }
        }
    }
    seen
}

/// Brute-force MSER oracle; returns region pixel sets as (col, row).
pub fn oracle_msers(values: &[f32], w: usize, h: usize, params: &DetectorParams) -> BTreeSet<Vec<(u32, u32)>> {
    let levels = params.level_count;
    let max = values.iter().fold(0.0f64, |m, &v| m.max(v as f64));
    if max <= 0.0 {
        return BTreeSet::new();
    }
    let bins: Vec<u32> = values
        .iter()
        .map(|&v| ((v as f64 / max * levels as f64).floor()).clamp(0.0, (levels - 1) as f64) as u32)
        .collect();
    let delta = ((params.delta / max * levels as f64).round() as u32).max(1);

    // every extremal region, deduplicated by pixel set
    let mut sets: Vec<BTreeSet<usize>> = Vec::new();
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    for t in 1..levels as u32 {
        let mut visited = vec![false; w * h];
        for p in 0..w * h {
            if bins[p] >= t && !visited[p] {
                let comp = flood(&bins, w, h, t, p, None);
                for &q in &comp {
                    visited[q] = true;
                }
                let key: Vec<usize> = comp.iter().copied().collect();
                if let std::collections::hash_map::Entry::Vacant(e) = index.entry(key) {
                    e.insert(sets.len());
                    sets.push(comp);
                }
            }
        }
    }
    let n = sets.len();
    let level: Vec<u32> = sets.iter().map(|s| s.iter().map(|&p| bins[p]).min().unwrap()).collect();
    let parent: Vec<Option<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && sets[j].len() > sets[i].len() && sets[i].is_subset(&sets[j]))
                .min_by_key(|&j| sets[j].len())
        })
        .collect();

    let variation: Vec<f64> = (0..n)
        .map(|i| {
            let s = &sets[i];
            let seed = *s.iter().next().unwrap();
            let lower = level[i].saturating_sub(delta).max(1);
            let outer = flood(&bins, w, h, lower, seed, None).len();
            let upper = level[i] + delta;
            let mut inner = 0;
            if (upper as usize) < levels {
                let mut done = BTreeSet::new();
                for &p in s {
                    if bins[p] >= upper && !done.contains(&p) {
                        let comp = flood(&bins, w, h, upper, p, Some(s));
                        inner = inner.max(comp.len());
                        done.extend(comp);
                    }
                }
            }
            (outer as f64 - inner as f64) / s.len() as f64
        })
        .collect();

    let candidate: Vec<bool> = (0..n)
        .map(|i| {
            let v = variation[i];
            let parent_ok = parent[i].is_none_or(|p| v <= variation[p]);
            let children_ok = (0..n).filter(|&c| parent[c] == Some(i)).all(|c| v < variation[c]);
            parent_ok && children_ok && v <= params.max_variation && sets[i].len() >= params.min_area_px
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(sets[i].len()));
    let mut survived = vec![false; n];
    for &i in &order {
        if !candidate[i] {
            continue;
        }
        let anc = (0..n)
            .filter(|&j| survived[j] && sets[j].len() > sets[i].len() && sets[i].is_subset(&sets[j]))
            .min_by_key(|&j| sets[j].len());
        survived[i] = match anc {
            Some(a) => {
                let (pa, ca) = (sets[a].len() as f64, sets[i].len() as f64);
                !((pa - ca) / pa < params.min_diversity && variation[a] <= variation[i])
            }
            None => true,
        };
    }

    let kept: Vec<usize> = (0..n).filter(|&i| survived[i]).collect();
    let key = |i: usize| {
        let m = sets[i].len() as f64;
        let sx: f64 = sets[i].iter().map(|&p| (p % w) as f64).sum();
        let sy: f64 = sets[i].iter().map(|&p| (p / w) as f64).sum();
        ((sx / m).round() as i64, (sy / m).round() as i64)
    };
    let better = |a: usize, b: usize| {
        let first = |i: usize| *sets[i].iter().next().unwrap();
        (variation[a], std::cmp::Reverse(level[a]), first(a))
            .partial_cmp(&(variation[b], std::cmp::Reverse(level[b]), first(b)))
            .unwrap()
            .is_lt()
    };
    kept.iter()
        .filter(|&&a| !kept.iter().any(|&b| b != a && key(a) == key(b) && better(b, a)))
        .map(|&i| sets[i].iter().map(|&p| ((p % w) as u32, (p / w) as u32)).collect())
        .collect()
}

/// Random integer map with levels `0..=max_level`.
pub fn random_integer_map(rng: &mut impl rand::Rng, w: usize, h: usize, max_level: u32) -> Vec<f32> {
    (0..w * h).map(|_| rng.random_range(0..=max_level) as f32).collect()
}

// ---------------------------------------------------------------------------
// Spatial matching: every single-correspondence hypothesis, exact maximum
// one-to-one assignment by dynamic programming over used right features.
// ---------------------------------------------------------------------------

use dsm::features::LocalFeature;
use nalgebra::Matrix2;

fn chol(s: [f64; 3]) -> Matrix2<f64> {
    Matrix2::new(s[0], s[1], s[1], s[2]).cholesky().expect("PD").l()
}

/// Hypothesis `(M, t)` for a pair, computed with dense linear algebra.
pub fn oracle_hypothesis(p1: &LocalFeature, p2: &LocalFeature) -> (Matrix2<f64>, [f64; 2]) {
    let m = chol(p2.sigma) * chol(p1.sigma).try_inverse().unwrap();
    let t = [
        p2.mu[0] - (m[(0, 0)] * p1.mu[0] + m[(0, 1)] * p1.mu[1]),
        p2.mu[1] - (m[(1, 0)] * p1.mu[0] + m[(1, 1)] * p1.mu[1]),
    ];
    (m, t)
}

fn max_assignment(lefts: usize, edges: &[(usize, usize)], rights: usize) -> usize {
    // best[i][mask]: max matched pairs among lefts i.. with rights in mask used
    let full = 1usize << rights;
    let mut best = vec![vec![0usize; full]; lefts + 1];
    for i in (0..lefts).rev() {
        for mask in 0..full {
            let mut v = best[i + 1][mask];
            for &(l, r) in edges {
                if l == i && mask & (1 << r) == 0 {
                    v = v.max(1 + best[i + 1][mask | (1 << r)]);
                }
            }
            best[i][mask] = v;
        }
    }
    best[0][0]
}

/// Highest inlier count over all single-correspondence hypotheses.
pub fn oracle_best_inliers(side1: &[LocalFeature], side2: &[LocalFeature], err_px: f64, scale_max: f64) -> usize {
    let mut best = 0;
    for a in side1 {
        for b in side2 {
            if a.channel != b.channel {
                continue;
            }
            let (m, t) = oracle_hypothesis(a, b);
            let s = m.determinant().sqrt();
            if s < 1.0 / scale_max || s > scale_max {
                continue;
            }
            let mut edges = Vec::new();
            for (i, p) in side1.iter().enumerate() {
                for (j, q) in side2.iter().enumerate() {
                    if p.channel != q.channel {
                        continue;
                    }
                    let x = m[(0, 0)] * p.mu[0] + m[(0, 1)] * p.mu[1] + t[0];
                    let y = m[(1, 0)] * p.mu[0] + m[(1, 1)] * p.mu[1] + t[1];
                    let err = ((x - q.mu[0]).powi(2) + (y - q.mu[1]).powi(2)).sqrt();
                    let ratio = (q.det_sigma().sqrt() / p.det_sigma().sqrt()).sqrt();
                    let factor = (ratio / s).max(s / ratio);
                    if err <= err_px && factor <= scale_max {
                        edges.push((i, j));
                    }
                }
            }
            best = best.max(max_assignment(side1.len(), &edges, side2.len()));
        }
    }
    best
}

/// Random SPD covariance (cc, cr, rr) with eigenvalues in `[lo, hi]`.
pub fn random_sigma(rng: &mut impl rand::Rng, lo: f64, hi: f64) -> [f64; 3] {
    let (l1, l2) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (c, s) = (th.cos(), th.sin());
    [l1 * c * c + l2 * s * s, (l1 - l2) * c * s, l1 * s * s + l2 * c * c]
}
