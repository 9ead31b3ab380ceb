//! Fast spatial matching between two feature collections.
//!
//! Tentative correspondences pair features of the same channel. Each
//! correspondence yields one upright 5-dof hypothesis from its two ellipses;
//! all hypotheses are enumerated, promising ones are refined by least squares
//! on their inliers, and the transform with the most inliers wins.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::features::{canonical_order, FeatureCollection, LocalFeature};

/// `(x, y) -> (a x + tx, b x + c y + ty)` with `a, c > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform5 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for Transform5 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform5 {
    pub const fn identity() -> Self {
        Transform5 { a: 1.0, b: 0.0, c: 1.0, tx: 0.0, ty: 0.0 }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [self.a * p[0] + self.tx, self.b * p[0] + self.c * p[1] + self.ty]
    }

    /// Isotropic scale `sqrt(det M)` of the linear part.
    pub fn scale(&self) -> f64 {
        (self.a * self.c).sqrt()
    }

    pub fn is_upright(&self) -> bool {
        self.a > 0.0 && self.c > 0.0 && self.a.is_finite() && self.b.is_finite() && self.c.is_finite()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Transform5) -> Transform5 {
        Transform5 {
            a: self.a * other.a,
            b: self.b * other.a + self.c * other.b,
            c: self.c * other.c,
            tx: self.a * other.tx + self.tx,
            ty: self.b * other.tx + self.c * other.ty + self.ty,
        }
    }

    pub fn inverse(&self) -> Transform5 {
        let a = 1.0 / self.a;
        let c = 1.0 / self.c;
        let b = -self.b / (self.a * self.c);
        Transform5 { a, b, c, tx: -a * self.tx, ty: -b * self.tx - c * self.ty }
    }

    /// `M Σ Mᵀ` for a covariance given as its upper triangle (cc, cr, rr).
    pub fn transform_covariance(&self, s: [f64; 3]) -> [f64; 3] {
        let (a, b, c) = (self.a, self.b, self.c);
        [a * a * s[0], a * (b * s[0] + c * s[1]), b * b * s[0] + 2.0 * b * c * s[1] + c * c * s[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub channel: u32,
    pub p1: LocalFeature,
    pub p2: LocalFeature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    /// Position tolerance in target-grid pixels.
    pub err_px: f64,
    /// Maximal scale change, applied to hypotheses and to inlier scale ratios.
    pub scale_max: f64,
    /// Local optimization rounds per promising hypothesis.
    pub lo_rounds: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams { err_px: 2.0, scale_max: 3.0, lo_rounds: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Inlier correspondences, one list per channel.
    pub inliers: Vec<Vec<Correspondence>>,
    pub transform: Transform5,
    /// Sum of squared position errors of the inliers.
    pub residual: f64,
    /// Index of the tentative correspondence that seeded the winner.
    pub hypothesis: Option<usize>,
    /// (query scale, database scale) the result was computed on.
    pub scale_pair: (usize, usize),
}

impl MatchResult {
    pub fn empty(channels: usize) -> Self {
        MatchResult {
            inliers: vec![Vec::new(); channels],
            transform: Transform5::identity(),
            residual: 0.0,
            hypothesis: None,
            scale_pair: (0, 0),
        }
    }

    pub fn inlier_count(&self) -> usize {
        similarity(self)
    }

    pub fn iter_inliers(&self) -> impl Iterator<Item = &Correspondence> {
        self.inliers.iter().flatten()
    }
}

/// Total number of inliers over all channels.
pub fn similarity(result: &MatchResult) -> usize {
    result.inliers.iter().map(Vec::len).sum()
}

fn sorted_channel(list: &[LocalFeature]) -> Vec<LocalFeature> {
    let mut v = list.to_vec();
    v.sort_by(canonical_order);
    v
}

/// Per-channel Cartesian products, ordered by (channel, strength₁ desc, strength₂ desc).
pub fn tentative_correspondences(p1: &FeatureCollection, p2: &FeatureCollection) -> Vec<Correspondence> {
    let k = p1.channels().min(p2.channels());
    let mut out = Vec::new();
    for j in 0..k {
        if p1.per_channel[j].is_empty() || p2.per_channel[j].is_empty() {
            continue;
        }
        let a = sorted_channel(&p1.per_channel[j]);
        let b = sorted_channel(&p2.per_channel[j]);
        for f1 in &a {
            for f2 in &b {
                out.push(Correspondence { channel: j as u32, p1: *f1, p2: *f2 });
            }
        }
    }
    out
}

/// Lower-triangular Cholesky factor `(l11, l21, l22)` of a 2x2 covariance.
fn cholesky(s: [f64; 3]) -> Option<(f64, f64, f64)> {
    if !(s[0] > 0.0) {
        return None;
    }
    let l11 = s[0].sqrt();
    let l21 = s[1] / l11;
    let d = s[2] - l21 * l21;
    if !(d > 0.0) {
        return None;
    }
    Some((l11, l21, d.sqrt()))
}

/// Maps both ellipses to the unit circle keeping the y direction, and returns
/// `T = T₂⁻¹ T₁`. `None` when a covariance is not positive definite or the
/// hypothesis scale lies outside `[1/scale_max, scale_max]`.
pub fn hypothesis_from_correspondence(c: &Correspondence, scale_max: f64) -> Option<Transform5> {
    let (p11, p21, p22) = cholesky(c.p1.sigma)?;
    let (q11, q21, q22) = cholesky(c.p2.sigma)?;
    // M = L₂ L₁⁻¹, solved from M L₁ = L₂
    let a = q11 / p11;
    let cc = q22 / p22;
    let b = (q21 - cc * p21) / p11;
    let [x1, y1] = c.p1.mu;
    let [x2, y2] = c.p2.mu;
    let t = Transform5 { a, b, c: cc, tx: x2 - a * x1, ty: y2 - b * x1 - cc * y1 };
    let s = t.scale();
    if !(s >= 1.0 / scale_max && s <= scale_max) {
        return None;
    }
    Some(t)
}

/// Correspondences flattened into arrays for the inner loops.
struct Prepared {
    x1: Vec<f64>,
    y1: Vec<f64>,
    x2: Vec<f64>,
    y2: Vec<f64>,
    log_ratio: Vec<f64>,
    left: Vec<u32>,
    right: Vec<u32>,
    n_left: usize,
    n_right: usize,
}

fn feature_key(f: &LocalFeature) -> [u64; 8] {
    [
        f.channel as u64,
        f.scale_index as u64,
        f.mu[0].to_bits(),
        f.mu[1].to_bits(),
        f.sigma[0].to_bits(),
        f.sigma[1].to_bits(),
        f.sigma[2].to_bits(),
        f.strength.to_bits(),
    ]
}

impl Prepared {
    fn new(corrs: &[Correspondence]) -> Self {
        let n = corrs.len();
        let mut p = Prepared {
            x1: Vec::with_capacity(n),
            y1: Vec::with_capacity(n),
            x2: Vec::with_capacity(n),
            y2: Vec::with_capacity(n),
            log_ratio: Vec::with_capacity(n),
            left: Vec::with_capacity(n),
            right: Vec::with_capacity(n),
            n_left: 0,
            n_right: 0,
        };
        let mut ids1 = std::collections::HashMap::new();
        let mut ids2 = std::collections::HashMap::new();
        for c in corrs {
            p.x1.push(c.p1.mu[0]);
            p.y1.push(c.p1.mu[1]);
            p.x2.push(c.p2.mu[0]);
            p.y2.push(c.p2.mu[1]);
            // ln sqrt(sqrt(det Σ₂) / sqrt(det Σ₁))
            p.log_ratio.push(0.25 * (c.p2.det_sigma().ln() - c.p1.det_sigma().ln()));
            let next = ids1.len() as u32;
            p.left.push(*ids1.entry(feature_key(&c.p1)).or_insert(next));
            let next = ids2.len() as u32;
            p.right.push(*ids2.entry(feature_key(&c.p2)).or_insert(next));
        }
        p.n_left = ids1.len();
        p.n_right = ids2.len();
        p
    }

    fn len(&self) -> usize {
        self.x1.len()
    }

    /// Candidate count and summed squared error, before one-to-one assignment.
    fn bound(&self, t: &Transform5, err2: f64, log_scale_max: f64) -> (usize, f64) {
        let ls = t.scale().ln();
        let mut count = 0usize;
        let mut sum = 0.0f64;
        for i in 0..self.len() {
            let dx = t.a * self.x1[i] + t.tx - self.x2[i];
            let dy = t.b * self.x1[i] + t.c * self.y1[i] + t.ty - self.y2[i];
            let d2 = dx * dx + dy * dy;
            let ok = d2 <= err2 && (self.log_ratio[i] - ls).abs() <= log_scale_max;
            count += ok as usize;
            sum += if ok { d2 } else { 0.0 };
        }
        (count, sum)
    }

    fn candidates(&self, t: &Transform5, err2: f64, log_scale_max: f64) -> Vec<(f64, usize)> {
        let ls = t.scale().ln();
        let mut out = Vec::new();
        for i in 0..self.len() {
            let dx = t.a * self.x1[i] + t.tx - self.x2[i];
            let dy = t.b * self.x1[i] + t.c * self.y1[i] + t.ty - self.y2[i];
            let d2 = dx * dx + dy * dy;
            if d2 <= err2 && (self.log_ratio[i] - ls).abs() <= log_scale_max {
                out.push((d2, i));
            }
        }
        out
    }

    /// One-to-one inliers: greedy by ascending error, then augmenting paths
    /// until the assignment has maximum cardinality.
    fn assign(&self, mut cands: Vec<(f64, usize)>) -> Vec<(f64, usize)> {
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut match_l: Vec<Option<usize>> = vec![None; self.n_left];
        let mut match_r: Vec<Option<usize>> = vec![None; self.n_right];
        let mut conflict = false;
        for (slot, &(_, i)) in cands.iter().enumerate() {
            let (l, r) = (self.left[i] as usize, self.right[i] as usize);
            if match_l[l].is_none() && match_r[r].is_none() {
                match_l[l] = Some(slot);
                match_r[r] = Some(slot);
            } else {
                conflict = true;
            }
        }
        if conflict {
            let mut adj: Vec<Vec<usize>> = vec![Vec::new(); self.n_left];
            for (slot, &(_, i)) in cands.iter().enumerate() {
                adj[self.left[i] as usize].push(slot);
            }
            let mut lefts: Vec<usize> = (0..self.n_left).filter(|&l| !adj[l].is_empty()).collect();
            lefts.sort_by(|&a, &b| adj[a][0].cmp(&adj[b][0]));
            for &l in &lefts {
                if match_l[l].is_some() {
                    continue;
                }
                let mut seen = vec![false; self.n_right];
                augment(l, &adj, &cands, (&self.left, &self.right), &mut match_l, &mut match_r, &mut seen);
            }
        }
        let mut chosen: Vec<(f64, usize)> = match_l.iter().flatten().map(|&slot| cands[slot]).collect();
        chosen.sort_by_key(|&(_, i)| i);
        chosen
    }

    fn evaluate(&self, t: &Transform5, err2: f64, log_scale_max: f64) -> Evaluation {
        let chosen = self.assign(self.candidates(t, err2, log_scale_max));
        Evaluation {
            transform: *t,
            residual: chosen.iter().map(|c| c.0).sum(),
            inliers: chosen.into_iter().map(|c| c.1).collect(),
        }
    }
}

fn augment(
    l: usize,
    adj: &[Vec<usize>],
    cands: &[(f64, usize)],
    (left, right): (&[u32], &[u32]),
    match_l: &mut [Option<usize>],
    match_r: &mut [Option<usize>],
    seen: &mut [bool],
) -> bool {
    for &slot in &adj[l] {
        let r = right[cands[slot].1] as usize;
        if seen[r] {
            continue;
        }
        seen[r] = true;
        let free = match match_r[r] {
            None => true,
            Some(other) => {
                let ol = left[cands[other].1] as usize;
                augment(ol, adj, cands, (left, right), match_l, match_r, seen)
            }
        };
        if free {
            match_l[l] = Some(slot);
            match_r[r] = Some(slot);
            return true;
        }
    }
    false
}

#[derive(Debug, Clone)]
struct Evaluation {
    transform: Transform5,
    inliers: Vec<usize>,
    residual: f64,
}

impl Evaluation {
    fn beats(&self, other: &Evaluation) -> bool {
        match self.inliers.len().cmp(&other.inliers.len()) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => self.residual < other.residual,
        }
    }
}

/// Inlier set of `t` among `corrs`: position error at most `err_px` and feature
/// scale ratio within `scale_max` of the hypothesis scale, one-to-one.
/// Returns (indices into `corrs`, residual).
pub fn count_inliers(t: &Transform5, corrs: &[Correspondence], params: &MatchParams) -> (Vec<usize>, f64) {
    let prep = Prepared::new(corrs);
    let e = prep.evaluate(t, params.err_px * params.err_px, params.scale_max.ln());
    (e.inliers, e.residual)
}

/// Least-squares upright transform from point pairs: x-rows give `(a, tx)`,
/// y-rows give `(b, c, ty)`. `None` when either system is rank deficient or
/// the fit is not orientation preserving.
pub fn refine_lsq(inliers: &[Correspondence]) -> Option<Transform5> {
    let pairs: Vec<([f64; 2], [f64; 2])> = inliers.iter().map(|c| (c.p1.mu, c.p2.mu)).collect();
    fit_upright(&pairs)
}

fn fit_upright(pairs: &[([f64; 2], [f64; 2])]) -> Option<Transform5> {
    let n = pairs.len();
    if n < 2 {
        return None;
    }
    let first_x = pairs[0].0[0];
    if pairs.iter().all(|p| p.0[0] == first_x) {
        return None;
    }
    let nf = n as f64;
    let (mut mx1, mut my1, mut mx2, mut my2) = (0.0, 0.0, 0.0, 0.0);
    for (p, q) in pairs {
        mx1 += p[0];
        my1 += p[1];
        mx2 += q[0];
        my2 += q[1];
    }
    mx1 /= nf;
    my1 /= nf;
    mx2 /= nf;
    my2 /= nf;
    let (mut sxx, mut sxy, mut syy, mut sx_x2, mut sx_y2, mut sy_y2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, q) in pairs {
        let (dx, dy) = (p[0] - mx1, p[1] - my1);
        let (ex, ey) = (q[0] - mx2, q[1] - my2);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
        sx_x2 += dx * ex;
        sx_y2 += dx * ey;
        sy_y2 += dy * ey;
    }
    if !(sxx > 0.0) {
        return None;
    }
    let a = sx_x2 / sxx;
    let det = sxx * syy - sxy * sxy;
    if !(det > 1e-12 * sxx * syy) || !(syy > 0.0) {
        return None;
    }
    let b = (syy * sx_y2 - sxy * sy_y2) / det;
    let c = (sxx * sy_y2 - sxy * sx_y2) / det;
    let t = Transform5 { a, b, c, tx: mx2 - a * mx1, ty: my2 - b * mx1 - c * my1 };
    if !t.is_upright() || !t.tx.is_finite() || !t.ty.is_finite() {
        return None;
    }
    Some(t)
}

/// Spatially matches `p1` against `p2` with exhaustive hypothesis enumeration
/// and local optimization.
pub fn match_features(p1: &FeatureCollection, p2: &FeatureCollection, params: &MatchParams) -> MatchResult {
    let channels = p1.channels().max(p2.channels());
    let corrs = tentative_correspondences(p1, p2);
    if corrs.is_empty() {
        return MatchResult::empty(channels);
    }
    let prep = Prepared::new(&corrs);
    let err2 = params.err_px * params.err_px;
    let log_smax = params.scale_max.ln();

    let hypotheses: Vec<Option<Transform5>> =
        corrs.iter().map(|c| hypothesis_from_correspondence(c, params.scale_max)).collect();

    let mut best: Option<(usize, Evaluation)> = None;
    for (h, t) in hypotheses.iter().enumerate() {
        let Some(t) = t else { continue };
        let (ub, ub_residual) = prep.bound(t, err2, log_smax);
        if ub == 0 {
            continue;
        }
        if let Some((_, b)) = &best {
            // exact count <= ub; at equality the residual equals the bound's sum
            if ub < b.inliers.len() || (ub == b.inliers.len() && ub_residual >= b.residual) {
                continue;
            }
        }
        let raw = prep.evaluate(t, err2, log_smax);
        if best.as_ref().is_some_and(|(_, b)| !raw.beats(b)) {
            continue;
        }
        let mut current = raw;
        for _ in 0..params.lo_rounds {
            let pairs: Vec<([f64; 2], [f64; 2])> =
                current.inliers.iter().map(|&i| ([prep.x1[i], prep.y1[i]], [prep.x2[i], prep.y2[i]])).collect();
            let Some(refined) = fit_upright(&pairs) else { break };
            let s = refined.scale();
            if !(s >= 1.0 / params.scale_max && s <= params.scale_max) {
                break;
            }
            let next = prep.evaluate(&refined, err2, log_smax);
            if next.beats(&current) {
                current = next;
            } else {
                break;
            }
        }
        best = Some((h, current));
    }

    let Some((h, best)) = best else {
        return MatchResult::empty(channels);
    };
    let mut inliers = vec![Vec::new(); channels];
    for &i in &best.inliers {
        inliers[corrs[i].channel as usize].push(corrs[i]);
    }
    MatchResult { inliers, transform: best.transform, residual: best.residual, hypothesis: Some(h), scale_pair: (0, 0) }
}

/// Matches every (query scale, database scale) pair and keeps the one with the
/// highest similarity; ties by residual, then by scale pair.
pub fn match_multiscale(s1: &[FeatureCollection], s2: &[FeatureCollection], params: &MatchParams) -> MatchResult {
    let channels = s1.iter().chain(s2).map(FeatureCollection::channels).max().unwrap_or(0);
    let mut best: Option<MatchResult> = None;
    for (i, a) in s1.iter().enumerate() {
        for (j, b) in s2.iter().enumerate() {
            let mut r = match_features(a, b, params);
            r.scale_pair = (i, j);
            let better = match &best {
                None => true,
                Some(cur) => {
                    let (n, m) = (similarity(&r), similarity(cur));
                    n > m || (n == m && r.residual < cur.residual)
                }
            };
            if better {
                best = Some(r);
            }
        }
    }
    best.unwrap_or_else(|| MatchResult::empty(channels))
}
