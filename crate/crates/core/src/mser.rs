//! Bright-polarity maximally stable extremal regions on a single feature map.
//!
//! The map is quantized into `level_count` uniform bins over `[0, max]`. Bin 0
//! is background and never part of a region. An extremal region is a
//! 4-connected component of `{bin >= t}` for some `t >= 1`; the component tree
//! is built by adding pixels from the highest bin down with a union-find.

use serde::{Deserialize, Serialize};

use crate::error::{DsmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    /// Level step in activation units; converted to whole bins per map.
    pub delta: f64,
    pub min_diversity: f64,
    pub max_variation: f64,
    pub min_area_px: usize,
    pub level_count: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams { delta: f64::EPSILON, min_diversity: 0.7, max_variation: 0.5, min_area_px: 1, level_count: 64 }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(DsmError::invalid("delta must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.min_diversity) {
            return Err(DsmError::invalid("min_diversity must lie in [0, 1]"));
        }
        if !(self.max_variation > 0.0) {
            return Err(DsmError::invalid("max_variation must be > 0"));
        }
        if self.level_count < 2 || self.level_count > u16::MAX as usize {
            return Err(DsmError::invalid("level_count must lie in [2, 65535]"));
        }
        Ok(())
    }
}

/// A detected region; `pixels` are (col, row) sorted by row-major index.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub pixels: Vec<(u32, u32)>,
    /// Quantized threshold the region is reported at (minimum bin over its pixels).
    pub level: u32,
    pub variation: f64,
}

impl Region {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let (sx, sy) = self.pixels.iter().fold((0.0, 0.0), |(sx, sy), &(c, r)| (sx + c as f64, sy + r as f64));
        (sx / n, sy / n)
    }
}

/// Borrowed row-major 2D map.
#[derive(Debug, Clone, Copy)]
pub struct MapView<'a> {
    pub width: usize,
    pub height: usize,
    pub values: &'a [f32],
}

impl<'a> MapView<'a> {
    pub fn new(width: usize, height: usize, values: &'a [f32]) -> Self {
        assert_eq!(values.len(), width * height, "map size mismatch");
        MapView { width, height, values }
    }
}

/// Empirical `fraction`-quantile of the sample (linear interpolation between
/// order statistics), floored at `f64::EPSILON * max`.
pub fn compute_delta(sample: &[f32], fraction: f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(DsmError::invalid("empty activation sample"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DsmError::invalid("fraction must lie in (0, 1)"));
    }
    let mut sorted: Vec<f64> = sample.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let max = *sorted.last().unwrap();
    if max <= 0.0 {
        return Err(DsmError::DegenerateActivations);
    }
    let pos = fraction * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    let q = sorted[lo] + t * (sorted[hi] - sorted[lo]);
    Ok(q.max(f64::EPSILON * max))
}

/// Bin index of every value: `min(L - 1, floor(v / max * L))`.
pub fn quantize(values: &[f32], level_count: usize) -> (Vec<u16>, f64) {
    let max = values.iter().fold(0.0f64, |m, &v| m.max(v as f64));
    if max <= 0.0 {
        return (vec![0; values.len()], 0.0);
    }
    let top = (level_count - 1) as f64;
    let bins = values.iter().map(|&v| ((v as f64 / max * level_count as f64).floor()).clamp(0.0, top) as u16).collect();
    (bins, max)
}

/// Δ in whole bins for a map with the given maximum (at least one bin).
pub fn delta_in_bins(delta: f64, max: f64, level_count: usize) -> u32 {
    ((delta / max * level_count as f64).round() as u32).max(1)
}

const NONE: u32 = u32::MAX;

struct Node {
    level: u32,
    area: u32,
    parent: u32,
    children: Vec<u32>,
    own: Vec<u32>,
}

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (big, small) = if self.size[ra as usize] >= self.size[rb as usize] { (ra, rb) } else { (rb, ra) };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
    }
}

fn build_tree(bins: &[u16], width: usize, height: usize, level_count: usize) -> Vec<Node> {
    let n = width * height;
    let mut by_level: Vec<Vec<u32>> = vec![Vec::new(); level_count];
    for (i, &b) in bins.iter().enumerate() {
        if b > 0 {
            by_level[b as usize].push(i as u32);
        }
    }

    let mut uf = UnionFind { parent: vec![NONE; n], size: vec![0; n] };
    let mut nodes: Vec<Node> = Vec::new();
    // pixel representative of every node, used to locate its current root
    let mut rep: Vec<u32> = Vec::new();
    let mut tops: Vec<u32> = Vec::new();
    let mut root_node = vec![NONE; n];

    for t in (1..level_count).rev() {
        let level_pixels = &by_level[t];
        if level_pixels.is_empty() {
            continue;
        }
        for &p in level_pixels {
            uf.parent[p as usize] = p;
            uf.size[p as usize] = 1;
            let (col, row) = (p as usize % width, p as usize / width);
            let mut neighbors = [NONE; 4];
            if col > 0 {
                neighbors[0] = p - 1;
            }
            if col + 1 < width {
                neighbors[1] = p + 1;
            }
            if row > 0 {
                neighbors[2] = p - width as u32;
            }
            if row + 1 < height {
                neighbors[3] = p + width as u32;
            }
            for q in neighbors {
                if q != NONE && uf.parent[q as usize] != NONE {
                    uf.union(p, q);
                }
            }
        }

        let mut created = Vec::new();
        for &p in level_pixels {
            let r = uf.find(p);
            let id = if root_node[r as usize] == NONE {
                let id = nodes.len() as u32;
                nodes.push(Node {
                    level: t as u32,
                    area: uf.size[r as usize],
                    parent: NONE,
                    children: Vec::new(),
                    own: Vec::new(),
                });
                rep.push(p);
                root_node[r as usize] = id;
                created.push(r);
                id
            } else {
                root_node[r as usize]
            };
            nodes[id as usize].own.push(p);
        }

        let mut next_tops = Vec::with_capacity(tops.len() + created.len());
        for &top in &tops {
            let r = uf.find(rep[top as usize]);
            let new = root_node[r as usize];
            if new != NONE {
                nodes[top as usize].parent = new;
                nodes[new as usize].children.push(top);
            } else {
                next_tops.push(top);
            }
        }
        for &r in &created {
            next_tops.push(root_node[r as usize]);
            root_node[r as usize] = NONE;
        }
        tops = next_tops;
    }
    nodes
}

fn variation(nodes: &[Node], i: usize, delta: u32, level_count: usize) -> f64 {
    let node = &nodes[i];
    let lower = node.level.saturating_sub(delta).max(1);
    let mut outer = i;
    while nodes[outer].parent != NONE && nodes[nodes[outer].parent as usize].level >= lower {
        outer = nodes[outer].parent as usize;
    }
    let upper = node.level + delta;
    let mut inner = 0u32;
    if (upper as usize) < level_count {
        let mut stack: Vec<u32> = node.children.clone();
        while let Some(c) = stack.pop() {
            let c = &nodes[c as usize];
            if c.level >= upper {
                inner = inner.max(c.area);
            } else {
                stack.extend_from_slice(&c.children);
            }
        }
    }
    (nodes[outer].area as f64 - inner as f64) / node.area as f64
}

fn collect_pixels(nodes: &[Node], i: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(nodes[i].area as usize);
    let mut stack = vec![i as u32];
    while let Some(j) = stack.pop() {
        let node = &nodes[j as usize];
        out.extend_from_slice(&node.own);
        stack.extend_from_slice(&node.children);
    }
    out.sort_unstable();
    out
}

/// Detects bright MSERs. Output is ordered by level descending, then by the
/// smallest member pixel index.
pub fn detect_msers(map: MapView<'_>, params: &DetectorParams) -> Vec<Region> {
    let level_count = params.level_count;
    let (bins, max) = quantize(map.values, level_count);
    if max <= 0.0 {
        return Vec::new();
    }
    let delta = delta_in_bins(params.delta, max, level_count);
    let nodes = build_tree(&bins, map.width, map.height, level_count);
    let var: Vec<f64> = (0..nodes.len()).map(|i| variation(&nodes, i, delta, level_count)).collect();

    let candidate: Vec<bool> = (0..nodes.len())
        .map(|i| {
            let node = &nodes[i];
            let v = var[i];
            let parent_ok = node.parent == NONE || v <= var[node.parent as usize];
            let children_ok = node.children.iter().all(|&c| v < var[c as usize]);
            parent_ok && children_ok && v <= params.max_variation && node.area as usize >= params.min_area_px
        })
        .collect();

    // Parents are created after their children, so descending ids visit
    // ancestors first and their survival is final when a descendant asks.
    let mut survived = vec![false; nodes.len()];
    for i in (0..nodes.len()).rev() {
        if !candidate[i] {
            continue;
        }
        let mut a = nodes[i].parent;
        while a != NONE && !survived[a as usize] {
            a = nodes[a as usize].parent;
        }
        let mut keep = true;
        if a != NONE {
            let (pa, ca) = (nodes[a as usize].area as f64, nodes[i].area as f64);
            if (pa - ca) / pa < params.min_diversity && var[a as usize] <= var[i] {
                keep = false;
            }
        }
        survived[i] = keep;
    }

    struct Kept {
        node: usize,
        pixels: Vec<u32>,
        key: (i64, i64),
    }
    let mut kept: Vec<Kept> = Vec::new();
    for i in (0..nodes.len()).filter(|&i| survived[i]) {
        let pixels = collect_pixels(&nodes, i);
        let n = pixels.len() as f64;
        let (sx, sy) = pixels.iter().fold((0.0, 0.0), |(sx, sy), &p| {
            (sx + (p as usize % map.width) as f64, sy + (p as usize / map.width) as f64)
        });
        let key = ((sx / n).round() as i64, (sy / n).round() as i64);
        kept.push(Kept { node: i, pixels, key });
    }

    // location non-maxima suppression
    let more_stable = |a: &Kept, b: &Kept| {
        let (va, vb) = (var[a.node], var[b.node]);
        va < vb
            || (va == vb && nodes[a.node].level > nodes[b.node].level)
            || (va == vb && nodes[a.node].level == nodes[b.node].level && a.pixels[0] < b.pixels[0])
    };
    let mut winners: Vec<bool> = vec![true; kept.len()];
    for a in 0..kept.len() {
        for b in 0..kept.len() {
            if a != b && kept[a].key == kept[b].key && more_stable(&kept[b], &kept[a]) {
                winners[a] = false;
                break;
            }
        }
    }

    let mut regions: Vec<Region> = kept
        .into_iter()
        .zip(winners)
        .filter(|(_, w)| *w)
        .map(|(k, _)| Region {
            pixels: k
                .pixels
                .iter()
                .map(|&p| ((p as usize % map.width) as u32, (p as usize / map.width) as u32))
                .collect(),
            level: nodes[k.node].level,
            variation: var[k.node],
        })
        .collect();
    regions.sort_by(|a, b| {
        b.level.cmp(&a.level).then_with(|| {
            let ia = a.pixels[0].1 as usize * map.width + a.pixels[0].0 as usize;
            let ib = b.pixels[0].1 as usize * map.width + b.pixels[0].0 as usize;
            ia.cmp(&ib)
        })
    });
    regions
}
