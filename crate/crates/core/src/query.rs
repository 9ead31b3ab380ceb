//! Query flow: cosine ranking, spatial re-ranking of the top results and
//! optional diffusion seeded by the spatially verified images.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{diffuse, seed_scores, Diffusion};
use crate::error::{DsmError, Result};
use crate::features::{detect_features, Role};
use crate::global::{apply_whitening, cosine_rank, describe};
use crate::index::Index;
use crate::matcher::{match_multiscale, similarity, MatchResult};
use crate::tensor::TensorSet;

pub const DIFFUSION_TOL: f64 = 1e-6;
pub const DIFFUSION_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Cosine,
    Spatial,
    Diffusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: String,
    pub score: f64,
    pub stage: Stage,
}

/// A permutation of the database for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: String,
    pub results: Vec<RankedEntry>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<&str> {
        self.results.iter().map(|e| e.id.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryOptions {
    pub rerank_top: usize,
    pub diffuse: bool,
}

impl QueryOptions {
    pub fn from_index(index: &Index) -> Self {
        QueryOptions { rerank_top: index.config.rerank_top, diffuse: false }
    }
}

/// Every intermediate ranking of one query.
#[derive(Debug, Clone)]
pub struct QueryTrace {
    pub cosine: RankedList,
    pub spatial: RankedList,
    pub diffusion: Option<RankedList>,
    /// `(database index, result)` for each spatially matched image, in cosine order.
    pub matches: Vec<(usize, MatchResult)>,
    pub solver: Option<Diffusion>,
}

impl QueryTrace {
    pub fn final_list(&self) -> &RankedList {
        self.diffusion.as_ref().unwrap_or(&self.spatial)
    }
}

fn list(index: &Index, query: &str, order: &[(usize, f64, Stage)]) -> RankedList {
    RankedList {
        query: query.to_string(),
        results: order
            .iter()
            .map(|&(i, score, stage)| RankedEntry { id: index.image_ids[i].clone(), score, stage })
            .collect(),
    }
}

pub fn query(index: &Index, query_set: &TensorSet, opts: &QueryOptions) -> Result<RankedList> {
    Ok(query_trace(index, query_set, opts)?.final_list().clone())
}

pub fn query_trace(index: &Index, query_set: &TensorSet, opts: &QueryOptions) -> Result<QueryTrace> {
    query_set.validate()?;
    if query_set.channels() != index.channels && !index.is_empty() {
        return Err(DsmError::invalid(format!(
            "query has {} channels, index has {}",
            query_set.channels(),
            index.channels
        )));
    }
    let config = &index.config;
    let n = index.len();
    let qid = query_set.image_id.as_str();
    if n == 0 {
        let empty = list(index, qid, &[]);
        return Ok(QueryTrace {
            cosine: empty.clone(),
            spatial: empty.clone(),
            diffusion: opts.diffuse.then_some(empty),
            matches: Vec::new(),
            solver: None,
        });
    }

    // (1) cosine
    let raw = describe(query_set, config.global_pooling())?;
    let qdesc = apply_whitening(&index.whitening, &raw.values)?;
    let cosine_order = cosine_rank(&qdesc, &index.descriptors);
    let cos_of: Vec<f64> = {
        let mut c = vec![0.0; n];
        for &(i, s) in &cosine_order {
            c[i] = s;
        }
        c
    };
    let cosine: Vec<(usize, f64, Stage)> = cosine_order.iter().map(|&(i, s)| (i, s, Stage::Cosine)).collect();

    // (2) spatial re-ranking of the top `rerank_top`
    let top = opts.rerank_top.min(n);
    let qfeatures =
        detect_features(query_set, &config.detector_params(index.delta), Role::Query, &config.feature_params())?;
    let qscales = qfeatures.split_scales(query_set.scales.len());
    let params = config.match_params();
    let matches: Vec<(usize, MatchResult)> = cosine_order[..top]
        .par_iter()
        .map(|&(i, _)| (i, match_multiscale(&qscales, &index.scale_features(i), &params)))
        .collect();
    let mut head: Vec<(usize, usize, usize)> =
        matches.iter().enumerate().map(|(rank, (i, m))| (rank, *i, similarity(m))).collect();
    head.sort_by(|a, b| {
        b.2.cmp(&a.2).then(cos_of[b.1].partial_cmp(&cos_of[a.1]).unwrap_or(Ordering::Equal)).then(a.0.cmp(&b.0))
    });
    let mut spatial: Vec<(usize, f64, Stage)> = head.iter().map(|&(_, i, s)| (i, s as f64, Stage::Spatial)).collect();
    spatial.extend_from_slice(&cosine[top..]);

    // (3) diffusion
    let (diffusion, solver) = if opts.diffuse {
        let graph =
            index.graph.as_ref().ok_or_else(|| DsmError::invalid("index was built without a diffusion graph"))?;
        let verified: Vec<(usize, usize, f64)> = head.iter().map(|&(_, i, s)| (i, s, cos_of[i])).collect();
        let mut y = seed_scores(n, &verified, config.seeds_top, config.seeds_pool);
        if y.iter().all(|&v| v == 0.0) {
            for &(i, s) in cosine_order.iter().take(config.seeds_top) {
                y[i] = s.max(0.0);
            }
        }
        let solved = diffuse(graph, &y, config.alpha, DIFFUSION_TOL, DIFFUSION_MAX_ITER)?;
        let mut order: Vec<(usize, usize)> = spatial.iter().enumerate().map(|(pos, e)| (pos, e.0)).collect();
        order.sort_by(|a, b| {
            solved.scores[b.1].partial_cmp(&solved.scores[a.1]).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
        });
        let ranked: Vec<(usize, f64, Stage)> =
            order.iter().map(|&(_, i)| (i, solved.scores[i], Stage::Diffusion)).collect();
        (Some(list(index, qid, &ranked)), Some(solved))
    } else {
        (None, None)
    };

    Ok(QueryTrace {
        cosine: list(index, qid, &cosine),
        spatial: list(index, qid, &spatial),
        diffusion,
        matches,
        solver,
    })
}
