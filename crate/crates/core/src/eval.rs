//! Retrieval evaluation: mAP and mP@10 with junk removal, medium and hard setups.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{DsmError, Result};
use crate::query::RankedList;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryTruth {
    pub query: String,
    pub easy: BTreeSet<String>,
    pub hard: BTreeSet<String>,
    pub junk: BTreeSet<String>,
}

/// Ground truth for a query set. When `images` is present every ranked id
/// must belong to it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<BTreeSet<String>>,
    pub queries: Vec<QueryTruth>,
}

impl GroundTruth {
    pub fn from_json(text: &str) -> Result<Self> {
        let gt: GroundTruth = serde_json::from_str(text)?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for q in &self.queries {
            if !seen.insert(&q.query) {
                return Err(DsmError::invalid(format!("query {:?} listed twice", q.query)));
            }
            let overlap = q
                .easy
                .intersection(&q.hard)
                .chain(q.easy.intersection(&q.junk))
                .chain(q.hard.intersection(&q.junk))
                .next();
            if let Some(id) = overlap {
                return Err(DsmError::invalid(format!("query {:?}: {id:?} is in two sets", q.query)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    Medium,
    Hard,
}

impl QueryTruth {
    /// `(positives, junk)` under `setup`; hard treats easy images as junk.
    pub fn split(&self, setup: Setup) -> (BTreeSet<&str>, BTreeSet<&str>) {
        fn s(set: &BTreeSet<String>) -> BTreeSet<&str> {
            set.iter().map(String::as_str).collect()
        }
        match setup {
            Setup::Medium => (&s(&self.easy) | &s(&self.hard), s(&self.junk)),
            Setup::Hard => (s(&self.hard), &s(&self.easy) | &s(&self.junk)),
        }
    }
}

/// Non-interpolated average precision over the ranking with junk removed.
pub fn average_precision(ranking: &[&str], positives: &BTreeSet<&str>, junk: &BTreeSet<&str>) -> f64 {
    if positives.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranking.iter().filter(|id| !junk.contains(*id)).enumerate() {
        if positives.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / positives.len() as f64
}

/// Precision at `k` over the ranking with junk removed, with the cutoff
/// lowered to the last positive's rank when that comes earlier.
pub fn precision_at(ranking: &[&str], positives: &BTreeSet<&str>, junk: &BTreeSet<&str>, k: usize) -> f64 {
    let ranks: Vec<usize> = ranking
        .iter()
        .filter(|id| !junk.contains(*id))
        .enumerate()
        .filter(|(_, id)| positives.contains(*id))
        .map(|(r, _)| r + 1)
        .collect();
    let Some(&last) = ranks.last() else {
        return 0.0;
    };
    let kq = last.min(k);
    ranks.iter().filter(|&&r| r <= kq).count() as f64 / kq as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query: String,
    pub ap: f64,
    pub p10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub setup: Setup,
    pub map: f64,
    pub mp10: f64,
    /// Queries with at least one positive, in ground-truth order.
    pub per_query: Vec<QueryScore>,
}

pub fn evaluate(runs: &[RankedList], gt: &GroundTruth, setup: Setup) -> Result<Metrics> {
    let by_query: BTreeMap<&str, &RankedList> = runs.iter().map(|r| (r.query.as_str(), r)).collect();
    if let Some(images) = &gt.images {
        for r in runs {
            if let Some(e) = r.results.iter().find(|e| !images.contains(&e.id)) {
                return Err(DsmError::UnknownImageId(e.id.clone()));
            }
        }
    }
    let mut per_query = Vec::new();
    for q in &gt.queries {
        let run = by_query
            .get(q.query.as_str())
            .ok_or_else(|| DsmError::invalid(format!("no ranking for query {:?}", q.query)))?;
        let (positives, junk) = q.split(setup);
        if positives.is_empty() {
            continue;
        }
        let ids = run.ids();
        per_query.push(QueryScore {
            query: q.query.clone(),
            ap: average_precision(&ids, &positives, &junk),
            p10: precision_at(&ids, &positives, &junk, 10),
        });
    }
    let mean = |f: fn(&QueryScore) -> f64| {
        if per_query.is_empty() {
            0.0
        } else {
            per_query.iter().map(f).sum::<f64>() / per_query.len() as f64
        }
    };
    Ok(Metrics { setup, map: mean(|q| q.ap), mp10: mean(|q| q.p10), per_query })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::{RankedEntry, Stage};

    fn run(query: &str, ids: &[&str]) -> RankedList {
        RankedList {
            query: query.into(),
            results: ids
                .iter()
                .map(|id| RankedEntry { id: id.to_string(), score: 0.0, stage: Stage::Cosine })
                .collect(),
        }
    }

    fn truth(query: &str, easy: &[&str], hard: &[&str], junk: &[&str]) -> QueryTruth {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        QueryTruth { query: query.into(), easy: s(easy), hard: s(hard), junk: s(junk) }
    }

    #[test]
    fn protocol_examples() {
        let pos: Vec<String> = (0..12).map(|i| format!("p{i}")).collect();
        let mut ids: Vec<&str> = pos.iter().map(String::as_str).collect();
        ids.extend(["n0", "n1"]);
        let gt = GroundTruth { images: None, queries: vec![truth("q", &ids[..12], &[], &[])] };
        let m = evaluate(&[run("q", &ids)], &gt, Setup::Medium).unwrap();
        assert_eq!((m.map, m.mp10), (1.0, 1.0));

        let gt = GroundTruth { images: None, queries: vec![truth("q", &["b"], &[], &[])] };
        assert_eq!(evaluate(&[run("q", &["a", "b"])], &gt, Setup::Medium).unwrap().map, 0.5);

        let gt = GroundTruth { images: None, queries: vec![truth("q", &["b"], &[], &["a"])] };
        assert_eq!(evaluate(&[run("q", &["a", "b"])], &gt, Setup::Medium).unwrap().map, 1.0);
    }

    #[test]
    fn hard_setup_treats_easy_as_junk() {
        let gt = GroundTruth { images: None, queries: vec![truth("q", &["e"], &["h"], &[])] };
        let r = [run("q", &["e", "x", "h"])];
        assert!((evaluate(&r, &gt, Setup::Medium).unwrap().map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(evaluate(&r, &gt, Setup::Hard).unwrap().map, 0.5);
    }

    #[test]
    fn zero_positive_queries_are_skipped() {
        let gt =
            GroundTruth { images: None, queries: vec![truth("q", &["a"], &[], &[]), truth("r", &[], &[], &["a"])] };
        let m = evaluate(&[run("q", &["a"]), run("r", &["a"])], &gt, Setup::Medium).unwrap();
        assert_eq!(m.per_query.len(), 1);
        assert_eq!(m.map, 1.0);
        let hard = evaluate(&[run("q", &["a"]), run("r", &["a"])], &gt, Setup::Hard).unwrap();
        assert!(hard.per_query.is_empty() && hard.map.is_sign_positive() && hard.map == 0.0);
    }

    #[test]
    fn errors() {
        let gt = GroundTruth { images: Some(["a".to_string()].into()), queries: vec![truth("q", &["a"], &[], &[])] };
        assert!(matches!(evaluate(&[run("q", &["zz"])], &gt, Setup::Medium), Err(DsmError::UnknownImageId(_))));
        assert!(evaluate(&[], &gt, Setup::Medium).is_err());
        assert!(GroundTruth::from_json(r#"{"queries": [{"query": "q", "easy": ["a"], "junk": ["a"]}]}"#).is_err());
    }

    #[test]
    fn precision_cutoff_follows_protocol() {
        let p: BTreeSet<&str> = ["a", "b"].into();
        let none = BTreeSet::new();
        assert_eq!(precision_at(&["a", "b", "x"], &p, &none, 10), 1.0);
        assert_eq!(precision_at(&["a", "x", "b"], &p, &none, 10), 2.0 / 3.0);
        assert_eq!(precision_at(&["x", "y"], &p, &none, 10), 0.0);
    }
}
