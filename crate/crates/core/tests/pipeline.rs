use dsm::config::Config;
use dsm::eval::{evaluate, Setup};
use dsm::features::{detect_features, Role};
use dsm::index::{build_index, index_from_bytes, index_to_bytes, FEATURE_RECORD_BYTES};
use dsm::matcher::similarity;
use dsm::query::{query, query_trace, QueryOptions, RankedEntry, RankedList, Stage};
use dsm::synth::{synth_dataset, SynthConfig, SynthDataset};
use dsm::tensor::{FeatureTensor, TensorSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> SynthDataset {
    synth_dataset(&SynthConfig { queries: 3, multiscale: false, ..SynthConfig::default() }).unwrap()
}

// At alpha near 1 propagation inside a tight cluster outweighs the seed, so
// the diffusion part of this check runs with moderate alpha.
#[test]
fn self_query_ranks_first_after_every_stage() {
    let ds = small();
    let cfg = Config { alpha: 0.5, ..Config::default() };
    let index = build_index(ds.database.clone(), &cfg, None).unwrap();
    let opts = QueryOptions { diffuse: true, ..QueryOptions::from_index(&index) };
    for set in ds.database.iter().step_by(5) {
        let mut q = set.clone();
        q.image_id = format!("{}_copy", set.image_id);
        let t = query_trace(&index, &q, &opts).unwrap();
        for list in [&t.cosine, &t.spatial, t.diffusion.as_ref().unwrap()] {
            assert_eq!(list.results[0].id, set.image_id, "{:?}", list.results[0].stage);
        }
        let pos = index.position(&set.image_id).unwrap();
        let m = &t.matches.iter().find(|(i, _)| *i == pos).unwrap().1;
        assert_eq!(similarity(m), index.features[pos].len());
    }
}

#[test]
fn spatial_stage_only_permutes_the_head() {
    let ds = small();
    let index = build_index(ds.database, &Config::default(), None).unwrap();
    for top in [0, 1, 5, 12] {
        let opts = QueryOptions { rerank_top: top, diffuse: false };
        for q in &ds.queries {
            let t = query_trace(&index, q, &opts).unwrap();
            let (c, s) = (t.cosine.ids(), t.spatial.ids());
            assert_eq!(c[top..], s[top..]);
            let mut head_c = c[..top].to_vec();
            let mut head_s = s[..top].to_vec();
            head_c.sort();
            head_s.sort();
            assert_eq!(head_c, head_s);
            assert!(t.spatial.results[top..].iter().all(|e| e.stage == Stage::Cosine));
        }
    }
}

#[test]
fn query_is_deterministic_across_reloads() {
    let ds = small();
    let index = build_index(ds.database, &Config::default(), None).unwrap();
    let reloaded = index_from_bytes(&index_to_bytes(&index).unwrap()).unwrap();
    let opts = QueryOptions { diffuse: true, ..QueryOptions::from_index(&index) };
    for q in &ds.queries {
        assert_eq!(query(&index, q, &opts).unwrap(), query(&reloaded, q, &opts).unwrap());
    }
}

#[test]
fn random_permutations_score_below_pipeline() {
    let ds = synth_dataset(&SynthConfig::default()).unwrap();
    let index = build_index(ds.database, &Config::default(), None).unwrap();
    let opts = QueryOptions { diffuse: true, ..QueryOptions::from_index(&index) };
    let runs: Vec<RankedList> = ds.queries.iter().map(|q| query(&index, q, &opts).unwrap()).collect();
    let pipeline = evaluate(&runs, &ds.ground_truth, Setup::Medium).unwrap().map;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total = 0.0;
    for _ in 0..100 {
        let shuffled: Vec<RankedList> = runs
            .iter()
            .map(|r| {
                let mut results: Vec<RankedEntry> = r.results.clone();
                results.shuffle(&mut rng);
                RankedList { query: r.query.clone(), results }
            })
            .collect();
        total += evaluate(&shuffled, &ds.ground_truth, Setup::Medium).unwrap().map;
    }
    assert!(total / 100.0 < pipeline, "random {} vs pipeline {pipeline}", total / 100.0);
}

#[test]
fn index_holds_no_tensors() {
    let ds = small();
    let cfg = Config { diffusion: false, ..Config::default() };
    let index = build_index(ds.database, &cfg, None).unwrap();
    let (n, k) = (index.len(), index.channels);
    let bytes = index_to_bytes(&index).unwrap().len();
    let ids: usize = index.image_ids.iter().map(|s| s.len() + 3).sum();
    // shared overhead: header, section framing, config JSON, whitening mean and matrix
    let shared = 4096 + 4 * k + 4 * k * k;
    let per_image = FEATURE_RECORD_BYTES * cfg.budget + 4 * k + 4;
    assert!(bytes <= shared + ids + n * per_image, "{bytes} bytes for {n} images");
}

#[test]
fn featureless_query_keeps_cosine_order() {
    let ds = small();
    let index = build_index(ds.database, &Config::default(), None).unwrap();
    let k = index.channels;
    let flat = TensorSet::single("flat", FeatureTensor::new(k, 20, 20, vec![0.5; k * 400]).unwrap());
    let cfg = &index.config;
    let feats = detect_features(&flat, &cfg.detector_params(index.delta), Role::Query, &cfg.feature_params()).unwrap();
    assert!(feats.is_empty());
    let opts = QueryOptions { diffuse: true, ..QueryOptions::from_index(&index) };
    let t = query_trace(&index, &flat, &opts).unwrap();
    assert_eq!(t.cosine.ids(), t.spatial.ids());
    assert_eq!(t.diffusion.unwrap().results.len(), index.len());
}
