mod common;

use std::collections::BTreeSet;

use dsm::mser::{compute_delta, detect_msers, DetectorParams, MapView};
use dsm::tensor::{synth_tensor, Blob};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn as_set(regions: &[dsm::mser::Region]) -> BTreeSet<Vec<(u32, u32)>> {
    regions.iter().map(|r| r.pixels.clone()).collect()
}

#[test]
fn matches_brute_force_oracle_on_integer_maps() {
    for (levels, delta) in [(11usize, 1.0f64), (64, 2.0), (11, 3.0)] {
        let params = DetectorParams { delta, level_count: levels, ..Default::default() };
        for seed in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = common::random_integer_map(&mut rng, 16, 16, 10);
            let got = detect_msers(MapView::new(16, 16, &map), &params);
            let want = common::oracle_msers(&map, 16, 16, &params);
            assert_eq!(as_set(&got), want, "levels {levels} delta {delta} seed {seed}");
        }
    }
}

#[test]
fn oracle_agrees_on_smooth_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let blobs: Vec<Blob> = (0..4)
            .map(|_| Blob {
                channel: 0,
                center: [rng.random_range(2.0..18.0), rng.random_range(2.0..14.0)],
                cov: [[rng.random_range(0.8..4.0), 0.0], [0.0, rng.random_range(0.8..4.0)]],
                amplitude: rng.random_range(0.3..1.0),
            })
            .collect();
        let t = synth_tensor(&blobs, 1, 16, 20).unwrap();
        let params = DetectorParams { delta: compute_delta(t.channel(0), 0.6).unwrap(), ..Default::default() };
        let got = detect_msers(MapView::new(20, 16, t.channel(0)), &params);
        assert_eq!(as_set(&got), common::oracle_msers(t.channel(0), 20, 16, &params));
    }
}

#[test]
fn regions_are_nested_or_disjoint() {
    let params =
        DetectorParams { delta: 1.0, level_count: 11, max_variation: 2.0, min_diversity: 0.1, ..Default::default() };
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let map = common::random_integer_map(&mut rng, 16, 16, 10);
        let regions = detect_msers(MapView::new(16, 16, &map), &params);
        for a in &regions {
            for b in &regions {
                let sa: BTreeSet<_> = a.pixels.iter().collect();
                let sb: BTreeSet<_> = b.pixels.iter().collect();
                assert!(sa.is_disjoint(&sb) || sa.is_subset(&sb) || sb.is_subset(&sa));
            }
        }
    }
}

#[test]
fn translation_equivariance() {
    let blobs = [
        Blob { channel: 0, center: [8.0, 7.0], cov: [[3.0, 0.8], [0.8, 2.0]], amplitude: 1.0 },
        Blob { channel: 0, center: [17.0, 15.0], cov: [[1.5, 0.0], [0.0, 2.5]], amplitude: 0.7 },
    ];
    let (w, h) = (30, 26);
    let (dx, dy) = (3u32, 2u32);
    let base = synth_tensor(&blobs, 1, h, w).unwrap();
    let mut shifted = vec![0.0f32; w * h];
    for r in 0..h - dy as usize {
        for c in 0..w - dx as usize {
            shifted[(r + dy as usize) * w + c + dx as usize] = base.channel(0)[r * w + c];
        }
    }
    let params = DetectorParams { delta: 0.02, ..Default::default() };
    let touches = |r: &dsm::mser::Region| {
        r.pixels.iter().any(|&(c, row)| {
            c == 0 || row == 0 || c as usize >= w - 1 - dx as usize || row as usize >= h - 1 - dy as usize
        })
    };
    let a: BTreeSet<Vec<(u32, u32)>> = detect_msers(MapView::new(w, h, base.channel(0)), &params)
        .iter()
        .filter(|r| !touches(r))
        .map(|r| r.pixels.iter().map(|&(c, row)| (c + dx, row + dy)).collect())
        .collect();
    let b: BTreeSet<Vec<(u32, u32)>> = detect_msers(MapView::new(w, h, &shifted), &params)
        .iter()
        .filter(|r| {
            r.pixels.iter().all(|&(c, row)| c > dx && row > dy && (c as usize) < w - 1 && (row as usize) < h - 1)
        })
        .map(|r| r.pixels.clone())
        .collect();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn affine_intensity_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let map = common::random_integer_map(&mut rng, 16, 16, 10);
        let scale = 4.0f32;
        let scaled: Vec<f32> = map.iter().map(|&v| v * scale).collect();
        let p1 = DetectorParams { delta: compute_delta(&map, 0.6).unwrap(), level_count: 11, ..Default::default() };
        let p2 = DetectorParams { delta: compute_delta(&scaled, 0.6).unwrap(), ..p1 };
        let a = detect_msers(MapView::new(16, 16, &map), &p1);
        let b = detect_msers(MapView::new(16, 16, &scaled), &p2);
        assert_eq!(as_set(&a), as_set(&b));
    }
}

#[test]
fn output_is_deterministic_and_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let map = common::random_integer_map(&mut rng, 16, 16, 10);
    let params = DetectorParams { delta: 1.0, level_count: 11, ..Default::default() };
    let a = detect_msers(MapView::new(16, 16, &map), &params);
    let b = detect_msers(MapView::new(16, 16, &map), &params);
    assert_eq!(a, b);
    for pair in a.windows(2) {
        let first = |r: &dsm::mser::Region| r.pixels[0].1 * 16 + r.pixels[0].0;
        assert!(pair[0].level > pair[1].level || (pair[0].level == pair[1].level && first(&pair[0]) < first(&pair[1])));
    }
}
