mod common;

use common::{brute_corres, brute_match, brute_ms, brute_rr, keypoints, random_homography, rng, unit_rows_f32};
use mmfeat::benchmark::{
    chance_matching_score, correspondence_counts, evaluate_pair, fit_homography, matching_score, ransac_homography, re_h, repeatable_rate, run_benchmark,
    run_from_features, write_ground_truth, BenchmarkConfig, Extractor, FeatureManifest, GroundTruth, RansacConfig,
};
use mmfeat::dataset::{PairData, PairSlot};
use mmfeat::features::{match_bidirectional, select_coords, KeypointSet};
use mmfeat::geometry::{Homography, TransformConfig};
use mmfeat::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Coordinates on a half-pixel lattice, so exact distance ties happen.
fn lattice_points(n: usize, size: usize, r: &mut rand_chacha::ChaCha8Rng) -> Vec<[f64; 2]> {
    (0..n).map(|_| [r.random_range(0..2 * size - 1) as f64 / 2.0, r.random_range(0..2 * size - 1) as f64 / 2.0]).collect()
}

#[test]
fn metrics_match_oracle() {
    let mut r = rng(21);
    for case in 0..200 {
        let size = r.random_range(16..48);
        let (na, nb, dim) = (r.random_range(0..=50), r.random_range(0..=50), 6);
        let a = keypoints(lattice_points(na, size, &mut r), unit_rows_f32(na, dim, &mut r), dim, (size, size));
        let mut cb = lattice_points(nb, size, &mut r);
        // Plant some near-correspondences so the greedy pass has work to do.
        let h = if case % 3 == 0 { Homography::translation(r.random_range(-4..=4) as f64 / 2.0, 1.0) } else { random_homography(size as f64, &mut r) };
        for (i, p) in a.coords.iter().enumerate().take(nb / 2) {
            if let Ok(q) = h.project(*p) {
                cb[i] = [(q[0] * 2.0).round() / 2.0, (q[1] * 2.0).round() / 2.0];
            }
        }
        let b = keypoints(cb, unit_rows_f32(nb, dim, &mut r), dim, (size, size));
        let thresholds: Vec<f64> = (1..=10).map(f64::from).collect();
        let counts = correspondence_counts(&a, &b, &h, &thresholds);
        let matches = match_bidirectional(&a, &b);
        assert_eq!(matches.pairs, brute_match(&a, &b));
        for (ti, &t) in thresholds.iter().enumerate() {
            assert_eq!(counts[ti], brute_corres(&a, &b, &h, t), "case {case} t {t}");
            assert!((repeatable_rate(&a, &b, &h, t) - brute_rr(&a, &b, &h, t)).abs() < 1e-12);
            assert!((matching_score(&matches, &a, &b, &h, t) - brute_ms(&matches.pairs, &a, &b, &h, t)).abs() < 1e-12);
        }
    }
}

#[test]
fn keypoints_outside_the_overlap_do_not_count() {
    let (d, mut r) = (4, rng(1));
    let a = keypoints(vec![[2.0, 2.0], [28.0, 5.0]], unit_rows_f32(2, d, &mut r), d, (32, 32));
    // Shifted 20 px right: A's second point leaves B, B's first point has
    // no preimage in A.
    let h = Homography::translation(20.0, 0.0);
    let b = keypoints(vec![[1.0, 1.0], [22.0, 2.0]], unit_rows_f32(2, d, &mut r), d, (32, 32));
    assert_eq!(correspondence_counts(&a, &b, &h, &[1.0]), vec![1]);
    assert_eq!(repeatable_rate(&a, &b, &h, 1.0), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Under a rigid motion distances are preserved, so swapping the images
    /// and inverting the homography changes nothing.
    #[test]
    fn repeatability_is_symmetric_under_rigid_motion(seed in 0u64..10_000, deg in -30.0f64..30.0, tx in -10.0f64..10.0, ty in -10.0f64..10.0) {
        let mut r = rng(seed);
        let size = 40;
        let h = Homography::translation(tx, ty).compose(&Homography::rotation_about(deg, [20.0, 20.0])).unwrap();
        let ca: Vec<[f64; 2]> = (0..30).map(|_| [r.random_range(0.0..39.0), r.random_range(0.0..39.0)]).collect();
        let cb: Vec<[f64; 2]> = ca.iter().map(|&p| h.project(p).unwrap()).map(|q| [q[0] + r.random_range(-2.0..2.0), q[1] + r.random_range(-2.0..2.0)]).collect();
        let a = keypoints(ca, vec![0.0; 30], 1, (size, size));
        let b = keypoints(cb, vec![0.0; 30], 1, (size, size));
        let inv = h.inverse();
        for t in [1.0, 2.0, 3.0] {
            prop_assert_eq!(correspondence_counts(&a, &b, &h, &[t]), correspondence_counts(&b, &a, &inv, &[t]));
            prop_assert!((repeatable_rate(&a, &b, &h, t) - repeatable_rate(&b, &a, &inv, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn rates_are_bounded(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let size = 32;
        let a = keypoints(lattice_points(40, size, &mut r), unit_rows_f32(40, 4, &mut r), 4, (size, size));
        let b = keypoints(lattice_points(25, size, &mut r), unit_rows_f32(25, 4, &mut r), 4, (size, size));
        let h = random_homography(size as f64, &mut r);
        let mut prev = 0.0;
        for t in 1..=10 {
            let rr = repeatable_rate(&a, &b, &h, t as f64);
            prop_assert!((0.0..=1.0).contains(&rr) && rr >= prev);
            prev = rr;
        }
    }
}

#[test]
fn ransac_recovers_a_homography_through_outliers() {
    let mut r = rng(8);
    for _ in 0..10 {
        let h = random_homography(256.0, &mut r);
        let src: Vec<[f64; 2]> = (0..120).map(|_| [r.random_range(0.0..255.0), r.random_range(0.0..255.0)]).collect();
        let dst: Vec<[f64; 2]> = src
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if i % 10 < 3 {
                    [r.random_range(0.0..255.0), r.random_range(0.0..255.0)]
                } else {
                    let q = h.project(p).unwrap();
                    [q[0] + r.random_range(-0.5..0.5), q[1] + r.random_range(-0.5..0.5)]
                }
            })
            .collect();
        let est = ransac_homography(&src, &dst, &RansacConfig { threshold: 3.0, iterations: 2000 }, &mut r).unwrap();
        assert!(re_h(&h, &est) < 1.0, "RE_H {}", re_h(&h, &est));
        // A plain least-squares fit is pulled off by the outliers.
        assert!(re_h(&h, &fit_homography(&src, &dst).unwrap()) > 1.0);
    }
}

#[test]
fn too_few_matches_fail_registration() {
    let p = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let e = ransac_homography(&p, &p, &RansacConfig::default(), &mut rng(0)).unwrap_err();
    assert!(matches!(e, Error::Registration(_)));
}

#[test]
fn random_descriptors_score_near_zero() {
    let mut r = rng(4);
    let size = 256;
    let coords: Vec<[f64; 2]> = (0..1024).map(|_| [r.random_range(0.0..255.0), r.random_range(0.0..255.0)]).collect();
    let h = random_homography(size as f64, &mut r);
    let cb: Vec<[f64; 2]> = coords.iter().map(|&p| h.project(p).unwrap()).collect();
    let a = keypoints(coords, vec![0.0; 1024 * 128], 128, (size, size));
    let b = keypoints(cb, vec![0.0; 1024 * 128], 128, (size, size));
    let chance = chance_matching_score(&a, &b, &h, 3.0, 5, &mut r);
    assert!(chance < 0.02, "chance MS {chance}");
}

#[test]
fn perfect_features_score_one() {
    let mut r = rng(9);
    let size = 128;
    let h = random_homography(size as f64, &mut r);
    let ca: Vec<[f64; 2]> = (0..200)
        .map(|_| [r.random_range(20.0..108.0), r.random_range(20.0..108.0)])
        .filter(|&p| h.project(p).is_ok_and(|q| q.iter().all(|&v| (0.0..127.0).contains(&v))))
        .collect();
    let n = ca.len();
    let desc = unit_rows_f32(n, 16, &mut r);
    let cb: Vec<[f64; 2]> = ca.iter().map(|&p| h.project(p).unwrap()).collect();
    let a = keypoints(ca, desc.clone(), 16, (size, size));
    let b = keypoints(cb, desc, 16, (size, size));
    let gt = GroundTruth { homography: h, exact: true, landmarks: None };
    let row = evaluate_pair("p", &a, &b, &gt, &BenchmarkConfig::default()).unwrap();
    assert_eq!(row.matches, n);
    assert!(row.rr.iter().chain(&row.ms).all(|&v| v == 1.0), "{row:?}");
    assert!(row.re_h.unwrap() < 1e-6 && row.re_m.is_none() && row.success(10.0));
}

/// Local maxima of intensity with a normalized 5x5 patch as descriptor.
struct PatchExtractor;

impl Extractor for PatchExtractor {
    fn extract(&self, image: &Tensor<f32>, _modality: &str, k: usize) -> mmfeat::Result<KeypointSet> {
        let (h, w) = (image.shape()[2], image.shape()[3]);
        let px = image.data();
        let coords = select_coords(&px[..h * w], h, w, k, 3.0, 4);
        let mut descriptors = Vec::new();
        for &(y, x) in &coords {
            let mut patch: Vec<f32> = (0..25).map(|i| px[(y + i / 5 - 2) * w + x + i % 5 - 2]).collect();
            let m = patch.iter().sum::<f32>() / 25.0;
            patch.iter_mut().for_each(|v| *v -= m);
            let n = patch.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-6);
            descriptors.extend(patch.iter().map(|v| v / n));
        }
        Ok(KeypointSet {
            scores: coords.iter().map(|&(y, x)| px[y * w + x]).collect(),
            coords: coords.iter().map(|&(y, x)| [x as f64, y as f64]).collect(),
            descriptors,
            dim: 25,
            image_size: (h, w),
            shortfall: coords.len() < k,
        })
    }
}

fn slots() -> Vec<PairSlot> {
    let src = mmfeat::dataset::DatasetSource::parse("synth://identity-gray?count=4&size=96").unwrap();
    let mut s = src.load().unwrap();
    s.insert(1, PairSlot { id: "broken".into(), data: Err("image missing".into()) });
    // Landmarks only: the homography is fitted and only RE_M applies.
    let mut lm: PairData = s[0].data.clone().unwrap();
    lm.id = "landmarks".into();
    let shift = Homography::translation(3.0, -2.0);
    lm.image_b = mmfeat::geometry::warp_image(&lm.image_b, &shift, (96, 96)).0;
    lm.landmarks = Some([[10.0, 10.0], [80.0, 12.0], [15.0, 85.0], [70.0, 70.0], [40.0, 50.0]].iter().map(|p| [p[0], p[1], p[0] + 3.0, p[1] - 2.0]).collect());
    s.push(PairSlot { id: lm.id.clone(), data: Ok(lm) });
    s
}

fn cfg(workers: usize) -> BenchmarkConfig {
    BenchmarkConfig {
        k: 128,
        workers,
        ransac: RansacConfig { threshold: 3.0, iterations: 500 },
        transform: TransformConfig { distortion_scale: [0.0, 0.05], rotation_deg: [-5.0, 5.0], scale: [0.95, 1.0], seed: 0 },
        ..BenchmarkConfig::default()
    }
}

#[test]
fn benchmark_bookkeeping_and_determinism() {
    let s = slots();
    let one = run_benchmark(&s, &PatchExtractor, &cfg(1)).unwrap();
    let four = run_benchmark(&s, &PatchExtractor, &cfg(4)).unwrap();
    assert_eq!(one, four);
    assert_eq!(one.rows.len(), 5);
    assert_eq!(one.skipped.len(), 1);
    assert_eq!(one.skipped[0].pair_id, "broken");
    assert!(one.skipped[0].reason.contains("image missing"));
    let ids: Vec<&str> = one.rows.iter().map(|r| r.pair_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    let lm = one.rows.iter().find(|r| r.pair_id == "landmarks").unwrap();
    assert!(lm.re_h.is_none() && lm.re_m.is_some());
    // Identical modalities and mild warps: a patch extractor registers them.
    assert!(one.srr() > 0.5, "{}", one.summary_text());
    assert_eq!(one.srr(), one.sr() as f64 / 5.0);
}

#[test]
fn stored_features_give_the_same_report() {
    let s = slots();
    let c = cfg(2);
    let live = run_benchmark(&s, &PatchExtractor, &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = FeatureManifest::default();
    for slot in &s {
        let Ok(data) = slot.data.clone() else { continue };
        let pair = mmfeat::benchmark::prepare_pair(data, &c.transform, c.seed).unwrap();
        let fa = format!("{}.a.feat", pair.id);
        let fb = format!("{}.b.feat", pair.id);
        PatchExtractor.extract(&pair.image_a, "", c.k).unwrap().save(&dir.path().join(&fa), None).unwrap();
        PatchExtractor.extract(&pair.image_b, "", c.k).unwrap().save(&dir.path().join(&fb), None).unwrap();
        manifest.pairs.push(write_ground_truth(dir.path(), &pair.id, &pair.gt, fa.into(), fb.into()).unwrap());
    }
    // A corrupt feature file is skipped, not fatal.
    std::fs::write(dir.path().join("bad.a.feat"), b"nope").unwrap();
    let mut bad = manifest.pairs[0].clone();
    bad.id = "bad".into();
    bad.features_a = "bad.a.feat".into();
    manifest.pairs.push(bad);
    let path = dir.path().join("features.toml");
    manifest.write(&path).unwrap();

    let stored = run_from_features(&path, &c).unwrap();
    assert_eq!(stored.rows, live.rows);
    assert_eq!(stored.skipped.len(), 1);
    assert_eq!(stored.skipped[0].pair_id, "bad");
}
