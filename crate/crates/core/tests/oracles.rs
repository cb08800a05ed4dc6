//! Library results against brute-force reference computations.

mod common;

use common::*;
use graphstitch::evaluation::{dice, hd95, ConfusionCounts};
use graphstitch::graph::{annotate_progress, build_unet_template, UNetConfig};
use graphstitch::matching::{compatibility, hirschberg_match, similarity_matrix, validate_acyclic, MatchingConfig, SimilarityMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn hirschberg_equals_quadratic_dp_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (n, m) = (rng.gen_range(1..=30), rng.gen_range(1..=30));
        let s = random_similarity(&mut rng, n, m);
        let r = hirschberg_match(&s).unwrap();
        let dp = quadratic_alignment(&s);
        assert!((r.total_score - dp).abs() < 1e-9, "{n}x{m}: {} vs {dp}", r.total_score);
        let sum: f64 = r.pairs.iter().map(|p| p.similarity).sum();
        assert!((sum - r.total_score).abs() < 1e-12);
        assert!(r.pairs.windows(2).all(|w| w[0].a < w[1].a && w[0].b < w[1].b));
        assert!(r.pairs.iter().all(|p| p.similarity > 0.0));
    }
}

#[test]
fn quadratic_dp_equals_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let (n, m) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let s = random_similarity(&mut rng, n, m);
        assert!((quadratic_alignment(&s) - exhaustive_alignment(&s)).abs() < 1e-12);
    }
}

#[test]
fn matchings_on_random_dags_are_acyclic_and_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let n = rng.gen_range(1..=18);
        let a = random_dag(&mut rng, n);
        let n = rng.gen_range(1..=18);
        let b = random_dag(&mut rng, n);
        let (na, nb) = (a.ordered_ids(), b.ordered_ids());
        assert!(na.len() <= 30 && nb.len() <= 30);
        let inner = |ids: &[graphstitch::graph::NodeId], i: usize| i > 0 && i + 1 < ids.len();
        let values = (0..na.len() * nb.len())
            .map(|q| {
                let (i, j) = (q / nb.len(), q % nb.len());
                if inner(&na, i) && inner(&nb, j) {
                    rng.gen_range(-0.2..1.0)
                } else {
                    -1.0
                }
            })
            .collect();
        let s = SimilarityMatrix::new(na.clone(), nb.clone(), values).unwrap();
        let r = hirschberg_match(&s).unwrap();
        assert!((r.total_score - quadratic_alignment(&s)).abs() < 1e-9);
        assert!(validate_acyclic(&a, &b, &r).unwrap());
    }
}

#[test]
fn progress_matches_enumerated_longest_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..40 {
        let n = rng.gen_range(1..=12);
        let g = random_dag(&mut rng, n);
        let p = annotate_progress(&g).unwrap();
        let (d_in, d_out) = enumerated_path_lengths(&g);
        for (id, d) in d_in {
            assert_eq!(p.d_in[&id], d);
        }
        for (id, d) in d_out {
            assert_eq!(p.d_out[&id], d);
            let expect = p.d_in[&id] as f64 / (p.d_in[&id] + d) as f64;
            assert_eq!(p.of(id).unwrap(), expect);
        }
        assert_eq!(p.of(g.input().unwrap()).unwrap(), 0.0);
        assert_eq!(p.of(g.output().unwrap()).unwrap(), 1.0);
    }
}

#[test]
fn similarity_entries_match_direct_substitution() {
    let a = build_unet_template(&UNetConfig { image_size: 16, seed: 1, ..UNetConfig::default() }).unwrap();
    let b = build_unet_template(&UNetConfig { image_size: 16, depth: 2, seed: 2, ..UNetConfig::default() }).unwrap();
    let (pa, pb) = (annotate_progress(&a).unwrap(), annotate_progress(&b).unwrap());
    for (c, bonus) in [(1.0, false), (0.5, false), (1.0, true), (0.3, true)] {
        let cfg = MatchingConfig { c, cardinality_bonus: bonus, ..MatchingConfig::default() };
        let s = similarity_matrix(&a, &pa, &b, &pb, &cfg).unwrap();
        for (i, va) in a.ordered().iter().enumerate() {
            for (j, vb) in b.ordered().iter().enumerate() {
                let expected = if compatibility(va, vb, &cfg) {
                    let d = pa.of(va.id).unwrap() - pb.of(vb.id).unwrap();
                    let mut e = 1.0 - c * d * d;
                    if bonus {
                        e += (a.in_degree(va.id) * b.in_degree(vb.id) + a.out_degree(va.id) * b.out_degree(vb.id)) as f64;
                    }
                    e
                } else {
                    -1.0
                };
                assert!((s.get(i, j) - expected).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn metrics_equal_brute_force_on_every_3x3_pair() {
    let mask = |bits: u32| (0..9).map(|i| ((bits >> i) & 1) as u8).collect::<Vec<u8>>();
    for p in 0..512u32 {
        let pred = mask(p);
        for r in 0..512u32 {
            let reference = mask(r);
            let c = ConfusionCounts::from_masks(&pred, &reference).unwrap();
            assert_eq!(dice(&c), brute_dice(&pred, &reference));
            assert_eq!(hd95(&pred, &reference, 3, 3, [1.0, 1.0]).unwrap(), brute_hd95(&pred, &reference, 3, 3, [1.0, 1.0]));
        }
    }
}

#[test]
fn hd95_matches_brute_force_with_anisotropic_spacing() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..100 {
        let spacing = [rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0)];
        let (pred, reference) = (random_mask(&mut rng, 16, 16), random_mask(&mut rng, 16, 16));
        let fast = hd95(&pred, &reference, 16, 16, spacing).unwrap();
        let slow = brute_hd95(&pred, &reference, 16, 16, spacing);
        assert!((fast - slow).abs() <= 1e-9, "{fast} vs {slow}");
        let c = ConfusionCounts::from_masks(&pred, &reference).unwrap();
        assert!((dice(&c) - brute_dice(&pred, &reference)).abs() < 1e-15);
    }
}
