//! Invariants checked over random inputs.

use proptest::prelude::*;

use synthgauge::classifier::{auc, metrics_from_scores};
use synthgauge::fedsim::fedavg;
use synthgauge::metrics::{authenticity_rows, fid_rows, kid_rows, precision_recall_rows, DistanceStats};
use synthgauge::numerics::{euclidean, Matrix};
use synthgauge::projector::generate_neighbors;
use synthgauge::sefa::{edit, factorize_weight};
use synthgauge::toygen::ToyGenerator;
use synthgauge::viz::{conditional_probabilities, silhouette};

fn points(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), n)
}

fn labelled(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    prop::collection::vec((-5.0f64..5.0, 0u8..2), n).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fid_is_symmetric_and_non_negative(a in points(6..20, 3), b in points(6..20, 3)) {
        let ab = fid_rows(&a, &b).unwrap();
        let ba = fid_rows(&b, &a).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab.abs()));
    }

    #[test]
    fn precision_recall_swap_roles(a in points(5..15, 2), b in points(5..15, 2), k in 1usize..4) {
        let (p, r) = precision_recall_rows(&a, &b, k).unwrap();
        let (p2, r2) = precision_recall_rows(&b, &a, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
        prop_assert_eq!((p, r), (r2, p2));
    }

    #[test]
    fn authenticity_score_counts_flags(train in points(2..15, 2), gen in points(1..15, 2)) {
        let a = authenticity_rows(&train, &gen).unwrap();
        let flagged = a.memorized.iter().filter(|&&m| m).count();
        prop_assert!((a.score - (1.0 - flagged as f64 / gen.len() as f64)).abs() < 1e-15);
    }

    #[test]
    fn kid_is_deterministic_in_seed(a in points(10..20, 2), b in points(10..20, 2), seed in any::<u64>()) {
        let x = kid_rows(&a, &b, 5, 3, seed).unwrap();
        let y = kid_rows(&a, &b, 5, 3, seed).unwrap();
        prop_assert_eq!(x.mean.to_bits(), y.mean.to_bits());
        prop_assert!(x.std >= 0.0);
    }

    #[test]
    fn distance_stats_are_ordered(d in prop::collection::vec(0.0f64..2.0, 1..40)) {
        let ids: Vec<u32> = (0..d.len() as u32).collect();
        let s = DistanceStats::from_distances(&ids, &d, None).unwrap();
        prop_assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
        prop_assert_eq!(s.count, d.len());
        prop_assert!(s.flagged_close.iter().all(|&i| d[i as usize] < s.close_threshold));
    }

    #[test]
    fn auc_flips_with_labels_and_ignores_monotone_maps((scores, labels) in labelled(2..40)) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let a = auc(&scores, &labels).unwrap();
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((a + auc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
        let squashed: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert_eq!(a, auc(&squashed, &labels).unwrap());
    }

    #[test]
    fn confusion_counts_cover_every_sample((scores, labels) in labelled(2..40), t in -5.0f64..5.0) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let m = metrics_from_scores(&scores, &labels, t).unwrap();
        prop_assert_eq!(m.tp + m.tn + m.fp + m.fn_, scores.len());
        prop_assert!((0.0..=1.0).contains(&m.acc));
    }

    #[test]
    fn fedavg_is_a_convex_combination(
        params in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..6),
        raw in prop::collection::vec(1usize..5000, 6),
    ) {
        let weights: Vec<f64> = raw[..params.len()].iter().map(|&w| w as f64).collect();
        let avg = fedavg(&params, &weights).unwrap();
        for d in 0..4 {
            let lo = params.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
            let hi = params.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(avg[d] >= lo - 1e-12 && avg[d] <= hi + 1e-12);
        }
        let same = vec![params[0].clone(); params.len()];
        let back = fedavg(&same, &weights).unwrap();
        prop_assert!(back.iter().zip(&params[0]).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs())));
    }

    #[test]
    fn sefa_basis_is_orthonormal_and_sorted(data in prop::collection::vec(-1.0f64..1.0, 24)) {
        prop_assume!(data.iter().any(|&v| v != 0.0));
        let basis = factorize_weight(&Matrix { rows: 6, cols: 4, data }).unwrap();
        prop_assert!(basis.significances.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(basis.significances.iter().all(|&s| s >= 0.0));
        for (i, u) in basis.directions.iter().enumerate() {
            for (j, v) in basis.directions.iter().enumerate() {
                let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                let want = f64::from(u8::from(i == j));
                prop_assert!((d - want).abs() < 1e-10);
            }
            let first = u.iter().find(|v| v.abs() > 1e-12).unwrap();
            prop_assert!(*first > 0.0);
        }
    }

    #[test]
    fn edits_are_additive(w in prop::collection::vec(-2.0f64..2.0, 4), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let basis = factorize_weight(&Matrix { rows: 4, cols: 4, data: (0..16).map(|i| (i as f64 * 0.37).sin()).collect() }).unwrap();
        prop_assert_eq!(edit(&w, &basis, 1, 0.0).unwrap(), w.clone());
        let twice = edit(&edit(&w, &basis, 1, a).unwrap(), &basis, 1, b).unwrap();
        let once = edit(&w, &basis, 1, a + b).unwrap();
        prop_assert!(twice.iter().zip(&once).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn neighbors_sit_on_the_sphere(w in prop::collection::vec(-2.0f64..2.0, 5), r in 0.01f64..1.0, seed in any::<u64>()) {
        for n in generate_neighbors(&w, 6, r, seed).unwrap() {
            prop_assert!((euclidean(&n, &w) - r).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_outputs_are_bounded(z in prop::collection::vec(-4.0f64..4.0, 5), seed in any::<u64>()) {
        let plain = ToyGenerator::with_dims(5, 7, false, seed).unwrap();
        let cond = ToyGenerator::with_dims(5, 7, true, seed).unwrap();
        for (g, class) in [(&plain, None), (&cond, Some(0)), (&cond, Some(1))] {
            let x = g.generate(&z, class).unwrap();
            prop_assert_eq!(x.len(), 7);
            prop_assert!(x.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn affinity_rows_are_distributions(x in points(12..25, 3), perp in 2.0f64..3.5) {
        let p = conditional_probabilities(&x, perp).unwrap();
        for (i, row) in p.iter().enumerate() {
            prop_assert_eq!(row[i], 0.0);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn silhouette_is_bounded(x in points(4..30, 2)) {
        let labels: Vec<u8> = (0..x.len()).map(|i| (i % 2) as u8).collect();
        let s = silhouette(&x, &labels).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
