mod common;

use common::*;
use proptest::prelude::*;
use xmodal_core::losses::LossConfig;

fn rows(n: usize, d: usize) -> impl Strategy<Value = Rows> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n)
        .prop_filter("rows must have non-trivial norm", |rs| rs.iter().all(|r| dot(r, r) > 1e-3))
}

prop_compose! {
    fn batch()(n in 2usize..=8, k in 1usize..=4, d in 2usize..=6)
        (raw_v in rows(n, d), raw_l in rows(n, d),
         labels in prop::collection::vec(0..k, n),
         tau in 0.05f64..1.0, lambda in 0.0f64..2.0, own in any::<bool>()) -> RandomBatch {
        RandomBatch {
            vision: normalize_rows(&raw_v),
            language: normalize_rows(&raw_l),
            labels,
            config: LossConfig { tau, lambda, include_own_pair: own },
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn vectorized_matches_double_loop(b in batch()) {
        let got = terms(&vectorized(&b.vision, &b.language, &b.labels, b.config));
        let want = oracle_cross_cl(&b.vision, &b.language, &b.labels, &b.config);
        prop_assert!(max_gap(&got, &want) <= 1e-10, "got {got:?} want {want:?}");
    }

    #[test]
    fn modality_swap_is_exact(b in batch()) {
        prop_assert_eq!(swap_gap(&b), 0.0);
    }

    #[test]
    fn batch_order_does_not_matter(b in batch(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<usize> = (0..b.labels.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(permutation_gap(&b, &perm) <= 1e-9);
    }

    #[test]
    fn scaling_before_normalization_does_not_matter(
        n in 2usize..=8,
        raw in rows(16, 4),
        labels in prop::collection::vec(0usize..3, 8),
        scales in prop::collection::vec(1e-3f64..1e3, 1..8),
    ) {
        let (v, l) = (raw[..n].to_vec(), raw[8..8 + n].to_vec());
        let gap = scale_gap(&v, &l, &labels[..n], &LossConfig::default(), &scales);
        prop_assert!(gap <= 1e-9, "gap {gap}");
    }

    #[test]
    fn terms_are_non_negative_without_own_pair(b in batch()) {
        let cfg = LossConfig { include_own_pair: false, ..b.config };
        let t = terms(&vectorized(&b.vision, &b.language, &b.labels, cfg));
        prop_assert!(t.iter().all(|&x| x >= 0.0), "{t:?}");
    }
}

#[test]
fn one_class_identical_embeddings_give_four_ln_three() {
    let r = identical_one_class();
    let expected = 4.0 * 3f64.ln();
    assert!((r.vision_vision - expected).abs() <= 1e-9, "{r:?}");
    assert!((r.language_language - expected).abs() <= 1e-9, "{r:?}");
    assert!((r.language_vision - expected).abs() <= 1e-9, "{r:?}");
    assert!((r.total - expected * (2.0 + 2.0 * 0.5)).abs() <= 1e-9, "{r:?}");
}

#[test]
fn distinct_classes_give_zero_everywhere() {
    for n in 2..=8 {
        assert_eq!(terms(&all_distinct(n as u64, n)), [0.0; 5]);
    }
}

#[test]
fn seeded_sweep_agrees_with_oracle() {
    assert!(oracle_sweep(7, 100) <= 1e-10);
}
