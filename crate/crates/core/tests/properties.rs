mod common;

use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;

use cliperase::data::{mix_seed, shuffled_batches};
use cliperase::eval::zero_shot_predict_embeddings;
use cliperase::losses::{embedding_divergence, LossWeights};
use cliperase::model::{ArchConfig, DualEncoderModel, EmbeddingMatrix};
use cliperase::{
    contrastive_loss, forgetting_loss, recall_at_k, retention_loss, similarity_matrix, split_by_class,
    total_unlearn_loss,
};

use common::*;

/// `n × d` matrix with rows bounded away from zero.
fn raw_rows(n: std::ops::RangeInclusive<usize>, d: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Array2<f64>> {
    (n, d).prop_flat_map(|(n, d)| {
        proptest::collection::vec(-1.0f64..1.0, n * d).prop_filter_map("degenerate row", move |v| {
            let m = Array2::from_shape_vec((n, d), v).unwrap();
            m.outer_iter().all(|r| r.dot(&r) > 1e-4).then_some(m)
        })
    })
}

/// Two unit-row matrices of the same shape.
fn unit_pair() -> impl Strategy<Value = (EmbeddingMatrix, EmbeddingMatrix)> {
    (1usize..10, 2usize..9).prop_flat_map(|(n, d)| {
        (raw_rows(n..=n, d..=d), raw_rows(n..=n, d..=d)).prop_map(|(a, b)| {
            (EmbeddingMatrix::normalized(a).unwrap(), EmbeddingMatrix::normalized(b).unwrap())
        })
    })
}

fn householder(v: &[f64]) -> Array2<f64> {
    let d = v.len();
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    Array2::from_shape_fn((d, d), |(i, j)| (i == j) as u8 as f64 - 2.0 * v[i] * v[j] / norm2)
}

proptest! {
    #[test]
    fn normalized_rows_have_unit_norm(m in raw_rows(1..=12, 1..=10)) {
        let e = EmbeddingMatrix::normalized(m).unwrap();
        for row in e.view().outer_iter() {
            prop_assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn similarities_are_cosines((a, b) in unit_pair()) {
        let s = similarity_matrix(&a, &b).unwrap();
        prop_assert!(s.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn contrastive_is_nonnegative((a, b) in unit_pair(), tau in 0.01f64..2.0) {
        prop_assert!(contrastive_loss(&a, &b, tau).unwrap() >= -1e-12);
    }

    #[test]
    fn contrastive_ignores_pair_order((a, b) in unit_pair(), tau in 0.05f64..2.0, shift in 0usize..10) {
        let n = a.rows();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let pa = EmbeddingMatrix::new(a.view().select(ndarray::Axis(0), &perm)).unwrap();
        let pb = EmbeddingMatrix::new(b.view().select(ndarray::Axis(0), &perm)).unwrap();
        let base = contrastive_loss(&a, &b, tau).unwrap();
        prop_assert!((base - contrastive_loss(&pa, &pb, tau).unwrap()).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn retention_equals_contrastive((a, b) in unit_pair(), tau in 0.01f64..2.0) {
        prop_assert_eq!(
            retention_loss(&a, &b, tau).unwrap().to_bits(),
            contrastive_loss(&a, &b, tau).unwrap().to_bits()
        );
    }

    #[test]
    fn forgetting_is_bounded_and_rotation_invariant(
        (a, b) in unit_pair(),
        v in proptest::collection::vec(0.1f64..1.0, 8),
    ) {
        let f = forgetting_loss(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&f));
        let d = a.dim();
        let q = householder(&v[..d]);
        let ra = EmbeddingMatrix::normalized(a.view().dot(&q)).unwrap();
        let rb = EmbeddingMatrix::normalized(b.view().dot(&q)).unwrap();
        prop_assert!((forgetting_loss(&ra, &rb).unwrap() - f).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_zero_on_itself_and_nonnegative((a, b) in unit_pair()) {
        prop_assert!(embedding_divergence(a.view(), a.view()).unwrap().abs() <= 1e-12);
        prop_assert!(embedding_divergence(a.view(), b.view()).unwrap() >= -1e-12);
    }

    #[test]
    fn zero_shot_matches_exhaustive_argmax(
        images in raw_rows(1..=10, 3..=3),
        prompts in raw_rows(1..=6, 3..=3),
    ) {
        let (images, prompts) = (
            EmbeddingMatrix::normalized(images).unwrap(),
            EmbeddingMatrix::normalized(prompts).unwrap(),
        );
        let preds = zero_shot_predict_embeddings(&images, &prompts).unwrap();
        for (img, &p) in images.view().outer_iter().zip(&preds) {
            let scores: Vec<f64> = prompts.view().outer_iter().map(|c| c.dot(&img)).collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = scores.iter().position(|&s| s == best).unwrap();
            prop_assert_eq!(p, first);
        }
    }

    #[test]
    fn recall_matches_full_sort(
        (q, g, cells, pos_bits, forced) in (1usize..7, 1usize..13).prop_flat_map(|(q, g)| (
            Just(q),
            Just(g),
            proptest::collection::vec(-3i32..=3, q * g),
            proptest::collection::vec(proptest::bool::weighted(0.2), q * g),
            proptest::collection::vec(0..g, q),
        )),
    ) {
        let sim = Array2::from_shape_vec((q, g), cells.iter().map(|&c| c as f64 / 3.0).collect()).unwrap();
        let positives: Vec<BTreeSet<usize>> = (0..q)
            .map(|i| {
                let mut s: BTreeSet<usize> = (0..g).filter(|&j| pos_bits[i * g + j]).collect();
                s.insert(forced[i]);
                s
            })
            .collect();
        let mut prev = 0.0;
        for k in 1..=g + 2 {
            let r = recall_at_k(sim.view(), &positives, k).unwrap();
            prop_assert_eq!(r, sorted_recall(&sim, &positives, k));
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn class_split_partitions_the_corpus(mask in 1u16..(1 << 10) - 1) {
        let corpus = toy_corpus(1);
        let classes: BTreeSet<usize> = (0..10).filter(|c| mask >> c & 1 == 1).collect();
        let split = split_by_class(&corpus, &classes).unwrap();
        let f: BTreeSet<usize> = split.forget_indices().iter().copied().collect();
        let r: BTreeSet<usize> = split.retain_indices().iter().copied().collect();
        prop_assert!(f.is_disjoint(&r));
        prop_assert_eq!(f.len() + r.len(), corpus.len());
        prop_assert!(split.forget_ids().is_disjoint(&split.retain_ids()));
        prop_assert_eq!(split.forget_classes(), classes);
    }

    #[test]
    fn batches_cover_each_index_once(n in 1usize..200, bs in 1usize..40, seed: u64) {
        let indices: Vec<usize> = (0..n).map(|i| i * 3).collect();
        let chunks = shuffled_batches(&indices, bs, seed).unwrap();
        prop_assert!(chunks[..chunks.len() - 1].iter().all(|c| c.len() == bs));
        let mut seen: Vec<usize> = chunks.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, indices);
    }

    #[test]
    fn mixed_seeds_separate_streams(a: u64, b: u64) {
        prop_assert_ne!(mix_seed(a, b), mix_seed(a, b.wrapping_add(1)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn breakdown_is_linear_in_the_weights(
        seed in 0u64..1000,
        l1 in 0.0f64..3.0,
        l2 in 0.0f64..3.0,
        l3 in 0.0f64..3.0,
    ) {
        let corpus = grad_corpus();
        let (forget, retain) = grad_batches(&corpus);
        let model = DualEncoderModel::init(&grad_arch(), seed).unwrap();
        let orig = DualEncoderModel::init(&grad_arch(), seed + 1).unwrap().snapshot();
        let tau = model.temperature();
        let at = |w| total_unlearn_loss(&model, &orig, &forget, &retain, w, tau).unwrap();
        let base = at(LossWeights::new(l1, l2, l3).unwrap());
        let doubled = at(LossWeights::new(l1, 2.0 * l2, l3).unwrap());
        prop_assert!((base.total - base.reassembled()).abs() <= 1e-9);
        prop_assert!((doubled.total - base.total - l2 * base.l_fm).abs() <= 1e-9);
        prop_assert_eq!(doubled.l_fm, base.l_fm);
    }

    #[test]
    fn consistency_starts_at_zero(seed in 0u64..1000) {
        let corpus = grad_corpus();
        let (forget, retain) = grad_batches(&corpus);
        let model = DualEncoderModel::init(&grad_arch(), seed).unwrap();
        let b = total_unlearn_loss(&model, &model.snapshot(), &forget, &retain, LossWeights::default(), 0.07).unwrap();
        prop_assert!(b.l_cm.abs() <= 1e-12);
    }

    #[test]
    fn encoders_emit_unit_rows(seed in 0u64..1000) {
        let corpus = toy_corpus(seed % 4);
        let model = DualEncoderModel::init(&ArchConfig::default(), seed).unwrap();
        let b = corpus.batch(&(0..40).collect::<Vec<_>>());
        for e in [model.encode_image(b.images.view()).unwrap(), model.encode_text(&b.captions).unwrap()] {
            for row in e.view().outer_iter() {
                prop_assert!((row.dot(&row) - 1.0).abs() < 1e-9);
            }
        }
    }
}
