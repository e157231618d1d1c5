use std::collections::BTreeSet;

use eegkd::dataio::{
    generate_synthetic_corpus, grouped_split, holdout_classes, window_excerpts, window_starts, SyntheticCorpusConfig,
};
use eegkd::downstream::{majority_vote, VotingPolicy};
use eegkd::losses::{
    cross_entropy, distillation_loss, kl_divergence, l2_distillation_loss, soften, TeacherTarget,
};
use eegkd::numerics::softmax_with_temperature;
use eegkd::recurrent::{apply_recurrent_dropout, DropoutMasks};
use eegkd::teacher::{synthetic_posterior, PosteriorTable};
use eegkd::trainer::{read_checkpoint_from, write_checkpoint_to};
use eegkd::{LstmStack, Matrix, StackConfig, SyntheticTeacherConfig};
use proptest::prelude::*;

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn small_corpus() -> impl Strategy<Value = SyntheticCorpusConfig> {
    (1usize..6, 2usize..10, 1usize..4, any::<u64>()).prop_map(|(c, i, s, seed)| SyntheticCorpusConfig {
        num_classes: c,
        images_per_class: i,
        subjects: s,
        timesteps: 2,
        channels: 1,
        noise_sigma: 0.3,
        seed,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_non_negative_and_zero_on_itself((p, q) in (2usize..10).prop_flat_map(|n| (simplex(n), simplex(n)))) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn softened_posterior_stays_on_simplex_and_keeps_argmax(
        p in (2usize..10).prop_flat_map(simplex),
        t in 0.2f64..20.0,
    ) {
        let s = soften(&p, t);
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let arg = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(arg(&s), arg(&p));
    }

    #[test]
    fn loss_gradients_sum_to_zero(
        (p, z) in (2usize..8).prop_flat_map(|n| (simplex(n), prop::collection::vec(-6.0f64..6.0, n))),
        t in 0.5f64..10.0,
    ) {
        // Every loss here is invariant to a constant logit shift.
        let label = 0;
        let target = TeacherTarget::with_label(p, label);
        for g in [
            distillation_loss(&target, &z, t).unwrap().grad_logits,
            cross_entropy(label, &z).unwrap().grad_logits,
            l2_distillation_loss(&target, &z).unwrap().grad_logits,
        ] {
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn distillation_is_minimized_by_matching_logits(p in (2usize..8).prop_flat_map(simplex), t in 0.5f64..10.0) {
        let z: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let r = distillation_loss(&TeacherTarget::soft(p), &z, t).unwrap();
        prop_assert!(r.value.abs() < 1e-12);
        prop_assert!(r.grad_logits.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn overlapping_windows_cover_the_sequence(len in 1usize..200, w in 1usize..200, s in 1usize..50) {
        // With stride > width gaps between windows are unavoidable.
        prop_assume!(w <= len && s <= w);
        let starts = window_starts(len, w, s).unwrap();
        let mut covered = vec![false; len];
        for &st in &starts {
            prop_assert!(st + w <= len);
            covered[st..st + w].iter_mut().for_each(|c| *c = true);
        }
        prop_assert!(covered.iter().all(|&c| c));
        prop_assert!(starts.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn excerpts_are_exact_slices(len in 2usize..40, w in 1usize..40, s in 1usize..10) {
        prop_assume!(w <= len);
        let m = Matrix::from_vec(len, 2, (0..2 * len).map(|v| v as f64).collect()).unwrap();
        for (x, st) in window_excerpts(&m, w, s).unwrap().iter().zip(window_starts(len, w, s).unwrap()) {
            prop_assert_eq!(x.data(), &m.data()[2 * st..2 * (st + w)]);
        }
    }

    #[test]
    fn split_is_a_partition(cfg in small_corpus(), ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let c = generate_synthetic_corpus(&cfg).unwrap();
        let plan = grouped_split(&c, ratio, seed).unwrap();
        prop_assert!(plan.train_image_ids.is_disjoint(&plan.test_image_ids));
        let all: BTreeSet<u32> = plan.train_image_ids.union(&plan.test_image_ids).copied().collect();
        prop_assert_eq!(all, c.image_ids());
        prop_assert_eq!(&plan, &grouped_split(&c, ratio, seed).unwrap());
    }

    #[test]
    fn holdout_partitions_samples(cfg in small_corpus(), pick in any::<prop::sample::Index>()) {
        prop_assume!(cfg.num_classes >= 2);
        let c = generate_synthetic_corpus(&cfg).unwrap();
        let held = pick.index(cfg.num_classes);
        let h = holdout_classes(&c, &[held]).unwrap();
        prop_assert_eq!(h.seen.len() + h.unseen.len(), c.len());
        prop_assert_eq!(h.unseen.num_classes(), 1);
        prop_assert_eq!(h.seen.num_classes(), cfg.num_classes - 1);
    }

    #[test]
    fn synthetic_teacher_argmax_is_true_class(
        n in 2usize..12,
        fidelity in 0.501f64..1.0,
        tau in 0.1f64..5.0,
        seed in any::<u64>(),
    ) {
        let cfg = SyntheticTeacherConfig { num_classes: n, fidelity, confusion_temperature: tau, seed };
        for class in 0..n {
            let p = synthetic_posterior(class, &cfg).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let arg = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            prop_assert_eq!(arg, class);
        }
    }

    #[test]
    fn posterior_manifest_round_trips(rows in prop::collection::btree_map(any::<u32>(), simplex(5), 1..20)) {
        let mut t = PosteriorTable::new("prop", 5);
        for (id, p) in &rows {
            t.insert(*id, p.clone()).unwrap();
        }
        let back = PosteriorTable::parse_manifest(&t.to_manifest()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn majority_vote_picks_a_top_count_class(votes in prop::collection::vec((0usize..4, simplex(4)), 1..15)) {
        let mut counts = [0usize; 4];
        for (c, _) in &votes {
            counts[*c] += 1;
        }
        let top = *counts.iter().max().unwrap();
        for policy in [VotingPolicy::SummedProbability, VotingPolicy::LowestClassId] {
            prop_assert_eq!(counts[majority_vote(&votes, policy).unwrap()], top);
        }
    }

    #[test]
    fn dropout_scaling_keeps_or_zeroes(h in prop::collection::vec(-3.0f64..3.0, 1..10), p in 0.0f64..0.9) {
        let keep = vec![1.0; h.len()];
        let kept = apply_recurrent_dropout(&h, &keep, p).unwrap();
        for (a, b) in kept.iter().zip(&h) {
            prop_assert!((a - b / (1.0 - p)).abs() < 1e-12);
        }
        let drop = vec![0.0; h.len()];
        prop_assert!(apply_recurrent_dropout(&h, &drop, p).unwrap().iter().all(|&v| v == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        depth in 1usize..=4,
        hidden in 1usize..6,
        bidirectional in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let cfg = StackConfig { depth, hidden, bidirectional, recurrent_dropout: 0.25, num_classes: 3, input_channels: 2 };
        let stack = LstmStack::init(cfg, seed).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint_to(&stack, None, &mut bytes).unwrap();
        let back = read_checkpoint_from(bytes.as_slice()).unwrap().stack;
        for (a, b) in stack.params.tensors().iter().zip(back.params.tensors()) {
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(back.config(), stack.config());
    }

    #[test]
    fn feature_width_law(depth in 1usize..=4, hidden in 1usize..20, bidirectional in any::<bool>(), steps in 1usize..6) {
        let cfg = StackConfig { depth, hidden, bidirectional, recurrent_dropout: 0.0, num_classes: 2, input_channels: 3 };
        let stack = LstmStack::init(cfg, 1).unwrap();
        let x = Matrix::from_vec(steps, 3, (0..3 * steps).map(|v| (v as f64).sin()).collect()).unwrap();
        let (logits, features) = stack.infer(&x).unwrap();
        prop_assert_eq!(features.len(), (1 + usize::from(bidirectional)) * hidden);
        prop_assert_eq!(logits.len(), 2);
        let masks = DropoutMasks::keep_all(&cfg);
        let trained = stack.forward_with_masks(&x, &masks).unwrap();
        prop_assert_eq!(trained.logits, logits);
    }

    #[test]
    fn softmax_at_any_temperature_is_a_distribution(z in prop::collection::vec(-30.0f64..30.0, 1..10), t in 0.05f64..100.0) {
        let p = softmax_with_temperature(&z, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
