//! Randomized invariant checks over the data pipeline, ranking, and the
//! group branch: the properties other modules rely on, exercised across the
//! whole input space instead of hand-picked cases.

use std::rc::Rc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use grit_core::config::{FeatureSwitches, ModelConfig};
use grit_core::data::{
    chunk_training_rows, five_core_filter, leave_one_out_split, make_batches, Dataset,
    Interaction, InteractionLog,
};
use grit_core::group::{group_forward, init_group};
use grit_core::metrics::{metrics_at_k, rank_target};
use grit_core::params::{Binder, ParamStore};
use grit_core::tape::new_tape;
use grit_core::Tensor;

fn log_strategy() -> impl Strategy<Value = InteractionLog> {
    (2usize..6, 2usize..8).prop_flat_map(|(users, items)| {
        proptest::collection::vec((0..users, 0..items, 0i64..50), 30..90).prop_map(|events| {
            InteractionLog {
                records: events
                    .into_iter()
                    .map(|(u, i, ts)| Interaction {
                        user: format!("u{u}"),
                        item: format!("i{i}"),
                        timestamp: ts,
                    })
                    .collect(),
                skipped: 0,
            }
        })
    })
}

/// Re-derives an interaction log from a filtered dataset, preserving each
/// user's item order with fresh timestamps.
fn log_of(dataset: &Dataset) -> InteractionLog {
    let mut records = Vec::new();
    for (u, seq) in dataset.sequences.iter().enumerate() {
        for (t, &item) in seq.iter().enumerate() {
            records.push(Interaction {
                user: dataset.users[u].clone(),
                item: dataset.items[item as usize - 1].clone(),
                timestamp: t as i64,
            });
        }
    }
    InteractionLog { records, skipped: 0 }
}

fn sequences_strategy(min_len: usize) -> impl Strategy<Value = Vec<Vec<u32>>> {
    proptest::collection::vec(proptest::collection::vec(1u32..30, min_len..12), 1..8)
}

fn dataset_of(sequences: Vec<Vec<u32>>) -> Dataset {
    Dataset {
        users: (0..sequences.len()).map(|u| format!("u{u}")).collect(),
        items: (0..30).map(|i| format!("i{i}")).collect(),
        sequences,
    }
}

proptest! {
    // Filtering already-filtered data changes nothing: same counts, and each
    // surviving user keeps the same raw item-name sequence.
    #[test]
    fn five_core_is_a_fixed_point(log in log_strategy()) {
        let Ok(first) = five_core_filter(&log) else { return Ok(()) };
        for seq in &first.sequences {
            prop_assert!(seq.len() >= 5, "user kept with {} events", seq.len());
        }
        let mut item_counts = vec![0usize; first.items.len()];
        for seq in &first.sequences {
            for &i in seq {
                item_counts[i as usize - 1] += 1;
            }
        }
        prop_assert!(item_counts.iter().all(|&c| c >= 5), "item kept under the core");

        let second = five_core_filter(&log_of(&first)).unwrap();
        prop_assert_eq!(second.user_count(), first.user_count());
        prop_assert_eq!(second.item_count(), first.item_count());
        prop_assert_eq!(second.interaction_count(), first.interaction_count());
        for (u, seq) in first.sequences.iter().enumerate() {
            let v = second.user_index(&first.users[u]).expect("user survives");
            let a: Vec<&str> = seq.iter().map(|&i| first.items[i as usize - 1].as_str()).collect();
            let b: Vec<&str> =
                second.sequences[v].iter().map(|&i| second.items[i as usize - 1].as_str()).collect();
            prop_assert_eq!(a, b);
        }
    }

    // Splitting is just slicing: every user's train + valid + test
    // concatenates back to the original sequence.
    #[test]
    fn leave_one_out_reconstructs_sequences(sequences in sequences_strategy(3)) {
        let dataset = dataset_of(sequences.clone());
        let split = leave_one_out_split(dataset).unwrap();
        for (u, original) in sequences.iter().enumerate() {
            let mut rebuilt = split.train[u].clone();
            rebuilt.push(split.valid[u]);
            rebuilt.push(split.test[u]);
            prop_assert_eq!(&rebuilt, original);
        }
    }

    #[test]
    fn short_sequences_are_rejected_by_the_split(sequences in sequences_strategy(1)) {
        let has_short = sequences.iter().any(|s| s.len() < 3);
        let result = leave_one_out_split(dataset_of(sequences));
        prop_assert_eq!(result.is_err(), has_short);
    }

    // Windows tile each training sequence exactly, targets are the in-sequence
    // successors, and the prefix is everything before the window.
    #[test]
    fn chunks_tile_training_sequences(
        sequences in sequences_strategy(1),
        max_len in 1usize..9,
    ) {
        let rows = chunk_training_rows(&sequences, max_len);
        let mut cursor = 0usize;
        for seq in &sequences {
            let mut rebuilt: Vec<u32> = Vec::new();
            let mut short_windows = 0;
            while rebuilt.len() < seq.len() {
                let row = &rows[cursor];
                cursor += 1;
                prop_assert!(row.items.len() <= max_len);
                if row.items.len() < max_len {
                    short_windows += 1;
                    prop_assert!(rebuilt.is_empty(), "only the earliest window may be short");
                }
                prop_assert_eq!(&row.prefix, &rebuilt);
                for (p, (&item, &target)) in row.items.iter().zip(&row.targets).enumerate() {
                    let pos = rebuilt.len() + p;
                    let expect = if pos + 1 < seq.len() { seq[pos + 1] } else { 0 };
                    prop_assert_eq!(target, expect, "target at {}", pos);
                    prop_assert_eq!(item, seq[pos]);
                }
                rebuilt.extend_from_slice(&row.items);
            }
            prop_assert!(short_windows <= 1);
            prop_assert_eq!(&rebuilt, seq);
        }
        prop_assert_eq!(cursor, rows.len(), "every chunk row belongs to some sequence");
    }

    // Batching shuffles and pads but neither invents nor drops rows.
    #[test]
    fn batches_repack_all_chunk_rows(
        sequences in sequences_strategy(3),
        max_len in 1usize..9,
        batch_size in 1usize..7,
        seed in 0u64..1000,
    ) {
        let split = leave_one_out_split(dataset_of(sequences)).unwrap();
        let mut expected: Vec<(Vec<u32>, Vec<u32>, Vec<u32>)> =
            chunk_training_rows(&split.train, max_len)
                .into_iter()
                .map(|r| (r.items, r.targets, r.prefix))
                .collect();

        let mut seen = Vec::new();
        for batch in make_batches(&split, max_len, batch_size, seed) {
            prop_assert!(batch.rows <= batch_size);
            prop_assert_eq!(batch.items.len(), batch.rows * max_len);
            for r in 0..batch.rows {
                let row_mask = &batch.mask[r * max_len..(r + 1) * max_len];
                let real = row_mask.iter().filter(|&&m| m).count();
                prop_assert!(row_mask[max_len - real..].iter().all(|&m| m), "real slots trail");
                for p in 0..max_len - real {
                    prop_assert!(!row_mask[p]);
                    prop_assert_eq!(batch.items[r * max_len + p], 0, "pads hold the pad id");
                    prop_assert_eq!(batch.targets[r * max_len + p], 0);
                }
                let items = batch.items[r * max_len + max_len - real..(r + 1) * max_len].to_vec();
                let targets = batch.targets[r * max_len + max_len - real..(r + 1) * max_len].to_vec();
                seen.push((items, targets, batch.prefixes[r].clone()));
            }
        }
        // Multiset equality via sorting: same rows, any order.
        expected.sort();
        seen.sort();
        prop_assert_eq!(seen, expected);
    }

    // The pessimistic rank is definitional: one plus the number of other
    // candidates scoring at least the target.
    #[test]
    fn rank_counts_better_or_equal_candidates(
        scores in proptest::collection::vec(-5.0f64..5.0, 2..40),
        target_seed in 1usize..1000,
    ) {
        let target = 1 + target_seed % (scores.len() - 1);
        let rank = rank_target(&scores, target as u32);
        let oracle = 1 + scores
            .iter()
            .enumerate()
            .filter(|&(j, &s)| j != target && s >= scores[target])
            .count();
        prop_assert_eq!(rank, oracle);
    }

    #[test]
    fn metrics_grow_with_the_cutoff(
        ranks in proptest::collection::vec(1usize..60, 1..40),
        lo in 1usize..30,
        extra in 0usize..30,
    ) {
        let a = metrics_at_k(&ranks, lo);
        let b = metrics_at_k(&ranks, lo + extra);
        prop_assert!(a.recall <= b.recall);
        prop_assert!(a.ndcg <= b.ndcg);
        prop_assert!(a.mrr <= b.mrr);
        prop_assert!(b.recall <= 1.0 && b.ndcg <= 1.0 && b.mrr <= 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // Membership rows live on the probability simplex for every feature
    // subset, and pads sit exactly at uniform.
    #[test]
    fn memberships_form_a_simplex(
        dim in 2usize..5,
        groups in 2usize..5,
        len in 1usize..6,
        pad in 0usize..5,
        short_window in 1usize..4,
        tau in 0.5f64..4.0,
        switches in proptest::array::uniform4(proptest::bool::ANY),
        mlp_hidden in proptest::bool::ANY,
        seed in 0u64..10_000,
    ) {
        let pad = pad.min(len - 1);
        let cfg = ModelConfig {
            dim,
            groups,
            short_window,
            tau,
            mlp_hidden,
            features: FeatureSwitches {
                current_complete: switches[0],
                transition_complete: switches[1],
                current_short: switches[2],
                transition_short: switches[3],
            },
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = init_group(&mut store, &cfg, "g", &mut rng);

        let mask: Vec<bool> = (0..len).map(|i| i >= pad).collect();
        let data: Vec<f64> = (0..len * dim)
            .map(|i| ((seed as f64 + i as f64) * 0.7919).sin() * 2.0)
            .collect();
        let tape = new_tape();
        let binder = Binder::new(tape, &store);
        let z = binder.constant(Tensor::new(vec![1, len, dim], data));
        let out = group_forward(&binder, &ids, &z, &Rc::new(mask.clone()), &cfg);
        let membership = out.membership.value();

        for p in 0..len {
            let row = &membership.data()[p * groups..(p + 1) * groups];
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9, "position {} sums to {}", p, total);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            if !mask[p] {
                for &v in row {
                    prop_assert!((v - 1.0 / groups as f64).abs() <= 1e-12, "pad not uniform");
                }
            }
        }
    }
}
