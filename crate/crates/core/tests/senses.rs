mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sensealign::linalg::cosine;
use sensealign::senses::{ProjectionState, SenseStore, WarmupPolicy};

#[test]
fn two_drifting_clusters_stay_separated() {
    let purity = drifting_stream_purity(7, 3000, 1000, 0.001, 0.01, 32, 16);
    assert!(purity >= 0.95, "purity {purity}");
}

#[test]
fn projection_finds_a_planted_subspace() {
    let (angle, oracle) = planted_subspace(8, 20, 5, 1000);
    assert!(angle <= 0.05, "angle {angle}");
    assert!(oracle <= 1e-8, "oracle deviation {oracle}");
}

#[test]
fn pruning_behaves() {
    pruning_cases(0.1).unwrap();
}

#[test]
fn projection_defers_until_enough_samples() {
    let mut p = ProjectionState::new(4, 3, 2, 10, 1, 0).unwrap();
    let before = p.matrix().clone();
    assert!(!p.offer(&[1.0, 0.0, 0.0, 0.0]).unwrap());
    assert!(!p.offer(&[0.0, 1.0, 0.0, 0.0]).unwrap());
    assert_eq!(p.matrix(), &before);
    assert_eq!(p.refreshes(), 0);
    // The deferred refresh happens as soon as the queue holds d' vectors.
    assert!(p.offer(&[0.0, 0.0, 1.0, 0.0]).unwrap());
    assert_eq!(p.refreshes(), 1);
    assert!(!p.offer(&[0.0, 0.0, 0.0, 1.0]).unwrap());
    assert!(p.offer(&[1.0, 1.0, 0.0, 0.0]).unwrap());
    assert!(p.offer(&[1.0; 3]).is_err());
}

#[test]
fn queue_is_fifo_with_stride() {
    let mut p = ProjectionState::new(2, 1, 1000, 3, 2, 0).unwrap();
    for i in 0..10 {
        p.offer(&[i as f64, 0.0]).unwrap();
    }
    let firsts: Vec<f64> = p.queue().map(|v| v[0]).collect();
    assert_eq!(firsts, vec![5.0, 7.0, 9.0]);
}

#[test]
fn warmup_transitions() {
    let mut store = SenseStore::new(3, 4, 2, 0.1, 0.01, 0).unwrap();
    store.enter_warmup();
    assert_eq!(store.active_count(), 3);
    assert_eq!(store.active_senses(1), vec![0]);
    let mut keep = store.clone();
    keep.apply_warmup_transition(WarmupPolicy::KeepWarmupSense).unwrap();
    assert_eq!(keep.active_senses(1), vec![0, 1, 2, 3]);
    store.apply_warmup_transition(WarmupPolicy::DiscardWarmupSense).unwrap();
    assert_eq!(store.active_senses(1), vec![1, 2, 3]);
    let mut single = SenseStore::new(3, 1, 2, 0.1, 0.01, 0).unwrap();
    assert!(single.apply_warmup_transition(WarmupPolicy::DiscardWarmupSense).is_err());
}

proptest! {
    /// Selection is the projected-cosine argmax with the lowest index on
    /// ties, and only the winner's center moves, by the exponential rule.
    #[test]
    fn selection_matches_brute_force(seed in any::<u64>(), s in 1usize..5, alpha in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 5;
        let mut store = SenseStore::new(3, s, d, 0.5, alpha, rng.random()).unwrap();
        if s > 1 && rng.random::<bool>() {
            store.set_active(1, rng.random_range(0..s), false);
        }
        let mut proj = ProjectionState::new(d, 3, u64::MAX, 10, 1, rng.random()).unwrap();
        let h = rand_vec(&mut rng, d, 1.0);
        let hp: Vec<f64> = (0..3).map(|c| (0..d).map(|r| h[r] * proj.matrix().get(r, c)).sum()).collect();
        let mut best: Option<(usize, f64)> = None;
        for k in store.active_senses(1) {
            let c = store.center(1, k);
            let cp: Vec<f64> = (0..3).map(|col| (0..d).map(|r| c[r] * proj.matrix().get(r, col)).sum()).collect();
            let sim = cosine(&cp, &hp);
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((k, sim));
            }
        }
        let want = best.unwrap().0;
        let before = store.clone();
        let got = store.select_sense(&mut proj, 1, &h).unwrap();
        prop_assert_eq!(got, want);
        for t in 0..3u32 {
            for k in 0..s {
                if (t, k) == (1, got) {
                    let expect: Vec<f64> = before.center(t, k).iter().zip(&h).map(|(c, x)| (1.0 - alpha) * c + alpha * x).collect();
                    prop_assert!(max_abs_diff(store.center(t, k), &expect) == 0.0);
                    prop_assert_eq!(store.count(t, k), 1);
                } else {
                    prop_assert_eq!(store.center(t, k), before.center(t, k));
                    prop_assert_eq!(store.count(t, k), 0);
                }
            }
        }
        prop_assert_eq!(store.sense_vectors(), before.sense_vectors());
        prop_assert_eq!(proj.queue_len(), 1);
    }

    #[test]
    fn ties_go_to_the_lowest_sense(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = SenseStore::new(1, 3, 4, 0.0, 0.5, 0).unwrap();
        let mut proj = ProjectionState::new(4, 4, u64::MAX, 10, 1, rng.random()).unwrap();
        // All centers are zero, so every cosine is zero.
        let h = rand_vec(&mut rng, 4, 1.0);
        let trans = store.select_translation_sense(&proj, &[0, 0], &h).unwrap();
        prop_assert_eq!(trans, (0, 0));
        prop_assert_eq!(store.select_sense(&mut proj, 0, &h).unwrap(), 0);
    }

    #[test]
    fn pruning_never_empties_a_token(seed in any::<u64>(), beta in 0.0f64..0.999, s in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = SenseStore::new(4, s, 3, 0.5, 0.0, rng.random()).unwrap();
        let mut proj = ProjectionState::new(3, 3, u64::MAX, 10, 1, 0).unwrap();
        for _ in 0..3 {
            for t in 0..4u32 {
                let active = store.active_senses(t);
                for _ in 0..rng.random_range(0..20) {
                    select_exact(&mut store, &mut proj, t, active[rng.random_range(0..active.len())]);
                }
            }
            let counts: Vec<Vec<u64>> = (0..4u32).map(|t| (0..s).map(|k| store.count(t, k)).collect()).collect();
            let before = store.clone();
            let removed = store.prune_senses(beta).unwrap();
            store.check_invariants().unwrap();
            for (t, k) in &removed {
                let c = &counts[*t as usize];
                let total: u64 = c.iter().sum();
                prop_assert!((c[*k] as f64) < beta * total as f64);
                prop_assert!(c.iter().any(|&x| x > c[*k]) || c.iter().position(|&x| x == c[*k]) != Some(*k));
                prop_assert!(before.is_active(*t, *k));
            }
            prop_assert!((0..4u32).all(|t| (0..s).all(|k| store.count(t, k) == 0)));
        }
    }
}
