mod common;

use common::*;
use coprlab::cascade::{RankedList, ScoredAd};
use coprlab::metrics::{rpc_curve, PairedLists, RpcVariant};
use coprlab::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;

#[test]
fn exhaustive_permutations_match_reference() {
    assert_eq!(exhaustive_metric_check(6).unwrap(), 1 + 2 + 6 + 24 + 120 + 720);
}

#[test]
fn ranking_ids_need_not_be_sorted() {
    let rank = [40u32, 7, 19, 3];
    let pre = [19u32, 40, 3, 7];
    let p = PairedLists::new(&pre, &rank).unwrap();
    assert_eq!(p.ndcg(4), reference::ndcg(&pre, &rank, 4));
    assert_eq!(p.hr(2, 2), reference::hr(&pre, &rank, 2, 2));
}

fn shuffled(len: usize, seed: u64) -> Vec<u32> {
    let mut v: Vec<u32> = (0..len as u32).collect();
    v.shuffle(&mut rng::stream(seed, &[0x5EED]));
    v
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval(len in 1usize..40, seed in any::<u64>(), k in 1usize..50) {
        let rank: Vec<u32> = (0..len as u32).collect();
        let pre = shuffled(len, seed);
        let p = PairedLists::new(&pre, &rank).unwrap();
        for v in [p.hr(k, 10), p.ndcg(k), p.ap(k, 10)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn introducing_an_inversion_never_raises_ndcg(len in 2usize..30, seed in any::<u64>(), at in any::<prop::sample::Index>()) {
        let rank: Vec<u32> = (0..len as u32).collect();
        let mut pre = shuffled(len, seed);
        let i = at.index(len - 1);
        // Order the pair correctly first, then swap it out of order.
        if pre[i] > pre[i + 1] {
            pre.swap(i, i + 1);
        }
        let before = PairedLists::new(&pre, &rank).unwrap().ndcg(len);
        pre.swap(i, i + 1);
        let after = PairedLists::new(&pre, &rank).unwrap().ndcg(len);
        prop_assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn hr_and_map_ignore_ranking_order_past_ten(len in 11usize..40, seed in any::<u64>(), tail_seed in any::<u64>(), k in 1usize..40) {
        let rank: Vec<u32> = (0..len as u32).collect();
        let mut rank2 = rank.clone();
        rank2[10..].shuffle(&mut rng::stream(tail_seed, &[1]));
        let pre = shuffled(len, seed);
        let a = PairedLists::new(&pre, &rank).unwrap();
        let b = PairedLists::new(&pre, &rank2).unwrap();
        prop_assert_eq!(a.hr(k, 10), b.hr(k, 10));
        prop_assert_eq!(a.ap(k, 10), b.ap(k, 10));
    }

    #[test]
    fn identical_lists_are_perfect(len in 1usize..60, k in 1usize..80) {
        let ids: Vec<u32> = (0..len as u32).map(|i| i * 7 + 1).collect();
        let p = PairedLists::new(&ids, &ids).unwrap();
        prop_assert_eq!(p.hr(k, 10), 1.0);
        prop_assert_eq!(p.ndcg(k), 1.0);
        prop_assert_eq!(p.ap(k, 10), 1.0);
    }
}

fn list(ids: &[u32], request_id: u64) -> RankedList {
    // Descending scores in the given order, unit bids.
    let n = ids.len();
    RankedList {
        request_id,
        entries: ids
            .iter()
            .enumerate()
            .map(|(i, &a)| ScoredAd::new(a, (n - i) as f64 / (n + 1) as f64, 1.0))
            .collect(),
    }
}

#[test]
fn rpc_of_random_permutations_centers_on_the_middle() {
    let len = 20;
    let n = 4000;
    let rank_lists: Vec<RankedList> = (0..n).map(|i| list(&(0..len as u32).collect::<Vec<_>>(), i)).collect();
    let pre_lists: Vec<RankedList> = (0..n).map(|i| list(&shuffled(len, i), i)).collect();
    let pairs: Vec<(&RankedList, &RankedList)> = pre_lists.iter().zip(&rank_lists).collect();
    let curve = rpc_curve(&pairs, RpcVariant::Ecpm).unwrap();
    // A uniform position on 1..L has variance (L² − 1) / 12.
    let se = (((len * len - 1) as f64 / 12.0) / n as f64).sqrt();
    let mid = (len + 1) as f64 / 2.0;
    assert_eq!(curve.points.len(), len);
    for &(r, p) in &curve.points {
        assert!((p - mid).abs() <= 3.0 * se, "position {r}: {p} vs {mid} ± {}", 3.0 * se);
    }
}
