//! Consistency between pre-ranking and ranking ECPM-ranked lists.
//!
//! Both lists rank the same candidates. The ranking list is the reference: its
//! top `n_relevant` ads (10 by default) are the relevant set for HR and MAP,
//! and its order supplies NDCG relevance (position `p` of `L` → `L − p`).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::cascade::RankedList;
use crate::error::{Error, Result};

pub const DEFAULT_RELEVANT: usize = 10;

/// A validated (pre-ranking, ranking) pair over the same candidate set.
#[derive(Debug, Clone)]
pub struct PairedLists {
    /// `rank_pos[i]`: 0-based position in the ranking list of the ad at
    /// pre-ranking position `i`.
    rank_pos: Vec<usize>,
}

impl PairedLists {
    pub fn new(pre: &[u32], rank: &[u32]) -> Result<Self> {
        if pre.len() != rank.len() || pre.is_empty() {
            return Err(Error::MismatchedCandidates);
        }
        let pos: HashMap<u32, usize> = rank.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        if pos.len() != rank.len() {
            return Err(Error::MismatchedCandidates);
        }
        let mut seen = vec![false; rank.len()];
        let mut rank_pos = Vec::with_capacity(pre.len());
        for a in pre {
            let &p = pos.get(a).ok_or(Error::MismatchedCandidates)?;
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::MismatchedCandidates);
            }
            rank_pos.push(p);
        }
        Ok(PairedLists { rank_pos })
    }

    pub fn from_lists(pre: &RankedList, rank: &RankedList) -> Result<Self> {
        Self::new(&pre.ad_ids(), &rank.ad_ids())
    }

    pub fn len(&self) -> usize {
        self.rank_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rank_pos.is_empty()
    }

    fn relevant(&self, n_relevant: usize) -> usize {
        n_relevant.min(self.len())
    }

    /// `|top-k(pre) ∩ top-R(rank)| / min(k, R)` with `R = min(n_relevant, L)`.
    pub fn hr(&self, k: usize, n_relevant: usize) -> f64 {
        let r = self.relevant(n_relevant);
        let denom = k.min(r);
        if denom == 0 {
            return 0.0;
        }
        let hits = self.rank_pos.iter().take(k).filter(|&&p| p < r).count();
        hits as f64 / denom as f64
    }

    /// NDCG@k with exponential gains `2^rel − 1` and `1/log2(i+1)` discounts.
    pub fn ndcg(&self, k: usize) -> f64 {
        let l = self.len();
        let k = k.min(l);
        // Gains are scaled by 2^-(L-1), which is exact and keeps long lists finite.
        let shift = (l - 1) as f64;
        let gain = |rel: usize| (rel as f64 - shift).exp2() - (-shift).exp2();
        let discount = |i: usize| ((i + 2) as f64).log2();
        let mut dcg = 0.0;
        let mut idcg = 0.0;
        for i in 0..k {
            dcg += gain(l - 1 - self.rank_pos[i]) / discount(i);
            idcg += gain(l - 1 - i) / discount(i);
        }
        if idcg == 0.0 {
            return 1.0;
        }
        dcg / idcg
    }

    /// Average precision at k against the top-R relevant set, normalized by
    /// `min(k, R)`.
    pub fn ap(&self, k: usize, n_relevant: usize) -> f64 {
        let r = self.relevant(n_relevant);
        let denom = k.min(r);
        if denom == 0 {
            return 0.0;
        }
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (i, &p) in self.rank_pos.iter().take(k).enumerate() {
            if p < r {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        sum / denom as f64
    }
}

pub fn hr_at_k(pre: &RankedList, rank: &RankedList, k: usize) -> Result<f64> {
    Ok(PairedLists::from_lists(pre, rank)?.hr(k, DEFAULT_RELEVANT))
}

pub fn ndcg_at_k(pre: &RankedList, rank: &RankedList, k: usize) -> Result<f64> {
    Ok(PairedLists::from_lists(pre, rank)?.ndcg(k))
}

pub fn map_at_k(pre: &RankedList, rank: &RankedList, k: usize) -> Result<f64> {
    Ok(PairedLists::from_lists(pre, rank)?.ap(k, DEFAULT_RELEVANT))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Hr,
    Ndcg,
    Map,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Hr, Metric::Ndcg, Metric::Map];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Hr => "hr",
            Metric::Ndcg => "ndcg",
            Metric::Map => "map",
        }
    }
}

/// Metric values averaged (unweighted) over evaluation lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub values: BTreeMap<(Metric, usize), f64>,
    pub n_lists: usize,
}

impl ConsistencyReport {
    pub fn compute(pairs: &[PairedLists], ks: &[usize], n_relevant: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("evaluation lists"));
        }
        let per_list: Vec<Vec<f64>> = crate::par::map(pairs, |p| {
            ks.iter()
                .flat_map(|&k| [p.hr(k, n_relevant), p.ndcg(k), p.ap(k, n_relevant)])
                .collect()
        });
        let mut sums = vec![0.0; ks.len() * 3];
        for row in &per_list {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        let n = pairs.len() as f64;
        let mut values = BTreeMap::new();
        for (i, &k) in ks.iter().enumerate() {
            for (j, m) in Metric::ALL.into_iter().enumerate() {
                values.insert((m, k), sums[i * 3 + j] / n);
            }
        }
        Ok(ConsistencyReport {
            values,
            n_lists: pairs.len(),
        })
    }

    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        self.values.get(&(metric, k)).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RpcVariant {
    Pctr,
    Ecpm,
}

impl RpcVariant {
    pub fn name(self) -> &'static str {
        match self {
            RpcVariant::Pctr => "pctr",
            RpcVariant::Ecpm => "ecpm",
        }
    }
}

/// Ranking–PreRanking curve: for each ranking position (1-based), the mean
/// pre-ranking position of the ad found there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcCurve {
    pub variant: RpcVariant,
    pub points: Vec<(usize, f64)>,
}

impl RpcCurve {
    /// Mean over positions of `|mean_pre_position(r) − r|`; 0 for the identity.
    pub fn mean_abs_deviation(&self) -> f64 {
        self.points
            .iter()
            .map(|&(r, p)| (p - r as f64).abs())
            .sum::<f64>()
            / self.points.len() as f64
    }
}

/// Builds the RPC curve over paired lists. With [`RpcVariant::Pctr`] both
/// lists are re-sorted by raw score before positions are compared.
pub fn rpc_curve(pairs: &[(&RankedList, &RankedList)], variant: RpcVariant) -> Result<RpcCurve> {
    let Some(first) = pairs.first() else {
        return Err(Error::Empty("evaluation lists"));
    };
    let l = first.1.len();
    let per_list: Vec<Result<Vec<usize>>> = crate::par::map(pairs, |(pre, rank)| {
        let (pre, rank) = match variant {
            RpcVariant::Ecpm => ((*pre).clone(), (*rank).clone()),
            RpcVariant::Pctr => (pre.by_pctr(), rank.by_pctr()),
        };
        if rank.len() != l {
            return Err(Error::MismatchedCandidates);
        }
        let pre_pos: HashMap<u32, usize> =
            pre.entries.iter().enumerate().map(|(i, e)| (e.ad_id, i)).collect();
        // Validates the candidate sets as a side effect.
        PairedLists::from_lists(&pre, &rank)?;
        Ok(rank.entries.iter().map(|e| pre_pos[&e.ad_id]).collect())
    });
    let mut sums = vec![0.0; l];
    for row in per_list {
        for (s, p) in sums.iter_mut().zip(row?) {
            *s += (p + 1) as f64;
        }
    }
    let n = pairs.len() as f64;
    Ok(RpcCurve {
        variant,
        points: sums
            .into_iter()
            .enumerate()
            .map(|(i, s)| (i + 1, s / n))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::ScoredAd;

    fn ranked(ids: &[u32]) -> RankedList {
        // Descending ECPM in the given order.
        let n = ids.len();
        RankedList {
            request_id: 0,
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, &a)| ScoredAd::new(a, (n - i) as f64 * 0.01, 1.0))
                .collect(),
        }
    }

    #[test]
    fn hr_examples() {
        let rank: Vec<u32> = (0..20).collect();
        let p = PairedLists::new(&rank, &rank).unwrap();
        assert_eq!(p.hr(10, 10), 1.0);

        let mut disjoint: Vec<u32> = (10..20).collect();
        disjoint.extend(0..10);
        assert_eq!(PairedLists::new(&disjoint, &rank).unwrap().hr(10, 10), 0.0);

        // 6 of the ranking top-10 in the pre-ranking top-10.
        let mut six: Vec<u32> = (0..6).collect();
        six.extend(10..14);
        six.extend(6..10);
        six.extend(14..20);
        assert!((PairedLists::new(&six, &rank).unwrap().hr(10, 10) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn ndcg_examples() {
        let id: Vec<u32> = (0..7).collect();
        let p = PairedLists::new(&id, &id).unwrap();
        for k in 1..=8 {
            assert!((p.ndcg(k) - 1.0).abs() < 1e-15);
        }
        let rev = PairedLists::new(&[1, 0], &[0, 1]).unwrap();
        let want = 1.0 / 3f64.log2();
        assert!((rev.ndcg(2) - want).abs() < 1e-15);
        assert!((rev.ndcg(2) - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn ndcg_survives_long_lists() {
        let rank: Vec<u32> = (0..2000).collect();
        let mut pre = rank.clone();
        pre.swap(0, 1);
        let v = PairedLists::new(&pre, &rank).unwrap().ndcg(10);
        assert!(v.is_finite() && v > 0.0 && v < 1.0);
    }

    #[test]
    fn map_examples() {
        let rank: Vec<u32> = (0..20).collect();
        assert_eq!(PairedLists::new(&rank, &rank).unwrap().ap(10, 10), 1.0);
        // Only relevant ad in the top-10 sits at position 2.
        let mut pre: Vec<u32> = vec![10, 0];
        pre.extend(11..19);
        pre.extend(1..10);
        pre.push(19);
        let ap = PairedLists::new(&pre, &rank).unwrap().ap(10, 10);
        assert!((ap - 0.05).abs() < 1e-15);
        let mut none: Vec<u32> = (10..20).collect();
        none.extend(0..10);
        assert_eq!(PairedLists::new(&none, &rank).unwrap().ap(10, 10), 0.0);
    }

    #[test]
    fn mismatched_sets_are_rejected() {
        assert!(PairedLists::new(&[0, 1, 2], &[0, 1, 3]).is_err());
        assert!(PairedLists::new(&[0, 1], &[0, 1, 2]).is_err());
        assert!(PairedLists::new(&[0, 0, 1], &[0, 1, 2]).is_err());
        assert!(hr_at_k(&ranked(&[1, 2]), &ranked(&[1, 3]), 1).is_err());
    }

    #[test]
    fn rpc_identity_and_reverse() {
        let a = ranked(&[3, 1, 4, 0, 2]);
        let rev = ranked(&[2, 0, 4, 1, 3]);
        let c = rpc_curve(&[(&a, &a), (&a, &a)], RpcVariant::Ecpm).unwrap();
        assert!(c.points.iter().all(|&(r, p)| p == r as f64));
        assert_eq!(c.mean_abs_deviation(), 0.0);
        let c = rpc_curve(&[(&rev, &a)], RpcVariant::Ecpm).unwrap();
        assert!(c.points.iter().all(|&(r, p)| p == (6 - r) as f64));
        assert!(rpc_curve(&[(&a, &ranked(&[0, 1, 2, 3, 9]))], RpcVariant::Ecpm).is_err());
    }

    #[test]
    fn rpc_pctr_variant_ignores_bids() {
        // Same raw scores, different bids: identical by pCTR, reversed by ECPM.
        let pre = RankedList::from_scored(
            0,
            vec![ScoredAd::new(0, 0.2, 1.0), ScoredAd::new(1, 0.1, 10.0)],
        );
        let rank = RankedList::from_scored(
            0,
            vec![ScoredAd::new(0, 0.2, 10.0), ScoredAd::new(1, 0.1, 1.0)],
        );
        let by_pctr = rpc_curve(&[(&pre, &rank)], RpcVariant::Pctr).unwrap();
        assert_eq!(by_pctr.mean_abs_deviation(), 0.0);
        let by_ecpm = rpc_curve(&[(&pre, &rank)], RpcVariant::Ecpm).unwrap();
        assert_eq!(by_ecpm.mean_abs_deviation(), 1.0);
    }

    #[test]
    fn report_averages() {
        let rank: Vec<u32> = (0..12).collect();
        let mut rev = rank.clone();
        rev.reverse();
        let pairs = vec![
            PairedLists::new(&rank, &rank).unwrap(),
            PairedLists::new(&rev, &rank).unwrap(),
        ];
        let r = ConsistencyReport::compute(&pairs, &[5, 10], 10).unwrap();
        assert_eq!(r.n_lists, 2);
        // Reversed list: top-5 holds ranking positions 12..8 → 3 relevant.
        assert!((r.get(Metric::Hr, 5).unwrap() - (1.0 + 0.6) / 2.0).abs() < 1e-15);
        assert!(r.values.values().all(|v| (0.0..=1.0).contains(v)));
    }
}
