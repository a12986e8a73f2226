mod common;

use common::*;
use coprlab::cascade::{RankedList, ScoredAd};
use coprlab::pipeline::{self, ExperimentConfig};
use coprlab::rng;
use coprlab::trainer::{
    chunk_sample, copr_loss, cross_entropy_logit, delta_ndcg, rank_pair_loss, rankflow_loss, train,
    CoprWeights, ListRecord, Method, PairGroup, PairLossForm, PairWeighting, RankFlowWeights,
    TrainBatch, TrainConfig, TrainData,
};
use coprlab::Error;
use proptest::prelude::*;

#[test]
fn delta_ndcg_is_the_swap_loss() {
    delta_ndcg_swap_check(8).unwrap();
}

#[test]
fn delta_ndcg_rejects_bad_pairs() {
    assert!(delta_ndcg(1, 1, 3).is_err());
    assert!(delta_ndcg(2, 1, 3).is_err());
    assert!(delta_ndcg(1, 4, 3).is_err());
    assert!(delta_ndcg(1, 2, 1).is_err());
}

#[test]
fn scale_contract_of_the_two_forms() {
    let (yi, bi, yj, bj) = (0.13, 2.1, 0.07, 3.4);
    for c in [0.5, 2.0, 7.0] {
        let r1 = rank_pair_loss(yi, bi, yj, bj, PairLossForm::Ratio).unwrap();
        let rc = rank_pair_loss(c * yi, bi, c * yj, bj, PairLossForm::Ratio).unwrap();
        assert!((r1 - rc).abs() <= 1e-12);
    }
    let d1 = rank_pair_loss(yi, bi, yj, bj, PairLossForm::Difference).unwrap();
    let d2 = rank_pair_loss(2.0 * yi, bi, 2.0 * yj, bj, PairLossForm::Difference).unwrap();
    assert_ne!(d1, d2);
}

#[test]
fn ratio_form_rejects_non_positive_inputs() {
    assert!(rank_pair_loss(0.0, 1.0, 0.1, 1.0, PairLossForm::Ratio).is_err());
    assert!(rank_pair_loss(0.1, 1.0, 0.1, -1.0, PairLossForm::Ratio).is_err());
    assert!(rank_pair_loss(0.0, 1.0, 0.1, 1.0, PairLossForm::Difference).is_ok());
}

#[test]
fn half_teacher_score_pulls_symmetrically() {
    for z in [0.3, 1.7, 4.0] {
        assert!((cross_entropy_logit(z, 0.5) - cross_entropy_logit(-z, 0.5)).abs() < 1e-12);
    }
}

fn ranked(n: usize) -> RankedList {
    RankedList::from_scored(
        9,
        (0..n as u32).map(|a| ScoredAd::new(a, 0.5 / (a + 1) as f64, 1.0)).collect(),
    )
}

proptest! {
    #[test]
    fn chunk_samples_are_well_formed(m in 1usize..60, k in 1usize..12, seed in any::<u64>()) {
        let list = ranked(m);
        let s = chunk_sample(&list, k, &mut rng::stream(seed, &[])).unwrap();
        let d = m.div_ceil(k);
        prop_assert_eq!(s.n_chunks, d);
        prop_assert_eq!(s.entries.len(), d);
        for (idx, e) in s.entries.iter().enumerate() {
            prop_assert_eq!(e.chunk, idx + 1);
            prop_assert_eq!(e.priority, d - 1 - idx);
            prop_assert!(e.position / k == idx && e.position < m);
            prop_assert_eq!(e.ad_id, list.entries[e.position].ad_id);
        }
    }

    #[test]
    fn pairs_point_from_better_chunks(len in 2usize..16, k in 1usize..4, seed in any::<u64>()) {
        let lists = list_records(seed, 1, len);
        for w in [PairWeighting::DeltaNdcg, PairWeighting::Uniform] {
            let s = chunk_sample(&lists[0].as_ranked(), k, &mut rng::stream(seed, &[1])).unwrap();
            let g = PairGroup::from_sample(&s, &lists[0], w);
            let d = s.n_chunks;
            prop_assert_eq!(g.pairs.len(), d * (d - 1) / 2);
            prop_assert!(g.is_well_oriented());
        }
    }

    #[test]
    fn reported_total_is_the_weighted_sum(l1 in 0.0f64..3.0, l2 in 0.0f64..3.0, seed in 0u64..50) {
        let m = micro_model(seed, Some(1.3));
        let recs = ctr_records(seed, 5, false);
        let lists = list_records(seed, 3, 6);
        let groups = pair_groups(&lists, 2, PairWeighting::DeltaNdcg);
        let w = CoprWeights { lambda_rank: l1, lambda_reg: l2, form: PairLossForm::Difference };
        let (r, _) = copr_loss(&m, TrainBatch { ctr_records: &recs, pair_groups: &groups }, w).unwrap();
        prop_assert_eq!(r.total, r.l_ctr + l1 * r.l_rank + l2 * r.l_reg);
    }
}

#[test]
fn uniform_weights_only_move_emphasis() {
    let lists = list_records(4, 5, 10);
    let a = pair_groups(&lists, 2, PairWeighting::DeltaNdcg);
    let b = pair_groups(&lists, 2, PairWeighting::Uniform);
    for (x, y) in a.iter().zip(&b) {
        let sx: f64 = x.pairs.iter().map(|p| p.weight).sum();
        let sy: f64 = y.pairs.iter().map(|p| p.weight).sum();
        assert!((sx - sy).abs() < 1e-12);
        assert!(y.pairs.windows(2).all(|w| w[0].weight == w[1].weight));
        assert!(x.pairs[0].weight > x.pairs.last().unwrap().weight);
    }
}

#[test]
fn rankflow_terms_vanish_when_expected() {
    let m = micro_model(21, None);
    let mut lists = list_records(8, 2, 5);
    // Teacher scores equal to the student's own predictions.
    for l in &mut lists {
        for e in &mut l.entries {
            e.teacher_pctr = m.predict(&e.ids).unwrap().pctr;
        }
    }
    let refs: Vec<&ListRecord> = lists.iter().collect();
    let w = RankFlowWeights {
        match_weight: 2.0,
        select_weight: 1.0,
        n_select: 0,
    };
    let (r, _) = rankflow_loss(&m, &[], &refs, w).unwrap();
    assert_eq!(r.l_rank, 0.0);
    assert_eq!(r.l_reg, 0.0);

    lists[0].entries[0].teacher_pctr = f64::NAN;
    let refs: Vec<&ListRecord> = lists.iter().collect();
    assert!(matches!(rankflow_loss(&m, &[], &refs, w), Err(Error::Missing(_))));
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let mut m = micro_model(2, Some(1.0));
    let before = m.clone();
    let recs = ctr_records(1, 20, false);
    let lists = list_records(2, 4, 6);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let h = train(&mut m, Method::Copr, TrainData { ctr: &recs, lists: &lists }, &cfg).unwrap();
    assert!(h.is_empty());
    assert_eq!(m, before);
}

#[test]
fn warmup_ramps_the_rank_weight() {
    let recs = ctr_records(1, 16, false);
    let lists = list_records(2, 16, 6);
    let cfg = TrainConfig {
        epochs: 1,
        ctr_batch: 4,
        list_batch: 4,
        rank_warmup: 3,
        ..TrainConfig::default()
    };
    let mut m = micro_model(3, Some(1.0));
    let h = train(&mut m, Method::Copr, TrainData { ctr: &recs, lists: &lists }, &cfg).unwrap();
    // Four steps: the last one runs at the full weight.
    assert_eq!(h[0].loss.lambda_rank, cfg.lambda_rank);
}

#[test]
fn training_is_reproducible() {
    let recs = ctr_records(1, 64, true);
    let lists = list_records(2, 16, 8);
    let cfg = TrainConfig {
        epochs: 3,
        ctr_batch: 16,
        list_batch: 4,
        ..TrainConfig::default()
    };
    for method in Method::ALL {
        let run = || {
            let mut m = micro_model(3, method.uses_relaxation().then_some(1.0));
            let h = train(&mut m, method, TrainData { ctr: &recs, lists: &lists }, &cfg).unwrap();
            (m, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1, h2, "{}", method.name());
        assert_eq!(m1, m2, "{}", method.name());
    }
}

#[test]
fn method_and_log_mismatches_are_errors() {
    let recs = ctr_records(1, 8, false);
    let lists = list_records(2, 2, 5);
    let cfg = TrainConfig::default();
    let mut plain = micro_model(1, None);
    let mut relaxed = micro_model(1, Some(1.0));
    let no_lists = TrainData { ctr: &recs, lists: &[] };
    assert!(matches!(train(&mut relaxed, Method::Copr, no_lists, &cfg), Err(Error::Missing(_))));
    assert!(matches!(train(&mut plain, Method::RankFlow, no_lists, &cfg), Err(Error::Missing(_))));
    // Distillation needs teacher scores on the impressions.
    assert!(matches!(train(&mut plain, Method::Distill, no_lists, &cfg), Err(Error::Missing(_))));
    let with_lists = TrainData { ctr: &recs, lists: &lists };
    assert!(matches!(train(&mut plain, Method::Copr, with_lists, &cfg), Err(Error::NoRelaxation)));
}

// At the default lr the tiny world converges within one epoch and later epoch
// means only show chunk-resampling noise. The warm-up would still be ramping λ1
// here (about 30 steps per epoch), so the objective itself would move.
const LR: f64 = 0.02;

#[test]
fn copr_total_loss_falls_on_a_tiny_world() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: ExperimentConfig = tiny_config(dir.path());
    cfg.student.lr = LR;
    cfg.student.ctr_batch = 32;
    cfg.student.list_batch = 8;
    cfg.student.rank_warmup = 0;
    assert_eq!(cfg.world.n_ads, 20);
    assert_eq!(cfg.logs.requests, 200);
    let catalog = pipeline::build_world(&cfg).unwrap();
    let boot = pipeline::bootstrap_impressions(&cfg, &catalog).unwrap();
    let teacher = pipeline::train_teacher(&cfg, &catalog, &boot).unwrap().model;
    let logs = pipeline::ranking_logs(&cfg, &catalog, &teacher).unwrap();
    let data = pipeline::student_data(&cfg, &catalog, &teacher, &boot, &logs).unwrap();
    let run = cfg.run("copr").unwrap();
    let (_, history) = pipeline::train_student(&cfg, run, &teacher, &data).unwrap();
    assert_eq!(history.len(), 5);
    let totals: Vec<f64> = history.iter().map(|e| e.loss.total).collect();
    assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
}
