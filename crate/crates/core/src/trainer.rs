//! Training objectives for pre-ranking students and the epoch loop.
//!
//! Four objectives share one machinery: every loss is reduced to per-example
//! derivatives with respect to the prediction logit and the relaxation output,
//! which [`CtrModel::backward`] turns into parameter gradients.
//!
//! - **Base**: cross entropy on impression records.
//! - **Distillation**: cross entropy plus a soft-label cross entropy against
//!   the teacher's pCTR on the same impression records.
//! - **RankFlow**: cross entropy plus squared-error score matching to the
//!   teacher over ranking-log entries and a selection term that pushes the
//!   teacher's selected (displayed) candidates up.
//! - **COPR**: cross entropy plus a ΔNDCG-weighted pairwise logistic loss over
//!   chunk-sampled representatives of each ranking log, scored as
//!   `α·ŷ·bid`, plus a symmetric penalty keeping `α` near 1.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::RankedList;
use crate::error::{Error, Result};
use crate::model::{CtrModel, Gradients, Trace, Upstream};
use crate::rng;

/// Examples per parallel work unit. Fixed so reductions happen in one order.
const UNITS_PER_TASK: usize = 16;

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    crate::model::sigmoid(z)
}

/// Cross entropy `−t·log ŷ − (1−t)·log(1−ŷ)` computed from the logit, for a
/// hard or soft label `t`.
pub fn cross_entropy_logit(logit: f64, target: f64) -> f64 {
    softplus(logit) - target * logit
}

// ---------------------------------------------------------------------------
// Chunk-based sampling

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkEntry {
    /// Position of the representative in the source list (0-based).
    pub position: usize,
    pub ad_id: u32,
    pub pctr_teacher: f64,
    pub bid: f64,
    /// 1-based chunk index `d`.
    pub chunk: usize,
    /// `D − d`: larger is better.
    pub priority: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkSample {
    pub request_id: u64,
    pub chunk_size: usize,
    pub n_chunks: usize,
    pub entries: Vec<ChunkEntry>,
}

/// Splits `ranked` into `D = ceil(M/K)` chunks of `K` adjacent ads (the last
/// one may be short) and draws one representative per chunk uniformly.
pub fn chunk_sample<R: Rng>(ranked: &RankedList, k: usize, rng: &mut R) -> Result<ChunkSample> {
    if k == 0 {
        return Err(Error::InvalidArgument("chunk size must be at least 1".into()));
    }
    if ranked.is_empty() {
        return Err(Error::Empty("ranked list"));
    }
    let n_chunks = ranked.len().div_ceil(k);
    let entries = ranked
        .entries
        .chunks(k)
        .enumerate()
        .map(|(c, chunk)| {
            let pick = rng.random_range(0..chunk.len());
            let e = chunk[pick];
            ChunkEntry {
                position: c * k + pick,
                ad_id: e.ad_id,
                pctr_teacher: e.pctr,
                bid: e.bid,
                chunk: c + 1,
                priority: n_chunks - (c + 1),
            }
        })
        .collect();
    Ok(ChunkSample {
        request_id: ranked.request_id,
        chunk_size: k,
        n_chunks,
        entries,
    })
}

// ---------------------------------------------------------------------------
// Pairwise rank loss and ΔNDCG weights

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLossForm {
    /// `log(1 + exp(−(s_i / s_j − 1)))`, invariant to common scaling.
    Ratio,
    /// `log(1 + exp(−(s_i − s_j)))`.
    #[default]
    Difference,
}

/// Pair loss and its derivatives w.r.t. the two adjusted scores.
fn pair_loss_grad(yi: f64, bi: f64, yj: f64, bj: f64, form: PairLossForm) -> (f64, f64, f64) {
    let (si, sj) = (yi * bi, yj * bj);
    let (margin, dm_dyi, dm_dyj) = match form {
        PairLossForm::Difference => (si - sj, bi, -bj),
        PairLossForm::Ratio => (si / sj - 1.0, bi / sj, -si / (yj * sj)),
    };
    // d/dm softplus(−m) = −sigmoid(−m)
    let dl_dm = -sigmoid(-margin);
    (softplus(-margin), dl_dm * dm_dyi, dl_dm * dm_dyj)
}

/// Pairwise logistic loss for a pair where `i` is ranked better than `j`.
pub fn rank_pair_loss(yi: f64, bid_i: f64, yj: f64, bid_j: f64, form: PairLossForm) -> Result<f64> {
    if form == PairLossForm::Ratio && !(yi > 0.0 && bid_i > 0.0 && yj > 0.0 && bid_j > 0.0) {
        return Err(Error::InvalidArgument(
            "ratio-form pair loss needs positive scores and bids".into(),
        ));
    }
    Ok(pair_loss_grad(yi, bid_i, yj, bid_j, form).0)
}

/// `IDCG = Σ_{i=1..D} (2^{D−i} − 1) / log2(i + 1)`.
pub fn idcg(d: usize) -> f64 {
    (1..=d)
        .map(|i| (((d - i) as f64).exp2() - 1.0) / ((i + 1) as f64).log2())
        .sum()
}

/// NDCG utility drop from swapping chunk ranks `i < j` of a `D`-chunk list:
/// `(2^{D−i} − 2^{D−j}) / IDCG · (1/log2(i+1) − 1/log2(j+1))`.
pub fn delta_ndcg(i: usize, j: usize, d: usize) -> Result<f64> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("ΔNDCG needs D ≥ 2, got {d}")));
    }
    if !(1 <= i && i < j && j <= d) {
        return Err(Error::InvalidArgument(format!(
            "ΔNDCG needs 1 ≤ i < j ≤ D, got i={i}, j={j}, D={d}"
        )));
    }
    let gain = ((d - i) as f64).exp2() - ((d - j) as f64).exp2();
    let disc = 1.0 / ((i + 1) as f64).log2() - 1.0 / ((j + 1) as f64).log2();
    Ok(gain / idcg(d) * disc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairWeighting {
    #[default]
    DeltaNdcg,
    /// Every pair gets the mean ΔNDCG weight of its list, so the total
    /// weight matches the ΔNDCG variant and only the emphasis changes.
    Uniform,
}

fn pair_weights(d: usize, weighting: PairWeighting) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::with_capacity(d * d.saturating_sub(1) / 2);
    for i in 1..=d {
        for j in i + 1..=d {
            pairs.push((i, j, delta_ndcg(i, j, d).expect("valid pair")));
        }
    }
    if weighting == PairWeighting::Uniform && !pairs.is_empty() {
        let mean = pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64;
        pairs.iter_mut().for_each(|p| p.2 = mean);
    }
    pairs
}

// ---------------------------------------------------------------------------
// Training records

/// Feature ids of one (user, ad, context) row.
pub type FeatureRow = [u32; crate::datagen::N_FIELDS];

/// One impression: features, click label and (optionally) the teacher's pCTR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtrRecord {
    pub ids: FeatureRow,
    pub y: f64,
    pub teacher: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ListEntry {
    pub ids: FeatureRow,
    pub ad_id: u32,
    pub teacher_pctr: f64,
    pub bid: f64,
}

/// A ranking log with the feature rows needed to score its entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListRecord {
    pub request_id: u64,
    /// Entries in the ranking model's ECPM order.
    pub entries: Vec<ListEntry>,
}

impl ListRecord {
    pub fn as_ranked(&self) -> RankedList {
        RankedList {
            request_id: self.request_id,
            entries: self
                .entries
                .iter()
                .map(|e| crate::cascade::ScoredAd::new(e.ad_id, e.teacher_pctr, e.bid))
                .collect(),
        }
    }
}

/// One pair of a chunk sample; indices refer to `PairGroup::reps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// The representatives of one chunk sample and all inter-chunk pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGroup {
    pub reps: Vec<(FeatureRow, f64)>,
    pub chunks: Vec<usize>,
    pub pairs: Vec<Pair>,
}

impl PairGroup {
    pub fn from_sample(sample: &ChunkSample, list: &ListRecord, weighting: PairWeighting) -> Self {
        let reps = sample
            .entries
            .iter()
            .map(|e| (list.entries[e.position].ids, e.bid))
            .collect();
        let chunks = sample.entries.iter().map(|e| e.chunk).collect();
        let pairs = pair_weights(sample.n_chunks, weighting)
            .into_iter()
            .map(|(i, j, weight)| Pair {
                i: i - 1,
                j: j - 1,
                weight,
            })
            .collect();
        PairGroup { reps, chunks, pairs }
    }

    /// Every pair has the better chunk first and a positive weight.
    pub fn is_well_oriented(&self) -> bool {
        self.pairs
            .iter()
            .all(|p| self.chunks[p.i] < self.chunks[p.j] && p.weight > 0.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainBatch<'a> {
    pub ctr_records: &'a [CtrRecord],
    pub pair_groups: &'a [PairGroup],
}

// ---------------------------------------------------------------------------
// Loss reports

/// Loss components of one evaluation. For the baselines, `l_rank` holds the
/// score-alignment term and `l_reg` the selection term, with their weights
/// in `lambda_rank` and `lambda_reg`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ctr: f64,
    pub l_rank: f64,
    pub l_reg: f64,
    pub total: f64,
    pub lambda_rank: f64,
    pub lambda_reg: f64,
}

impl LossReport {
    pub fn new(l_ctr: f64, l_rank: f64, l_reg: f64, lambda_rank: f64, lambda_reg: f64) -> Self {
        LossReport {
            l_ctr,
            l_rank,
            l_reg,
            total: l_ctr + lambda_rank * l_rank + lambda_reg * l_reg,
            lambda_rank,
            lambda_reg,
        }
    }
}

/// Symmetric penalty on the relaxation factor: `α − 1` above 1, `1/α − 1` below.
pub fn alpha_penalty(alpha: f64) -> f64 {
    if alpha > 1.0 {
        alpha - 1.0
    } else {
        1.0 / alpha - 1.0
    }
}

fn alpha_penalty_grad(alpha: f64) -> f64 {
    if alpha > 1.0 {
        1.0
    } else {
        -1.0 / (alpha * alpha)
    }
}

/// Partial loss sums and gradients of one work unit.
struct Partial {
    ctr: f64,
    rank: f64,
    reg: f64,
    grads: Gradients,
}

fn reduce(model: &CtrModel, parts: Vec<Partial>) -> (f64, f64, f64, Gradients) {
    let mut grads = model.zero_grads();
    let (mut ctr, mut rank, mut reg) = (0.0, 0.0, 0.0);
    for p in parts {
        ctr += p.ctr;
        rank += p.rank;
        reg += p.reg;
        grads.add(&p.grads);
    }
    (ctr, rank, reg, grads)
}

/// Per-record cross entropy terms. `soft_weight` adds a soft-label term
/// against the teacher score (distillation).
fn ctr_partials(
    model: &CtrModel,
    records: &[CtrRecord],
    scale: f64,
    soft_weight: f64,
) -> Result<Vec<Partial>> {
    if soft_weight != 0.0 && records.iter().any(|r| r.teacher.is_none()) {
        return Err(Error::Missing("teacher score on an impression record".into()));
    }
    crate::par::map_chunks(records, UNITS_PER_TASK, |chunk| {
        let mut grads = model.zero_grads();
        let (mut ctr, mut soft) = (0.0, 0.0);
        for r in chunk {
            let t = model.trace(&r.ids)?;
            ctr += cross_entropy_logit(t.logit, r.y);
            let mut d = t.pctr - r.y;
            if soft_weight != 0.0 {
                let target = r.teacher.expect("checked above");
                soft += cross_entropy_logit(t.logit, target);
                d += soft_weight * (t.pctr - target);
            }
            model.backward(&t, Upstream::logit(scale * d), &mut grads);
        }
        Ok(Partial {
            ctr: ctr * scale,
            rank: soft * scale,
            reg: 0.0,
            grads,
        })
    })
    .into_iter()
    .collect()
}

/// Mean cross-entropy over impression records.
pub fn ctr_loss(model: &CtrModel, records: &[CtrRecord]) -> Result<(f64, Gradients)> {
    if records.is_empty() {
        return Err(Error::Empty("impression records"));
    }
    let parts = ctr_partials(model, records, 1.0 / records.len() as f64, 0.0)?;
    let (ctr, _, _, grads) = reduce(model, parts);
    Ok((ctr, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoprWeights {
    pub lambda_rank: f64,
    pub lambda_reg: f64,
    pub form: PairLossForm,
}

impl Default for CoprWeights {
    fn default() -> Self {
        CoprWeights {
            lambda_rank: 1.0,
            lambda_reg: 0.2,
            form: PairLossForm::Difference,
        }
    }
}

/// `L = L_ctr + λ1·L_rank + λ2·L_reg` over one batch.
///
/// `L_ctr` is the mean cross entropy over `ctr_records`, `L_rank` the weighted
/// pair loss summed within each chunk sample and averaged over samples, and
/// `L_reg` the α penalty averaged over every representative forward pass.
pub fn copr_loss(
    model: &CtrModel,
    batch: TrainBatch<'_>,
    weights: CoprWeights,
) -> Result<(LossReport, Gradients)> {
    if batch.ctr_records.is_empty() && batch.pair_groups.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let mut parts = if batch.ctr_records.is_empty() {
        Vec::new()
    } else {
        ctr_partials(model, batch.ctr_records, 1.0 / batch.ctr_records.len() as f64, 0.0)?
    };
    let n_groups = batch.pair_groups.len();
    let n_reps: usize = batch.pair_groups.iter().map(|g| g.reps.len()).sum();
    if n_groups > 0 {
        let rank_scale = 1.0 / n_groups as f64;
        let reg_scale = 1.0 / n_reps as f64;
        let group_parts: Vec<Result<Partial>> =
            crate::par::map_chunks(batch.pair_groups, UNITS_PER_TASK, |chunk| {
                let mut grads = model.zero_grads();
                let (mut rank, mut reg) = (0.0, 0.0);
                for g in chunk {
                    let (r, p) = copr_group(model, g, weights, rank_scale, reg_scale, &mut grads)?;
                    rank += r;
                    reg += p;
                }
                Ok(Partial {
                    ctr: 0.0,
                    rank,
                    reg,
                    grads,
                })
            });
        for p in group_parts {
            parts.push(p?);
        }
    }
    let (l_ctr, l_rank, l_reg, grads) = reduce(model, parts);
    Ok((
        LossReport::new(l_ctr, l_rank, l_reg, weights.lambda_rank, weights.lambda_reg),
        grads,
    ))
}

/// Loss contributions of one chunk sample; gradients go into `grads`.
fn copr_group(
    model: &CtrModel,
    group: &PairGroup,
    w: CoprWeights,
    rank_scale: f64,
    reg_scale: f64,
    grads: &mut Gradients,
) -> Result<(f64, f64)> {
    let traces: Vec<Trace> = group
        .reps
        .iter()
        .map(|(ids, _)| model.trace(ids))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = traces.iter().map(Trace::score).collect();
    let mut d_score = vec![0.0; traces.len()];
    let mut rank = 0.0;
    for p in &group.pairs {
        let (bi, bj) = (group.reps[p.i].1, group.reps[p.j].1);
        if w.form == PairLossForm::Ratio && !(scores[p.i] > 0.0 && scores[p.j] > 0.0 && bi > 0.0 && bj > 0.0) {
            return Err(Error::InvalidArgument(
                "ratio-form pair loss needs positive scores and bids".into(),
            ));
        }
        let (l, gi, gj) = pair_loss_grad(scores[p.i], bi, scores[p.j], bj, w.form);
        rank += p.weight * l;
        d_score[p.i] += p.weight * gi;
        d_score[p.j] += p.weight * gj;
    }
    let mut reg = 0.0;
    for (t, ds) in traces.iter().zip(&d_score) {
        let ds = w.lambda_rank * rank_scale * ds;
        let alpha = t.alpha.unwrap_or(1.0);
        let d_pctr = alpha * ds;
        let mut d_alpha = t.pctr * ds;
        if let Some(a) = t.alpha {
            reg += alpha_penalty(a);
            d_alpha += w.lambda_reg * reg_scale * alpha_penalty_grad(a);
        }
        model.backward(t, Upstream::from_heads(t, d_pctr, d_alpha), grads);
    }
    Ok((rank * rank_scale, reg * reg_scale))
}

/// Cross entropy plus soft-label cross entropy against the teacher's pCTR,
/// equally weighted, averaged over impression records.
pub fn distill_loss(model: &CtrModel, records: &[CtrRecord]) -> Result<(LossReport, Gradients)> {
    if records.is_empty() {
        return Err(Error::Empty("impression records"));
    }
    let parts = ctr_partials(model, records, 1.0 / records.len() as f64, 1.0)?;
    let (l_ctr, l_soft, _, grads) = reduce(model, parts);
    Ok((LossReport::new(l_ctr, l_soft, 0.0, 1.0, 0.0), grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankFlowWeights {
    /// Weight of the squared-error score matching term.
    pub match_weight: f64,
    /// Weight of the selection term.
    pub select_weight: f64,
    /// Number of top entries per ranking log treated as selected.
    pub n_select: usize,
}

impl Default for RankFlowWeights {
    fn default() -> Self {
        RankFlowWeights {
            match_weight: 100.0,
            select_weight: 0.001,
            n_select: 1,
        }
    }
}

/// `L_ctr + w_m·mean (ŷ − t)² + w_s·mean_{selected} −log ŷ`.
///
/// Score matching averages over every ranking-log entry; the selection term
/// averages over the top `n_select` entries of each log.
pub fn rankflow_loss(
    model: &CtrModel,
    ctr_records: &[CtrRecord],
    lists: &[&ListRecord],
    w: RankFlowWeights,
) -> Result<(LossReport, Gradients)> {
    if ctr_records.is_empty() && lists.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    if lists
        .iter()
        .flat_map(|l| &l.entries)
        .any(|e| !e.teacher_pctr.is_finite())
    {
        return Err(Error::Missing("teacher score on a ranking-log entry".into()));
    }
    let mut parts = if ctr_records.is_empty() {
        Vec::new()
    } else {
        ctr_partials(model, ctr_records, 1.0 / ctr_records.len() as f64, 0.0)?
    };
    let n_entries: usize = lists.iter().map(|l| l.entries.len()).sum();
    let n_selected: usize = lists.iter().map(|l| l.entries.len().min(w.n_select)).sum();
    if n_entries > 0 {
        let match_scale = w.match_weight / n_entries as f64;
        let select_scale = if n_selected > 0 {
            w.select_weight / n_selected as f64
        } else {
            0.0
        };
        let list_parts: Vec<Result<Partial>> = crate::par::map_chunks(lists, UNITS_PER_TASK, |chunk| {
            let mut grads = model.zero_grads();
            let (mut matching, mut select) = (0.0, 0.0);
            for list in chunk {
                for (pos, e) in list.entries.iter().enumerate() {
                    let t = model.trace(&e.ids)?;
                    let diff = t.pctr - e.teacher_pctr;
                    matching += diff * diff;
                    let mut d_logit = match_scale * 2.0 * diff * t.pctr * (1.0 - t.pctr);
                    if pos < w.n_select {
                        select += softplus(-t.logit);
                        d_logit += select_scale * (t.pctr - 1.0);
                    }
                    model.backward(&t, Upstream::logit(d_logit), &mut grads);
                }
            }
            Ok(Partial {
                ctr: 0.0,
                rank: matching / n_entries as f64,
                reg: if n_selected > 0 { select / n_selected as f64 } else { 0.0 },
                grads,
            })
        });
        for p in list_parts {
            parts.push(p?);
        }
    }
    let (l_ctr, l_match, l_select, grads) = reduce(model, parts);
    Ok((
        LossReport::new(l_ctr, l_match, l_select, w.match_weight, w.select_weight),
        grads,
    ))
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Base,
    Distill,
    RankFlow,
    Copr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Base, Method::Distill, Method::RankFlow, Method::Copr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Distill => "distill",
            Method::RankFlow => "rankflow",
            Method::Copr => "copr",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "base" => Ok(Method::Base),
            "distill" | "distillation" => Ok(Method::Distill),
            "rankflow" => Ok(Method::RankFlow),
            "copr" => Ok(Method::Copr),
            other => Err(Error::InvalidArgument(format!(
                "unknown method `{other}` (expected base, distill, rankflow or copr)"
            ))),
        }
    }

    pub fn uses_relaxation(self) -> bool {
        self == Method::Copr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub ctr_batch: usize,
    pub list_batch: usize,
    pub seed: u64,
    pub chunk_size: usize,
    pub lambda_rank: f64,
    pub lambda_reg: f64,
    pub loss_form: PairLossForm,
    pub weighting: PairWeighting,
    pub match_weight: f64,
    pub select_weight: f64,
    pub n_select: usize,
    /// Rescale each step's gradient to at most this Euclidean norm (0 disables).
    pub clip_norm: f64,
    /// COPR only: λ1 ramps linearly from 0 over this many steps.
    pub rank_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let rf = RankFlowWeights::default();
        TrainConfig {
            epochs: 4,
            lr: 0.5,
            ctr_batch: 256,
            list_batch: 256,
            seed: 1,
            chunk_size: 2,
            lambda_rank: 1.0,
            lambda_reg: 0.2,
            loss_form: PairLossForm::Difference,
            weighting: PairWeighting::DeltaNdcg,
            match_weight: rf.match_weight,
            select_weight: rf.select_weight,
            n_select: rf.n_select,
            clip_norm: 1.0,
            rank_warmup: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be a non-negative finite number"));
        }
        if self.ctr_batch == 0 {
            return Err(Error::config("ctr_batch", "must be positive"));
        }
        if self.list_batch == 0 {
            return Err(Error::config("list_batch", "must be positive"));
        }
        if self.chunk_size == 0 {
            return Err(Error::config("chunk_size", "must be positive"));
        }
        for (key, v) in [
            ("lambda_rank", self.lambda_rank),
            ("lambda_reg", self.lambda_reg),
            ("match_weight", self.match_weight),
            ("select_weight", self.select_weight),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a non-negative finite number"));
            }
        }
        Ok(())
    }

    fn copr_weights(&self) -> CoprWeights {
        CoprWeights {
            lambda_rank: self.lambda_rank,
            lambda_reg: self.lambda_reg,
            form: self.loss_form,
        }
    }

    fn rankflow_weights(&self) -> RankFlowWeights {
        RankFlowWeights {
            match_weight: self.match_weight,
            select_weight: self.select_weight,
            n_select: self.n_select,
        }
    }
}

/// Training inputs. `lists` are ranking logs; `ctr` are impression records.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub ctr: &'a [CtrRecord],
    pub lists: &'a [ListRecord],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: LossReport,
}

fn check_inputs(method: Method, data: &TrainData<'_>) -> Result<()> {
    match method {
        Method::Base if data.ctr.is_empty() => Err(Error::Missing("impression logs for base training".into())),
        Method::Distill if data.ctr.is_empty() => {
            Err(Error::Missing("impression logs for distillation".into()))
        }
        Method::Distill if data.ctr.iter().any(|r| r.teacher.is_none()) => {
            Err(Error::Missing("teacher scores on impression logs".into()))
        }
        Method::RankFlow | Method::Copr if data.lists.is_empty() => Err(Error::Missing(format!(
            "ranking logs for {} training",
            method.name()
        ))),
        _ => Ok(()),
    }
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch SGD on `model`.
///
/// Each step draws `ctr_batch` impression records and `list_batch` ranking
/// logs; an epoch lasts until the longer stream has been seen once and the
/// shorter one wraps around with a fresh shuffle. For COPR, chunk
/// representatives are re-drawn every epoch. Deterministic given `cfg.seed`.
pub fn train(
    model: &mut CtrModel,
    method: Method,
    data: TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    check_inputs(method, &data)?;
    if method.uses_relaxation() != model.has_relaxation() && method == Method::Copr {
        return Err(Error::NoRelaxation);
    }
    let use_ctr = !data.ctr.is_empty();
    let use_lists = matches!(method, Method::RankFlow | Method::Copr);
    let ctr_steps = if use_ctr { data.ctr.len().div_ceil(cfg.ctr_batch) } else { 0 };
    let list_steps = if use_lists { data.lists.len().div_ceil(cfg.list_batch) } else { 0 };
    let steps = ctr_steps.max(list_steps);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, &[0x7EA1, epoch as u64]);
        let mut ctr_stream = Cycler::new(data.ctr.len(), &mut r);
        let mut list_stream = Cycler::new(data.lists.len(), &mut r);

        let groups: Vec<PairGroup> = if method == Method::Copr {
            let weighting = cfg.weighting;
            let k = cfg.chunk_size;
            crate::par::map_range(data.lists.len(), |i| {
                let mut cr = rng::stream(cfg.seed, &[0xC4C, epoch as u64, i as u64]);
                let list = &data.lists[i];
                let sample = chunk_sample(&list.as_ranked(), k, &mut cr)?;
                Ok(PairGroup::from_sample(&sample, list, weighting))
            })
            .into_iter()
            .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let mut sum = LossReport::default();
        for _ in 0..steps {
            let ctr_idx = if use_ctr { ctr_stream.take(cfg.ctr_batch, &mut r) } else { Vec::new() };
            let list_idx = if use_lists { list_stream.take(cfg.list_batch, &mut r) } else { Vec::new() };
            let ctr_batch: Vec<CtrRecord> = ctr_idx.iter().map(|&i| data.ctr[i]).collect();
            let (report, grads) = match method {
                Method::Base => {
                    let (l, g) = ctr_loss(model, &ctr_batch)?;
                    (LossReport::new(l, 0.0, 0.0, 0.0, 0.0), g)
                }
                Method::Distill => distill_loss(model, &ctr_batch)?,
                Method::RankFlow => {
                    let lists: Vec<&ListRecord> = list_idx.iter().map(|&i| &data.lists[i]).collect();
                    rankflow_loss(model, &ctr_batch, &lists, cfg.rankflow_weights())?
                }
                Method::Copr => {
                    let batch_groups: Vec<PairGroup> =
                        list_idx.iter().map(|&i| groups[i].clone()).collect();
                    let mut w = cfg.copr_weights();
                    if global_step < cfg.rank_warmup {
                        w.lambda_rank *= (global_step + 1) as f64 / (cfg.rank_warmup + 1) as f64;
                    }
                    copr_loss(
                        model,
                        TrainBatch {
                            ctr_records: &ctr_batch,
                            pair_groups: &batch_groups,
                        },
                        w,
                    )?
                }
            };
            let mut grads = grads;
            if cfg.clip_norm > 0.0 {
                let norm = grads.norm();
                if norm > cfg.clip_norm {
                    grads.scale(cfg.clip_norm / norm);
                }
            }
            model.sgd_step(&grads, cfg.lr)?;
            global_step += 1;
            sum.l_ctr += report.l_ctr;
            sum.l_rank += report.l_rank;
            sum.l_reg += report.l_reg;
            sum.lambda_rank = report.lambda_rank;
            sum.lambda_reg = report.lambda_reg;
        }
        let n = steps.max(1) as f64;
        history.push(EpochReport {
            epoch: epoch + 1,
            loss: LossReport::new(
                sum.l_ctr / n,
                sum.l_rank / n,
                sum.l_reg / n,
                sum.lambda_rank,
                sum.lambda_reg,
            ),
        });
    }
    Ok(history)
}

/// Endless shuffled pass over `0..n`, reshuffling on wrap-around.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cycler { order, pos: 0 }
    }

    fn take<R: Rng>(&mut self, k: usize, rng: &mut R) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(k);
        while out.len() < k.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mean cross entropy of `model` on `records`, without gradients.
pub fn log_loss(model: &CtrModel, records: &[CtrRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("impression records"));
    }
    let per: Vec<Result<f64>> = crate::par::map_chunks(records, 256, |chunk| {
        chunk.iter().try_fold(0.0, |acc, r| {
            let t = model.trace(&r.ids)?;
            Ok(acc + cross_entropy_logit(t.logit, r.y))
        })
    });
    let mut total = 0.0;
    for p in per {
        total += p?;
    }
    Ok(total / records.len() as f64)
}

pub const CURVE_HEADER: &str = "epoch,l_ctr,l_rank,l_reg,total";

pub fn write_training_curve(path: &Path, history: &[EpochReport]) -> Result<()> {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for e in history {
        let l = e.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.epoch,
            crate::cascade::fmt_f64(l.l_ctr),
            crate::cascade::fmt_f64(l.l_rank),
            crate::cascade::fmt_f64(l.l_reg),
            crate::cascade::fmt_f64(l.total)
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
