#![allow(dead_code)]

use coprlab::model::{CtrModel, ModelArch};
use coprlab::rng;
use coprlab::trainer::{
    chunk_sample, CtrRecord, FeatureRow, ListEntry, ListRecord, PairGroup, PairWeighting,
};
use rand::Rng;

pub const VOCAB: [usize; 5] = [3, 3, 4, 4, 2];

/// Float64 micro-model with both heads: 215 parameters.
pub fn micro_model(seed: u64, alpha_bias: Option<f64>) -> CtrModel {
    let arch = ModelArch {
        field_vocab: VOCAB.to_vec(),
        embed_dim: 2,
        hidden: vec![6, 4, 3],
        relaxation_hidden: alpha_bias.map(|_| vec![4, 3, 2]),
        init_logit: -1.0,
        embed_init_std: 0.6,
    };
    let mut m = CtrModel::new(arch, seed).unwrap();
    // Zero-initialized biases can leave a ReLU input exactly at its kink.
    let mut r = rng::stream(seed, &[0x717]);
    for i in 0..m.n_params() {
        *m.param_mut(i) += r.random_range(-0.05..0.05);
    }
    if let Some(b) = alpha_bias {
        // The relaxation output bias is the last parameter.
        let last = m.n_params() - 1;
        *m.param_mut(last) = b;
    }
    m
}

pub fn random_row<R: Rng>(r: &mut R) -> FeatureRow {
    let mut row = [0u32; 5];
    for (slot, &v) in row.iter_mut().zip(&VOCAB) {
        *slot = r.random_range(0..v as u32);
    }
    row
}

pub fn ctr_records(seed: u64, n: usize, with_teacher: bool) -> Vec<CtrRecord> {
    let mut r = rng::stream(seed, &[1]);
    (0..n)
        .map(|i| CtrRecord {
            ids: random_row(&mut r),
            y: (i % 3 == 0) as u8 as f64,
            teacher: with_teacher.then(|| r.random_range(0.02..0.4)),
        })
        .collect()
}

/// Ranking logs in descending teacher ECPM order.
pub fn list_records(seed: u64, n: usize, len: usize) -> Vec<ListRecord> {
    let mut r = rng::stream(seed, &[2]);
    (0..n)
        .map(|l| {
            let mut entries: Vec<ListEntry> = (0..len)
                .map(|a| ListEntry {
                    ids: random_row(&mut r),
                    ad_id: a as u32,
                    teacher_pctr: r.random_range(0.02..0.4),
                    bid: r.random_range(0.5..3.0),
                })
                .collect();
            entries.sort_by(|a, b| (b.teacher_pctr * b.bid).total_cmp(&(a.teacher_pctr * a.bid)));
            ListRecord {
                request_id: l as u64,
                entries,
            }
        })
        .collect()
}

pub fn pair_groups(lists: &[ListRecord], k: usize, weighting: PairWeighting) -> Vec<PairGroup> {
    let mut r = rng::stream(7, &[3]);
    lists
        .iter()
        .map(|l| {
            let s = chunk_sample(&l.as_ranked(), k, &mut r).unwrap();
            PairGroup::from_sample(&s, l, weighting)
        })
        .collect()
}

/// Central differences against `analytic`, relative tolerance `tol`.
/// Returns the worst relative error seen.
pub fn fd_check(model: &CtrModel, analytic: &[f64], loss: impl Fn(&CtrModel) -> f64, tol: f64) -> Result<f64, String> {
    assert_eq!(analytic.len(), model.n_params());
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = model.clone();
        *plus.param_mut(i) += h;
        let mut minus = model.clone();
        *minus.param_mut(i) -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let scale = fd.abs().max(a.abs()).max(1e-4);
        let rel = (fd - a).abs() / scale;
        worst = worst.max(rel);
        if rel > tol {
            return Err(format!("parameter {i}: finite difference {fd:e}, analytic {a:e}"));
        }
    }
    Ok(worst)
}

/// A world small enough to run the whole pipeline in about a second.
pub const TINY_TOML: &str = r#"
seed = 3

[world]
n_users = 30
n_ads = 20
user_segments = 3
ad_categories = 4
contexts = 2

[cascade]
candidates = 10
n_pre = 5
n_disp = 1

[teacher]
bootstrap_requests = 200
bootstrap_displays = 5
embed_dim = 8
hidden = [32, 16, 8]

[logs]
requests = 200
list_size = 10

[student_arch]
embed_dim = 4
hidden = [8, 4, 2]
relaxation_hidden = [4, 2, 2]

[student]
epochs = 5

[eval]
requests = 100
ks = [5, 10]
"#;

pub fn tiny_config(output_dir: &std::path::Path) -> coprlab::pipeline::ExperimentConfig {
    let dir = output_dir.display().to_string();
    coprlab::pipeline::ExperimentConfig::from_toml_with_overrides(TINY_TOML, &[("output_dir".into(), dir)]).unwrap()
}

/// Every on-disk step in order, as the CLI runs them.
pub fn run_all_steps(cfg: &coprlab::pipeline::ExperimentConfig) -> coprlab::pipeline::EvalReport {
    use coprlab::pipeline as p;
    p::step_gen_world(cfg).unwrap();
    p::step_train_teacher(cfg).unwrap();
    for run in &cfg.students {
        p::step_train_prerank(cfg, &run.name).unwrap();
    }
    p::step_evaluate(cfg, &[]).unwrap()
}

/// Relative path → contents of every file under `dir`.
pub fn dir_contents(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, std::fs::read(&path).unwrap());
        }
    }
    out
}

/// Reference metrics computed straight from the definitions on explicit id
/// lists. `rank` is the reference order.
pub mod reference {
    pub fn hr(pre: &[u32], rank: &[u32], k: usize, n_rel: usize) -> f64 {
        let relevant = &rank[..n_rel.min(rank.len())];
        let denom = k.min(relevant.len());
        if denom == 0 {
            return 0.0;
        }
        let hits = pre.iter().take(k).filter(|a| relevant.contains(a)).count();
        hits as f64 / denom as f64
    }

    pub fn ndcg(pre: &[u32], rank: &[u32], k: usize) -> f64 {
        let l = rank.len();
        let rel = |a: u32| l - 1 - rank.iter().position(|&b| b == a).unwrap();
        let dcg = |list: &[u32]| {
            let mut s = 0.0;
            for (i, &a) in list.iter().take(k).enumerate() {
                s += ((rel(a) as f64).exp2() - 1.0) / ((i + 2) as f64).log2();
            }
            s
        };
        let ideal = dcg(rank);
        if ideal == 0.0 {
            1.0
        } else {
            dcg(pre) / ideal
        }
    }

    pub fn ap(pre: &[u32], rank: &[u32], k: usize, n_rel: usize) -> f64 {
        let relevant = &rank[..n_rel.min(rank.len())];
        let denom = k.min(relevant.len());
        if denom == 0 {
            return 0.0;
        }
        let mut hits = 0;
        let mut sum = 0.0;
        for (i, a) in pre.iter().take(k).enumerate() {
            if relevant.contains(a) {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        sum / denom as f64
    }
}

fn permutations(n: usize) -> Vec<Vec<u32>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for slot in 0..=p.len() {
            let mut q = p.clone();
            q.insert(slot, (n - 1) as u32);
            out.push(q);
        }
    }
    out
}


/// Compares HR, NDCG and MAP with the reference on every permutation of every
/// length up to `max_len`, exactly. Returns the number of permutations.
pub fn exhaustive_metric_check(max_len: usize) -> Result<usize, String> {
    let mut cases = 0;
    for l in 1..=max_len {
        let rank: Vec<u32> = (0..l as u32).collect();
        for pre in permutations(l) {
            let p = coprlab::metrics::PairedLists::new(&pre, &rank).map_err(|e| e.to_string())?;
            for k in 1..=l + 1 {
                for n_rel in [1, 2, 3, 10] {
                    if p.hr(k, n_rel) != reference::hr(&pre, &rank, k, n_rel) {
                        return Err(format!("hr {pre:?} k={k} n_rel={n_rel}"));
                    }
                    if p.ap(k, n_rel) != reference::ap(&pre, &rank, k, n_rel) {
                        return Err(format!("ap {pre:?} k={k} n_rel={n_rel}"));
                    }
                }
                if p.ndcg(k) != reference::ndcg(&pre, &rank, k) {
                    return Err(format!("ndcg {pre:?} k={k}"));
                }
            }
            cases += 1;
        }
    }
    Ok(cases)
}

/// NDCG over a full list given per-position relevance, written independently
/// of the crate's metric code.
pub fn ndcg_of_relevance(rel: &[usize]) -> f64 {
    let dcg = |r: &[usize]| -> f64 {
        r.iter()
            .enumerate()
            .map(|(i, &g)| ((g as f64).exp2() - 1.0) / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = rel.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    dcg(rel) / dcg(&ideal)
}

/// Checks every ΔNDCG(i, j, D) for D in 2..=max_d against the swap loss.
/// Returns the largest absolute error.
pub fn delta_ndcg_swap_check(max_d: usize) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for d in 2..=max_d {
        for i in 1..=d {
            for j in i + 1..=d {
                let mut rel: Vec<usize> = (1..=d).map(|p| d - p).collect();
                rel.swap(i - 1, j - 1);
                let want = 1.0 - ndcg_of_relevance(&rel);
                let got = coprlab::trainer::delta_ndcg(i, j, d).map_err(|e| e.to_string())?;
                let err = (got - want).abs();
                worst = worst.max(err);
                if err > 1e-12 {
                    return Err(format!("D={d} ({i},{j}): {got} vs {want}"));
                }
                if !(got > 0.0 && got <= 1.0) {
                    return Err(format!("D={d} ({i},{j}): {got} outside (0, 1]"));
                }
            }
        }
    }
    Ok(worst)
}

pub const FD_TOL: f64 = 1e-4;

fn copr_fd(
    form: coprlab::trainer::PairLossForm,
    weighting: PairWeighting,
    lambda_rank: f64,
    lambda_reg: f64,
    alpha_bias: f64,
    with_ctr: bool,
) -> Result<f64, String> {
    use coprlab::trainer::{copr_loss, CoprWeights, TrainBatch};
    let m = micro_model(5, Some(alpha_bias));
    let recs = if with_ctr { ctr_records(2, 8, false) } else { Vec::new() };
    let lists = list_records(3, 4, 5);
    let groups = pair_groups(&lists, 2, weighting);
    let w = CoprWeights {
        lambda_rank,
        lambda_reg,
        form,
    };
    let batch = TrainBatch {
        ctr_records: &recs,
        pair_groups: &groups,
    };
    let (_, g) = copr_loss(&m, batch, w).map_err(|e| e.to_string())?;
    fd_check(&m, &m.flatten_grads(&g), |m| copr_loss(m, batch, w).unwrap().0.total, FD_TOL)
}

/// Names of the finite-difference cases run by [`gradient_case`].
pub const GRADIENT_CASES: [&str; 9] = [
    "ctr",
    "rank_difference",
    "rank_ratio",
    "rank_uniform",
    "reg_above_one",
    "reg_below_one",
    "copr_full",
    "distill",
    "rankflow",
];

/// Central differences against the analytic gradient for one loss.
/// Returns the worst relative error.
pub fn gradient_case(name: &str) -> Result<f64, String> {
    use coprlab::trainer::{ctr_loss, distill_loss, rankflow_loss, PairLossForm::*, RankFlowWeights};
    use PairWeighting::*;
    match name {
        "ctr" => {
            let m = micro_model(11, None);
            let recs = ctr_records(1, 12, false);
            let (_, g) = ctr_loss(&m, &recs).map_err(|e| e.to_string())?;
            fd_check(&m, &m.flatten_grads(&g), |m| ctr_loss(m, &recs).unwrap().0, FD_TOL)
        }
        "rank_difference" => copr_fd(Difference, DeltaNdcg, 1.0, 0.0, 1.4, false),
        "rank_ratio" => copr_fd(Ratio, DeltaNdcg, 1.0, 0.0, 1.4, false),
        "rank_uniform" => copr_fd(Difference, Uniform, 1.0, 0.0, 0.7, false),
        "reg_above_one" => copr_fd(Difference, DeltaNdcg, 0.0, 1.0, 1.6, false),
        "reg_below_one" => copr_fd(Difference, DeltaNdcg, 0.0, 1.0, 0.5, false),
        "copr_full" => {
            let a = copr_fd(Difference, DeltaNdcg, 1.0, 0.2, 1.3, true)?;
            let b = copr_fd(Ratio, DeltaNdcg, 1.0, 0.2, 0.8, true)?;
            Ok(a.max(b))
        }
        "distill" => {
            let m = micro_model(13, None);
            let recs = ctr_records(4, 10, true);
            let (_, g) = distill_loss(&m, &recs).map_err(|e| e.to_string())?;
            fd_check(&m, &m.flatten_grads(&g), |m| distill_loss(m, &recs).unwrap().0.total, FD_TOL)
        }
        "rankflow" => {
            let m = micro_model(17, None);
            let recs = ctr_records(5, 6, false);
            let lists = list_records(6, 3, 6);
            let refs: Vec<&ListRecord> = lists.iter().collect();
            let w = RankFlowWeights {
                match_weight: 3.0,
                select_weight: 0.5,
                n_select: 2,
            };
            let (_, g) = rankflow_loss(&m, &recs, &refs, w).map_err(|e| e.to_string())?;
            fd_check(&m, &m.flatten_grads(&g), |m| rankflow_loss(m, &recs, &refs, w).unwrap().0.total, FD_TOL)
        }
        other => Err(format!("no gradient case `{other}`")),
    }
}
