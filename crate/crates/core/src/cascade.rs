//! ECPM scoring and the pre-rank → rank → display funnel.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Catalog, Request};
use crate::error::{Error, Result};
use crate::model::CtrModel;
use crate::rng;

/// `ECPM = 1000 × bid × pCTR`.
pub fn ecpm(bid: f64, pctr: f64) -> f64 {
    1000.0 * bid * pctr
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredAd {
    pub ad_id: u32,
    /// The score the phase ranked by: `ŷ`, or `α·ŷ` for relaxed models.
    pub pctr: f64,
    pub bid: f64,
    pub ecpm: f64,
}

impl ScoredAd {
    pub fn new(ad_id: u32, pctr: f64, bid: f64) -> Self {
        ScoredAd {
            ad_id,
            pctr,
            bid,
            ecpm: ecpm(bid, pctr),
        }
    }
}

/// Ads in descending ECPM order, ties broken by ascending ad id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub request_id: u64,
    pub entries: Vec<ScoredAd>,
}

fn ecpm_order(a: &ScoredAd, b: &ScoredAd) -> std::cmp::Ordering {
    b.ecpm.total_cmp(&a.ecpm).then(a.ad_id.cmp(&b.ad_id))
}

impl RankedList {
    /// Sorts `entries` into ECPM order.
    pub fn from_scored(request_id: u64, mut entries: Vec<ScoredAd>) -> Self {
        entries.sort_by(ecpm_order);
        RankedList {
            request_id,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ad_ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.ad_id).collect()
    }

    pub fn truncated(&self, n: usize) -> RankedList {
        RankedList {
            request_id: self.request_id,
            entries: self.entries[..n.min(self.len())].to_vec(),
        }
    }

    /// Same entries re-ordered by raw score instead of ECPM (ties by ad id).
    pub fn by_pctr(&self) -> RankedList {
        let mut entries = self.entries.clone();
        entries.sort_by(|a, b| b.pctr.total_cmp(&a.pctr).then(a.ad_id.cmp(&b.ad_id)));
        RankedList {
            request_id: self.request_id,
            entries,
        }
    }

    pub fn is_ecpm_sorted(&self) -> bool {
        self.entries
            .windows(2)
            .all(|w| ecpm_order(&w[0], &w[1]) != std::cmp::Ordering::Greater)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Impression {
    pub ad_id: u32,
    pub clicked: bool,
}

/// Displayed ads in display order with their simulated click feedback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpressionLog {
    pub request_id: u64,
    pub user: u32,
    pub context: u32,
    pub entries: Vec<Impression>,
}

/// Scores every candidate of `request` with `model` and ranks by ECPM.
pub fn score_and_rank(model: &CtrModel, request: &Request, catalog: &Catalog) -> Result<RankedList> {
    score_ads(model, request, &request.candidates, catalog)
}

fn score_ads(model: &CtrModel, request: &Request, ads: &[u32], catalog: &Catalog) -> Result<RankedList> {
    if ads.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let entries = ads
        .iter()
        .map(|&ad| {
            if ad as usize >= catalog.n_ads() {
                return Err(Error::OutOfRange {
                    what: "ad",
                    index: ad as usize,
                    limit: catalog.n_ads(),
                });
            }
            let ids = catalog.features(request.user, ad, request.context);
            let p = model.predict(&ids)?;
            Ok(ScoredAd::new(ad, p.score(), catalog.bid(ad)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedList::from_scored(request.id, entries))
}

/// Sizes of the cascade: pre-ranking keeps `n_pre`, the display shows `n_disp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Funnel {
    pub n_pre: usize,
    pub n_disp: usize,
}

impl Funnel {
    pub fn check(&self, m: usize) -> Result<()> {
        if self.n_disp == 0 || self.n_disp > self.n_pre || self.n_pre > m {
            return Err(Error::InvalidArgument(format!(
                "funnel sizes must satisfy 1 ≤ n_disp ({}) ≤ n_pre ({}) ≤ candidates ({m})",
                self.n_disp, self.n_pre
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutcome {
    /// Pre-ranking list over all candidates.
    pub pre: RankedList,
    /// Ranking list over the pre-ranking survivors.
    pub rank: RankedList,
    pub impressions: ImpressionLog,
}

/// Simulates one click per displayed ad. The uniform draw for `(request, slot)`
/// is fixed by `click_seed`, so funnels that show different ads in the same
/// slot face the same draw and their outcomes are compared on common numbers.
pub fn simulate_clicks(
    catalog: &Catalog,
    request: &Request,
    displayed: &[u32],
    click_seed: u64,
) -> Result<ImpressionLog> {
    let entries = displayed
        .iter()
        .enumerate()
        .map(|(slot, &ad)| {
            let p = catalog.true_ctr(request.user, ad, request.context)?;
            let u = rng::unit_hash(click_seed, &[request.id, slot as u64]);
            Ok(Impression {
                ad_id: ad,
                clicked: u < p,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImpressionLog {
        request_id: request.id,
        user: request.user,
        context: request.context,
        entries,
    })
}

/// Runs the full funnel for one request.
pub fn run_cascade(
    request: &Request,
    prerank: &CtrModel,
    rank: &CtrModel,
    funnel: Funnel,
    catalog: &Catalog,
    click_seed: u64,
) -> Result<CascadeOutcome> {
    funnel.check(request.candidates.len())?;
    let pre = score_and_rank(prerank, request, catalog)?;
    let survivors: Vec<u32> = pre.entries[..funnel.n_pre].iter().map(|e| e.ad_id).collect();
    let ranked = score_ads(rank, request, &survivors, catalog)?;
    finish_funnel(request, pre, ranked, funnel, catalog, click_seed)
}

/// Completes the funnel when the ranking model's scores over every candidate
/// are already known: the ranking phase is the full ranking list restricted
/// to the pre-ranking survivors, which is what re-scoring them would give.
pub fn run_cascade_with_ranking(
    request: &Request,
    pre: RankedList,
    rank_full: &RankedList,
    funnel: Funnel,
    catalog: &Catalog,
    click_seed: u64,
) -> Result<CascadeOutcome> {
    funnel.check(request.candidates.len())?;
    let survivors: HashSet<u32> = pre.entries[..funnel.n_pre].iter().map(|e| e.ad_id).collect();
    let ranked = RankedList {
        request_id: request.id,
        entries: rank_full
            .entries
            .iter()
            .filter(|e| survivors.contains(&e.ad_id))
            .copied()
            .collect(),
    };
    if ranked.len() != funnel.n_pre {
        return Err(Error::MismatchedCandidates);
    }
    finish_funnel(request, pre, ranked, funnel, catalog, click_seed)
}

fn finish_funnel(
    request: &Request,
    pre: RankedList,
    rank: RankedList,
    funnel: Funnel,
    catalog: &Catalog,
    click_seed: u64,
) -> Result<CascadeOutcome> {
    let displayed: Vec<u32> = rank.entries[..funnel.n_disp].iter().map(|e| e.ad_id).collect();
    let impressions = simulate_clicks(catalog, request, &displayed, click_seed)?;
    Ok(CascadeOutcome {
        pre,
        rank,
        impressions,
    })
}

/// How ranking logs are collected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LogMode {
    /// The ranking model ranks the pre-ranking survivors.
    Production { n_pre: usize },
    /// The ranking model ranks the request's whole (small) candidate sample.
    Public,
}

/// Records the ranking model's ECPM-ranked list for each request.
pub fn collect_ranking_logs(
    requests: &[Request],
    prerank: Option<&CtrModel>,
    rank: &CtrModel,
    mode: LogMode,
    catalog: &Catalog,
) -> Result<Vec<RankedList>> {
    let logs = crate::par::map(requests, |req| match mode {
        LogMode::Public => score_and_rank(rank, req, catalog),
        LogMode::Production { n_pre } => {
            let pre_model = prerank.ok_or_else(|| {
                Error::Missing("production-mode logs need a pre-ranking model".into())
            })?;
            if n_pre == 0 || n_pre > req.candidates.len() {
                return Err(Error::InvalidArgument(format!(
                    "n_pre {n_pre} outside 1..={}",
                    req.candidates.len()
                )));
            }
            let pre = score_and_rank(pre_model, req, catalog)?;
            let survivors: Vec<u32> = pre.entries[..n_pre].iter().map(|e| e.ad_id).collect();
            score_ads(rank, req, &survivors, catalog)
        }
    });
    logs.into_iter().collect()
}

/// Simulated system metrics over a set of impressions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemMetrics {
    pub displays: usize,
    pub clicks: usize,
    pub ctr: f64,
    pub rpm: f64,
}

/// `ctr = clicks / displays`, `rpm = ctr × mean bid of clicked ads` (0 with no clicks).
pub fn ctr_rpm(impressions: &[ImpressionLog], catalog: &Catalog) -> Result<SystemMetrics> {
    let mut displays = 0usize;
    let mut clicks = 0usize;
    let mut clicked_bid = 0.0;
    for log in impressions {
        for imp in &log.entries {
            displays += 1;
            if imp.clicked {
                clicks += 1;
                clicked_bid += catalog.bid(imp.ad_id);
            }
        }
    }
    if displays == 0 {
        return Err(Error::Empty("impression set"));
    }
    let ctr = clicks as f64 / displays as f64;
    let rpm = if clicks == 0 {
        0.0
    } else {
        ctr * (clicked_bid / clicks as f64)
    };
    Ok(SystemMetrics {
        displays,
        clicks,
        ctr,
        rpm,
    })
}

// ---------------------------------------------------------------------------
// Line-delimited log files. Floats use 17 significant digits.

pub const RANKING_LOG_HEADER: &str = "request_id,position,ad_id,pctr,bid,prerank_bid";
pub const IMPRESSION_LOG_HEADER: &str = "request_id,ad_id,y";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(path: &Path, line: usize, reason: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_owned(),
        reason: format!("line {line}: {reason}"),
    }
}

pub fn write_ranking_logs(path: &Path, logs: &[RankedList]) -> Result<()> {
    let mut out = String::new();
    out.push_str(RANKING_LOG_HEADER);
    out.push('\n');
    for log in logs {
        for (pos, e) in log.entries.iter().enumerate() {
            // One bid per ad in both phases; the pre-ranking column is kept
            // so logs from phase-specific bids fit the same schema.
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                log.request_id,
                pos + 1,
                e.ad_id,
                fmt_f64(e.pctr),
                fmt_f64(e.bid),
                fmt_f64(e.bid)
            );
        }
    }
    write_file(path, out.as_bytes())
}

pub fn read_ranking_logs(path: &Path) -> Result<Vec<RankedList>> {
    let mut logs: Vec<RankedList> = Vec::new();
    for (n, line) in read_lines(path, RANKING_LOG_HEADER)? {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(parse_err(path, n, "expected 6 fields"));
        }
        let request_id: u64 = f[0].parse().map_err(|e| parse_err(path, n, e))?;
        let position: usize = f[1].parse().map_err(|e| parse_err(path, n, e))?;
        let ad_id: u32 = f[2].parse().map_err(|e| parse_err(path, n, e))?;
        let pctr: f64 = f[3].parse().map_err(|e| parse_err(path, n, e))?;
        let bid: f64 = f[4].parse().map_err(|e| parse_err(path, n, e))?;
        let entry = ScoredAd::new(ad_id, pctr, bid);
        match logs.last_mut() {
            Some(l) if l.request_id == request_id && position == l.len() + 1 => l.entries.push(entry),
            _ if position == 1 => logs.push(RankedList {
                request_id,
                entries: vec![entry],
            }),
            _ => return Err(parse_err(path, n, "positions must run 1, 2, … per request")),
        }
    }
    Ok(logs)
}

pub fn write_impression_logs(path: &Path, logs: &[ImpressionLog]) -> Result<()> {
    let mut out = String::new();
    out.push_str(IMPRESSION_LOG_HEADER);
    out.push('\n');
    for log in logs {
        for imp in &log.entries {
            let _ = writeln!(out, "{},{},{}", log.request_id, imp.ad_id, u8::from(imp.clicked));
        }
    }
    write_file(path, out.as_bytes())
}

/// Reads `(request_id, ad_id, y)` records grouped by request.
pub fn read_impression_records(path: &Path) -> Result<Vec<(u64, Vec<Impression>)>> {
    let mut out: Vec<(u64, Vec<Impression>)> = Vec::new();
    for (n, line) in read_lines(path, IMPRESSION_LOG_HEADER)? {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(parse_err(path, n, "expected 3 fields"));
        }
        let request_id: u64 = f[0].parse().map_err(|e| parse_err(path, n, e))?;
        let ad_id: u32 = f[1].parse().map_err(|e| parse_err(path, n, e))?;
        let clicked = match f[2] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, n, format!("y must be 0 or 1, got {other}"))),
        };
        let imp = Impression { ad_id, clicked };
        match out.last_mut() {
            Some((id, v)) if *id == request_id => v.push(imp),
            _ => out.push((request_id, vec![imp])),
        }
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path, header: &str) -> Result<Vec<(usize, String)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    match lines.next() {
        Some(Ok(h)) if h == header => {}
        _ => return Err(parse_err(path, 1, format!("expected header `{header}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.is_empty() {
            out.push((i + 2, line));
        }
    }
    Ok(out)
}
