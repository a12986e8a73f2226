//! Configuration-driven experiment wiring.
//!
//! The in-memory steps ([`build_world`], [`train_teacher`], [`train_student`],
//! [`evaluate`], [`run_experiment`]) are what the acceptance suite and the
//! benches drive; the `step_*` functions wrap them with the on-disk artifact
//! layout used by the command line.
//!
//! Every request is regenerated from `(seed, purpose, id)`, so log files only
//! need to carry request ids.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{
    self, fmt_f64, Funnel, ImpressionLog, LogMode, RankedList, SystemMetrics,
};
use crate::datagen::{Catalog, Request, WorldConfig};
use crate::error::{Error, Result};
use crate::metrics::{ConsistencyReport, Metric, PairedLists, RpcCurve, RpcVariant};
use crate::model::{CtrModel, ModelArch};
use crate::rng;
use crate::trainer::{
    self, CtrRecord, EpochReport, ListEntry, ListRecord, Method, PairLossForm, PairWeighting,
    TrainConfig, TrainData,
};

const BOOTSTRAP: u64 = 0xB007;
const LOGS: u64 = 0x1065;
const EVAL: u64 = 0xE7A1;
const CLICKS: u64 = 0xC11C;
const INIT: u64 = 0x1417;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    /// Candidates per evaluation request (`M`).
    pub candidates: usize,
    pub n_pre: usize,
    pub n_disp: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            candidates: 100,
            n_pre: 10,
            n_disp: 1,
        }
    }
}

impl CascadeConfig {
    pub fn funnel(&self) -> Funnel {
        Funnel {
            n_pre: self.n_pre,
            n_disp: self.n_disp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Requests in the uniform-display exploration phase.
    pub bootstrap_requests: usize,
    /// Ads shown uniformly at random per exploration request.
    pub bootstrap_displays: usize,
    /// Trailing share of exploration requests held out for log-loss.
    pub heldout_fraction: f64,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            bootstrap_requests: 20_000,
            bootstrap_displays: 10,
            heldout_fraction: 0.1,
            embed_dim: 32,
            hidden: vec![256, 128, 64],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogConfig {
    /// Requests whose ranking-model lists become ranking logs.
    pub requests: usize,
    /// Candidates per logged request.
    pub list_size: usize,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig {
            requests: 90_000,
            list_size: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentArchConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub relaxation_hidden: Vec<usize>,
}

impl Default for StudentArchConfig {
    fn default() -> Self {
        StudentArchConfig {
            embed_dim: 16,
            hidden: vec![64, 32, 16],
            relaxation_hidden: vec![32, 16, 8],
        }
    }
}

/// One student to train. Unset fields fall back to `[student]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentRun {
    pub name: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighting: Option<PairWeighting>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_form: Option<PairLossForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_rank: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_reg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

impl StudentRun {
    pub fn new(name: &str, method: Method) -> Self {
        StudentRun {
            name: name.to_owned(),
            method,
            weighting: None,
            loss_form: None,
            lambda_rank: None,
            lambda_reg: None,
            chunk_size: None,
            epochs: None,
            lr: None,
        }
    }

    /// The five runs compared in the experiment.
    pub fn defaults() -> Vec<StudentRun> {
        vec![
            StudentRun::new("base", Method::Base),
            StudentRun::new("distill", Method::Distill),
            StudentRun::new("rankflow", Method::RankFlow),
            StudentRun {
                weighting: Some(PairWeighting::Uniform),
                ..StudentRun::new("copr_uniform", Method::Copr)
            },
            StudentRun::new("copr", Method::Copr),
        ]
    }

    pub fn train_config(&self, shared: &TrainConfig) -> TrainConfig {
        let mut c = shared.clone();
        if let Some(v) = self.weighting {
            c.weighting = v;
        }
        if let Some(v) = self.loss_form {
            c.loss_form = v;
        }
        if let Some(v) = self.lambda_rank {
            c.lambda_rank = v;
        }
        if let Some(v) = self.lambda_reg {
            c.lambda_reg = v;
        }
        if let Some(v) = self.chunk_size {
            c.chunk_size = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub requests: usize,
    pub seed: u64,
    pub ks: Vec<usize>,
    pub n_relevant: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            requests: 20_000,
            seed: 101,
            ks: vec![5, 10, 20, 50, 100],
            n_relevant: crate::metrics::DEFAULT_RELEVANT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of the world, the logs and every model initialisation.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub cascade: CascadeConfig,
    pub teacher: TeacherConfig,
    pub logs: LogConfig,
    pub student_arch: StudentArchConfig,
    pub student: TrainConfig,
    pub students: Vec<StudentRun>,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            output_dir: PathBuf::from("out"),
            world: WorldConfig::default(),
            cascade: CascadeConfig::default(),
            teacher: TeacherConfig::default(),
            logs: LogConfig::default(),
            student_arch: StudentArchConfig::default(),
            student: TrainConfig::default(),
            students: StudentRun::defaults(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text` after applying `key.path = value` overrides. Values are
    /// read as TOML literals, falling back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: "<document>".into(),
            reason: e.to_string().trim().to_owned(),
        })?;
        for (key, value) in overrides {
            set_key(&mut table, key, value)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_owned)
                .unwrap_or_else(|| "<document>".into());
            Error::Config {
                key,
                reason: e.to_string().trim().to_owned(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let c = &self.cascade;
        if c.candidates == 0 || c.candidates > self.world.n_ads {
            return Err(Error::config("cascade.candidates", "must be in 1..=world.n_ads"));
        }
        c.funnel()
            .check(c.candidates)
            .map_err(|e| Error::config("cascade", e.to_string()))?;
        let t = &self.teacher;
        if t.bootstrap_requests == 0 {
            return Err(Error::config("teacher.bootstrap_requests", "must be positive"));
        }
        if t.bootstrap_displays == 0 || t.bootstrap_displays > self.world.n_ads {
            return Err(Error::config("teacher.bootstrap_displays", "must be in 1..=world.n_ads"));
        }
        if !(0.0..1.0).contains(&t.heldout_fraction) {
            return Err(Error::config("teacher.heldout_fraction", "must be in [0, 1)"));
        }
        if t.embed_dim == 0 || t.hidden.contains(&0) {
            return Err(Error::config("teacher.hidden", "widths must be positive"));
        }
        t.train
            .validate()
            .map_err(|e| prefix_key("teacher.train", e))?;
        if self.logs.list_size == 0 || self.logs.list_size > self.world.n_ads {
            return Err(Error::config("logs.list_size", "must be in 1..=world.n_ads"));
        }
        let a = &self.student_arch;
        if a.embed_dim == 0 || a.hidden.contains(&0) || a.relaxation_hidden.contains(&0) {
            return Err(Error::config("student_arch", "widths must be positive"));
        }
        self.student.validate().map_err(|e| prefix_key("student", e))?;
        let mut names = HashSet::new();
        for run in &self.students {
            if run.name.is_empty() || !run.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-') {
                return Err(Error::config("students.name", format!("`{}` is not a valid run name", run.name)));
            }
            if !names.insert(run.name.as_str()) {
                return Err(Error::config("students.name", format!("duplicate run `{}`", run.name)));
            }
            run.train_config(&self.student)
                .validate()
                .map_err(|e| prefix_key(&format!("students.{}", run.name), e))?;
            if matches!(run.method, Method::RankFlow | Method::Copr) && self.logs.requests == 0 {
                return Err(Error::config("logs.requests", format!("run `{}` needs ranking logs", run.name)));
            }
        }
        if self.eval.requests == 0 {
            return Err(Error::config("eval.requests", "must be positive"));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::config("eval.ks", "needs positive cut-offs"));
        }
        if self.eval.n_relevant == 0 {
            return Err(Error::config("eval.n_relevant", "must be positive"));
        }
        Ok(())
    }

    pub fn run(&self, name: &str) -> Result<&StudentRun> {
        self.students.iter().find(|r| r.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.students.iter().map(|r| r.name.as_str()).collect();
            Error::InvalidArgument(format!(
                "unknown method `{name}` (configured: {})",
                known.join(", ")
            ))
        })
    }

    /// Digest of everything the teacher checkpoint depends on.
    pub fn teacher_digest(&self) -> String {
        digest(&(self.seed, &self.world, &self.teacher))
    }

    /// Digest of everything a student checkpoint depends on.
    pub fn student_digest(&self, run: &StudentRun) -> String {
        digest(&(
            self.teacher_digest(),
            &self.logs,
            &self.student_arch,
            run.train_config(&self.student),
            run.method,
        ))
    }

    pub fn teacher_arch(&self) -> ModelArch {
        ModelArch {
            embed_dim: self.teacher.embed_dim,
            hidden: self.teacher.hidden.clone(),
            ..ModelArch::ranker(&self.world.field_vocab())
        }
    }

    pub fn student_arch(&self, method: Method) -> ModelArch {
        let a = &self.student_arch;
        ModelArch {
            embed_dim: a.embed_dim,
            hidden: a.hidden.clone(),
            relaxation_hidden: method.uses_relaxation().then(|| a.relaxation_hidden.clone()),
            ..ModelArch::prerank(&self.world.field_vocab(), false)
        }
    }

    fn n_train_bootstrap(&self) -> usize {
        let t = &self.teacher;
        let held = (t.bootstrap_requests as f64 * t.heldout_fraction).floor() as usize;
        t.bootstrap_requests - held
    }
}

fn set_key(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed override key"));
    }
    let literal = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_owned(), literal);
    Ok(())
}

fn prefix_key(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { key, reason } => Error::Config {
            key: format!("{prefix}.{key}"),
            reason,
        },
        other => other,
    }
}

fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let hash = Sha256::digest(&bytes);
    hash.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

// ---------------------------------------------------------------------------
// Requests and logs

pub fn build_world(cfg: &ExperimentConfig) -> Result<Catalog> {
    Catalog::generate(&cfg.world, cfg.seed)
}

fn request(catalog: &Catalog, seed: u64, purpose: u64, id: u64, m: usize) -> Result<Request> {
    let mut r = rng::stream(seed, &[purpose, id]);
    catalog.gen_request(id, m, &mut r)
}

pub fn bootstrap_request(cfg: &ExperimentConfig, catalog: &Catalog, id: u64) -> Result<Request> {
    request(catalog, cfg.seed, BOOTSTRAP, id, cfg.teacher.bootstrap_displays)
}

pub fn log_request(cfg: &ExperimentConfig, catalog: &Catalog, id: u64) -> Result<Request> {
    request(catalog, cfg.seed, LOGS, id, cfg.logs.list_size)
}

pub fn eval_request(cfg: &ExperimentConfig, catalog: &Catalog, id: u64) -> Result<Request> {
    request(catalog, cfg.eval.seed, EVAL, id, cfg.cascade.candidates)
}

fn click_seed(seed: u64, purpose: u64) -> u64 {
    rng::derive_seed(seed, &[CLICKS, purpose])
}

/// The exploration phase: every sampled ad is displayed and clicked on by the oracle.
pub fn bootstrap_impressions(cfg: &ExperimentConfig, catalog: &Catalog) -> Result<Vec<ImpressionLog>> {
    let clicks = click_seed(cfg.seed, BOOTSTRAP);
    crate::par::map_range(cfg.teacher.bootstrap_requests, |i| {
        let req = bootstrap_request(cfg, catalog, i as u64)?;
        cascade::simulate_clicks(catalog, &req, &req.candidates, clicks)
    })
    .into_iter()
    .collect()
}

/// Feature rows and labels of `logs`, optionally scored by `teacher`.
pub fn impression_records(
    catalog: &Catalog,
    logs: &[ImpressionLog],
    teacher: Option<&CtrModel>,
) -> Result<Vec<CtrRecord>> {
    let per_log: Vec<Result<Vec<CtrRecord>>> = crate::par::map(logs, |log| {
        log.entries
            .iter()
            .map(|imp| {
                let ids = catalog.features(log.user, imp.ad_id, log.context);
                let teacher = teacher.map(|t| t.predict(&ids).map(|p| p.pctr)).transpose()?;
                Ok(CtrRecord {
                    ids,
                    y: if imp.clicked { 1.0 } else { 0.0 },
                    teacher,
                })
            })
            .collect()
    });
    let mut out = Vec::new();
    for r in per_log {
        out.extend(r?);
    }
    Ok(out)
}

pub fn ranking_logs(cfg: &ExperimentConfig, catalog: &Catalog, teacher: &CtrModel) -> Result<Vec<RankedList>> {
    let requests: Vec<Request> = (0..cfg.logs.requests as u64)
        .map(|id| log_request(cfg, catalog, id))
        .collect::<Result<_>>()?;
    cascade::collect_ranking_logs(&requests, None, teacher, LogMode::Public, catalog)
}

/// Attaches feature rows to ranking logs by regenerating their requests.
pub fn list_records(cfg: &ExperimentConfig, catalog: &Catalog, logs: &[RankedList]) -> Result<Vec<ListRecord>> {
    crate::par::map(logs, |log| {
        let req = log_request(cfg, catalog, log.request_id)?;
        let entries = log
            .entries
            .iter()
            .map(|e| {
                if !req.candidates.contains(&e.ad_id) {
                    return Err(Error::MismatchedCandidates);
                }
                Ok(ListEntry {
                    ids: catalog.features(req.user, e.ad_id, req.context),
                    ad_id: e.ad_id,
                    teacher_pctr: e.pctr,
                    bid: e.bid,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ListRecord {
            request_id: log.request_id,
            entries,
        })
    })
    .into_iter()
    .collect()
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone)]
pub struct TeacherOutcome {
    pub model: CtrModel,
    pub history: Vec<EpochReport>,
    pub heldout_logloss: f64,
    pub initial_heldout_logloss: f64,
}

/// Splits exploration impressions into the teacher's training and held-out parts.
pub fn split_bootstrap<'a>(
    cfg: &ExperimentConfig,
    logs: &'a [ImpressionLog],
) -> (&'a [ImpressionLog], &'a [ImpressionLog]) {
    logs.split_at(cfg.n_train_bootstrap().min(logs.len()))
}

pub fn train_teacher(cfg: &ExperimentConfig, catalog: &Catalog, impressions: &[ImpressionLog]) -> Result<TeacherOutcome> {
    let (train, held) = split_bootstrap(cfg, impressions);
    let train_records = impression_records(catalog, train, None)?;
    let held_records = impression_records(catalog, held, None)?;
    let mut model = CtrModel::new(cfg.teacher_arch(), rng::derive_seed(cfg.seed, &[INIT, 0]))?;
    let heldout = |m: &CtrModel| {
        if held_records.is_empty() {
            Ok(f64::NAN)
        } else {
            trainer::log_loss(m, &held_records)
        }
    };
    let initial_heldout_logloss = heldout(&model)?;
    let history = trainer::train(
        &mut model,
        Method::Base,
        TrainData {
            ctr: &train_records,
            lists: &[],
        },
        &cfg.teacher.train,
    )?;
    Ok(TeacherOutcome {
        heldout_logloss: heldout(&model)?,
        initial_heldout_logloss,
        model,
        history,
    })
}

/// Everything students train on: scored impressions and featurised ranking logs.
#[derive(Debug, Clone)]
pub struct StudentData {
    pub ctr: Vec<CtrRecord>,
    pub lists: Vec<ListRecord>,
}

pub fn student_data(
    cfg: &ExperimentConfig,
    catalog: &Catalog,
    teacher: &CtrModel,
    impressions: &[ImpressionLog],
    logs: &[RankedList],
) -> Result<StudentData> {
    let (train, _) = split_bootstrap(cfg, impressions);
    Ok(StudentData {
        ctr: impression_records(catalog, train, Some(teacher))?,
        lists: list_records(cfg, catalog, logs)?,
    })
}

pub fn train_student(
    cfg: &ExperimentConfig,
    run: &StudentRun,
    teacher: &CtrModel,
    data: &StudentData,
) -> Result<(CtrModel, Vec<EpochReport>)> {
    // Every run starts from the same initial weights of the shared parts.
    let mut model = CtrModel::new(cfg.student_arch(run.method), rng::derive_seed(cfg.seed, &[INIT, 1]))?;
    crate::model::ensure_capacity_gap(teacher, &model)?;
    let train_cfg = TrainConfig {
        seed: rng::derive_seed(cfg.seed, &[INIT, 2]),
        ..run.train_config(&cfg.student)
    };
    let lists: &[ListRecord] = if matches!(run.method, Method::RankFlow | Method::Copr) {
        &data.lists
    } else {
        &[]
    };
    let history = trainer::train(
        &mut model,
        run.method,
        TrainData {
            ctr: &data.ctr,
            lists,
        },
        &train_cfg,
    )?;
    Ok((model, history))
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEval {
    pub name: String,
    pub consistency: ConsistencyReport,
    pub system: SystemMetrics,
    pub rpc_pctr: RpcCurve,
    pub rpc_ecpm: RpcCurve,
    /// Mean |ŷ_student − pCTR_teacher| over every evaluation candidate.
    pub pctr_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_requests: usize,
    pub mean_teacher_pctr: f64,
    pub methods: Vec<MethodEval>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodEval> {
        self.methods.iter().find(|m| m.name == name)
    }
}

/// Runs the evaluation cascade for every model against `teacher`.
///
/// The teacher's list over all candidates is computed once per request; the
/// ranking phase of each cascade is that list restricted to the survivors.
pub fn evaluate(
    cfg: &ExperimentConfig,
    catalog: &Catalog,
    teacher: &CtrModel,
    models: &[(&str, &CtrModel)],
) -> Result<EvalReport> {
    let n = cfg.eval.requests;
    let requests: Vec<Request> = (0..n as u64)
        .map(|id| eval_request(cfg, catalog, id))
        .collect::<Result<_>>()?;
    let rank_full: Vec<RankedList> = crate::par::map(&requests, |r| cascade::score_and_rank(teacher, r, catalog))
        .into_iter()
        .collect::<Result<_>>()?;
    let mean_teacher_pctr = rank_full
        .iter()
        .map(|l| l.entries.iter().map(|e| e.pctr).sum::<f64>())
        .sum::<f64>()
        / (n * cfg.cascade.candidates) as f64;
    let clicks = click_seed(cfg.eval.seed, EVAL);
    let funnel = cfg.cascade.funnel();

    let mut methods = Vec::with_capacity(models.len());
    for &(name, model) in models {
        let idx: Vec<usize> = (0..n).collect();
        let outcomes: Vec<Result<(RankedList, ImpressionLog, f64)>> = crate::par::map(&idx, |&i| {
            let req = &requests[i];
            let pre = score_and_rank_raw(model, req, catalog)?;
            let mae = mae_against(&pre.1, &rank_full[i]);
            let out = cascade::run_cascade_with_ranking(req, pre.0, &rank_full[i], funnel, catalog, clicks)?;
            Ok((out.pre, out.impressions, mae))
        });
        let mut pres = Vec::with_capacity(n);
        let mut imps = Vec::with_capacity(n);
        let mut mae = 0.0;
        for o in outcomes {
            let (p, im, e) = o?;
            pres.push(p);
            imps.push(im);
            mae += e;
        }
        let pairs: Vec<PairedLists> = crate::par::map(&idx, |&i| PairedLists::from_lists(&pres[i], &rank_full[i]))
            .into_iter()
            .collect::<Result<_>>()?;
        let consistency = ConsistencyReport::compute(&pairs, &cfg.eval.ks, cfg.eval.n_relevant)?;
        let refs: Vec<(&RankedList, &RankedList)> = pres.iter().zip(&rank_full).collect();
        methods.push(MethodEval {
            name: name.to_owned(),
            consistency,
            system: cascade::ctr_rpm(&imps, catalog)?,
            rpc_pctr: crate::metrics::rpc_curve(&refs, RpcVariant::Pctr)?,
            rpc_ecpm: crate::metrics::rpc_curve(&refs, RpcVariant::Ecpm)?,
            pctr_mae: mae / (n * cfg.cascade.candidates) as f64,
        });
    }
    Ok(EvalReport {
        n_requests: n,
        mean_teacher_pctr,
        methods,
    })
}

/// Pre-ranking list plus the raw (unrelaxed) pCTR of every candidate.
fn score_and_rank_raw(model: &CtrModel, req: &Request, catalog: &Catalog) -> Result<(RankedList, BTreeMap<u32, f64>)> {
    let mut raw = BTreeMap::new();
    let mut entries = Vec::with_capacity(req.candidates.len());
    for &ad in &req.candidates {
        let p = model.predict(&catalog.features(req.user, ad, req.context))?;
        raw.insert(ad, p.pctr);
        entries.push(cascade::ScoredAd::new(ad, p.score(), catalog.bid(ad)));
    }
    Ok((RankedList::from_scored(req.id, entries), raw))
}

fn mae_against(raw: &BTreeMap<u32, f64>, teacher: &RankedList) -> f64 {
    teacher
        .entries
        .iter()
        .map(|e| (raw[&e.ad_id] - e.pctr).abs())
        .sum()
}

pub const CONSISTENCY_HEADER: &str = "method,metric,k,value";
pub const SYSTEM_HEADER: &str = "method,displays,clicks,ctr,rpm,pctr_mae";
pub const RPC_HEADER: &str = "method,variant,ranking_position,mean_preranking_position";

/// Writes `consistency.csv`, `system.csv` and `rpc.csv` into `dir`.
pub fn write_eval_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let mut consistency = format!("{CONSISTENCY_HEADER}\n");
    let mut system = format!("{SYSTEM_HEADER}\n");
    let mut rpc = format!("{RPC_HEADER}\n");
    for m in &report.methods {
        for metric in Metric::ALL {
            for (&(mm, k), v) in &m.consistency.values {
                if mm == metric {
                    let _ = writeln!(consistency, "{},{},{k},{}", m.name, metric.name(), fmt_f64(*v));
                }
            }
        }
        let s = m.system;
        let _ = writeln!(
            system,
            "{},{},{},{},{},{}",
            m.name,
            s.displays,
            s.clicks,
            fmt_f64(s.ctr),
            fmt_f64(s.rpm),
            fmt_f64(m.pctr_mae)
        );
        for curve in [&m.rpc_pctr, &m.rpc_ecpm] {
            for &(pos, v) in &curve.points {
                let _ = writeln!(rpc, "{},{},{pos},{}", m.name, curve.variant.name(), fmt_f64(v));
            }
        }
    }
    for (file, text) in [
        ("consistency.csv", consistency),
        ("system.csv", system),
        ("rpc.csv", rpc),
    ] {
        let path = dir.join(file);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Whole experiment in memory

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub teacher: TeacherOutcome,
    pub students: Vec<(String, CtrModel, Vec<EpochReport>)>,
    pub report: EvalReport,
}

/// World → exploration → teacher → ranking logs → students → evaluation.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let catalog = build_world(cfg)?;
    let impressions = bootstrap_impressions(cfg, &catalog)?;
    let teacher = train_teacher(cfg, &catalog, &impressions)?;
    let logs = ranking_logs(cfg, &catalog, &teacher.model)?;
    let data = student_data(cfg, &catalog, &teacher.model, &impressions, &logs)?;
    let mut students = Vec::with_capacity(cfg.students.len());
    for run in &cfg.students {
        let (model, history) = train_student(cfg, run, &teacher.model, &data)?;
        students.push((run.name.clone(), model, history));
    }
    let models: Vec<(&str, &CtrModel)> = students.iter().map(|(n, m, _)| (n.as_str(), m)).collect();
    let report = evaluate(cfg, &catalog, &teacher.model, &models)?;
    Ok(ExperimentOutcome {
        teacher,
        students,
        report,
    })
}

// ---------------------------------------------------------------------------
// On-disk steps

/// File layout under `output_dir`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Layout {
            root: cfg.output_dir.clone(),
        }
    }

    pub fn catalog(&self) -> PathBuf {
        self.root.join("catalog.json")
    }

    pub fn bootstrap(&self) -> PathBuf {
        self.root.join("bootstrap_impressions.csv")
    }

    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher.json")
    }

    pub fn teacher_curve(&self) -> PathBuf {
        self.root.join("teacher_curve.csv")
    }

    pub fn ranking_logs(&self) -> PathBuf {
        self.root.join("ranking_logs.csv")
    }

    pub fn student(&self, name: &str) -> PathBuf {
        self.root.join(format!("student_{name}.json"))
    }

    pub fn student_curve(&self, name: &str) -> PathBuf {
        self.root.join(format!("student_{name}_curve.csv"))
    }

    pub fn consistency(&self) -> PathBuf {
        self.root.join("consistency.csv")
    }

    pub fn system(&self) -> PathBuf {
        self.root.join("system.csv")
    }

    pub fn rpc(&self) -> PathBuf {
        self.root.join("rpc.csv")
    }

    fn ensure(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(format!("{what} at {} (run the earlier steps first)", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldSummary {
    pub n_users: usize,
    pub n_ads: usize,
    pub mean_bid: f64,
    pub base_ctr: f64,
}

/// Writes the catalog.
pub fn step_gen_world(cfg: &ExperimentConfig) -> Result<WorldSummary> {
    let layout = Layout::new(cfg);
    layout.ensure()?;
    let catalog = build_world(cfg)?;
    catalog.save(&layout.catalog())?;
    let mut r = rng::stream(cfg.seed, &[0x5A3]);
    let samples = 10_000;
    let mut ctr = 0.0;
    for _ in 0..samples {
        use rand::Rng as _;
        let u = r.random_range(0..catalog.n_users()) as u32;
        let a = r.random_range(0..catalog.n_ads()) as u32;
        let c = r.random_range(0..catalog.n_contexts()) as u32;
        ctr += catalog.true_ctr(u, a, c)?;
    }
    Ok(WorldSummary {
        n_users: catalog.n_users(),
        n_ads: catalog.n_ads(),
        mean_bid: catalog.bids().iter().sum::<f64>() / catalog.n_ads() as f64,
        base_ctr: ctr / samples as f64,
    })
}

fn load_catalog(cfg: &ExperimentConfig, layout: &Layout) -> Result<Catalog> {
    require(&layout.catalog(), "catalog")?;
    let catalog = Catalog::load(&layout.catalog())?;
    if catalog.config() != &cfg.world || catalog.seed() != cfg.seed {
        return Err(Error::Missing(
            "a catalog for this world config and seed (rerun gen-world)".into(),
        ));
    }
    Ok(catalog)
}

fn read_bootstrap(cfg: &ExperimentConfig, catalog: &Catalog, path: &Path) -> Result<Vec<ImpressionLog>> {
    cascade::read_impression_records(path)?
        .into_iter()
        .map(|(id, entries)| {
            let req = bootstrap_request(cfg, catalog, id)?;
            Ok(ImpressionLog {
                request_id: id,
                user: req.user,
                context: req.context,
                entries,
            })
        })
        .collect()
}

/// Exploration phase, teacher training and ranking-log collection.
pub fn step_train_teacher(cfg: &ExperimentConfig) -> Result<TeacherOutcome> {
    let layout = Layout::new(cfg);
    let catalog = load_catalog(cfg, &layout)?;
    let impressions = bootstrap_impressions(cfg, &catalog)?;
    cascade::write_impression_logs(&layout.bootstrap(), &impressions)?;
    let outcome = train_teacher(cfg, &catalog, &impressions)?;
    outcome.model.save(&layout.teacher(), &cfg.teacher_digest(), "teacher")?;
    trainer::write_training_curve(&layout.teacher_curve(), &outcome.history)?;
    let logs = ranking_logs(cfg, &catalog, &outcome.model)?;
    cascade::write_ranking_logs(&layout.ranking_logs(), &logs)?;
    Ok(outcome)
}

fn load_teacher(cfg: &ExperimentConfig, layout: &Layout) -> Result<CtrModel> {
    require(&layout.teacher(), "teacher checkpoint")?;
    Ok(CtrModel::load(&layout.teacher(), &cfg.teacher_digest())?.0)
}

/// Trains one configured student run from the files of the earlier steps.
pub fn step_train_prerank(cfg: &ExperimentConfig, name: &str) -> Result<Vec<EpochReport>> {
    let run = cfg.run(name)?;
    let layout = Layout::new(cfg);
    let catalog = load_catalog(cfg, &layout)?;
    let teacher = load_teacher(cfg, &layout)?;
    require(&layout.bootstrap(), "impression logs")?;
    require(&layout.ranking_logs(), "ranking logs")?;
    let impressions = read_bootstrap(cfg, &catalog, &layout.bootstrap())?;
    let logs = cascade::read_ranking_logs(&layout.ranking_logs())?;
    let data = student_data(cfg, &catalog, &teacher, &impressions, &logs)?;
    let (model, history) = train_student(cfg, run, &teacher, &data)?;
    model.save(&layout.student(name), &cfg.student_digest(run), name)?;
    trainer::write_training_curve(&layout.student_curve(name), &history)?;
    Ok(history)
}

/// Evaluates the named runs (all configured runs when `names` is empty).
/// The name `teacher` evaluates the ranking model against itself.
pub fn step_evaluate(cfg: &ExperimentConfig, names: &[String]) -> Result<EvalReport> {
    let layout = Layout::new(cfg);
    let catalog = load_catalog(cfg, &layout)?;
    let teacher = load_teacher(cfg, &layout)?;
    let names: Vec<String> = if names.is_empty() {
        cfg.students.iter().map(|r| r.name.clone()).collect()
    } else {
        names.to_vec()
    };
    let mut models = Vec::with_capacity(names.len());
    for name in &names {
        if name == "teacher" {
            models.push(teacher.clone());
            continue;
        }
        let run = cfg.run(name)?;
        let path = layout.student(name);
        require(&path, &format!("checkpoint for `{name}`"))?;
        models.push(CtrModel::load(&path, &cfg.student_digest(run))?.0);
    }
    let refs: Vec<(&str, &CtrModel)> = names.iter().map(String::as_str).zip(&models).collect();
    let report = evaluate(cfg, &catalog, &teacher, &refs)?;
    write_eval_report(&layout.root, &report)?;
    Ok(report)
}

/// Renders the evaluation CSVs of `output_dir` as a plain-text table.
pub fn report(cfg: &ExperimentConfig) -> Result<String> {
    let layout = Layout::new(cfg);
    require(&layout.consistency(), "consistency report")?;
    require(&layout.system(), "system report")?;
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let consistency = read(&layout.consistency())?;
    let system = read(&layout.system())?;

    let mut table: BTreeMap<String, BTreeMap<(String, usize), f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (n, line) in consistency.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse {
            path: layout.consistency(),
            reason: format!("line {}: malformed row", n + 1),
        };
        if f.len() != 4 {
            return Err(bad());
        }
        let k: usize = f[2].parse().map_err(|_| bad())?;
        let v: f64 = f[3].parse().map_err(|_| bad())?;
        if !order.iter().any(|m| m == f[0]) {
            order.push(f[0].to_owned());
        }
        table.entry(f[0].to_owned()).or_default().insert((f[1].to_owned(), k), v);
    }
    let mut out = String::new();
    let cols: Vec<(String, usize)> = table
        .values()
        .next()
        .map(|m| m.keys().cloned().collect())
        .unwrap_or_default();
    let _ = write!(out, "{:<14}", "method");
    for (metric, k) in &cols {
        let _ = write!(out, " {:>9}", format!("{metric}@{k}"));
    }
    out.push('\n');
    for name in &order {
        let _ = write!(out, "{name:<14}");
        for c in &cols {
            let _ = write!(out, " {:>9.4}", table[name].get(c).copied().unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out.push('\n');
    let _ = writeln!(out, "{:<14} {:>9} {:>9} {:>9} {:>9}", "method", "displays", "ctr", "rpm", "pctr_mae");
    for (n, line) in system.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse {
            path: layout.system(),
            reason: format!("line {}: malformed row", n + 1),
        };
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let _ = writeln!(
            out,
            "{:<14} {:>9} {:>9.5} {:>9.5} {:>9.5}",
            f[0],
            f[1],
            num(f[3])?,
            num(f[4])?,
            num(f[5])?
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_errors_name_the_key() {
        let err = ExperimentConfig::from_toml("[world]\nn_userz = 3\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "n_userz"),
            other => panic!("unexpected {other}"),
        }
        let err = ExperimentConfig::from_toml("[cascade]\nn_pre = 0\n").unwrap_err();
        assert!(matches!(err, Error::Config { key, .. } if key == "cascade"));
        let err = ExperimentConfig::from_toml("[student]\nlr = -1.0\n").unwrap_err();
        assert!(matches!(err, Error::Config { key, .. } if key == "student.lr"));
    }

    #[test]
    fn overrides_apply_typed_values() {
        let o = |k: &str, v: &str| (k.to_owned(), v.to_owned());
        let cfg = ExperimentConfig::from_toml_with_overrides(
            "seed = 4\n",
            &[o("world.n_users", "77"), o("output_dir", "runs/a"), o("eval.ks", "[1, 3]")],
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.world.n_users, 77);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/a"));
        assert_eq!(cfg.eval.ks, vec![1, 3]);
        let err = ExperimentConfig::from_toml_with_overrides("", &[o("seed.x", "1")]);
        assert!(err.is_err());
    }

    #[test]
    fn digests_track_inputs() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.teacher_digest(), b.teacher_digest());
        b.logs.requests += 1;
        assert_eq!(a.teacher_digest(), b.teacher_digest());
        let run = &a.students[0];
        assert_ne!(a.student_digest(run), b.student_digest(run));
        b.seed += 1;
        assert_ne!(a.teacher_digest(), b.teacher_digest());
    }

    #[test]
    fn unknown_run_is_rejected() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.run("copr").is_ok());
        assert!(matches!(cfg.run("lambdamart"), Err(Error::InvalidArgument(_))));
    }
}
