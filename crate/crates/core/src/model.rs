//! Embedding + MLP CTR models with exact, hand-written gradients.
//!
//! A model concatenates one embedding per categorical field into `x`, runs a
//! ReLU MLP over it and squashes the final logit with a sigmoid. Pre-ranking
//! students trained with rank alignment carry a second MLP (the relaxation
//! net) over the same `x` that outputs a positive multiplier `α`.
//!
//! Training code drives a model through [`CtrModel::trace`], which records
//! every activation, and [`CtrModel::backward`], which turns upstream
//! derivatives of the loss with respect to the two scalar heads into parameter
//! gradients. Everything is `f64`.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Additive floor on the relaxation factor.
pub const ALPHA_EPS: f64 = 1e-6;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `α = ReLU(z) + 1e-6`.
pub fn alpha_from_output(z: f64) -> f64 {
    z.max(0.0) + ALPHA_EPS
}

/// The adjusted ranking score `ỹ = α·ŷ`. Not clamped to 1.
pub fn adjusted_pctr(pctr: f64, alpha: f64) -> f64 {
    alpha * pctr
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    vocab: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        EmbeddingTable {
            vocab,
            dim,
            weights: vec![0.0; vocab * dim],
        }
    }

    fn random<R: Rng>(vocab: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let weights = (0..vocab * dim)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        EmbeddingTable { vocab, dim, weights }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let s = id as usize * self.dim;
        &self.weights[s..s + self.dim]
    }

    pub fn row_mut(&mut self, id: u32) -> &mut [f64] {
        let s = id as usize * self.dim;
        &mut self.weights[s..s + self.dim]
    }
}

/// Fully connected layer, weights stored row-major as `output × input`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    input: usize,
    output: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Dense {
            input,
            output,
            weights: vec![0.0; input * output],
            bias: vec![0.0; output],
        }
    }

    fn random<R: Rng>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        let weights = (0..input * output)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        Dense {
            input,
            output,
            weights,
            bias: vec![0.0; output],
        }
    }

    fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.input..(o + 1) * self.input]
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.output).map(|o| self.bias[o] + dot(self.row(o), x)));
    }

    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// ReLU MLP ending in a single linear output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations recorded by one MLP forward pass: the input followed by each
/// hidden layer's post-ReLU output.
#[derive(Debug, Clone)]
struct MlpTrace {
    activations: Vec<Vec<f64>>,
}

impl Mlp {
    /// `dims` lists every width from input to output, e.g. `[80, 64, 32, 16, 1]`.
    pub fn zeros(dims: &[usize]) -> Self {
        Mlp {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    fn he_init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = if i + 1 == n {
                    (1.0 / w[0] as f64).sqrt()
                } else {
                    (2.0 / w[0] as f64).sqrt()
                };
                Dense::random(w[0], w[1], std, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.output));
        d
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    fn output_layer_mut(&mut self) -> &mut Dense {
        self.layers.last_mut().expect("mlp has layers")
    }

    fn forward(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    fn forward_traced(&self, x: &[f64]) -> (f64, MlpTrace) {
        let mut activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        let last = self.layers.len() - 1;
        let mut out = 0.0;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(layer.output);
            layer.forward_into(activations.last().expect("non-empty"), &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
                activations.push(next);
            } else {
                out = next[0];
            }
        }
        (out, MlpTrace { activations })
    }

    /// Accumulates parameter gradients into `grad` and the input gradient
    /// into `d_input`, given the derivative of the loss w.r.t. the output.
    fn backward(&self, trace: &MlpTrace, d_out: f64, grad: &mut Mlp, d_input: &mut [f64]) {
        let mut delta = vec![d_out];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[i];
            let g = &mut grad.layers[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                axpy(d, input, &mut g.weights[o * layer.input..(o + 1) * layer.input]);
            }
            let mut d_in = vec![0.0; layer.input];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, layer.row(o), &mut d_in);
                }
            }
            if i > 0 {
                // ReLU on the previous layer's output.
                for (di, &a) in d_in.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *di = 0.0;
                    }
                }
                delta = d_in;
            } else {
                for (t, v) in d_input.iter_mut().zip(&d_in) {
                    *t += v;
                }
            }
        }
    }

    fn add_scaled(&mut self, other: &Mlp, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(scale, &b.weights, &mut a.weights);
            axpy(scale, &b.bias, &mut a.bias);
        }
    }

    fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.input == b.input && a.output == b.output)
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// Architecture of a CTR model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub field_vocab: Vec<usize>,
    pub embed_dim: usize,
    /// Hidden widths of the prediction net (output width 1 is implicit).
    pub hidden: Vec<usize>,
    /// Hidden widths of the relaxation net; `None` for models without one.
    pub relaxation_hidden: Option<Vec<usize>>,
    /// Initial bias of the prediction net's output unit.
    pub init_logit: f64,
    /// Standard deviation of the initial embedding entries.
    pub embed_init_std: f64,
}

impl ModelArch {
    /// Lightweight pre-ranking student: embeddings of width 16 and a
    /// 64-32-16 prediction net, plus a 32-16-8 relaxation net when requested.
    pub fn prerank(field_vocab: &[usize], with_relaxation: bool) -> Self {
        ModelArch {
            field_vocab: field_vocab.to_vec(),
            embed_dim: 16,
            hidden: vec![64, 32, 16],
            relaxation_hidden: with_relaxation.then(|| vec![32, 16, 8]),
            init_logit: 0.0,
            embed_init_std: 0.05,
        }
    }

    /// High-capacity ranking teacher: embeddings of width 32 and a
    /// 256-128-64 prediction net.
    pub fn ranker(field_vocab: &[usize]) -> Self {
        ModelArch {
            field_vocab: field_vocab.to_vec(),
            embed_dim: 32,
            hidden: vec![256, 128, 64],
            relaxation_hidden: None,
            init_logit: 0.0,
            embed_init_std: 0.05,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.field_vocab.len() * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.field_vocab.is_empty() || self.field_vocab.contains(&0) {
            return Err(Error::config("field_vocab", "needs at least one non-empty field"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "widths must be positive"));
        }
        if let Some(h) = &self.relaxation_hidden {
            if h.contains(&0) {
                return Err(Error::config("relaxation_hidden", "widths must be positive"));
            }
        }
        Ok(())
    }
}

/// An embedding + MLP CTR model (pre-ranking student or ranking teacher).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrModel {
    arch: ModelArch,
    embeddings: Vec<EmbeddingTable>,
    prediction: Mlp,
    relaxation: Option<Mlp>,
}

/// Lightweight pre-ranking model.
pub type PreRankModel = CtrModel;
/// High-capacity ranking model.
pub type RankModel = CtrModel;

/// Everything a forward pass recorded for one feature row.
#[derive(Debug, Clone)]
pub struct Trace {
    ids: Vec<u32>,
    prediction: MlpTrace,
    relaxation: Option<MlpTrace>,
    pub logit: f64,
    pub pctr: f64,
    /// Relaxation net output before the ReLU.
    pub relax_output: Option<f64>,
    pub alpha: Option<f64>,
}

impl Trace {
    /// Ranking score: `α·ŷ` when a relaxation net is present, else `ŷ`.
    pub fn score(&self) -> f64 {
        adjusted_pctr(self.pctr, self.alpha.unwrap_or(1.0))
    }
}

/// Scores from an untraced forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub pctr: f64,
    pub alpha: Option<f64>,
}

impl Prediction {
    pub fn score(&self) -> f64 {
        adjusted_pctr(self.pctr, self.alpha.unwrap_or(1.0))
    }
}

/// Derivatives of a scalar loss with respect to the two heads of one traced
/// forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Upstream {
    /// dL / d(prediction logit)
    pub logit: f64,
    /// dL / d(relaxation net output, before the ReLU)
    pub relax_output: f64,
}

impl Upstream {
    pub fn logit(d: f64) -> Self {
        Upstream {
            logit: d,
            relax_output: 0.0,
        }
    }

    /// Builds upstream derivatives from dL/dŷ and dL/dα.
    pub fn from_heads(trace: &Trace, d_pctr: f64, d_alpha: f64) -> Self {
        let p = trace.pctr;
        let relax = match trace.relax_output {
            Some(z) if z > 0.0 => d_alpha,
            _ => 0.0,
        };
        Upstream {
            logit: d_pctr * p * (1.0 - p),
            relax_output: relax,
        }
    }
}

/// Parameter gradients. Embedding rows are stored sparsely; only rows touched
/// by a forward pass are present (all others are implicitly zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embeddings: Vec<HashMap<u32, Vec<f64>>>,
    pub prediction: Mlp,
    pub relaxation: Option<Mlp>,
}

impl Gradients {
    pub fn add(&mut self, other: &Gradients) {
        for (mine, theirs) in self.embeddings.iter_mut().zip(&other.embeddings) {
            for (id, row) in theirs {
                match mine.get_mut(id) {
                    Some(r) => axpy(1.0, row, r),
                    None => {
                        mine.insert(*id, row.clone());
                    }
                }
            }
        }
        self.prediction.add_scaled(&other.prediction, 1.0);
        if let (Some(a), Some(b)) = (&mut self.relaxation, &other.relaxation) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for table in &mut self.embeddings {
            for row in table.values_mut() {
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        self.prediction.params_mut().for_each(|v| *v *= s);
        if let Some(r) = &mut self.relaxation {
            r.params_mut().for_each(|v| *v *= s);
        }
    }

    /// Euclidean norm over every entry. Rows are visited in id order so the
    /// result does not depend on hash-map iteration order.
    pub fn norm(&self) -> f64 {
        let mut sq = 0.0;
        for table in &self.embeddings {
            let mut ids: Vec<&u32> = table.keys().collect();
            ids.sort_unstable();
            for id in ids {
                sq += table[id].iter().map(|v| v * v).sum::<f64>();
            }
        }
        sq += self.prediction.params().map(|v| v * v).sum::<f64>();
        if let Some(r) = &self.relaxation {
            sq += r.params().map(|v| v * v).sum::<f64>();
        }
        sq.sqrt()
    }

    /// True when every stored entry is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.embeddings
            .iter()
            .all(|t| t.values().all(|r| r.iter().all(|&v| v == 0.0)))
            && self.prediction.params().all(|&v| v == 0.0)
            && self
                .relaxation
                .as_ref()
                .is_none_or(|r| r.params().all(|&v| v == 0.0))
    }

    /// Sums a sequence of gradient sets in iteration order.
    pub fn sum<'a>(model: &CtrModel, parts: impl IntoIterator<Item = &'a Gradients>) -> Gradients {
        let mut total = model.zero_grads();
        for p in parts {
            total.add(p);
        }
        total
    }
}

impl CtrModel {
    /// Builds a randomly initialized model from `arch`, deterministic in `seed`.
    pub fn new(arch: ModelArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(seed, &[0x30DE1]);
        let embeddings = arch
            .field_vocab
            .iter()
            .map(|&v| EmbeddingTable::random(v, arch.embed_dim, arch.embed_init_std, &mut r))
            .collect();
        let mut dims = vec![arch.input_dim()];
        dims.extend(&arch.hidden);
        dims.push(1);
        let mut prediction = Mlp::he_init(&dims, &mut r);
        prediction.output_layer_mut().bias[0] = arch.init_logit;
        let relaxation = arch.relaxation_hidden.as_ref().map(|h| {
            let mut dims = vec![arch.input_dim()];
            dims.extend(h);
            dims.push(1);
            let mut net = Mlp::he_init(&dims, &mut r);
            // Start with α ≈ 1: tiny output weights, unit output bias.
            let out = net.output_layer_mut();
            out.weights.iter_mut().for_each(|w| *w *= 0.01);
            out.bias[0] = 1.0;
            net
        });
        Ok(CtrModel {
            arch,
            embeddings,
            prediction,
            relaxation,
        })
    }

    /// Assembles a model from explicit parts, checking that they chain.
    pub fn from_parts(
        embeddings: Vec<EmbeddingTable>,
        prediction: Mlp,
        relaxation: Option<Mlp>,
    ) -> Result<Self> {
        let embed_dim = embeddings.first().map_or(0, EmbeddingTable::dim);
        if embeddings.is_empty() || embeddings.iter().any(|e| e.dim != embed_dim) {
            return Err(Error::InvalidArgument(
                "embedding tables must be non-empty and share one width".into(),
            ));
        }
        let input = embeddings.len() * embed_dim;
        for (name, net) in std::iter::once(("prediction", &prediction)).chain(relaxation.iter().map(|r| ("relaxation", r))) {
            let chains = net.layers.windows(2).all(|w| w[0].output == w[1].input);
            if net.layers.is_empty() || !chains || net.input_dim() != input || net.output_dim() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "{name} net must chain from width {input} to a single output"
                )));
            }
        }
        let dims = prediction.dims();
        let arch = ModelArch {
            field_vocab: embeddings.iter().map(|e| e.vocab).collect(),
            embed_dim,
            hidden: dims[1..dims.len() - 1].to_vec(),
            relaxation_hidden: relaxation.as_ref().map(|r| {
                let d = r.dims();
                d[1..d.len() - 1].to_vec()
            }),
            init_logit: 0.0,
            embed_init_std: 0.0,
        };
        Ok(CtrModel {
            arch,
            embeddings,
            prediction,
            relaxation,
        })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn has_relaxation(&self) -> bool {
        self.relaxation.is_some()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn n_params(&self) -> usize {
        self.embeddings.iter().map(|e| e.weights.len()).sum::<usize>()
            + self.prediction.n_params()
            + self.relaxation.as_ref().map_or(0, Mlp::n_params)
    }

    pub fn embeddings(&self) -> &[EmbeddingTable] {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut [EmbeddingTable] {
        &mut self.embeddings
    }

    pub fn prediction_net(&self) -> &Mlp {
        &self.prediction
    }

    pub fn relaxation_net(&self) -> Option<&Mlp> {
        self.relaxation.as_ref()
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() != self.embeddings.len() {
            return Err(Error::Dimension {
                what: "feature fields",
                expected: self.embeddings.len(),
                got: ids.len(),
            });
        }
        for (&id, table) in ids.iter().zip(&self.embeddings) {
            if id as usize >= table.vocab {
                return Err(Error::OutOfRange {
                    what: "feature id",
                    index: id as usize,
                    limit: table.vocab,
                });
            }
        }
        Ok(())
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "representation",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Concatenated per-field embedding lookups `x = E(U) ⊕ E(A) ⊕ E(C)`.
    pub fn embed(&self, ids: &[u32]) -> Result<Vec<f64>> {
        self.check_ids(ids)?;
        Ok(self.embed_unchecked(ids))
    }

    fn embed_unchecked(&self, ids: &[u32]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.input_dim());
        for (&id, table) in ids.iter().zip(&self.embeddings) {
            x.extend_from_slice(table.row(id));
        }
        x
    }

    /// `ŷ = sigmoid(MLP(x))`.
    pub fn forward_pctr(&self, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        Ok(sigmoid(self.prediction.forward(x)))
    }

    /// `α = ReLU(MLP_relax(x)) + 1e-6`.
    pub fn forward_alpha(&self, x: &[f64]) -> Result<f64> {
        let net = self.relaxation.as_ref().ok_or(Error::NoRelaxation)?;
        self.check_x(x)?;
        Ok(alpha_from_output(net.forward(x)))
    }

    /// Untraced forward pass from feature ids.
    pub fn predict(&self, ids: &[u32]) -> Result<Prediction> {
        self.check_ids(ids)?;
        let x = self.embed_unchecked(ids);
        Ok(Prediction {
            pctr: sigmoid(self.prediction.forward(&x)),
            alpha: self
                .relaxation
                .as_ref()
                .map(|r| alpha_from_output(r.forward(&x))),
        })
    }

    /// Forward pass that records everything [`CtrModel::backward`] needs.
    pub fn trace(&self, ids: &[u32]) -> Result<Trace> {
        self.check_ids(ids)?;
        let x = self.embed_unchecked(ids);
        let (logit, prediction) = self.prediction.forward_traced(&x);
        let (relax_output, relaxation) = match &self.relaxation {
            Some(net) => {
                let (z, t) = net.forward_traced(&x);
                (Some(z), Some(t))
            }
            None => (None, None),
        };
        Ok(Trace {
            ids: ids.to_vec(),
            prediction,
            relaxation,
            logit,
            pctr: sigmoid(logit),
            relax_output,
            alpha: relax_output.map(alpha_from_output),
        })
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            embeddings: vec![HashMap::new(); self.embeddings.len()],
            prediction: Mlp::zeros(&self.prediction.dims()),
            relaxation: self.relaxation.as_ref().map(|r| Mlp::zeros(&r.dims())),
        }
    }

    /// Back-propagates `up` through the traced forward pass, accumulating into
    /// `grads`. Parameters the pass did not touch receive nothing.
    pub fn backward(&self, trace: &Trace, up: Upstream, grads: &mut Gradients) {
        let mut d_x = vec![0.0; self.input_dim()];
        if up.logit != 0.0 {
            self.prediction
                .backward(&trace.prediction, up.logit, &mut grads.prediction, &mut d_x);
        }
        if up.relax_output != 0.0 {
            if let (Some(net), Some(t), Some(g)) =
                (&self.relaxation, &trace.relaxation, &mut grads.relaxation)
            {
                net.backward(t, up.relax_output, g, &mut d_x);
            }
        }
        if up.logit == 0.0 && up.relax_output == 0.0 {
            return;
        }
        let dim = self.arch.embed_dim;
        for (f, &id) in trace.ids.iter().enumerate() {
            let part = &d_x[f * dim..(f + 1) * dim];
            match grads.embeddings[f].get_mut(&id) {
                Some(row) => axpy(1.0, part, row),
                None => {
                    grads.embeddings[f].insert(id, part.to_vec());
                }
            }
        }
    }

    fn check_grad_shape(&self, grads: &Gradients) -> Result<()> {
        let relax_ok = match (&self.relaxation, &grads.relaxation) {
            (Some(a), Some(b)) => a.same_shape(b),
            (None, None) => true,
            _ => false,
        };
        let emb_ok = grads.embeddings.len() == self.embeddings.len()
            && grads
                .embeddings
                .iter()
                .zip(&self.embeddings)
                .all(|(g, t)| g.iter().all(|(&id, row)| (id as usize) < t.vocab && row.len() == t.dim));
        if !(relax_ok && emb_ok && self.prediction.same_shape(&grads.prediction)) {
            return Err(Error::InvalidArgument(
                "gradient set does not match the model's shape".into(),
            ));
        }
        Ok(())
    }

    /// Plain SGD: `p ← p − lr·g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        self.check_grad_shape(grads)?;
        if lr == 0.0 {
            return Ok(());
        }
        for (table, g) in self.embeddings.iter_mut().zip(&grads.embeddings) {
            for (&id, row) in g {
                axpy(-lr, row, table.row_mut(id));
            }
        }
        self.prediction.add_scaled(&grads.prediction, -lr);
        if let (Some(net), Some(g)) = (&mut self.relaxation, &grads.relaxation) {
            net.add_scaled(g, -lr);
        }
        Ok(())
    }

    /// Flat view of every parameter, in a fixed order: embeddings, prediction
    /// net, relaxation net. Used by gradient checks.
    pub fn params(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .embeddings
            .iter()
            .flat_map(|e| e.weights.iter().copied())
            .collect();
        v.extend(self.prediction.params().copied());
        if let Some(r) = &self.relaxation {
            v.extend(r.params().copied());
        }
        v
    }

    /// Mutable access to parameter `index` in the order of [`CtrModel::params`].
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for e in &mut self.embeddings {
            if index < e.weights.len() {
                return &mut e.weights[index];
            }
            index -= e.weights.len();
        }
        let n = self.prediction.n_params();
        if index < n {
            return self.prediction.params_mut().nth(index).expect("in range");
        }
        index -= n;
        self.relaxation
            .as_mut()
            .and_then(|r| r.params_mut().nth(index))
            .expect("parameter index in range")
    }

    /// Gradient set flattened in the order of [`CtrModel::params`].
    pub fn flatten_grads(&self, grads: &Gradients) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for (table, g) in self.embeddings.iter().zip(&grads.embeddings) {
            for id in 0..table.vocab as u32 {
                match g.get(&id) {
                    Some(row) => v.extend_from_slice(row),
                    None => v.extend(std::iter::repeat_n(0.0, table.dim)),
                }
            }
        }
        v.extend(grads.prediction.params().copied());
        if let Some(r) = &grads.relaxation {
            v.extend(r.params().copied());
        }
        v
    }

    pub fn save(&self, path: &Path, config_digest: &str, label: &str) -> Result<()> {
        let file = CheckpointRef {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_digest,
            label,
            model: self,
        };
        let text = serde_json::to_string(&file).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, refusing it if it was trained against another world.
    pub fn load(path: &Path, expected_digest: &str) -> Result<(CtrModel, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                expected: CHECKPOINT_FORMAT_VERSION,
                found: file.format_version,
            });
        }
        if file.config_digest != expected_digest {
            return Err(Error::DigestMismatch {
                expected: expected_digest.to_owned(),
                found: file.config_digest,
            });
        }
        Ok((file.model, file.label))
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format_version: u32,
    config_digest: &'a str,
    label: &'a str,
    model: &'a CtrModel,
}

#[derive(Deserialize)]
struct Checkpoint {
    format_version: u32,
    config_digest: String,
    label: String,
    model: CtrModel,
}

/// Fails unless `teacher` has strictly more parameters than `student`.
pub fn ensure_capacity_gap(teacher: &RankModel, student: &PreRankModel) -> Result<()> {
    if teacher.n_params() <= student.n_params() {
        return Err(Error::InvalidArgument(format!(
            "ranking model has {} parameters, pre-ranking model {}; the ranker must be larger",
            teacher.n_params(),
            student.n_params()
        )));
    }
    Ok(())
}
