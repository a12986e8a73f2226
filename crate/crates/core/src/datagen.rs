//! Synthetic ad world: users, ads, contexts, bids and a hidden click oracle.
//!
//! Each user carries two categorical features (its id and a segment), each ad
//! two (its id and a category) and each request one context id. Behind the
//! features sits a hidden factor model:
//!
//! ```text
//! true_ctr(u, a, c) = sigmoid(bias + <h_u, h_a> + offset_c)
//! h_u = shared + segment_vec[seg(u)] + noise_u
//! h_a = category_vec[cat(a)] + noise_a
//! ```
//!
//! The shared taste vector gives every ad an average attractiveness
//! `<shared, h_a>`. Bids are log-normal and negatively correlated with that
//! attractiveness, the way cheap items draw more clicks than expensive ones.
//! The oracle parameters are private to this module; models only ever see
//! feature ids and simulated clicks.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const CATALOG_FORMAT_VERSION: u32 = 1;

/// Number of categorical fields in a (user, ad, context) feature row.
pub const N_FIELDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_ads: usize,
    pub user_segments: usize,
    pub ad_categories: usize,
    pub contexts: usize,
    pub hidden_dim: usize,
    /// Mean true CTR over uniformly random (user, ad, context) triples.
    pub base_ctr: f64,
    /// Mean of the log-normal bid distribution.
    pub bid_mean: f64,
    /// Log-space standard deviation of bids.
    pub bid_sigma: f64,
    /// Correlation between log-bid and ad attractiveness, in [-1, 1].
    pub bid_attractiveness_corr: f64,
    pub shared_taste: f64,
    pub segment_scale: f64,
    pub user_scale: f64,
    pub category_scale: f64,
    pub ad_scale: f64,
    pub context_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_users: 1000,
            n_ads: 5000,
            user_segments: 20,
            ad_categories: 50,
            contexts: 8,
            hidden_dim: 8,
            base_ctr: 0.05,
            bid_mean: 60.0,
            // 95th percentile ≈ 10× the median: exp(1.645 σ) = 10.
            bid_sigma: std::f64::consts::LN_10 / 1.644_853_626_951_472_2,
            bid_attractiveness_corr: -0.95,
            shared_taste: 0.9,
            segment_scale: 0.7,
            user_scale: 0.1,
            category_scale: 0.5,
            ad_scale: 0.1,
            context_scale: 0.3,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_ads", self.n_ads),
            ("user_segments", self.user_segments),
            ("ad_categories", self.ad_categories),
            ("contexts", self.contexts),
            ("hidden_dim", self.hidden_dim),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.base_ctr > 0.0 && self.base_ctr < 1.0) {
            return Err(Error::config("base_ctr", "must lie in (0, 1)"));
        }
        if !(self.bid_mean > 0.0 && self.bid_mean.is_finite()) {
            return Err(Error::config("bid_mean", "must be positive"));
        }
        if !(self.bid_sigma >= 0.0 && self.bid_sigma.is_finite()) {
            return Err(Error::config("bid_sigma", "must be non-negative"));
        }
        if !(-1.0..=1.0).contains(&self.bid_attractiveness_corr) {
            return Err(Error::config("bid_attractiveness_corr", "must lie in [-1, 1]"));
        }
        let scales = [
            ("shared_taste", self.shared_taste),
            ("segment_scale", self.segment_scale),
            ("user_scale", self.user_scale),
            ("category_scale", self.category_scale),
            ("ad_scale", self.ad_scale),
            ("context_scale", self.context_scale),
        ];
        for (key, v) in scales {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a non-negative finite number"));
            }
        }
        Ok(())
    }

    /// Vocabulary size of each feature field, in feature-row order
    /// `[user_id, user_segment, ad_id, ad_category, context]`.
    pub fn field_vocab(&self) -> [usize; N_FIELDS] {
        [
            self.n_users,
            self.user_segments,
            self.n_ads,
            self.ad_categories,
            self.contexts,
        ]
    }

    /// Log-space location of the bid distribution so that its mean is `bid_mean`.
    pub fn bid_mu(&self) -> f64 {
        self.bid_mean.ln() - 0.5 * self.bid_sigma * self.bid_sigma
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Oracle {
    bias: f64,
    user_vecs: Vec<Vec<f64>>,
    ad_vecs: Vec<Vec<f64>>,
    context_offsets: Vec<f64>,
}

impl Oracle {
    fn logit_without_bias(&self, user: usize, ad: usize, context: usize) -> f64 {
        dot(&self.user_vecs[user], &self.ad_vecs[ad]) + self.context_offsets[context]
    }
}

/// The generated world. Immutable after creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    config: WorldConfig,
    seed: u64,
    /// `[user_id, segment]` per user.
    user_features: Vec<[u32; 2]>,
    /// `[ad_id, category]` per ad.
    ad_features: Vec<[u32; 2]>,
    bids: Vec<f64>,
    oracle: Oracle,
}

#[derive(Serialize, Deserialize)]
struct CatalogFile {
    format_version: u32,
    catalog: Catalog,
}

/// One impression opportunity: a user in a context with `M` distinct candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub user: u32,
    pub context: u32,
    pub candidates: Vec<u32>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn normal_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

impl Catalog {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Catalog> {
        config.validate()?;
        let dim = config.hidden_dim;
        let mut r = rng::stream(seed, &[0xCA7A]);

        let user_features: Vec<[u32; 2]> = (0..config.n_users)
            .map(|u| [u as u32, r.random_range(0..config.user_segments) as u32])
            .collect();
        let ad_features: Vec<[u32; 2]> = (0..config.n_ads)
            .map(|a| [a as u32, r.random_range(0..config.ad_categories) as u32])
            .collect();

        let shared = vec![config.shared_taste; dim];
        let segment_vecs: Vec<Vec<f64>> = (0..config.user_segments)
            .map(|_| normal_vec(&mut r, dim, config.segment_scale))
            .collect();
        let category_vecs: Vec<Vec<f64>> = (0..config.ad_categories)
            .map(|_| normal_vec(&mut r, dim, config.category_scale))
            .collect();
        let user_vecs: Vec<Vec<f64>> = user_features
            .iter()
            .map(|f| {
                let noise = normal_vec(&mut r, dim, config.user_scale);
                (0..dim)
                    .map(|k| shared[k] + segment_vecs[f[1] as usize][k] + noise[k])
                    .collect()
            })
            .collect();
        let ad_vecs: Vec<Vec<f64>> = ad_features
            .iter()
            .map(|f| {
                let noise = normal_vec(&mut r, dim, config.ad_scale);
                (0..dim)
                    .map(|k| category_vecs[f[1] as usize][k] + noise[k])
                    .collect()
            })
            .collect();
        let context_offsets = normal_vec(&mut r, config.contexts, config.context_scale);

        // Bids: log-normal, correlated with the standardized attractiveness.
        let attractiveness: Vec<f64> = ad_vecs.iter().map(|v| dot(&shared, v)).collect();
        let n = attractiveness.len() as f64;
        let mean = attractiveness.iter().sum::<f64>() / n;
        let var = attractiveness.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let rho = config.bid_attractiveness_corr;
        let mu = config.bid_mu();
        let bids = attractiveness
            .iter()
            .map(|q| {
                let z = if sd > 0.0 { (q - mean) / sd } else { 0.0 };
                let eps: f64 = StandardNormal.sample(&mut r);
                let g = rho * z + (1.0 - rho * rho).sqrt() * eps;
                (mu + config.bid_sigma * g).exp()
            })
            .collect();

        let mut oracle = Oracle {
            bias: 0.0,
            user_vecs,
            ad_vecs,
            context_offsets,
        };
        oracle.bias = calibrate_bias(&oracle, config, seed);

        Ok(Catalog {
            config: config.clone(),
            seed,
            user_features,
            ad_features,
            bids,
            oracle,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_users(&self) -> usize {
        self.user_features.len()
    }

    pub fn n_ads(&self) -> usize {
        self.ad_features.len()
    }

    pub fn n_contexts(&self) -> usize {
        self.config.contexts
    }

    pub fn bids(&self) -> &[f64] {
        &self.bids
    }

    pub fn bid(&self, ad: u32) -> f64 {
        self.bids[ad as usize]
    }

    pub fn user_features(&self, user: u32) -> [u32; 2] {
        self.user_features[user as usize]
    }

    pub fn ad_features(&self, ad: u32) -> [u32; 2] {
        self.ad_features[ad as usize]
    }

    /// Feature row `[user_id, user_segment, ad_id, ad_category, context]`.
    pub fn features(&self, user: u32, ad: u32, context: u32) -> [u32; N_FIELDS] {
        let u = self.user_features[user as usize];
        let a = self.ad_features[ad as usize];
        [u[0], u[1], a[0], a[1], context]
    }

    fn check(&self, user: usize, ad: usize, context: usize) -> Result<()> {
        if user >= self.n_users() {
            return Err(Error::OutOfRange {
                what: "user",
                index: user,
                limit: self.n_users(),
            });
        }
        if ad >= self.n_ads() {
            return Err(Error::OutOfRange {
                what: "ad",
                index: ad,
                limit: self.n_ads(),
            });
        }
        if context >= self.n_contexts() {
            return Err(Error::OutOfRange {
                what: "context",
                index: context,
                limit: self.n_contexts(),
            });
        }
        Ok(())
    }

    /// Ground-truth click probability, strictly inside (0, 1).
    pub fn true_ctr(&self, user: u32, ad: u32, context: u32) -> Result<f64> {
        let (u, a, c) = (user as usize, ad as usize, context as usize);
        self.check(u, a, c)?;
        let p = sigmoid(self.oracle.bias + self.oracle.logit_without_bias(u, a, c));
        Ok(p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
    }

    /// Samples a request with `m` distinct, uniformly drawn candidates.
    pub fn gen_request<R: Rng>(&self, id: u64, m: usize, rng: &mut R) -> Result<Request> {
        if m == 0 {
            return Err(Error::InvalidArgument("request needs at least one candidate".into()));
        }
        if m > self.n_ads() {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {m} distinct candidates from {} ads",
                self.n_ads()
            )));
        }
        let user = rng.random_range(0..self.n_users()) as u32;
        let context = rng.random_range(0..self.n_contexts()) as u32;
        let candidates = index::sample(rng, self.n_ads(), m)
            .into_iter()
            .map(|a| a as u32)
            .collect();
        Ok(Request {
            id,
            user,
            context,
            candidates,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CatalogFile {
            format_version: CATALOG_FORMAT_VERSION,
            catalog: self.clone(),
        };
        let text = serde_json::to_string(&file).expect("catalog serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Catalog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CatalogFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        if file.format_version != CATALOG_FORMAT_VERSION {
            return Err(Error::Version {
                what: "catalog",
                expected: CATALOG_FORMAT_VERSION,
                found: file.format_version,
            });
        }
        Ok(file.catalog)
    }
}

/// Solves for the oracle bias so the mean CTR over random triples hits the
/// configured base rate. The triples are a fixed sample drawn from the seed.
fn calibrate_bias(oracle: &Oracle, config: &WorldConfig, seed: u64) -> f64 {
    const SAMPLES: usize = 20_000;
    let mut r = rng::stream(seed, &[0xB1A5]);
    let logits: Vec<f64> = (0..SAMPLES)
        .map(|_| {
            let u = r.random_range(0..config.n_users);
            let a = r.random_range(0..config.n_ads);
            let c = r.random_range(0..config.contexts);
            oracle.logit_without_bias(u, a, c)
        })
        .collect();
    let mean_ctr = |b: f64| logits.iter().map(|l| sigmoid(b + l)).sum::<f64>() / SAMPLES as f64;
    let (mut lo, mut hi) = (-60.0_f64, 60.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_ctr(mid) < config.base_ctr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
