//! A desk-scale laboratory for consistency-oriented pre-ranking in cascaded
//! ad systems.
//!
//! The crate is split along the cascade:
//!
//! - [`datagen`]: a reproducible synthetic ad world with a hidden click oracle.
//! - [`model`]: embedding + MLP CTR models with exact manual gradients.
//! - [`cascade`]: ECPM scoring, the pre-rank → rank → display funnel, CTR/RPM.
//! - [`trainer`]: Base, Distillation, RankFlow-style and COPR objectives.
//! - [`metrics`]: HR/NDCG/MAP@K consistency metrics and the RPC curve.
//! - [`pipeline`]: the configuration-driven experiment wiring used by the CLI.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.
//! Both paths reduce in the same fixed order, so results are bit-identical.

pub mod cascade;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
