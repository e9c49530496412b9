//! Shortcut-learning audit toolkit for animal re-identification.
//!
//! The crate works on precomputed embeddings plus image metadata and covers
//! the whole audit path:
//!
//! | Module | Contents |
//! | ------ | -------- |
//! | [`corpus`] | manifest ingestion, integrity checks, near-duplicate filtering |
//! | [`geometry`] | cosine scores and the Lorentz hyperboloid (distance, exp/log maps) |
//! | [`retrieval`] | query-gallery protocol, AP, identity-balanced mAP, CMC@K |
//! | [`diagnostics`] | background-context ratios, mirror/laterality diagnostics, cross-flank retrieval |
//! | [`stats`] | rank correlations, bootstrap CIs, Wilcoxon / Fisher / Holm pipeline |
//! | [`coreset`] | facility-location validation coreset |
//! | [`masklab`] | mask solidity and RGBA variant generation |
//! | [`losslab`] | training objectives with analytic gradients and finite-difference checks |
//!
//! Data-parallel loops go through [`par::Execution`]; with the default
//! `parallel` feature they run on rayon, without it they run sequentially.
//! Results are bit-identical either way.

// `!(x > 0.0)` deliberately rejects NaN; index loops walk several parallel
// arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod coreset;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod losslab;
pub mod masklab;
pub mod par;
pub mod retrieval;
pub mod stats;

pub use error::{Error, Result};
