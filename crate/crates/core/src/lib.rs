//! Non-aligned reference image quality assessment toolkit.
//!
//! The crate covers the whole desk-scale pipeline: motion-region masks from
//! dense flow, localized synthetic distortions, triplet corpora with
//! full-reference supervision, a small embedding head trained with a
//! contrastive + KL objective, cosine-similarity scoring, patch mismatch
//! heatmaps and benchmark statistics.

pub mod config;
pub mod corpus;
pub mod distort;
pub mod embed;
pub mod error;
pub mod evalkit;
pub mod flowtroi;
pub mod imagecore;
pub mod pipeline;
pub mod rng;
pub mod score;
pub mod selftest;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use imagecore::{ColorSpace, Image, PatchGrid, Plane};
