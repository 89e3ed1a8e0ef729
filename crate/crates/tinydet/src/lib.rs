//! tinydet: a desk-scale single-shot detector with two-step refinement.
//!
//! The crate is self-contained: a minimal reverse-mode autodiff engine,
//! box/anchor geometry, focal and margin losses, a small feature-pyramid
//! network with receptive-field blocks and a training-only RoI
//! supervision head, a procedural scene generator, an SGD training loop,
//! and PR/AP evaluation. No runtime dependencies.
//!
//! Start with the `examples/` directory — one runnable example per
//! capability — or the `tinydet` binary (`train`, `eval`, `ablate`,
//! `generate` subcommands).

pub mod autodiff;
pub mod boxgeom;
pub mod cascade;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod losses;
pub mod netarch;
pub mod rng;
pub mod synthdata;
pub mod trainloop;

pub use autodiff::{Real, Tensor};
pub use boxgeom::{AnchorSet, BBox, Detection};
pub use error::{Error, Result};
