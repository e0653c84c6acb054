//! Self-distilled vision transformers whose attention is steered toward
//! spatial priors.
//!
//! A small ViT is pretrained with DINO-style self-distillation. Optionally,
//! selected heads of its last layer are pulled toward binary knowledge
//! templates: hand-drawn triangles, a thresholded mean of exemplar masks, or
//! an exemplar mask carried onto each image by b-spline registration. The
//! crate also scores where the model looks (pixel AP, pointing game) and how
//! useful its features are (linear probe AUC, low-data sweeps), all on a
//! procedurally generated corpus.
//!
//! Start with [`runner::RunConfig`] and [`runner::pretrain`]; the
//! `examples/` directory walks through each piece.

pub mod augment;
pub mod bspline;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod pgm;
pub mod runner;
pub mod seed;
pub mod span_reg;
pub mod synthdata;
pub mod templates;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
