//! Concept-bound security for a toy conditional diffusion model.
//!
//! The crate trains a small pixel-space denoising diffusion model on a
//! procedurally rendered shape corpus, personalizes it on a single synthetic
//! subject, and fine-tunes it so that
//!
//! * prompts combining the subject token with a blacklisted concept are
//!   redirected to subject-only outputs (conditional identity-preserving
//!   loss), and
//! * generations that involve the subject carry a k-bit watermark readable
//!   by a frozen pre-trained decoder.
//!
//! An evaluation harness measures restriction, collateral damage, watermark
//! bit accuracy, and distribution fidelity against baseline fine-tunes.

pub mod autodiff;
pub mod checkpoint;
pub mod conditioning;
pub mod diffusion;
pub mod evaluation;
pub mod losses;
pub mod nn;
pub mod scalar;
pub mod synthdata;
pub mod training;
pub mod watermark;

pub use scalar::Scalar;
