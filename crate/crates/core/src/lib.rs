//! A desk-scale laboratory for training diffusion transformers with
//! representation alignment: a frozen encoder's patch features and attention
//! maps guide a small class-conditional transformer early in training, and the
//! guidance is switched off once it starts to conflict with denoising.
//!
//! Everything runs on the CPU in a few minutes per experiment; the
//! [`ndgrad`] module provides the reverse-mode autodiff the models are built
//! on.

// Validation uses `!(x > 0.0)` so that NaN is rejected along with the rest.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod experiments;
pub mod interpolant;
pub mod ndgrad;
pub mod nn;
pub mod optim;
pub mod schedule;
pub mod student;
pub mod synthdata;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
