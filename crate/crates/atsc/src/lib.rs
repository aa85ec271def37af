//! Adaptive teaching with a shared classifier.
//!
//! A pretrained teacher encoder self-adjusts under a parameter-anchor penalty
//! so its features become easier for a smaller student to match, while the
//! teacher's classification head is alternately fine-tuned and finally shared
//! with the student through a small channel-matching projector. The crate
//! also implements the plain shared-classifier baseline, the online variants,
//! the student-based fine-tune ablation, and the multi-teacher extension,
//! plus the datasets, metrics, and configuration used by the run harness.
//!
//! Batch-level inner loops are data-parallel via rayon (the default
//! `parallel` feature); disabling the feature falls back to identical
//! sequential code paths.

pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
