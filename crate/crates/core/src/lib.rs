//! Causal-attention medication recommendation on synthetic EHR cohorts.
//!
//! The crate is organized around a small reverse-mode tensor engine
//! ([`numerics`]), an EHR data model with a planted-structure synthetic
//! generator ([`data`]), the causal weight generator ([`cwg`]) and the
//! channel-harmonized attention fusion block ([`charm`]), the end-to-end
//! recommender ([`model`]), the combined BCE + DDI training objective
//! ([`training`]), and the evaluation metrics ([`eval`]).

pub mod charm;
pub mod cwg;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod suite;
pub mod training;

pub use error::{CafeError, Result};
