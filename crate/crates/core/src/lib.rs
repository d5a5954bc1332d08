//! Pseudo-bag mixup augmentation for multiple-instance learning (MIL).
//!
//! A bag is an `m × d` matrix of instance features with one class label.
//! Each bag is divided into `n` instance-disjoint pseudo-bags by
//! phenotype-stratified sampling ([`division`]); two bags are then mixed at
//! the granularity of pseudo-bags ([`mixing`]). The remaining modules supply
//! a synthetic data generator, a small attention-MIL classifier with
//! hand-derived gradients, and the evaluation protocols used to compare
//! augmentation strategies.

pub mod bagstore;
pub mod bench;
pub mod division;
pub mod error;
pub mod eval;
pub mod mil;
pub mod mixing;
pub mod rng;
pub mod synth;

pub use bagstore::{Bag, Dataset, SoftLabel, Split};
pub use division::{DivisionConfig, DivisionMethod, PseudoBagPartition};
pub use error::{Error, Result};
pub use mixing::{AugmentedSample, MixConfig, MixMask, TargetMode};
