//! Core of a selective state-space segmentation network: a small autodiff
//! tensor engine, ZOH-discretized selective scans, spectral bandpass
//! branches, shared positional tables, gated fusion blocks, a three-scale
//! segmentation backbone, metrics and synthetic data.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod attention;
pub mod data;
pub mod error;
pub mod metrics;
pub mod net;
pub mod numcore;
pub mod optim;
pub mod freq;
pub mod posenc;
pub mod ssm;
pub mod tim;

pub use error::{Error, Result};
