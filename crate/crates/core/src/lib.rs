//! Simulator and attack toolkit for a remote power side channel against a
//! binarized CNN accelerator observed through an on-chip time-to-digital
//! converter (TDC).
//!
//! Pipeline: [`dataset`] images feed the line-buffer convolution unit in
//! [`power`], whose per-cycle activity is turned into delay-line Hamming
//! weights by [`tdc`]. [`attack`] averages, filters, thresholds and denoises
//! those readings into a recovered image, scored by [`metrics`].
//! [`experiment`] drives the whole matrix and persists artifacts.

pub mod attack;
pub mod bnn;
pub mod dataset;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod power;
pub mod tdc;

pub use dataset::{Image, PixelPerturbation, PIXELS, SIDE};
