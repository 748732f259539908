//! Federated learning simulator with anatomically matched 3D frequency-domain
//! style augmentation.
//!
//! Clients hold CT-like volumes with client-specific appearance and anatomical
//! coverage. Before training, every client extracts low-frequency 3D Fourier
//! amplitude styles from its training volumes and files them by slice score
//! into a shared [`StyleBank`](stylebank::StyleBank), which is distributed
//! once. During local training, each crop borrows the style of another client
//! at the same anatomical height ([`spectral::apply_style`]), and the server
//! aggregates local models with dataset-size-weighted FedAvg.
//!
//! The crate is organised bottom-up:
//!
//! - [`volume`]: volumes, respacing, cropping, air masks, volume files
//! - [`spectral`]: 3D FFT, style extraction, style MixUp
//! - [`stylebank`]: slice-score binning, registration, retrieval, bank files
//! - [`segmodel`]: a small 3D segmentation network with manual gradients
//! - [`metrics`]: DSC, ASD and the per-organ metric table
//! - [`phantom`]: synthetic multi-organ federations
//! - [`federation`]: local training, FedAvg, rounds, traffic accounting
//! - [`cli`]: the `a3dfdg` command-line driver
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod cli;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod segmodel;
pub mod spectral;
pub mod stylebank;
pub mod volume;

pub use error::{Error, Result};
