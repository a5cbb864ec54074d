//! Kinematics-driven Gaussian splatting for skeleton action recognition.
//!
//! The pipeline turns a skeleton sequence into velocity-stretched Gaussian
//! heatmaps ([`splat`]), derives a per-sample joint affinity prior from the
//! Bhattacharyya distance between the joint Gaussians ([`topology`]), and
//! classifies the sequence with a visually gated spatio-temporal graph
//! convolutional network ([`network`]) built on a small reverse-mode
//! differentiation engine ([`autodiff`]).
//!
//! ```no_run
//! use kgs_core::skeleton::{load_sequence, normalize_sequence, compute_velocity, NormalizationParams};
//! use kgs_core::splat::{render_sequence, RenderConfig};
//! use kgs_core::topology::build_prior_adjacency;
//!
//! let seq = load_sequence("walk.json")?;
//! let seq = normalize_sequence(&seq, &NormalizationParams::default())?;
//! let kin = compute_velocity(&seq)?;
//! let config = RenderConfig::for_channels(kin.channels());
//! let (heatmaps, grids) = render_sequence(&kin, &config)?;
//! let prior = build_prior_adjacency(&grids)?;
//! # Ok::<(), kgs_core::KgsError>(())
//! ```

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod export;
pub mod network;
pub mod optim;
pub mod skeleton;
pub mod splat;
pub mod synth;
pub mod tensor;
pub mod topology;

pub use error::{KgsError, Result};
