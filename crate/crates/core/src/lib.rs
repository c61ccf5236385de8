//! Non-rigid structure from motion under an orthographic camera.
//!
//! The pipeline factors a centered measurement matrix, recovers K corrective
//! triplets from the orthonormality constraints, turns each into a set of
//! per-frame rotations, fuses them by L1 rotation averaging and finally
//! recovers a low-rank shape with ADMM and partial singular value
//! thresholding.
//!
//! ```no_run
//! use nrsfm::measurements::{synthesize_sequence, SyntheticModel};
//! use nrsfm::cli::{reconstruct, ReconstructionOptions};
//!
//! let model = SyntheticModel::random(50, 30, 3, 0.0, 7);
//! let seq = synthesize_sequence(&model, 7).unwrap();
//! let rec = reconstruct(&seq.measurements, &ReconstructionOptions::new(3)).unwrap();
//! println!("{} ADMM iterations", rec.shape.iterations);
//! ```

pub mod cli;
mod linalg;
pub mod error;
pub mod factorization;
pub mod measurements;
pub mod metrics;
pub mod rotation;
pub mod shape;

pub use error::{Error, Result};
