//! Transparency harness for black-box image classifiers.
//!
//! Two probes are provided around a trained classifier:
//!
//! * **ex-ante filtration** ([`filtration`]): inputs are reduced to one
//!   self-contained component (mouth, eyes, ...) before training, so the
//!   accuracy of the component-level model measures that component's
//!   contribution;
//! * **ex-post experimentation** ([`latent`], [`experiment`]): inputs are
//!   regenerated with a single semantic dimension varied and the trained
//!   model's output differences are regressed on that dimension.
//!
//! [`synthworld`] is a procedural face generator with planted ground truth
//! that every stage can be checked against.

pub mod error;
pub mod experiment;
pub mod filtration;
pub mod image;
pub mod ingest;
pub mod latent;
pub mod mud;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod synthworld;

pub use error::{Result, TmudError};
pub use image::{ImageTensor, Mask};
pub use synthworld::{ComponentKind, LatentVector};
