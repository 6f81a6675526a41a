//! Relational prior distillation and prior-guided query enhancement for
//! single-domain generalised object detection, plus the detection-quality
//! metrics used to study error behaviour under domain shift.
//!
//! Everything operates on dumped feature tensors and annotation files:
//!
//! - [`tensor`]: dense `f64` tensors with a minimal reverse-mode tape.
//! - [`gradcheck`] and [`verify`]: finite-difference verification.
//! - [`distill`]: pyramid reconstruction, resolution alignment, relation
//!   matrices and the multi-level relational distillation loss.
//! - [`prototype`]: per-category prototypes pooled from teacher features.
//! - [`enhance`]: prototype- and teacher-guided query cross-attention.
//! - [`metrics`]: mAP@50 and the FN / FP / class-confusion taxonomy.
//! - [`io`]: the `VFMT` tensor container and JSON schemas.

pub mod bbox;
pub mod distill;
pub mod enhance;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod prototype;
pub mod tensor;
pub mod verify;

pub use bbox::BBox;
pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
