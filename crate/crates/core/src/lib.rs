//! Desk-scale TC-YOLO: a one-stage chrysanthemum detector built from
//! CSPDense backbone stages, SPP, a recursive feature pyramid with ASPP
//! feedback, GIoU training loss and DIoU-NMS inference.

pub mod anchors;
pub mod blocks;
pub mod boxgeom;
pub mod data;
pub mod error;
pub mod eval;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
