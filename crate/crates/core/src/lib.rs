//! Fabric-defect detection from scratch: autodiff tensors, selective-scan
//! blocks, a YOLO-style detector with EMCA and C2F-VMamba, data preparation,
//! mAP evaluation and a training loop.

pub mod bench;
pub mod check;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scan;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/tensors.md")]
mod book_tensors {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/scanning.md")]
mod book_scanning {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/blocks.md")]
mod book_blocks {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/model.md")]
mod book_model {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/data.md")]
mod book_data {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/metrics.md")]
mod book_metrics {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
mod book_training {}
