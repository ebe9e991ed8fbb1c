//! Streaming matrix sketches built on Frequent Directions with randomized
//! snapshot dumping: full-stream, sliding-window, persistent (historical
//! prefix) and distributed covariance tracking, plus sliding-window
//! approximate matrix multiplication.

// Parameter checks are written as `!(x >= lo)` on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod amm;
pub mod attp;
pub mod bench;
pub mod distributed;
pub mod error;
pub mod fd;
pub mod linalg;
pub mod session;
pub mod sketch;
pub mod streams;
pub mod window;

pub use error::{Error, Result};
pub use linalg::{Matrix, RngState, Vector};
