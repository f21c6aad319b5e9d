//! Reference implementations shared by the integration tests. Everything here is
//! written with plain nested loops over `f64` and does not call into the library's
//! loss or metric code.
#![allow(dead_code)]

pub mod loss_oracle;
pub mod gradcheck;
pub mod metric_oracle;
