//! Domain logic for operating a hierarchical grid infrastructure.
//!
//! The crate is `no_std` (with `alloc`): it holds the resource registry, probe
//! bookkeeping, availability computation, usage accounting, WMS alarm
//! evaluation and operator-on-duty workflow, with no IO of its own.
#![no_std]

extern crate alloc;

pub mod accounting;
pub mod error;
pub mod operations;
pub mod probe;
pub mod registry;
pub mod sla;
pub mod time;
pub mod wms;

pub use error::{Error, Result};
