//! Molecular maps for photon-antibunching scanning microscopy.

pub mod counting;
pub mod error;
pub mod experiments;
pub mod hybrid;
pub mod image;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod scan;
pub mod simulate;
pub mod transform;
pub mod watershed;

pub use error::{Error, Result};

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
