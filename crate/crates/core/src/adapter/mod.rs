//! Adapter bank, per-profile masks and the adapter layer itself.

pub mod bank;
pub mod layer;
pub mod mask;

pub use bank::{AdapterBank, AdapterPair, Provenance};
pub use layer::{Activation, AdapterOptions, AdapterVars};
pub use mask::{MaskSettings, MaskTensors, MaskVariant};
