#[cfg(doctest)]
mod guide;

pub mod harness;
pub mod model;
pub mod node;
pub mod processing;
pub mod sources;
pub mod storage;
pub mod wire;
