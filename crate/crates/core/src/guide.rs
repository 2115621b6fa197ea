//! The chapters of `book/`, included here so their code blocks run as
//! doc tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/virtual-sensors.md")]
pub mod virtual_sensors {}

#[doc = include_str!("../../../book/src/windows.md")]
pub mod windows {}

#[doc = include_str!("../../../book/src/processing.md")]
pub mod processing {}

#[doc = include_str!("../../../book/src/delivery.md")]
pub mod delivery {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
