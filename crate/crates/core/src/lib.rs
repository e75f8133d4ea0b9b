//! Test-time visual in-context tuning on a toy grid-inpainting transformer.

pub mod autodiff;
pub mod canvas;
pub mod image;
pub mod corruptions;
pub mod tasks;
pub mod model;
pub mod vict;
pub mod gradcheck;
pub mod harness;
pub mod parallel;
pub mod training;
