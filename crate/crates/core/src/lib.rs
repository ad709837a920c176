//! Dynamic-object removal for street imagery: procedural paired scenes,
//! mask-emphasized adversarial inpainting, a semantic dynamic-object head,
//! training and evaluation.

pub mod imagecore;
pub mod scenegen;
pub mod models;
pub mod losses;
pub mod evaluation;
pub mod training;
