//! One-shot image classification with single-image generator fine-tuning,
//! learned 3x3 grid fusion of real and generated images, and an episodic
//! prototype classifier, plus a full evaluation harness.

pub mod adaptation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fewshot;
pub mod fusion;
pub mod generator;
pub mod harness;
pub mod image_io;
pub mod nn;
pub mod perceptual;
pub mod rng;
pub mod synth;
pub mod tape;

pub use error::{Error, Result};
pub use image_io::Image;
