//! Joint facial-expression synthesis and recognition.
//!
//! An adversarial autoencoder maps a face to a bounded latent code and decodes
//! it back under a signed expression-intensity code, adversarially supervised
//! by an image discriminator (with an auxiliary expression classifier) and a
//! latent discriminator that pins the code distribution to a uniform prior.
//! A recognition network trains jointly on real and synthesized faces; the
//! real-to-synthetic feature distance back-propagates only through the
//! synthetic branch, so noisy synthetic features are pulled toward real ones
//! rather than the reverse.
//!
//! Everything is config-driven and bit-reproducible under a fixed seed: two
//! runs with the same config produce identical checkpoints, and resuming from
//! a checkpoint matches an uninterrupted run exactly.

pub mod config;
pub mod data;
pub mod image;
pub mod labels;
pub mod losses;
pub mod manifest;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod real;
pub mod toyfaces;
