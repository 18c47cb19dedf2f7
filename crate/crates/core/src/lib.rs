//! Self-attention music tagger with attention heat maps and tag-wise
//! contribution maps.
//!
//! The crate is organised bottom-up: [`dsp`] turns audio into log-mel
//! windows, [`autodiff`] provides tensors and reverse-mode gradients,
//! [`model`] builds the CNN front-end plus attention encoder, [`training`]
//! synthesizes a tagged corpus and fits the model, [`introspection`]
//! produces heat maps and contribution maps, and [`cli`] binds everything
//! into reproducible command-line workflows.

pub mod autodiff;
pub mod cli;
pub mod dsp;
pub mod introspection;
pub mod model;
pub mod training;
