//! Trimodal joint embeddings (audio, symbolic MIDI, text) for solo piano music.

pub mod audio;
pub mod contrastive;
pub mod corpus;
pub mod data;
pub mod encoders;
pub mod error;
pub mod midi;
pub mod retrieval;
pub mod synth;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
