//! Toy-scale rectified-flow diffusion with controllable log-SNR sampling,
//! LoRA fine-tuning and a procedural style corpus.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod experiments;
pub mod generate;
pub mod lora;
pub mod net;
pub mod params;
pub mod samplers;
pub mod schedule;
pub mod stats;
pub mod styledata;
pub mod train;
