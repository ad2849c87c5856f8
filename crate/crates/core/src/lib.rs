//! Fixed-size token memory for long token-stream videos.
//!
//! A long "video" (a stream of frame token blocks) is condensed in a single
//! pass into a per-video memory of exactly `m` tokens by a trained neural
//! sampler. A shared transformer encoder-decoder then answers relational
//! activity/object/time queries from that memory alone, without revisiting
//! the video. A clip-rescanning baseline sharing the same encoder-decoder
//! provides the efficiency comparison.
//!
//! Module map:
//! - [`types`]: tokens, intervals, queries, model configuration
//! - [`synth`]: synthetic planted-event video/query generator + dataset file
//! - [`embed`]: frozen backbone projection and positional encodings
//! - [`tape`]: reverse-mode autodiff over `f64` matrices
//! - [`nn`]: parameter store, linear/attention/transformer building blocks
//! - [`sampler`]: Gumbel top-m neural sampler with straight-through training
//! - [`membank`]: per-video memory slots, race-free scheduling, sync
//! - [`querynet`]: input assembly, encoder-decoder, prediction heads
//! - [`losses`]: focal / box / time losses and the continual-learning heap
//! - [`trainer`]: training loop with two learning-rate groups
//! - [`pipeline`]: two-stage inference, rescan baseline, metrics, benchmark
//! - [`cli`]: command-line front end (gen / train / populate / query / eval /
//!   bench / ablate)

pub mod cli;
pub mod embed;
pub mod error;
pub mod losses;
pub mod membank;
pub mod nn;
pub mod pipeline;
pub mod querynet;
pub mod sampler;
pub mod seeds;
pub mod synth;
pub mod tape;
pub mod trainer;
pub mod types;

pub use types::{ModelConfig, QueryKind, RestQuery, TimeInterval, TokenBlock};
