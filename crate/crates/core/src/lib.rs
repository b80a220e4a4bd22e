//! A self-contained laboratory for probing image-text binding in a small
//! vision-language transformer.
//!
//! The crate generates a synthetic two-object QA task ([`shapes`]), trains a
//! decoder-only transformer with rotary position embeddings on it ([`model`],
//! [`train`]), and provides residual-stream surgery for causal experiments:
//! activation splicing between contexts, position remapping of cached
//! activations, and mean difference-vector interventions ([`intervene`],
//! [`experiment`]).
//!
//! Everything here is pure computation over `alloc` collections; file formats,
//! threading, and the command-line front end live in the companion `shapelab`
//! crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod experiment;
pub mod intervene;
pub mod mathf;
pub mod model;
#[cfg(any(feature = "test-oracles", test))]
pub mod oracles;
pub mod rng;
pub mod shapes;
pub mod tensor;
pub mod train;
