//! Compartmentalization-aware automated repair for compartment interface
//! vulnerabilities (CIVs).
//!
//! A compartmentalized application splits into mutually isolated
//! compartments; the data flowing across a cross-compartment interface is a
//! trust boundary. This crate finds CIVs on such an interface by seeded
//! payload fuzzing of a simulated target, classifies each finding by the
//! data type involved, picks a trusted-side patch location by analyzing the
//! roles of the functions on the crash stack, generates candidate guards
//! through pluggable backends, and validates patches in a feedback loop
//! that detects partial fixes.
//!
//! The pipeline stages are usable independently:
//!
//! - [`policy`] / [`report`] / [`mutation`] / [`source_index`]: parse the
//!   framework inputs (compartment policy + interface description,
//!   sanitizer reports, fuzzer mutation logs).
//! - [`scenario`] / [`exec`]: a desk-scale simulated target with a flat
//!   memory model and a deterministic executor.
//! - [`fuzzer`]: seeded interface fuzzing with replayable findings.
//! - [`classifier`]: the type-centric CIV taxonomy and its oracle guards.
//! - [`stack`]: crash-stack role assignment and patch-site selection.
//! - [`prompt`] / [`backend`] / [`patch`]: repair prompt construction and
//!   patch generation (rule-based mocks and a remote chat backend).
//! - [`validator`]: placement checks, partial-fix probing, and the repair
//!   loop.
//! - [`config`] / [`commands`]: the `civrepair` command-line pipeline.
//!
//! See the `examples/` directory for one runnable example per stage.


pub mod backend;
pub mod classifier;
pub mod commands;
pub mod config;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod fuzzer;
pub mod mutation;
pub mod patch;
pub mod policy;
pub mod prompt;
pub mod report;
pub mod scenario;
pub mod source_index;
pub mod stack;
pub mod validator;
pub mod value;

pub use error::{Error, Result};
