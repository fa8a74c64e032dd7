//! Natural-language moment retrieval in video.
//!
//! Candidate moments are contiguous runs of fixed-length segments. A query is
//! localised by embedding each candidate's visual temporal context (local and
//! global mean-pooled frame features plus normalised endpoints) and the query
//! sentence into a shared space, then ranking candidates by squared distance.

pub mod config;
pub mod data;
pub mod eval;
pub mod exec;
pub mod features;
pub mod language;
pub mod model;
pub mod moments;
pub mod numerics;

pub use exec::Execution;
pub use moments::Span;
