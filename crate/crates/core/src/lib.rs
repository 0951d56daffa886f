pub mod config;
pub mod decoding;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod numerics;
pub mod synthetic;
pub mod training;
