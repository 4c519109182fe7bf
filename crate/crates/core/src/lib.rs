pub mod cli;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod nncore;
pub mod preprocess;
pub mod synth;
pub mod train;
