pub mod cli;
pub mod embeddings;
pub mod interpreter;
pub mod model;
pub mod numerics;
pub mod protocol;
pub mod seeds;
pub mod training;
