pub mod data;
pub mod graph;
pub mod pipeline;
pub mod prune;
pub mod seed;
pub mod stats;
pub mod tensor;
pub mod train;
