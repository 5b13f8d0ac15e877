//! Body-graph masked attention: embodiment graphs and their attention masks,
//! dense and sparse masked attention kernels, body-graph encoders with per-node
//! tokenizers and detokenizers, a FLOP model, a benchmark harness, and a
//! small behavioral-cloning trainer.

pub mod attention;
pub mod bench;
pub mod flops;
pub mod graph;
pub mod encoder;
pub mod experiment;
pub mod nn;
pub mod records;
pub mod training;
