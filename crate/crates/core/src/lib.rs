//! FFT-1DCNN compound-fault diagnosis for train transmissions: synthetic
//! multi-sensor recordings, frequency-domain preprocessing, per-fault
//! binary 1D CNNs and their evaluation.

pub mod diagnosis;
pub mod evaluate;
pub mod neuralnet;
pub mod pipeline;
pub mod signal;
pub mod synthdata;
pub mod workflow;
