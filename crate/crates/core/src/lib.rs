pub mod attention;
pub mod blocks;
pub mod complexity;
pub mod conv;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod norm;
pub mod ops;
pub mod tensor;
