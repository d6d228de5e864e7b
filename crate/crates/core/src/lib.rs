//! Long-document clinical summarization toolkit.

pub mod attention;
pub mod datapipe;
pub mod evalkit;
pub mod models;
pub mod tensor;
pub mod tokenizer;
pub mod training;
