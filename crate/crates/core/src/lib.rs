pub mod classifier;
pub mod engine;
pub mod finetune;
pub mod harness;
pub mod lm;
pub mod synth;
pub mod tensor;
pub mod text;
