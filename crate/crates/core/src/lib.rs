//! Parameter-efficient fine-tuning of a small byte-level transformer for
//! Devanagari text classification.
//!
//! The crate covers the whole pipeline: an autodiff tape, a pre-norm
//! transformer classifier, LoRA adapters with merging, block-quantized
//! frozen weights, dataset handling for hate speech detection and target
//! identification, a seeded AdamW training loop and evaluation reports.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod quant;
pub mod run;
pub mod tokenizer;
pub mod train;

pub use checkpoint::{load_adapters, load_model, save_adapters, save_model};
pub use data::{Dataset, Example, Split, Task, TaskSchema};
pub use error::{Error, Result};
pub use eval::{ConfusionMatrix, EvalReport};
pub use lora::{inject_adapters, AdapterSpec, LoraAdapter};
pub use model::{ModelConfig, TransformerModel};
pub use numerics::{Tape, Tensor};
pub use quant::{Bits, QuantizedMatrix};
pub use run::{Quantization, RunConfig};
pub use tokenizer::ByteTokenizer;
pub use train::{train, TrainConfig, TrainHistory};
