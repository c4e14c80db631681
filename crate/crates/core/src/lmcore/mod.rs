//! Byte-level transformer with a mixture-of-experts feed-forward block.

pub mod config;
pub mod decode;
pub mod embed;
pub mod forward;
pub mod generate;
pub mod model;
pub mod moe;
pub mod tokenizer;
pub mod train;

pub use config::{GateNormalization, ModelConfig, RoutingConfig};
pub use decode::{Decoder, LogitSource};
pub use forward::{forward, logits, logits_and_traces, write_grads, Forward, RoutingTrace};
pub use generate::{generate, generate_from, sample_token, SamplingParams};
pub use model::{Ffn, MoeLayer, Transformer, PUBLIC_EXPERT};
pub use tokenizer::{decode, encode, BOS, EOS, PAD, VOCAB_SIZE};
pub use embed::{embed_document, mean_layer_embedding, DocEmbedding};
pub use train::{train, Batch, BatchSampler, TrainConfig, TrainLog};
