//! Trainable components: a tape autodiff engine, the convolutional
//! autoencoder and projection, LoRA adapters, a tiny masked transformer,
//! optimizers, checkpoints, gradient checks and the masking ablation.

pub mod ablation;
pub mod autoencoder;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod lm;
pub mod lora;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autoencoder::{mse, train_autoencoder, AeConfig, AeTrainConfig, AutoEncoder, Projection};
pub use graph::{Graph, Var};
pub use lm::{attention_reach, masked_ce, LmExample, LoraConfig, LoraTarget, TinyLm, TinyLmConfig};
pub use lora::{lora_merge, lora_wrap, LoraAdapter};
pub use optim::{Adam, AdamConfig, LinearSchedule};
pub use params::ParamStore;
pub use tensor::Tensor;
pub use train::{eval_loss, train_lm, LmTrainConfig};
pub use ablation::{run_ablation, run_ablation_with, AblationConfig, AblationReport};
