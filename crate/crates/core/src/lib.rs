//! Parameter-efficient hyperspectral transformer.
//!
//! A small reverse-mode autograd engine ([`tape`]) drives tensor-train attention
//! ([`attention`]), a low-rank factorized FFN ([`ffn`]), grouped spectral
//! embedding ([`group`]), masked-autoencoder pretraining ([`mae`]) and cloud
//! property retrieval ([`downstream`]). Everything is generic over `f32`/`f64`.

pub mod attention;
pub mod bench;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod downstream;
pub mod error;
pub mod ffn;
pub mod gradcheck;
pub mod group;
pub mod mae;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod tt;

pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
