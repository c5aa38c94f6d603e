//! Byte-level toxicity classification with a learnable tokenizer.
//!
//! The crate builds up from a small reverse-mode autodiff engine ([`tensor`])
//! to a full classifier: UTF-8 byte encoding ([`bytes`]), gradient-based
//! subword tokenization ([`gbst`]), a reconfigurable transformer
//! encoder/decoder ([`transformer`]), regression heads and losses ([`heads`]),
//! span-corruption pretraining data ([`pretrain`]), text obfuscation and
//! code-switch filtering ([`obfuscate`], [`langid`]), and the evaluation
//! metrics ([`metrics`]) used to judge the result.

pub mod bytes;
pub mod checkpoint;
pub mod data;
pub mod heads;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod transformer;
pub mod elem;
pub mod gbst;
pub mod gradcheck;
pub mod langid;
pub mod metrics;
pub mod obfuscate;
pub mod tensor;
pub mod train;

pub use elem::Elem;
