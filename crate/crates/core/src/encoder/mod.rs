//! BERT-style bidirectional encoder: word-level tokenizer with domain tokens,
//! post-norm transformer blocks and a tanh pooler over position 0.

mod config;
mod model;
mod vocab;

pub use config::{Activation, InitScheme, ModelConfig};
pub use model::{
    Attention, Block, Encoder, EncoderInput, EncoderOutput, EncoderWeights, FeedForward,
    LayerNorm, Linear, Mlp,
};
pub(crate) use model::{fresh_var, ParamSource, RandomInit, TensorMap};
pub use vocab::{
    domain_token, tokenize, words, TokenSequence, Vocabulary, CLS, CLS_ID, PAD, PAD_ID, SEP,
    SEP_ID, UNK, UNK_ID,
};
