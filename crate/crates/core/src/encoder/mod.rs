//! Tokenization, input serialization with span masks, the trainable joint
//! encoder, and masked mean pooling.

mod net;
mod serialize;
mod vocab;

pub use net::{
    masked_mean_pool, masked_mean_pool_backward, EncoderCache, EncoderConfig, EncoderKind,
    EncoderParams, PositionalKind, RunMode, EPS_LN, EPS_POOL, FFN_MULT,
};
pub use serialize::{serialize_pair, serialize_single, SpanMasks, TokenSequence};
pub use vocab::{
    Vocabulary, BOS_ID, EOS_ID, N_RESERVED, PAD_ID, SEP_ID, SPECIAL_TOKENS, UNK_ID,
};

pub(crate) use net::trunc_normal;
