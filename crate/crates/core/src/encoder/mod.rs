//! Tokenizer, vocabulary and the self-attention context encoder.

mod model;
pub mod tokenizer;

pub use model::{
    encode, self_attention_block, self_attention_block_detailed, self_attention_head_pool, weighted_head_pool, BlockOutput,
    BlockParams, EncoderConfig, EncoderParams, LayerNorm, Linear, Rows, SharedProjections,
};
pub use tokenizer::{tokenize, Vocabulary};

use crate::error::{Error, Result};

/// `[CLS] context [SEP] aspect [SEP]` as ids. The context is truncated from
/// the right when the whole sequence would exceed `max_len`.
pub fn build_spc_input<S: AsRef<str>>(vocab: &Vocabulary, context: &[S], aspect: &[S], max_len: usize) -> Result<Vec<usize>> {
    if aspect.is_empty() {
        return Err(Error::EmptyAspect);
    }
    if aspect.len() + 3 > max_len {
        return Err(Error::TooLong {
            len: aspect.len() + 3,
            max: max_len,
        });
    }
    let room = max_len - aspect.len() - 3;
    let ctx = &context[..context.len().min(room)];
    let mut ids = Vec::with_capacity(ctx.len() + aspect.len() + 3);
    ids.push(Vocabulary::CLS_ID);
    ids.extend(vocab.ids(ctx));
    ids.push(Vocabulary::SEP_ID);
    ids.extend(vocab.ids(aspect));
    ids.push(Vocabulary::SEP_ID);
    Ok(ids)
}
