//! Shared layers: the lexicon encoder (word + segment + position embeddings)
//! and the bidirectional transformer stack on top of it.

mod input;
mod params;
mod transformer;
mod vocab;

pub use input::{pack_input, TokenizedInput};
pub use params::{EncoderConfig, EncoderParams, LayerParams, Linear, Norm};
pub use transformer::{
    cls_rows, cls_vector, embed, embed_batch, encode, encode_batch, BatchLayout, ContextualEmbeddings,
};
pub use vocab::{tokenize, Vocabulary, CLS_ID, PAD_ID, SEP_ID, UNK_ID};
